#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lalign/common.hpp"
#include "lalign/config.hpp"
#include "lalign/lm.hpp"
#include "lalign/optim.hpp"
#include "lalign/rng.hpp"
#include "lalign/tape.hpp"

namespace lalign {

inline constexpr double kLogVarClamp = 10.0;
inline constexpr double kLog2Pi = 1.8378770664093453;

// Diagonal Gaussian over the latent space.
template <typename T>
struct LatentGaussian {
    Tensor<T> mean;     // [d_z]
    Tensor<T> log_var;  // [d_z], clamped to [-10, 10]

    static LatentGaussian prior(int d_z) {
        LatentGaussian g;
        g.mean = Tensor<T>({d_z});
        g.log_var = Tensor<T>({d_z});
        return g;
    }

    int d() const { return static_cast<int>(mean.numel()); }

    void validate() const {
        if (!mean.same_shape(log_var))
            throw InputError("latent gaussian: mean/log_var shape mismatch");
        if (!mean.all_finite() || !log_var.all_finite())
            throw InputError("latent gaussian: non-finite parameters");
        for (T v : log_var.data)
            if (v < T(-kLogVarClamp) || v > T(kLogVarClamp))
                throw InputError("latent gaussian: log_var outside clamp bounds");
    }
};

struct GaussianNodes {
    int mean = -1;
    int log_var = -1;
};

// ---- Gaussian primitives (no-grad and tape versions) ----

template <typename T>
double gaussian_log_density(const LatentGaussian<T>& g, const Tensor<T>& z) {
    if (z.numel() != g.mean.numel())
        throw InputError("gaussian_log_density: dimension mismatch");
    double quad = 0, sum_lv = 0;
    for (int64_t i = 0; i < z.numel(); ++i) {
        double d = static_cast<double>(z.at(i)) - static_cast<double>(g.mean.at(i));
        double lv = static_cast<double>(g.log_var.at(i));
        quad += d * d * std::exp(-lv);
        sum_lv += lv;
    }
    return -0.5 * (quad + sum_lv + static_cast<double>(z.numel()) * kLog2Pi);
}

template <typename T>
int gaussian_log_density_node(Tape<T>& tape, const GaussianNodes& g, int z) {
    int64_t d = tape.value(z).numel();
    int diff = tape.sub(z, g.mean);
    int quad = tape.sum_all(tape.mul(tape.square(diff), tape.exp_(tape.scale(g.log_var, T(-1)))));
    int sum_lv = tape.sum_all(g.log_var);
    return tape.affine_scalars({quad, sum_lv}, {T(-0.5), T(-0.5)},
                               static_cast<T>(-0.5 * static_cast<double>(d) * kLog2Pi));
}

template <typename T>
Tensor<T> reparam_sample(const LatentGaussian<T>& g, Rng& rng) {
    Tensor<T> z(g.mean.shape);
    for (int64_t i = 0; i < z.numel(); ++i)
        z.at(i) = g.mean.at(i) +
                  std::exp(g.log_var.at(i) / T(2)) * static_cast<T>(rng.normal());
    return z;
}

// z = mean + exp(log_var / 2) * eps, differentiable in mean and log_var
template <typename T>
int reparam_sample_node(Tape<T>& tape, const GaussianNodes& g, const Tensor<T>& eps) {
    int e = tape.constant(eps);
    int sd = tape.exp_(tape.scale(g.log_var, T(0.5)));
    return tape.add(g.mean, tape.mul(sd, e));
}

// Closed-form KL(N(mean, var) || N(0, I)) for a diagonal Gaussian.
template <typename T>
double gaussian_kl_to_prior(const LatentGaussian<T>& g) {
    double kl = 0;
    for (int64_t i = 0; i < g.mean.numel(); ++i) {
        double mu = static_cast<double>(g.mean.at(i));
        double lv = static_cast<double>(g.log_var.at(i));
        kl += mu * mu + std::exp(lv) - 1.0 - lv;
    }
    return 0.5 * kl;
}

template <typename T>
int gaussian_kl_to_prior_node(Tape<T>& tape, const GaussianNodes& g) {
    int mu2 = tape.sum_all(tape.square(g.mean));
    int var = tape.sum_all(tape.exp_(g.log_var));
    int lv = tape.sum_all(g.log_var);
    int64_t d = tape.value(g.mean).numel();
    return tape.affine_scalars({mu2, var, lv}, {T(0.5), T(0.5), T(-0.5)},
                               static_cast<T>(-0.5 * static_cast<double>(d)));
}

// ---- posterior / personalized latent encoder ----

// Token embedding plus the first two LM transformer layers (copied from the
// SFT model), a deterministic pooling head (response-token mean concatenated
// with the final prompt state), and a linear projection to (mean, log_var).
// The same architecture consumes prompt-only input for the personalized
// encoder, in which case the response pool is a zero vector.
template <typename T>
class PosteriorEncoder {
public:
    static constexpr int kLayers = 2;

    ModelConfig lm_cfg;
    int d_z = 0;
    ParamStore<T> store;
    TransformerStack<T> stack;

    PosteriorEncoder(const ModelConfig& cfg, int dz) : lm_cfg(cfg), d_z(dz) {
        int layers = std::min(kLayers, cfg.n_layers);
        stack.configure(cfg, layers, &store, GradScope::encoder);
        stack.register_params();
        store.add("pool.w", {2 * cfg.d_model, 2 * dz}, GradScope::encoder);
        store.add("pool.b", {2 * dz}, GradScope::encoder);
        // zero projection: the encoder starts exactly at the prior
    }

    PosteriorEncoder(const PosteriorEncoder& o) : PosteriorEncoder(o.lm_cfg, o.d_z) {
        copy_values_from(o);
    }
    PosteriorEncoder& operator=(const PosteriorEncoder&) = delete;
    PosteriorEncoder(PosteriorEncoder&& o) noexcept
        : lm_cfg(o.lm_cfg), d_z(o.d_z), store(std::move(o.store)), stack(o.stack) {
        stack.store = &store;
    }

    void copy_values_from(const PosteriorEncoder& o) {
        for (auto& [name, p] : store.all()) p->value = o.store.get(name).value;
    }

    // copy embeddings and the first layers from a trained LM
    void init_from_lm(const TransformerLM<T>& lm) {
        for (auto& [name, p] : store.all()) {
            if (name.rfind("pool.", 0) == 0) continue;
            p->value = lm.store.get(name).value;
        }
    }

    void zero_output_layer() {
        store.get("pool.w").value.zero();
        store.get("pool.b").value.zero();
    }

    // Differentiable encoding; y may be empty (prompt-only / personalized use).
    GaussianNodes encode_node(Tape<T>& tape, BoundParams<T>& bind, const Tokens& x,
                              const Tokens& y, int64_t* clamped = nullptr) {
        if (x.empty()) throw InputError("encoder: prompt must be non-empty");
        Tokens ids(x);
        ids.insert(ids.end(), y.begin(), y.end());
        int h = stack.hidden_tape(tape, bind, ids, nullptr, true);
        int64_t tx = static_cast<int64_t>(x.size());
        int64_t total = static_cast<int64_t>(ids.size());
        int resp_pool = tape.mean_rows(h, tx, total);
        int prompt_state = tape.select_row(h, tx - 1);
        int feat = tape.concat_vec(resp_pool, prompt_state);
        int out = tape.add(tape.reshape(tape.matmul(tape.reshape(feat, {1, 2 * lm_cfg.d_model}),
                                                    bind.node(store.get("pool.w"))),
                                        {2 * d_z}),
                           bind.node(store.get("pool.b")));
        GaussianNodes g;
        g.mean = tape.slice_vec(out, 0, d_z);
        int64_t hits = 0;
        g.log_var = tape.clamp(tape.slice_vec(out, d_z, 2 * d_z), T(-kLogVarClamp),
                               T(kLogVarClamp), &hits);
        if (clamped) *clamped += hits;
        return g;
    }

    // No-grad encoding on the plain forward path.
    LatentGaussian<T> encode(const Tokens& x, const Tokens& y,
                             int64_t* clamped = nullptr) const {
        if (x.empty()) throw InputError("encoder: prompt must be non-empty");
        Tokens ids(x);
        ids.insert(ids.end(), y.begin(), y.end());
        KvCache<T> cache;
        stack.seed_cache(cache, nullptr);
        Tensor<T> h = const_cast<TransformerStack<T>&>(stack).hidden_plain(ids, cache, true);
        int64_t tx = static_cast<int64_t>(x.size());
        int64_t total = static_cast<int64_t>(ids.size());
        int64_t d = lm_cfg.d_model;
        std::vector<T> feat(static_cast<size_t>(2 * d), T(0));
        if (total > tx) {
            for (int64_t i = tx; i < total; ++i)
                for (int64_t j = 0; j < d; ++j) feat[static_cast<size_t>(j)] += h.at(i, j);
            for (int64_t j = 0; j < d; ++j)
                feat[static_cast<size_t>(j)] /= static_cast<T>(total - tx);
        }
        for (int64_t j = 0; j < d; ++j) feat[static_cast<size_t>(d + j)] = h.at(tx - 1, j);
        const auto& w = store.get("pool.w").value;
        const auto& b = store.get("pool.b").value;
        std::vector<T> out(static_cast<size_t>(2 * d_z), T(0));
        kernels::matmul_accum(out.data(), feat.data(), w.data.data(), 1, 2 * d, 2 * d_z);
        LatentGaussian<T> g;
        g.mean = Tensor<T>({d_z});
        g.log_var = Tensor<T>({d_z});
        int64_t hits = 0;
        for (int i = 0; i < d_z; ++i) {
            g.mean.at(i) = out[static_cast<size_t>(i)] + b.at(i);
            T lv = out[static_cast<size_t>(d_z + i)] + b.at(d_z + i);
            if (lv < T(-kLogVarClamp)) { lv = T(-kLogVarClamp); ++hits; }
            if (lv > T(kLogVarClamp)) { lv = T(kLogVarClamp); ++hits; }
            g.log_var.at(i) = lv;
        }
        if (clamped) *clamped += hits;
        return g;
    }

    template <typename U>
    PosteriorEncoder<U> cast() const {
        PosteriorEncoder<U> out(lm_cfg, d_z);
        for (const auto& [name, p] : store.all())
            out.store.get(name).value = p->value.template cast<U>();
        return out;
    }
};

// ---- latent adapter ----

// Feed-forward map from a latent vector to per-layer attention key/value
// prefixes. Each prefix slot has its own rows of the output projection, so
// slot contents are independently learned functions of z. The output layer is
// zero-initialized: at the start the prefix is all zeros.
template <typename T>
class LatentAdapter {
public:
    ModelConfig lm_cfg;
    int d_z = 0, hidden = 0;
    ParamStore<T> store;

    LatentAdapter(const ModelConfig& cfg, int dz, int hidden_dim)
        : lm_cfg(cfg), d_z(dz), hidden(hidden_dim) {
        int64_t out = out_dim();
        store.add("w1", {dz, hidden}, GradScope::adapter);
        store.add("b1", {hidden}, GradScope::adapter);
        store.add("w2", {hidden, out}, GradScope::adapter);
        store.add("b2", {out}, GradScope::adapter);
        Rng rng(cfg.seed ^ 0xada77e5ULL);
        for (auto& v : store.get("w1").value.data) v = static_cast<T>(rng.normal() * 0.3);
        // w2/b2 stay zero
    }

    LatentAdapter(const LatentAdapter& o) : LatentAdapter(o.lm_cfg, o.d_z, o.hidden) {
        for (auto& [name, p] : store.all()) p->value = o.store.get(name).value;
    }
    LatentAdapter& operator=(const LatentAdapter&) = delete;
    LatentAdapter(LatentAdapter&&) noexcept = default;

    int64_t out_dim() const {
        return static_cast<int64_t>(lm_cfg.n_layers) * 2 * lm_cfg.prefix_len * lm_cfg.d_model;
    }

    PrefixNodes apply_node(Tape<T>& tape, BoundParams<T>& bind, int z) {
        int h = tape.tanh_(tape.add(
            tape.reshape(tape.matmul(tape.reshape(z, {1, d_z}), bind.node(store.get("w1"))),
                         {hidden}),
            bind.node(store.get("b1"))));
        int flat = tape.add(
            tape.reshape(tape.matmul(tape.reshape(h, {1, hidden}), bind.node(store.get("w2"))),
                         {out_dim()}),
            bind.node(store.get("b2")));
        PrefixNodes out;
        int64_t chunk = static_cast<int64_t>(lm_cfg.prefix_len) * lm_cfg.d_model;
        for (int l = 0; l < lm_cfg.n_layers; ++l) {
            int64_t base = static_cast<int64_t>(l) * 2 * chunk;
            int k = tape.reshape(tape.slice_vec(flat, base, base + chunk),
                                 {lm_cfg.prefix_len, lm_cfg.d_model});
            int v = tape.reshape(tape.slice_vec(flat, base + chunk, base + 2 * chunk),
                                 {lm_cfg.prefix_len, lm_cfg.d_model});
            out.kv.emplace_back(k, v);
        }
        return out;
    }

    // Pure function of z: identical inputs produce bit-identical prefixes.
    PrefixKV<T> apply(const Tensor<T>& z) const {
        if (z.numel() != d_z) throw InputError("adapter: latent dimension mismatch");
        std::vector<T> h(static_cast<size_t>(hidden), T(0));
        kernels::matmul_accum(h.data(), z.data.data(), store.get("w1").value.data.data(), 1, d_z,
                              hidden);
        const auto& b1 = store.get("b1").value;
        for (int i = 0; i < hidden; ++i)
            h[static_cast<size_t>(i)] = std::tanh(h[static_cast<size_t>(i)] + b1.at(i));
        std::vector<T> flat(static_cast<size_t>(out_dim()), T(0));
        kernels::matmul_accum(flat.data(), h.data(), store.get("w2").value.data.data(), 1, hidden,
                              out_dim());
        const auto& b2 = store.get("b2").value;
        for (int64_t i = 0; i < out_dim(); ++i) flat[static_cast<size_t>(i)] += b2.at(i);
        PrefixKV<T> out;
        int64_t chunk = static_cast<int64_t>(lm_cfg.prefix_len) * lm_cfg.d_model;
        for (int l = 0; l < lm_cfg.n_layers; ++l) {
            int64_t base = static_cast<int64_t>(l) * 2 * chunk;
            Tensor<T> k({lm_cfg.prefix_len, lm_cfg.d_model});
            Tensor<T> v({lm_cfg.prefix_len, lm_cfg.d_model});
            std::copy(flat.begin() + base, flat.begin() + base + chunk, k.data.begin());
            std::copy(flat.begin() + base + chunk, flat.begin() + base + 2 * chunk,
                      v.data.begin());
            out.keys.push_back(std::move(k));
            out.values.push_back(std::move(v));
        }
        return out;
    }

    template <typename U>
    LatentAdapter<U> cast() const {
        LatentAdapter<U> out(lm_cfg, d_z, hidden);
        for (const auto& [name, p] : store.all())
            out.store.get(name).value = p->value.template cast<U>();
        return out;
    }
};

// ---- CLaP loss terms ----

// Monte-Carlo estimate of KL(mixture of components || prior) from one
// reparameterized draw per component: mean_k [log((1/K) sum_j q_j(z_k)) -
// log p(z_k)].
template <typename T>
int dg_kld_from_draws(Tape<T>& tape, const std::vector<GaussianNodes>& comps,
                      const std::vector<int>& draws, const GaussianNodes& prior) {
    int K = static_cast<int>(comps.size());
    std::vector<int> terms;
    for (int k = 0; k < K; ++k) {
        std::vector<int> log_qs;
        for (int j = 0; j < K; ++j)
            log_qs.push_back(gaussian_log_density_node(tape, comps[static_cast<size_t>(j)],
                                                       draws[static_cast<size_t>(k)]));
        int log_mix = tape.add_scalar(tape.logsumexp_scalars(log_qs),
                                      static_cast<T>(-std::log(static_cast<double>(K))));
        int log_p = gaussian_log_density_node(tape, prior, draws[static_cast<size_t>(k)]);
        terms.push_back(tape.affine_scalars({log_mix, log_p}, {T(1), T(-1)}, T(0)));
    }
    std::vector<T> coeffs(terms.size(), T(1) / static_cast<T>(K));
    return tape.affine_scalars(terms, coeffs, T(0));
}

// Standalone MC estimator with `samples_per_component` fresh reparameterized
// draws per component (module operation; the training loss reuses the
// reconstruction draws instead).
template <typename T>
double dg_kld(const std::vector<LatentGaussian<T>>& posteriors, const LatentGaussian<T>& prior,
              int samples_per_component, Rng& rng) {
    if (posteriors.empty()) throw InputError("dg_kld: need at least one posterior");
    int K = static_cast<int>(posteriors.size());
    double acc = 0;
    int64_t n = 0;
    for (int s = 0; s < samples_per_component; ++s) {
        for (int k = 0; k < K; ++k) {
            Tensor<T> z = reparam_sample(posteriors[static_cast<size_t>(k)], rng);
            double max_lq = -std::numeric_limits<double>::infinity();
            std::vector<double> lqs(static_cast<size_t>(K));
            for (int j = 0; j < K; ++j) {
                lqs[static_cast<size_t>(j)] =
                    gaussian_log_density(posteriors[static_cast<size_t>(j)], z);
                max_lq = std::max(max_lq, lqs[static_cast<size_t>(j)]);
            }
            double mix = 0;
            for (double lq : lqs) mix += std::exp(lq - max_lq);
            double log_mix = max_lq + std::log(mix / K);
            acc += log_mix - gaussian_log_density(prior, z);
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

// (1/K) sum_k log[ p(y_k|x,z_k) / sum_j p(y_k|x,z_j) ] from a K x K grid of
// response log-likelihood nodes (loglik[k][j] = log p(y_k | x, z_j)).
// Always <= 0; equals -log K when every z_j yields identical likelihoods.
template <typename T>
int contrastive_from_grid(Tape<T>& tape, const std::vector<std::vector<int>>& loglik) {
    int K = static_cast<int>(loglik.size());
    std::vector<int> terms;
    for (int k = 0; k < K; ++k) {
        int denom = tape.logsumexp_scalars(loglik[static_cast<size_t>(k)]);
        terms.push_back(tape.affine_scalars(
            {loglik[static_cast<size_t>(k)][static_cast<size_t>(k)], denom}, {T(1), T(-1)},
            T(0)));
    }
    std::vector<T> coeffs(terms.size(), T(1) / static_cast<T>(K));
    return tape.affine_scalars(terms, coeffs, T(0));
}

}  // namespace lalign
