#pragma once

#include <chrono>
#include <cmath>
#include <numeric>
#include <vector>

#include "lalign/clap.hpp"
#include "lalign/common.hpp"
#include "lalign/config.hpp"
#include "lalign/task.hpp"
#include "lalign/vae.hpp"

namespace lalign {

// (x, z_w, z_l) with strictly ordered proxy rewards.
template <typename T>
struct LatentPair {
    Tokens x;
    Tensor<T> z_w, z_l;
    double proxy_w = 0, proxy_l = 0;

    void validate() const {
        if (!(proxy_w > proxy_l))
            throw InputError("latent pair: proxy_w must be strictly greater than proxy_l");
    }
};

// log q(z|x,y_w) - log q(z|x,y_l): ranking-equivalent surrogate for the
// latent reward on a preference pair.
template <typename T>
double latent_reward_proxy(const LatentGaussian<T>& q_w, const LatentGaussian<T>& q_l,
                           const Tensor<T>& z) {
    return gaussian_log_density(q_w, z) - gaussian_log_density(q_l, z);
}

// Importance-reweighted latent reward over K offline responses:
//   r(x,z) ~= sum_k w_k r_k / sum_k w_k,  w_k = q_k(z) / p(z|x),
// evaluated in log-space with max-subtraction. The prior factor is common to
// all weights, so it cancels; it is still accepted (and validated) to keep
// the call shape aligned with the estimator's definition.
template <typename T>
double importance_reweighted_reward(
    const std::vector<std::pair<LatentGaussian<T>, double>>& posteriors,
    const LatentGaussian<T>& prior, const Tensor<T>& z, int K) {
    if (K < 1) throw InputError("importance_reweighted_reward: K must be >= 1");
    if (static_cast<size_t>(K) > posteriors.size())
        throw InputError("importance_reweighted_reward: K exceeds posterior count");
    if (!z.all_finite()) throw InputError("importance_reweighted_reward: non-finite z");
    double log_prior = gaussian_log_density(prior, z);
    std::vector<double> log_w(static_cast<size_t>(K));
    std::vector<double> rewards(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        const auto& [g, r] = posteriors[static_cast<size_t>(k)];
        if (std::isnan(r)) throw InputError("importance_reweighted_reward: NaN reward");
        log_w[static_cast<size_t>(k)] = gaussian_log_density(g, z) - log_prior;
        rewards[static_cast<size_t>(k)] = r;
    }
    // max-subtraction: the largest weight becomes exactly 1, so the
    // denominator can never underflow to 0
    double maxw = *std::max_element(log_w.begin(), log_w.end());
    double num = 0, den = 0;
    for (int k = 0; k < K; ++k) {
        double w = std::exp(log_w[static_cast<size_t>(k)] - maxw);
        num += w * rewards[static_cast<size_t>(k)];
        den += w;
    }
    return num / den;
}

// Pairing core: rank latents by proxy and emit strictly ordered pairs.
// top_bottom pairs rank i with rank n-1-i (widest margins first); all_pairs
// emits every strictly ordered pair. Exact proxy ties are dropped.
template <typename T>
std::vector<LatentPair<T>> pair_by_proxy(const Tokens& x, const std::vector<Tensor<T>>& zs,
                                         const std::vector<double>& proxy,
                                         PairingStrategy pairing) {
    size_t n = zs.size();
    if (proxy.size() != n) throw InputError("pair_by_proxy: proxy/latent count mismatch");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return proxy[a] > proxy[b]; });

    std::vector<LatentPair<T>> out;
    auto emit = [&](size_t wi, size_t li) {
        if (!(proxy[wi] > proxy[li])) return;  // ties dropped
        LatentPair<T> p;
        p.x = x;
        p.z_w = zs[wi];
        p.z_l = zs[li];
        p.proxy_w = proxy[wi];
        p.proxy_l = proxy[li];
        out.push_back(std::move(p));
    };
    if (pairing == PairingStrategy::top_bottom) {
        for (size_t i = 0; 2 * i + 1 < n; ++i) emit(order[i], order[n - 1 - i]);
    } else {
        for (size_t i = 0; i < n; ++i)
            for (size_t j = i + 1; j < n; ++j) emit(order[i], order[j]);
    }
    return out;
}

// Algorithm step: sample N latents from the prior, rank them by the density-
// ratio proxy, and pair them per the configured strategy. All-tied proxies
// (e.g. identical posteriors) produce zero pairs.
template <typename T>
std::vector<LatentPair<T>> compose_latent_pairs(const PreferencePair& pref,
                                                const PosteriorEncoder<T>& encoder_q, int n,
                                                PairingStrategy pairing, Rng& rng,
                                                bool* degenerate = nullptr) {
    if (n < 2) throw InputError("compose_latent_pairs: need at least 2 latent samples");
    LatentGaussian<T> q_w = encoder_q.encode(pref.x, pref.y_w);
    LatentGaussian<T> q_l = encoder_q.encode(pref.x, pref.y_l);
    auto prior = LatentGaussian<T>::prior(encoder_q.d_z);

    std::vector<Tensor<T>> zs;
    std::vector<double> proxy;
    for (int i = 0; i < n; ++i) {
        zs.push_back(reparam_sample(prior, rng));
        proxy.push_back(latent_reward_proxy(q_w, q_l, zs.back()));
    }
    auto out = pair_by_proxy(pref.x, zs, proxy, pairing);
    if (degenerate) *degenerate = out.empty();
    return out;
}

// DPO over latent Gaussians: mean over pairs of
//   -log sigma(beta * [(log p_theta(z_w|x) - log p(z_w|x))
//                      - (log p_theta(z_l|x) - log p(z_l|x))])
// with the fixed prior N(0, I) as the reference distribution.
template <typename T>
int latent_dpo_loss_node(Tape<T>& tape, BoundParams<T>& bind, PosteriorEncoder<T>& p_theta,
                         const std::vector<LatentPair<T>>& pairs, double beta) {
    if (pairs.empty()) throw InputError("latent_dpo_loss: empty pair batch");
    auto prior = LatentGaussian<T>::prior(p_theta.d_z);
    std::vector<int> losses;
    // pairs sharing a prompt share one encoder forward
    int cached_theta_mean = -1, cached_theta_lv = -1;
    const Tokens* cached_x = nullptr;
    for (const auto& pr : pairs) {
        pr.validate();
        if (!cached_x || !(*cached_x == pr.x)) {
            GaussianNodes g = p_theta.encode_node(tape, bind, pr.x, {});
            cached_theta_mean = g.mean;
            cached_theta_lv = g.log_var;
            cached_x = &pr.x;
        }
        GaussianNodes theta{cached_theta_mean, cached_theta_lv};
        int zw = tape.constant(pr.z_w);
        int zl = tape.constant(pr.z_l);
        int lw = gaussian_log_density_node(tape, theta, zw);
        int ll = gaussian_log_density_node(tape, theta, zl);
        double ref_w = gaussian_log_density(prior, pr.z_w);
        double ref_l = gaussian_log_density(prior, pr.z_l);
        // margin = (lw - ref_w) - (ll - ref_l); reference terms are constants
        int margin = tape.affine_scalars({lw, ll}, {T(1), T(-1)},
                                         static_cast<T>(-(ref_w - ref_l)));
        losses.push_back(tape.softplus(tape.scale(margin, static_cast<T>(-beta))));
    }
    std::vector<T> coeffs(losses.size(), T(1) / static_cast<T>(losses.size()));
    return tape.affine_scalars(losses, coeffs, T(0));
}

// Convenience scalar version (used by fixed-point tests and the CLI report).
template <typename T>
double latent_dpo_loss_value(PosteriorEncoder<T>& p_theta,
                             const std::vector<LatentPair<T>>& pairs, double beta) {
    Tape<T> tape;
    BoundParams<T> bind(tape);
    int loss = latent_dpo_loss_node(tape, bind, p_theta, pairs, beta);
    return static_cast<double>(tape.value(loss).at(0));
}

struct TrainCostReport {
    int steps = 0;
    int pairs_total = 0;
    int pairs_skipped = 0;
    double wall_seconds = 0;
    double per_step_ms = 0;
    uint64_t grad_flops = 0;        // matmul flops spent while training
    uint64_t lm_grad_events = 0;    // gradient flushes into LM parameters
    uint64_t lm_forward_passes = 0;
    std::vector<double> losses;
};

// Latent DPO (Algorithm "latent preference optimization"): one epoch over the
// preference data, touching only the personalized encoder. No LM forward or
// backward pass happens here; the instrumentation in the report proves it.
template <typename T>
PosteriorEncoder<T> latent_dpo_train(const ClapBundle<T>& bundle,
                                     const std::vector<PreferencePair>& dataset,
                                     const LatentDpoConfig& cfg, TrainCostReport* report = nullptr) {
    cfg.validate();
    // init: copy q's parameters, then zero the output layer so that
    // p_theta(z|x) = N(0, I) for every x before the first update
    PosteriorEncoder<T> p_theta(bundle.encoder);
    p_theta.zero_output_layer();
    if (dataset.empty()) {
        if (report) *report = TrainCostReport{};
        return p_theta;
    }

    Adam<T> opt(cfg.lr);
    for (auto& [n, p] : p_theta.store.all()) opt.add(*p);

    TrainCostReport local;
    TrainCostReport& rep = report ? *report : local;
    uint64_t flops0 = perf().matmul_flops;
    uint64_t lmg0 = perf().lm_param_grad_events;
    uint64_t lmf0 = perf().lm_forward_passes;
    auto t0 = std::chrono::steady_clock::now();

    Rng rng(cfg.seed);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& pref : dataset) {
            bool degenerate = false;
            auto pairs = compose_latent_pairs(pref, bundle.encoder, cfg.latent_samples,
                                              cfg.pairing, rng, &degenerate);
            rep.pairs_total += static_cast<int>(pairs.size());
            if (pairs.empty()) {
                rep.pairs_skipped++;
                continue;
            }
            Tape<T> tape;
            BoundParams<T> bind(tape);
            int loss = latent_dpo_loss_node(tape, bind, p_theta, pairs, cfg.beta);
            double lv = static_cast<double>(tape.value(loss).at(0));
            if (!std::isfinite(lv))
                throw DivergenceError("latent_dpo_train: non-finite loss at step " +
                                      std::to_string(rep.steps));
            opt.zero_grad();
            tape.backward(loss);
            tape.flush_param_grads();
            opt.step();
            rep.losses.push_back(lv);
            rep.steps++;
        }
    }
    auto t1 = std::chrono::steady_clock::now();
    rep.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    rep.per_step_ms = rep.steps ? rep.wall_seconds * 1000.0 / rep.steps : 0.0;
    rep.grad_flops = perf().matmul_flops - flops0;
    rep.lm_grad_events = perf().lm_param_grad_events - lmg0;
    rep.lm_forward_passes = perf().lm_forward_passes - lmf0;
    return p_theta;
}

// Sequence-level DPO over all LM parameters (reference = frozen SFT copy).
// Kept for the efficiency comparison; it shares the instrumentation code
// path with latent_dpo_train so ratios are apples-to-apples.
template <typename T>
TransformerLM<T> full_dpo_baseline(const TransformerLM<T>& sft,
                                   const std::vector<PreferencePair>& dataset,
                                   const BaselineConfig& cfg, TrainCostReport* report = nullptr) {
    TransformerLM<T> policy(sft);
    const TransformerLM<T>& ref = sft;
    Adam<T> opt(cfg.lr);
    for (auto& [n, p] : policy.store.all()) opt.add(*p);

    TrainCostReport local;
    TrainCostReport& rep = report ? *report : local;
    uint64_t flops0 = perf().matmul_flops;
    uint64_t lmg0 = perf().lm_param_grad_events;
    uint64_t lmf0 = perf().lm_forward_passes;
    auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& pref : dataset) {
            pref.validate();
            Tape<T> tape;
            BoundParams<T> bind(tape);
            int nll_w = policy.nll_node(tape, bind, pref.x, pref.y_w);
            int nll_l = policy.nll_node(tape, bind, pref.x, pref.y_l);
            int lp_w = tape.scale(tape.sum_all(nll_w), T(-1));
            int lp_l = tape.scale(tape.sum_all(nll_l), T(-1));
            double ref_w = ref.sum_log_prob(pref.x, pref.y_w);
            double ref_l = ref.sum_log_prob(pref.x, pref.y_l);
            int margin = tape.affine_scalars({lp_w, lp_l}, {T(1), T(-1)},
                                             static_cast<T>(-(ref_w - ref_l)));
            int loss = tape.softplus(tape.scale(margin, static_cast<T>(-cfg.beta)));
            double lv = static_cast<double>(tape.value(loss).at(0));
            if (!std::isfinite(lv))
                throw DivergenceError("full_dpo_baseline: non-finite loss at step " +
                                      std::to_string(rep.steps));
            opt.zero_grad();
            tape.backward(loss);
            tape.flush_param_grads();
            opt.step();
            rep.losses.push_back(lv);
            rep.steps++;
            rep.pairs_total++;
        }
    }
    auto t1 = std::chrono::steady_clock::now();
    rep.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    rep.per_step_ms = rep.steps ? rep.wall_seconds * 1000.0 / rep.steps : 0.0;
    rep.grad_flops = perf().matmul_flops - flops0;
    rep.lm_grad_events = perf().lm_param_grad_events - lmg0;
    rep.lm_forward_passes = perf().lm_forward_passes - lmf0;
    return policy;
}

// Personalized generation: z ~ p_theta(z|x), prefix = adapter(z), then sample.
template <typename T>
Tokens personalized_generate(const ClapBundle<T>& bundle, const PosteriorEncoder<T>& p_theta,
                             const Tokens& x, double temperature, int max_new, Rng& rng) {
    LatentGaussian<T> g = p_theta.encode(x, {});
    Tensor<T> z = reparam_sample(g, rng);
    PrefixKV<T> prefix = bundle.adapter.apply(z);
    return bundle.lm.sample(x, &prefix, temperature, max_new, rng);
}

}  // namespace lalign
