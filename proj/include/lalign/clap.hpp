#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lalign/lm.hpp"
#include "lalign/task.hpp"
#include "lalign/vae.hpp"

namespace lalign {

// Everything produced by CLaP pretraining, plus the content hash of the SFT
// weights it started from (stored into the checkpoint for provenance).
template <typename T>
struct ClapBundle {
    TransformerLM<T> lm;
    PosteriorEncoder<T> encoder;
    LatentAdapter<T> adapter;
    uint64_t sft_hash = 0;

    ClapBundle(TransformerLM<T> l, PosteriorEncoder<T> e, LatentAdapter<T> a, uint64_t h)
        : lm(std::move(l)), encoder(std::move(e)), adapter(std::move(a)), sft_hash(h) {}
};

struct ClapStepLog {
    int step = 0;
    int epoch = 0;
    double reconstruction = 0;
    double kld = 0;
    double contrastive = 0;
    double objective = 0;
};

struct ClapReport {
    std::vector<ClapStepLog> steps;
    std::vector<double> epoch_contrastive;  // per-epoch mean of the contrastive term
    double sft_perplexity = 0;              // on held-out data
    double clap_perplexity = 0;             // conditional, prior-sampled z
    bool perplexity_within_budget = true;
    int64_t log_var_clamp_hits = 0;
};

// Sample the offline response cache: n responses per prompt from the model.
template <typename T>
std::vector<std::vector<Tokens>> sample_response_cache(const TransformerLM<T>& lm,
                                                       const std::vector<Tokens>& prompts, int n,
                                                       double temperature, int max_new,
                                                       uint64_t seed) {
    std::vector<std::vector<Tokens>> out;
    out.reserve(prompts.size());
    Rng root(seed);
    for (size_t pi = 0; pi < prompts.size(); ++pi) {
        Rng rng = root.fork(pi);
        std::vector<Tokens> rs;
        rs.reserve(static_cast<size_t>(n));
        for (int r = 0; r < n; ++r)
            rs.push_back(lm.sample(prompts[pi], nullptr, temperature, max_new, rng));
        out.push_back(std::move(rs));
    }
    return out;
}

// log p(y | x, adapter(z)): single-sample Monte-Carlo estimate of the
// reconstruction expectation. With a zero-output adapter this reduces to the
// plain LM log-likelihood.
template <typename T>
int reconstruction_term_node(Tape<T>& tape, BoundParams<T>& bind, TransformerLM<T>& lm,
                             LatentAdapter<T>& adapter, const Tokens& x, const Tokens& y,
                             int z_node) {
    PrefixNodes prefix = adapter.apply_node(tape, bind, z_node);
    int nll = lm.nll_node(tape, bind, x, y, &prefix);
    return tape.scale(tape.sum_all(nll), T(-1));
}

template <typename T>
double reconstruction_term(const TransformerLM<T>& lm, const LatentAdapter<T>& adapter,
                           const Tokens& x, const Tokens& y, const Tensor<T>& z) {
    if (!z.all_finite()) throw InputError("reconstruction_term: non-finite z");
    PrefixKV<T> prefix = adapter.apply(z);
    return lm.sum_log_prob(x, y, &prefix);
}

template <typename T>
struct ClapLossNodes {
    int reconstruction = -1;  // (1/K) sum_k log p(y_k | x, z_k)
    int kld = -1;             // DG-KLD or mean per-sample KL, per flags
    int contrastive = -1;     // -1 when the flag is off
    int objective = -1;       // recon - w * kld (+ contrastive)
    std::vector<int> draws;   // z_k nodes
};

// Assembles the joint objective for one prompt and its K responses. eps holds
// one fixed reparameterization draw per response.
template <typename T>
ClapLossNodes<T> build_clap_objective(Tape<T>& tape, BoundParams<T>& bind, TransformerLM<T>& lm,
                                      PosteriorEncoder<T>& encoder, LatentAdapter<T>& adapter,
                                      const Tokens& x, const std::vector<Tokens>& responses,
                                      const std::vector<Tensor<T>>& eps,
                                      const ObjectiveFlags& flags, double kld_weight,
                                      int64_t* clamp_hits = nullptr) {
    int K = static_cast<int>(responses.size());
    if (K < 1) throw InputError("clap objective: need at least one response");
    if (eps.size() != responses.size())
        throw InputError("clap objective: need one eps draw per response");

    std::vector<GaussianNodes> qs;
    std::vector<int> draws;
    std::vector<PrefixNodes> prefixes;
    for (int k = 0; k < K; ++k) {
        qs.push_back(encoder.encode_node(tape, bind, x, responses[static_cast<size_t>(k)],
                                         clamp_hits));
        draws.push_back(reparam_sample_node(tape, qs.back(), eps[static_cast<size_t>(k)]));
        prefixes.push_back(adapter.apply_node(tape, bind, draws.back()));
    }

    // log-likelihood grid: diagonal only unless the contrastive term needs
    // the full K x K block
    std::vector<std::vector<int>> loglik(static_cast<size_t>(K),
                                         std::vector<int>(static_cast<size_t>(K), -1));
    for (int k = 0; k < K; ++k) {
        for (int j = 0; j < K; ++j) {
            if (!flags.contrastive && j != k) continue;
            int nll = lm.nll_node(tape, bind, x, responses[static_cast<size_t>(k)],
                                  &prefixes[static_cast<size_t>(j)]);
            loglik[static_cast<size_t>(k)][static_cast<size_t>(j)] =
                tape.scale(tape.sum_all(nll), T(-1));
        }
    }

    ClapLossNodes<T> out;
    out.draws = draws;
    std::vector<int> diag;
    for (int k = 0; k < K; ++k) diag.push_back(loglik[static_cast<size_t>(k)][static_cast<size_t>(k)]);
    std::vector<T> inv_k(diag.size(), T(1) / static_cast<T>(K));
    out.reconstruction = tape.affine_scalars(diag, inv_k, T(0));

    GaussianNodes prior;
    {
        Tensor<T> zero({encoder.d_z});
        prior.mean = tape.constant(zero);
        prior.log_var = tape.constant(zero);
    }
    if (flags.dg_kld) {
        out.kld = dg_kld_from_draws(tape, qs, draws, prior);
    } else {
        std::vector<int> kls;
        for (int k = 0; k < K; ++k)
            kls.push_back(gaussian_kl_to_prior_node(tape, qs[static_cast<size_t>(k)]));
        std::vector<T> coeffs(kls.size(), T(1) / static_cast<T>(K));
        out.kld = tape.affine_scalars(kls, coeffs, T(0));
    }

    std::vector<int> parts{out.reconstruction, out.kld};
    std::vector<T> coeffs{T(1), static_cast<T>(-kld_weight)};
    if (flags.contrastive && K >= 1) {
        out.contrastive = contrastive_from_grid(tape, loglik);
        parts.push_back(out.contrastive);
        coeffs.push_back(T(1));
    }
    out.objective = tape.affine_scalars(parts, coeffs, T(0));
    return out;
}

// CLaP pretraining: joint training of the posterior encoder and the latent
// adapter on self-generated responses, with the LM frozen for the first
// epoch(s) and unfrozen afterwards.
template <typename T>
ClapBundle<T> clap_pretrain(const TransformerLM<T>& sft, const std::vector<Tokens>& prompts,
                            const std::vector<std::vector<Tokens>>& response_cache,
                            const ClapConfig& cfg, const std::vector<XY>& heldout,
                            ClapReport* report = nullptr) {
    cfg.validate();
    if (prompts.empty()) throw InputError("clap_pretrain: prompts must be non-empty");
    if (response_cache.size() != prompts.size())
        throw InputError("clap_pretrain: response cache does not match prompts");
    for (const auto& rs : response_cache)
        if (static_cast<int>(rs.size()) < cfg.K)
            throw InputError("clap_pretrain: fewer cached responses than K");

    uint64_t sft_hash = sft.store.content_hash();
    TransformerLM<T> lm(sft);  // trained copy; the input stays untouched
    PosteriorEncoder<T> encoder(lm.cfg, cfg.d_z);
    encoder.init_from_lm(lm);
    encoder.zero_output_layer();
    LatentAdapter<T> adapter(lm.cfg, cfg.d_z, cfg.adapter_hidden);

    Adam<T> opt_small(cfg.lr);
    for (auto& [n, p] : encoder.store.all()) opt_small.add(*p);
    for (auto& [n, p] : adapter.store.all()) opt_small.add(*p);
    Adam<T> opt_lm(cfg.lr_lm);
    for (auto& [n, p] : lm.store.all()) opt_lm.add(*p);

    int epochs = cfg.epochs_frozen + cfg.epochs_unfrozen;
    int64_t steps_per_epoch = static_cast<int64_t>(prompts.size()) * cfg.batches_per_prompt;
    int64_t total_steps = steps_per_epoch * epochs;
    int64_t warmup_steps = static_cast<int64_t>(cfg.kld_warmup_frac * total_steps);

    Rng rng(cfg.seed);
    ClapReport local;
    ClapReport& rep = report ? *report : local;
    int global_step = 0;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        bool lm_trainable = epoch >= cfg.epochs_frozen;
        lm.store.set_trainable(lm_trainable);
        double epoch_contrastive = 0;
        int64_t epoch_terms = 0;

        std::vector<size_t> order(prompts.size());
        std::iota(order.begin(), order.end(), size_t{0});
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(
                                        static_cast<int64_t>(i)))]);

        for (size_t oi = 0; oi < order.size(); ++oi) {
            for (int rep_i = 0; rep_i < cfg.batches_per_prompt; ++rep_i) {
                size_t pi = order[oi];
                const auto& cache = response_cache[pi];
                // K distinct responses by partial Fisher-Yates
                std::vector<size_t> idx(cache.size());
                std::iota(idx.begin(), idx.end(), size_t{0});
                std::vector<Tokens> batch;
                for (int k = 0; k < cfg.K; ++k) {
                    size_t j = static_cast<size_t>(k) + static_cast<size_t>(rng.uniform_int(
                                   static_cast<int64_t>(idx.size() - static_cast<size_t>(k))));
                    std::swap(idx[static_cast<size_t>(k)], idx[j]);
                    batch.push_back(cache[idx[static_cast<size_t>(k)]]);
                }
                std::vector<Tensor<T>> eps;
                for (int k = 0; k < cfg.K; ++k) {
                    Tensor<T> e({cfg.d_z});
                    for (auto& v : e.data) v = static_cast<T>(rng.normal());
                    eps.push_back(std::move(e));
                }
                double w = cfg.kld_weight;
                if (warmup_steps > 0 && global_step < warmup_steps)
                    w *= static_cast<double>(global_step + 1) / static_cast<double>(warmup_steps);

                Tape<T> tape;
                BoundParams<T> bind(tape);
                auto nodes = build_clap_objective(tape, bind, lm, encoder, adapter, prompts[pi],
                                                  batch, eps, cfg.flags, w,
                                                  &rep.log_var_clamp_hits);
                int loss = tape.scale(nodes.objective, T(-1));
                double lv = static_cast<double>(tape.value(loss).at(0));
                if (!std::isfinite(lv))
                    throw DivergenceError("clap_pretrain: non-finite loss at step " +
                                          std::to_string(global_step));
                opt_small.zero_grad();
                opt_lm.zero_grad();
                tape.backward(loss);
                tape.flush_param_grads();
                opt_small.step();
                if (lm_trainable) opt_lm.step();

                ClapStepLog sl;
                sl.step = global_step;
                sl.epoch = epoch;
                sl.reconstruction = static_cast<double>(tape.value(nodes.reconstruction).at(0));
                sl.kld = static_cast<double>(tape.value(nodes.kld).at(0));
                sl.contrastive = nodes.contrastive >= 0
                                     ? static_cast<double>(tape.value(nodes.contrastive).at(0))
                                     : 0.0;
                sl.objective = -lv;
                rep.steps.push_back(sl);
                epoch_contrastive += sl.contrastive;
                ++epoch_terms;
                ++global_step;
            }
        }
        rep.epoch_contrastive.push_back(epoch_contrastive / static_cast<double>(epoch_terms));
    }
    lm.store.set_trainable(true);

    // reconstruction-quality budget: conditional perplexity with prior z vs SFT
    if (!heldout.empty()) {
        rep.sft_perplexity = perplexity(sft, heldout);
        Rng zrng(cfg.seed ^ 0x9e11);
        std::vector<PrefixKV<T>> prefixes;
        prefixes.reserve(heldout.size());
        auto prior = LatentGaussian<T>::prior(cfg.d_z);
        for (size_t i = 0; i < heldout.size(); ++i)
            prefixes.push_back(adapter.apply(reparam_sample(prior, zrng)));
        rep.clap_perplexity = perplexity<T>(
            lm, heldout, [&](size_t i) { return &prefixes[i]; });
        rep.perplexity_within_budget =
            std::abs(rep.clap_perplexity - rep.sft_perplexity) <= 0.15 * rep.sft_perplexity;
    }

    return ClapBundle<T>(std::move(lm), std::move(encoder), std::move(adapter), sft_hash);
}

// Convenience overload that samples the response cache itself.
template <typename T>
ClapBundle<T> clap_pretrain(const TransformerLM<T>& sft, const std::vector<Tokens>& prompts,
                            const ClapConfig& cfg, const std::vector<XY>& heldout,
                            ClapReport* report = nullptr) {
    auto cache = sample_response_cache(sft, prompts, cfg.responses_per_prompt,
                                       cfg.sample_temperature, cfg.sample_max_new, cfg.seed);
    return clap_pretrain(sft, prompts, cache, cfg, heldout, report);
}

}  // namespace lalign
