#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lalign/common.hpp"
#include "lalign/config.hpp"
#include "lalign/task.hpp"
#include "lalign/vae.hpp"

namespace lalign {

struct WinRate {
    double value = 0;
    double ci_lo = 0, ci_hi = 0;  // two-sided 95% normal-approximation interval
    int n = 0;
};

// Fraction of prompts where the output beats the reference under the oracle;
// exact ties count 0.5.
inline WinRate attribute_win_rate(const std::vector<double>& output_scores,
                                  const std::vector<double>& reference_scores) {
    if (output_scores.size() != reference_scores.size() || output_scores.empty())
        throw InputError("attribute_win_rate: need matching non-empty score lists");
    WinRate w;
    w.n = static_cast<int>(output_scores.size());
    double wins = 0;
    for (size_t i = 0; i < output_scores.size(); ++i) {
        if (output_scores[i] > reference_scores[i]) wins += 1.0;
        else if (output_scores[i] == reference_scores[i]) wins += 0.5;
    }
    w.value = wins / static_cast<double>(w.n);
    double se = std::sqrt(std::max(w.value * (1.0 - w.value), 1e-12) / w.n);
    w.ci_lo = std::max(0.0, w.value - 1.96 * se);
    w.ci_hi = std::min(1.0, w.value + 1.96 * se);
    return w;
}

// P(score > 0) with ties at exactly 0 counting 0.5.
inline double attribute_probability(const std::vector<double>& scores) {
    if (scores.empty()) throw InputError("attribute_probability: empty scores");
    double p = 0;
    for (double s : scores) {
        if (s > 0) p += 1.0;
        else if (s == 0) p += 0.5;
    }
    return p / static_cast<double>(scores.size());
}

// Pearson correlation; 0 when either side is constant.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw InputError("pearson: need two equal-length samples");
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0 || sbb == 0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

struct LatentView {
    int attribute = 0;
    int dim_i = 0, dim_j = 0;       // the two most-correlated latent dimensions
    double corr_i = 0, corr_j = 0;  // their Pearson correlations with the label
    // one row per corpus item: coordinates in (dim_i, dim_j) plus the label
    std::vector<std::array<double, 3>> rows;
};

// Core of the export: selects the two dimensions of `means` most correlated
// with `labels` (ties break toward lower indices) and projects every item.
inline LatentView latent_view_from_means(const std::vector<std::vector<double>>& means,
                                         const std::vector<double>& labels, int attribute) {
    if (means.empty() || labels.size() < 2)
        throw InputError("latent_view: need at least two labeled items");
    LatentView view;
    view.attribute = attribute;
    int d_z = static_cast<int>(means.size());
    std::vector<std::pair<double, int>> ranked;
    for (int d = 0; d < d_z; ++d)
        ranked.emplace_back(std::abs(pearson(means[static_cast<size_t>(d)], labels)), d);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.first > b.first;  // stable: index order breaks ties
    });
    view.dim_i = ranked[0].second;
    view.dim_j = ranked.size() > 1 ? ranked[1].second : ranked[0].second;
    view.corr_i = pearson(means[static_cast<size_t>(view.dim_i)], labels);
    view.corr_j = pearson(means[static_cast<size_t>(view.dim_j)], labels);
    for (size_t i = 0; i < labels.size(); ++i)
        view.rows.push_back({means[static_cast<size_t>(view.dim_i)][i],
                             means[static_cast<size_t>(view.dim_j)][i], labels[i]});
    return view;
}

// Correlates posterior means with attribute scores over a labeled corpus.
template <typename T>
LatentView latent_view(const PosteriorEncoder<T>& encoder,
                       const std::vector<AnnotatedXY>& corpus, int attribute) {
    if (corpus.empty()) throw InputError("latent_view: empty corpus");
    size_t n = corpus.size();
    int d_z = encoder.d_z;
    std::vector<std::vector<double>> means(static_cast<size_t>(d_z), std::vector<double>(n));
    std::vector<double> labels(n);
    for (size_t i = 0; i < n; ++i) {
        auto g = encoder.encode(corpus[i].xy.x, corpus[i].xy.y);
        for (int d = 0; d < d_z; ++d)
            means[static_cast<size_t>(d)][i] = static_cast<double>(g.mean.at(d));
        labels[i] = corpus[i].scores.at(static_cast<size_t>(attribute));
    }
    return latent_view_from_means(means, labels, attribute);
}

void write_latent_view_tsv(const std::string& path, const LatentView& view);

// Analytic matmul-FLOP count of one differentiable LM forward pass over a
// prompt of length tx and a response of length ty with a prefix of p slots.
// Mirrors the kernels' own 2*m*k*n accounting exactly, so it can be
// cross-checked against the runtime counter.
inline uint64_t lm_forward_flops(const ModelConfig& cfg, int64_t tx, int64_t ty, int64_t p) {
    int64_t L = tx + ty;
    int64_t D = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size;
    // per layer: q/k/v/o projections, attention scores+mix, mlp
    int64_t att_cols = L * p + L * (L + 1) / 2;
    uint64_t per_layer = static_cast<uint64_t>(8 * L * D * D)     // 4 projections
                         + static_cast<uint64_t>(4 * D * att_cols)  // scores + weighted sum
                         + static_cast<uint64_t>(4 * L * D * F);    // mlp
    return static_cast<uint64_t>(cfg.n_layers) * per_layer +
           static_cast<uint64_t>(2 * ty * D * V);  // output head on response rows
}

}  // namespace lalign
