#pragma once

#include <array>
#include <functional>
#include <vector>

#include "lalign/common.hpp"
#include "lalign/rng.hpp"

namespace lalign::toy {

// Fully enumerable discrete conditional model used as a brute-force oracle
// for the latent-reward machinery. The conditional is a per-position softmax
// family
//
//   p(y | x, z) = prod_t softmax(base[x][t] + coef[t] z)[y_t],
//
// with z living on a uniform 2-d grid carrying a discretized standard-normal
// prior, so marginals, posteriors (by Bayes) and latent rewards are all exact
// sums. Class-A tokens get a +u.z logit shift and class-B tokens a -u.z
// shift (plus a small per-position perturbation), so z steers the token mix.
struct ToyCvaeConfig {
    int vocab = 6;       // tokens {0,1}=class A, {2,3}=class B, {4,5}=neutral
    int resp_len = 4;
    double grid_lo = -3.0, grid_hi = 3.0;
    int grid_points = 61;   // per dimension; grid size = grid_points^2
    double signal = 0.25;   // coupling between u.z and the class logits
    double noise = 0.06;    // per-position off-axis perturbation
    int n_prompts = 2;
    uint64_t seed = 2024;
};

class ToyCvae {
public:
    static constexpr int64_t kEnumerationGuard = 1000000;

    explicit ToyCvae(const ToyCvaeConfig& cfg);

    const ToyCvaeConfig& config() const { return cfg_; }
    int64_t response_space_size() const;

    // analytic conditional
    double log_p_y_given_xz(int x, const Tokens& y, const std::array<double, 2>& z) const;
    // per-position distributions at z (resp_len rows of vocab probabilities)
    std::vector<std::vector<double>> position_probs(int x, const std::array<double, 2>& z) const;

    // z-grid with discretized standard-normal prior
    int grid_size() const { return static_cast<int>(grid_.size()); }
    const std::array<double, 2>& grid_point(int g) const { return grid_[static_cast<size_t>(g)]; }
    double prior_mass(int g) const { return prior_[static_cast<size_t>(g)]; }
    double log_prior_mass(int g) const { return log_prior_[static_cast<size_t>(g)]; }

    // exact quantities by enumeration / grid sums
    double marginal_prob(int x, const Tokens& y) const;              // p(y|x)
    std::vector<double> exact_posterior(int x, const Tokens& y) const;  // masses over grid
    double exact_latent_reward(int x, const std::array<double, 2>& z,
                               const std::function<double(const Tokens&)>& reward) const;

    // default reward: token-count statistic (A count - B count) / len in [-1, 1]
    double attribute_score(const Tokens& y) const;

    // sampling
    int sample_grid_prior(Rng& rng) const;  // grid index
    Tokens sample_response(int x, const std::array<double, 2>& z, Rng& rng) const;
    Tokens sample_marginal(int x, Rng& rng, int* grid_index = nullptr) const;

    // normalization of p(.|x,z) at one z; exact up to float rounding
    double conditional_total_mass(int x, const std::array<double, 2>& z) const;

private:
    ToyCvaeConfig cfg_;
    std::vector<std::array<double, 2>> grid_;
    std::vector<double> prior_, log_prior_;
    // base[x][t*vocab + v], coef[t*vocab + v] (2 components)
    std::vector<std::vector<double>> base_;
    std::vector<std::array<double, 2>> coef_;

    void check_prompt(int x) const;
    void check_response(const Tokens& y) const;
};

// Self-normalized importance-weighted mean: sum_k w_k r_k / sum_k w_k with
// log-space weights, computed with max-subtraction. The same routine backs
// both the Gaussian-posterior estimator used in the pipeline and the
// exact-posterior oracle checks.
double importance_weighted_mean(const std::vector<double>& log_weights,
                                const std::vector<double>& rewards);

}  // namespace lalign::toy
