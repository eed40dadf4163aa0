#include "lalign/toy_cvae.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lalign::toy {

ToyCvae::ToyCvae(const ToyCvaeConfig& cfg) : cfg_(cfg) {
    if (cfg_.vocab < 1 || cfg_.vocab > 8)
        throw ConfigError("toy cvae: vocab must be in [1, 8]");
    if (cfg_.resp_len < 1 || cfg_.resp_len > 6)
        throw ConfigError("toy cvae: resp_len must be in [1, 6]");
    if (response_space_size() > kEnumerationGuard)
        throw ConfigError("toy cvae: response space exceeds the enumeration guard");
    if (cfg_.grid_points < 2) throw ConfigError("toy cvae: need at least 2 grid points");

    // grid + discretized prior
    int n = cfg_.grid_points;
    double lo = cfg_.grid_lo, hi = cfg_.grid_hi;
    double step = (hi - lo) / (n - 1);
    grid_.reserve(static_cast<size_t>(n) * n);
    double mass = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            std::array<double, 2> z{lo + i * step, lo + j * step};
            grid_.push_back(z);
            prior_.push_back(std::exp(-0.5 * (z[0] * z[0] + z[1] * z[1])));
            mass += prior_.back();
        }
    }
    for (auto& p : prior_) p /= mass;
    log_prior_.reserve(prior_.size());
    for (double p : prior_) log_prior_.push_back(std::log(p));

    // logit family: class A gets +u.z, class B -u.z, neutral 0, plus a small
    // seeded per-position perturbation along the orthogonal direction
    Rng rng(cfg_.seed);
    const std::array<double, 2> u{M_SQRT1_2, M_SQRT1_2};
    const std::array<double, 2> u_perp{-M_SQRT1_2, M_SQRT1_2};
    base_.resize(static_cast<size_t>(cfg_.n_prompts));
    for (auto& b : base_) {
        b.resize(static_cast<size_t>(cfg_.resp_len * cfg_.vocab));
        for (auto& v : b) v = rng.normal() * 0.3;
    }
    coef_.resize(static_cast<size_t>(cfg_.resp_len * cfg_.vocab));
    for (int t = 0; t < cfg_.resp_len; ++t) {
        for (int v = 0; v < cfg_.vocab; ++v) {
            double sign = 0.0;
            if (v < 2) sign = 1.0;
            else if (v < 4) sign = -1.0;
            double eps = rng.normal() * cfg_.noise;
            auto& c = coef_[static_cast<size_t>(t * cfg_.vocab + v)];
            c[0] = sign * cfg_.signal * u[0] + eps * u_perp[0];
            c[1] = sign * cfg_.signal * u[1] + eps * u_perp[1];
        }
    }
}

int64_t ToyCvae::response_space_size() const {
    int64_t s = 1;
    for (int t = 0; t < cfg_.resp_len; ++t) s *= cfg_.vocab;
    return s;
}

void ToyCvae::check_prompt(int x) const {
    if (x < 0 || x >= cfg_.n_prompts) throw InputError("toy cvae: prompt id out of range");
}

void ToyCvae::check_response(const Tokens& y) const {
    if (static_cast<int>(y.size()) != cfg_.resp_len)
        throw InputError("toy cvae: response must have length " + std::to_string(cfg_.resp_len));
    for (int32_t t : y)
        if (t < 0 || t >= cfg_.vocab) throw InputError("toy cvae: token out of range");
}

std::vector<std::vector<double>> ToyCvae::position_probs(int x,
                                                         const std::array<double, 2>& z) const {
    check_prompt(x);
    const auto& b = base_[static_cast<size_t>(x)];
    std::vector<std::vector<double>> out(static_cast<size_t>(cfg_.resp_len));
    for (int t = 0; t < cfg_.resp_len; ++t) {
        auto& row = out[static_cast<size_t>(t)];
        row.resize(static_cast<size_t>(cfg_.vocab));
        double maxv = -1e300;
        for (int v = 0; v < cfg_.vocab; ++v) {
            const auto& c = coef_[static_cast<size_t>(t * cfg_.vocab + v)];
            double l = b[static_cast<size_t>(t * cfg_.vocab + v)] + c[0] * z[0] + c[1] * z[1];
            row[static_cast<size_t>(v)] = l;
            maxv = std::max(maxv, l);
        }
        double denom = 0;
        for (auto& p : row) {
            p = std::exp(p - maxv);
            denom += p;
        }
        for (auto& p : row) p /= denom;
    }
    return out;
}

double ToyCvae::log_p_y_given_xz(int x, const Tokens& y, const std::array<double, 2>& z) const {
    check_response(y);
    auto probs = position_probs(x, z);
    double lp = 0;
    for (int t = 0; t < cfg_.resp_len; ++t)
        lp += std::log(probs[static_cast<size_t>(t)][static_cast<size_t>(y[static_cast<size_t>(t)])]);
    return lp;
}

double ToyCvae::conditional_total_mass(int x, const std::array<double, 2>& z) const {
    auto probs = position_probs(x, z);
    // enumerate all sequences with an odometer and sum their probabilities
    Tokens y(static_cast<size_t>(cfg_.resp_len), 0);
    double total = 0;
    while (true) {
        double p = 1;
        for (int t = 0; t < cfg_.resp_len; ++t)
            p *= probs[static_cast<size_t>(t)][static_cast<size_t>(y[static_cast<size_t>(t)])];
        total += p;
        int t = cfg_.resp_len - 1;
        while (t >= 0 && ++y[static_cast<size_t>(t)] == cfg_.vocab) {
            y[static_cast<size_t>(t)] = 0;
            --t;
        }
        if (t < 0) break;
    }
    return total;
}

double ToyCvae::marginal_prob(int x, const Tokens& y) const {
    check_prompt(x);
    check_response(y);
    double total = 0;
    for (int g = 0; g < grid_size(); ++g)
        total += prior_[static_cast<size_t>(g)] *
                 std::exp(log_p_y_given_xz(x, y, grid_[static_cast<size_t>(g)]));
    return total;
}

std::vector<double> ToyCvae::exact_posterior(int x, const Tokens& y) const {
    check_prompt(x);
    check_response(y);
    std::vector<double> post(static_cast<size_t>(grid_size()));
    double total = 0;
    for (int g = 0; g < grid_size(); ++g) {
        double v = prior_[static_cast<size_t>(g)] *
                   std::exp(log_p_y_given_xz(x, y, grid_[static_cast<size_t>(g)]));
        post[static_cast<size_t>(g)] = v;
        total += v;
    }
    for (auto& v : post) v /= total;
    return post;
}

double ToyCvae::exact_latent_reward(int x, const std::array<double, 2>& z,
                                    const std::function<double(const Tokens&)>& reward) const {
    check_prompt(x);
    if (response_space_size() > kEnumerationGuard)
        throw InputError("toy cvae: enumeration guard exceeded");
    auto probs = position_probs(x, z);
    Tokens y(static_cast<size_t>(cfg_.resp_len), 0);
    double total = 0;
    while (true) {
        double p = 1;
        for (int t = 0; t < cfg_.resp_len; ++t)
            p *= probs[static_cast<size_t>(t)][static_cast<size_t>(y[static_cast<size_t>(t)])];
        total += p * reward(y);
        int t = cfg_.resp_len - 1;
        while (t >= 0 && ++y[static_cast<size_t>(t)] == cfg_.vocab) {
            y[static_cast<size_t>(t)] = 0;
            --t;
        }
        if (t < 0) break;
    }
    return total;
}

double ToyCvae::attribute_score(const Tokens& y) const {
    check_response(y);
    int a = 0, b = 0;
    for (int32_t t : y) {
        if (t < 2) ++a;
        else if (t < 4) ++b;
    }
    return static_cast<double>(a - b) / static_cast<double>(cfg_.resp_len);
}

int ToyCvae::sample_grid_prior(Rng& rng) const {
    double u = rng.uniform();
    double acc = 0;
    for (int g = 0; g < grid_size(); ++g) {
        acc += prior_[static_cast<size_t>(g)];
        if (u < acc) return g;
    }
    return grid_size() - 1;
}

Tokens ToyCvae::sample_response(int x, const std::array<double, 2>& z, Rng& rng) const {
    auto probs = position_probs(x, z);
    Tokens y(static_cast<size_t>(cfg_.resp_len));
    for (int t = 0; t < cfg_.resp_len; ++t) {
        double u = rng.uniform();
        double acc = 0;
        int32_t pick = cfg_.vocab - 1;
        for (int v = 0; v < cfg_.vocab; ++v) {
            acc += probs[static_cast<size_t>(t)][static_cast<size_t>(v)];
            if (u < acc) {
                pick = v;
                break;
            }
        }
        y[static_cast<size_t>(t)] = pick;
    }
    return y;
}

Tokens ToyCvae::sample_marginal(int x, Rng& rng, int* grid_index) const {
    int g = sample_grid_prior(rng);
    if (grid_index) *grid_index = g;
    return sample_response(x, grid_[static_cast<size_t>(g)], rng);
}

double importance_weighted_mean(const std::vector<double>& log_weights,
                                const std::vector<double>& rewards) {
    if (log_weights.empty() || log_weights.size() != rewards.size())
        throw InputError("importance_weighted_mean: need matching non-empty inputs");
    double maxw = -std::numeric_limits<double>::infinity();
    for (double w : log_weights) {
        if (std::isnan(w)) throw InputError("importance_weighted_mean: NaN log-weight");
        maxw = std::max(maxw, w);
    }
    for (double r : rewards)
        if (std::isnan(r)) throw InputError("importance_weighted_mean: NaN reward");
    double num = 0, den = 0;
    for (size_t i = 0; i < log_weights.size(); ++i) {
        double w = std::exp(log_weights[i] - maxw);  // the max weight becomes 1
        num += w * rewards[i];
        den += w;
    }
    return num / den;
}

}  // namespace lalign::toy
