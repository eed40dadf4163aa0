#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lalign/rng.hpp"
#include "lalign/tape.hpp"

namespace lalign {

struct FdResult {
    double max_rel_err = 0.0;
    int checked = 0;
    std::string worst;  // "param[idx]: analytic=..., fd=..."
};

// Central finite-difference check of analytic gradients on a random subset of
// parameter entries. `loss_fn` must rebuild the loss from current parameter
// values on every call; gradients are taken from p.grad after one
// backward pass performed by the caller.
template <typename T>
FdResult fd_check_params(const std::function<double()>& loss_fn,
                         std::vector<std::pair<std::string, Param<T>*>> params,
                         const std::function<void()>& compute_grads, int subset_size,
                         uint64_t seed, double step = 1e-3) {
    static_assert(sizeof(T) == 8, "finite-difference checks require float64");
    compute_grads();
    // snapshot analytic grads
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (auto& [name, p] : params)
        grads.push_back(p->grad.data.empty() ? Tensor<T>(p->value.shape) : p->grad);

    // flat index space over all entries
    std::vector<int64_t> sizes;
    int64_t total = 0;
    for (auto& [name, p] : params) {
        sizes.push_back(p->value.numel());
        total += p->value.numel();
    }
    Rng rng(seed);
    FdResult res;
    for (int c = 0; c < subset_size; ++c) {
        int64_t flat = rng.uniform_int(total);
        size_t pi = 0;
        while (flat >= sizes[pi]) {
            flat -= sizes[pi];
            ++pi;
        }
        Param<T>& p = *params[pi].second;
        T saved = p.value.at(flat);
        p.value.at(flat) = saved + static_cast<T>(step);
        double up = loss_fn();
        p.value.at(flat) = saved - static_cast<T>(step);
        double down = loss_fn();
        p.value.at(flat) = saved;
        double fd = (up - down) / (2.0 * step);
        double an = static_cast<double>(grads[pi].at(flat));
        double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
        double rel = std::abs(an - fd) / denom;
        ++res.checked;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst = params[pi].first + "[" + std::to_string(flat) + "]: analytic=" +
                        std::to_string(an) + ", fd=" + std::to_string(fd);
        }
    }
    return res;
}

}  // namespace lalign
