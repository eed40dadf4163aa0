#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lalign/tape.hpp"

namespace lalign {

// Adam with optional linear learning-rate warmup.
template <typename T>
class Adam {
public:
    Adam(double lr, int64_t warmup_steps = 0, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : lr_(lr), warmup_(warmup_steps), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add(Param<T>& p) {
        params_.push_back(&p);
        slots_.push_back(Slot{Tensor<T>(p.value.shape), Tensor<T>(p.value.shape)});
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        double lr = lr_;
        if (warmup_ > 0 && t_ < warmup_) lr = lr_ * static_cast<double>(t_) / static_cast<double>(warmup_);
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Param<T>& p = *params_[i];
            if (!p.trainable || p.grad.data.empty()) continue;
            Slot& s = slots_[i];
            for (int64_t j = 0; j < p.value.numel(); ++j) {
                double g = static_cast<double>(p.grad.at(j));
                double m = beta1_ * static_cast<double>(s.m.at(j)) + (1.0 - beta1_) * g;
                double v = beta2_ * static_cast<double>(s.v.at(j)) + (1.0 - beta2_) * g * g;
                s.m.at(j) = static_cast<T>(m);
                s.v.at(j) = static_cast<T>(v);
                double mh = m / bc1;
                double vh = v / bc2;
                p.value.at(j) -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        Tensor<T> m, v;
    };

    double lr_;
    int64_t warmup_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Param<T>*> params_;
    std::vector<Slot> slots_;
};

}  // namespace lalign
