#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lalign/tensor.hpp"

namespace lalign {

// Global instrumentation. matmul_flops counts 2*m*k*n for every matmul-like
// kernel (forward and backward), so FLOP ratios between training methods are
// apples-to-apples. lm_param_grad_events counts gradient flushes into
// parameters registered with GradScope::lm; it must stay zero during latent
// preference training.
struct PerfCounters {
    uint64_t matmul_flops = 0;
    uint64_t lm_param_grad_events = 0;
    uint64_t lm_forward_passes = 0;

    void reset() { *this = PerfCounters{}; }
};

inline PerfCounters& perf() {
    static PerfCounters c;
    return c;
}

enum class GradScope { lm, encoder, adapter, other };

// One trainable tensor with a persistent gradient accumulator.
template <typename T>
struct Param {
    Tensor<T> value;
    Tensor<T> grad;
    GradScope scope = GradScope::other;
    bool trainable = true;

    void zero_grad() {
        if (grad.data.empty()) grad = Tensor<T>(value.shape);
        grad.zero();
    }
};

namespace kernels {

// C += A(m,k) * B(k,n)
template <typename T>
void matmul_accum(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    perf().matmul_flops += static_cast<uint64_t>(2 * m * k * n);
}

// C += A(m,n) * B(k,n)^T  -> (m,k)
template <typename T>
void matmul_accum_bt(T* c, const T* a, const T* b, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * n;
        T* crow = c + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T s = 0;
            for (int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[p] += s;
        }
    }
    perf().matmul_flops += static_cast<uint64_t>(2 * m * k * n);
}

// C += A(m,k)^T * B(m,n) -> (k,n)
template <typename T>
void matmul_accum_at(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            if (av == T(0)) continue;
            T* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    perf().matmul_flops += static_cast<uint64_t>(2 * m * k * n);
}

}  // namespace kernels

// Reverse-mode autodiff over a linear tape. Nodes are appended in forward
// order; backward() walks the tape in reverse, so no explicit topological
// sort is needed. The tape is rebuilt every training step.
template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily during backward
        bool needs = false;
        std::function<void(Tape&)> back;
    };

    Tape() { nodes_.reserve(256); }

    int make(Tensor<T> value, bool needs, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, needs, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int constant(Tensor<T> value) { return make(std::move(value), false, nullptr); }

    int leaf(Tensor<T> value, bool needs) { return make(std::move(value), needs, nullptr); }

    // Leaf backed by an external parameter; backward gradients are flushed
    // into p.grad by flush_param_grads().
    int param(Param<T>& p) {
        int id = make(p.value, p.trainable, nullptr);
        if (p.trainable) param_bindings_.push_back({id, &p});
        return id;
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs; }

    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

    size_t size() const { return nodes_.size(); }

    // ---- elementwise ----

    int add(int a, int b) {
        check_same(a, b, "add");
        Tensor<T> out = value(a);
        const Tensor<T>& vb = value(b);
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += vb.at(i);
        bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, [a, b](Tape& t) mutable {
            int self = t.current_;
            const Tensor<T>& g = t.grad(self);
            if (t.needs(a)) accum(t.grad(a), g, T(1));
            if (t.needs(b)) accum(t.grad(b), g, T(1));
        });
    }

    int sub(int a, int b) {
        check_same(a, b, "sub");
        Tensor<T> out = value(a);
        const Tensor<T>& vb = value(b);
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) -= vb.at(i);
        bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, [a, b](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            if (t.needs(a)) accum(t.grad(a), g, T(1));
            if (t.needs(b)) accum(t.grad(b), g, T(-1));
        });
    }

    int mul(int a, int b) {
        check_same(a, b, "mul");
        Tensor<T> out = value(a);
        const Tensor<T>& vb = value(b);
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= vb.at(i);
        bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, [a, b](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            if (t.needs(a)) {
                Tensor<T>& ga = t.grad(a);
                const Tensor<T>& vb2 = t.value(b);
                for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) * vb2.at(i);
            }
            if (t.needs(b)) {
                Tensor<T>& gb = t.grad(b);
                const Tensor<T>& va = t.value(a);
                for (int64_t i = 0; i < g.numel(); ++i) gb.at(i) += g.at(i) * va.at(i);
            }
        });
    }

    int scale(int a, T c) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) v *= c;
        return make(std::move(out), needs(a), [a, c](Tape& t) {
            if (t.needs(a)) accum(t.grad(a), t.grad(t.current_), c);
        });
    }

    int add_scalar(int a, T c) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) v += c;
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (t.needs(a)) accum(t.grad(a), t.grad(t.current_), T(1));
        });
    }

    int exp_(int a) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) v = std::exp(v);
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& y = t.value(t.current_);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) * y.at(i);
        });
    }

    int square(int a) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) v = v * v;
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& x = t.value(a);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += T(2) * g.at(i) * x.at(i);
        });
    }

    int tanh_(int a) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) v = std::tanh(v);
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& y = t.value(t.current_);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i)
                ga.at(i) += g.at(i) * (T(1) - y.at(i) * y.at(i));
        });
    }

    int gelu(int a) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) {
            double x = static_cast<double>(v);
            v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)));
        }
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& x = t.value(a);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                double xv = static_cast<double>(x.at(i));
                double cdf = 0.5 * (1.0 + std::erf(xv * M_SQRT1_2));
                double pdf = std::exp(-0.5 * xv * xv) / std::sqrt(2.0 * M_PI);
                ga.at(i) += g.at(i) * static_cast<T>(cdf + xv * pdf);
            }
        });
    }

    // softplus(x) = log(1 + e^x), numerically stable
    int softplus(int a) {
        Tensor<T> out = value(a);
        for (auto& v : out.data) {
            double x = static_cast<double>(v);
            v = static_cast<T>(std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))));
        }
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& x = t.value(a);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                double xv = static_cast<double>(x.at(i));
                double sig = 1.0 / (1.0 + std::exp(-xv));
                ga.at(i) += g.at(i) * static_cast<T>(sig);
            }
        });
    }

    // Pass-through gradient inside [lo, hi], zero outside. Returns the number
    // of clamped entries through *clamped, when requested.
    int clamp(int a, T lo, T hi, int64_t* clamped = nullptr) {
        Tensor<T> out = value(a);
        int64_t hits = 0;
        for (auto& v : out.data) {
            if (v < lo) { v = lo; ++hits; }
            else if (v > hi) { v = hi; ++hits; }
        }
        if (clamped) *clamped = hits;
        return make(std::move(out), needs(a), [a, lo, hi](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& x = t.value(a);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (x.at(i) >= lo && x.at(i) <= hi) ga.at(i) += g.at(i);
            }
        });
    }

    // ---- linear algebra ----

    int matmul(int a, int b) {
        const Tensor<T>& va = value(a);
        const Tensor<T>& vb = value(b);
        if (va.cols() != vb.rows())
            throw std::invalid_argument("matmul: inner dims " + shape_str(va.shape) + " x " +
                                        shape_str(vb.shape));
        int64_t m = va.rows(), k = va.cols(), n = vb.cols();
        Tensor<T> out({m, n});
        kernels::matmul_accum(out.data.data(), va.data.data(), vb.data.data(), m, k, n);
        bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, [a, b, m, k, n](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            if (t.needs(a)) {
                kernels::matmul_accum_bt(t.grad(a).data.data(), g.data.data(),
                                         t.value(b).data.data(), m, n, k);
            }
            if (t.needs(b)) {
                kernels::matmul_accum_at(t.grad(b).data.data(), t.value(a).data.data(),
                                         g.data.data(), m, k, n);
            }
        });
    }

    // x[m,n] + v[n] broadcast over rows
    int add_rowvec(int a, int b) {
        const Tensor<T>& va = value(a);
        const Tensor<T>& vb = value(b);
        if (va.cols() != vb.numel())
            throw std::invalid_argument("add_rowvec: dim mismatch");
        Tensor<T> out = va;
        for (int64_t i = 0; i < out.rows(); ++i)
            for (int64_t j = 0; j < out.cols(); ++j) out.at(i, j) += vb.at(j);
        bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, [a, b](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            if (t.needs(a)) accum(t.grad(a), g, T(1));
            if (t.needs(b)) {
                Tensor<T>& gb = t.grad(b);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j) gb.at(j) += g.at(i, j);
            }
        });
    }

    // gather rows of an embedding table
    int embed_rows(int table, const std::vector<int32_t>& ids) {
        const Tensor<T>& tab = value(table);
        int64_t d = tab.cols();
        Tensor<T> out({static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            const T* src = tab.row(ids[i]);
            std::copy(src, src + d, out.row(static_cast<int64_t>(i)));
        }
        return make(std::move(out), needs(table), [table, ids, d](Tape& t) {
            if (!t.needs(table)) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& gt = t.grad(table);
            for (size_t i = 0; i < ids.size(); ++i) {
                T* dst = gt.row(ids[i]);
                const T* src = g.row(static_cast<int64_t>(i));
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }

    int layer_norm(int x, int gamma, int beta, T eps) {
        const Tensor<T>& vx = value(x);
        int64_t m = vx.rows(), n = vx.cols();
        Tensor<T> out({m, n});
        Tensor<T> xhat({m, n});
        Tensor<T> invstd({m});
        const Tensor<T>& g_ = value(gamma);
        const Tensor<T>& b_ = value(beta);
        for (int64_t i = 0; i < m; ++i) {
            T mean = 0, var = 0;
            for (int64_t j = 0; j < n; ++j) mean += vx.at(i, j);
            mean /= static_cast<T>(n);
            for (int64_t j = 0; j < n; ++j) {
                T d = vx.at(i, j) - mean;
                var += d * d;
            }
            var /= static_cast<T>(n);
            T is = T(1) / std::sqrt(var + eps);
            invstd.at(i) = is;
            for (int64_t j = 0; j < n; ++j) {
                T xh = (vx.at(i, j) - mean) * is;
                xhat.at(i, j) = xh;
                out.at(i, j) = g_.at(j) * xh + b_.at(j);
            }
        }
        bool ng = needs(x) || needs(gamma) || needs(beta);
        return make(std::move(out), ng,
                    [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), m,
                     n](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& gam = t.value(gamma);
            if (t.needs(gamma)) {
                Tensor<T>& gg = t.grad(gamma);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gg.at(j) += g.at(i, j) * xhat.at(i, j);
            }
            if (t.needs(beta)) {
                Tensor<T>& gb = t.grad(beta);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gb.at(j) += g.at(i, j);
            }
            if (t.needs(x)) {
                Tensor<T>& gx = t.grad(x);
                for (int64_t i = 0; i < m; ++i) {
                    T sum_gy = 0, sum_gy_xhat = 0;
                    for (int64_t j = 0; j < n; ++j) {
                        T gy = g.at(i, j) * gam.at(j);
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat.at(i, j);
                    }
                    T inv_n = T(1) / static_cast<T>(n);
                    for (int64_t j = 0; j < n; ++j) {
                        T gy = g.at(i, j) * gam.at(j);
                        gx.at(i, j) += invstd.at(i) *
                                       (gy - inv_n * sum_gy - xhat.at(i, j) * inv_n * sum_gy_xhat);
                    }
                }
            }
        });
    }

    // Multi-head causal self-attention over projected q/k/v [L, D], with an
    // optional per-layer key/value prefix [P, D]. Prefix slots are visible to
    // every query position; token position j is visible to query i iff j <= i.
    // With attend_prefix == false prefix columns are skipped entirely, which
    // makes the output bit-identical to the no-prefix path.
    int causal_attention(int q, int k, int v, int n_heads, int pk = -1, int pv = -1,
                         bool attend_prefix = true) {
        const Tensor<T>& vq = value(q);
        const Tensor<T>& vk = value(k);
        const Tensor<T>& vv = value(v);
        int64_t L = vq.rows(), D = vq.cols();
        if (D % n_heads != 0) throw std::invalid_argument("attention: D % n_heads != 0");
        int64_t hd = D / n_heads;
        int64_t P = 0;
        const Tensor<T>* vpk = nullptr;
        const Tensor<T>* vpv = nullptr;
        bool use_prefix = pk >= 0 && attend_prefix;
        if (use_prefix) {
            vpk = &value(pk);
            vpv = &value(pv);
            if (vpk->cols() != D || vpv->cols() != D || vpk->rows() != vpv->rows())
                throw std::invalid_argument("attention: prefix shape mismatch");
            P = vpk->rows();
        }
        T scalef = T(1) / std::sqrt(static_cast<T>(hd));
        Tensor<T> out({L, D});
        // attention weights saved for backward: per head, row i has P + i + 1 cols
        Tensor<T> attw({static_cast<int64_t>(n_heads), L, P + L});
        uint64_t macs = 0;
        for (int h = 0; h < n_heads; ++h) {
            int64_t off = h * hd;
            for (int64_t i = 0; i < L; ++i) {
                int64_t cols = P + i + 1;
                const T* qi = vq.row(i) + off;
                T* aw = attw.data.data() + (static_cast<int64_t>(h) * L + i) * (P + L);
                T maxs = -std::numeric_limits<T>::infinity();
                for (int64_t c = 0; c < cols; ++c) {
                    const T* kc = (c < P) ? vpk->row(c) + off : vk.row(c - P) + off;
                    T s = 0;
                    for (int64_t d = 0; d < hd; ++d) s += qi[d] * kc[d];
                    s *= scalef;
                    aw[c] = s;
                    if (s > maxs) maxs = s;
                }
                T denom = 0;
                for (int64_t c = 0; c < cols; ++c) {
                    aw[c] = std::exp(aw[c] - maxs);
                    denom += aw[c];
                }
                T inv = T(1) / denom;
                T* oi = out.row(i) + off;
                for (int64_t c = 0; c < cols; ++c) {
                    aw[c] *= inv;
                    const T* vc = (c < P) ? vpv->row(c) + off : vv.row(c - P) + off;
                    for (int64_t d = 0; d < hd; ++d) oi[d] += aw[c] * vc[d];
                }
                macs += static_cast<uint64_t>(2 * cols * hd);
            }
        }
        perf().matmul_flops += 2 * macs;
        bool ng = needs(q) || needs(k) || needs(v) || (use_prefix && (needs(pk) || needs(pv)));
        int pk_id = use_prefix ? pk : -1;
        int pv_id = use_prefix ? pv : -1;
        return make(std::move(out), ng,
                    [q, k, v, pk_id, pv_id, n_heads, hd, L, P, scalef,
                     attw = std::move(attw)](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            const Tensor<T>& vq2 = t.value(q);
            const Tensor<T>& vk2 = t.value(k);
            const Tensor<T>& vv2 = t.value(v);
            const Tensor<T>* vpk2 = pk_id >= 0 ? &t.value(pk_id) : nullptr;
            const Tensor<T>* vpv2 = pv_id >= 0 ? &t.value(pv_id) : nullptr;
            Tensor<T>* gq = t.needs(q) ? &t.grad(q) : nullptr;
            Tensor<T>* gk = t.needs(k) ? &t.grad(k) : nullptr;
            Tensor<T>* gv = t.needs(v) ? &t.grad(v) : nullptr;
            Tensor<T>* gpk = (pk_id >= 0 && t.needs(pk_id)) ? &t.grad(pk_id) : nullptr;
            Tensor<T>* gpv = (pv_id >= 0 && t.needs(pv_id)) ? &t.grad(pv_id) : nullptr;
            std::vector<T> da(static_cast<size_t>(P + L));
            uint64_t macs = 0;
            for (int h = 0; h < n_heads; ++h) {
                int64_t off = h * hd;
                for (int64_t i = 0; i < L; ++i) {
                    int64_t cols = P + i + 1;
                    const T* gi = g.row(i) + off;
                    const T* aw = attw.data.data() + (static_cast<int64_t>(h) * L + i) * (P + L);
                    // dA and dV
                    T dot_da_a = 0;
                    for (int64_t c = 0; c < cols; ++c) {
                        const T* vc = (c < P) ? vpv2->row(c) + off : vv2.row(c - P) + off;
                        T s = 0;
                        for (int64_t d = 0; d < hd; ++d) s += gi[d] * vc[d];
                        da[static_cast<size_t>(c)] = s;
                        dot_da_a += s * aw[c];
                        T* gvc = nullptr;
                        if (c < P) {
                            if (gpv) gvc = gpv->row(c) + off;
                        } else if (gv) {
                            gvc = gv->row(c - P) + off;
                        }
                        if (gvc)
                            for (int64_t d = 0; d < hd; ++d) gvc[d] += aw[c] * gi[d];
                    }
                    const T* qi = vq2.row(i) + off;
                    T* gqi = gq ? gq->row(i) + off : nullptr;
                    for (int64_t c = 0; c < cols; ++c) {
                        T ds = (da[static_cast<size_t>(c)] - dot_da_a) * aw[c] * scalef;
                        if (ds == T(0)) continue;
                        const T* kc = (c < P) ? vpk2->row(c) + off : vk2.row(c - P) + off;
                        if (gqi)
                            for (int64_t d = 0; d < hd; ++d) gqi[d] += ds * kc[d];
                        T* gkc = nullptr;
                        if (c < P) {
                            if (gpk) gkc = gpk->row(c) + off;
                        } else if (gk) {
                            gkc = gk->row(c - P) + off;
                        }
                        if (gkc)
                            for (int64_t d = 0; d < hd; ++d) gkc[d] += ds * qi[d];
                    }
                    macs += static_cast<uint64_t>(4 * cols * hd);
                }
            }
            perf().matmul_flops += 2 * macs;
        });
    }

    // Per-row negative log-likelihood of the target ids under softmax(logits).
    int cross_entropy_rows(int logits, const std::vector<int32_t>& targets) {
        const Tensor<T>& vl = value(logits);
        int64_t m = vl.rows(), n = vl.cols();
        if (static_cast<int64_t>(targets.size()) != m)
            throw std::invalid_argument("cross_entropy: target count mismatch");
        Tensor<T> out({m});
        Tensor<T> probs({m, n});
        for (int64_t i = 0; i < m; ++i) {
            const T* row = vl.row(i);
            T maxv = row[0];
            for (int64_t j = 1; j < n; ++j) maxv = std::max(maxv, row[j]);
            T denom = 0;
            for (int64_t j = 0; j < n; ++j) {
                T e = std::exp(row[j] - maxv);
                probs.at(i, j) = e;
                denom += e;
            }
            T inv = T(1) / denom;
            for (int64_t j = 0; j < n; ++j) probs.at(i, j) *= inv;
            out.at(i) = -(row[targets[static_cast<size_t>(i)]] - maxv - std::log(denom));
        }
        return make(std::move(out), needs(logits),
                    [logits, targets, probs = std::move(probs), m, n](Tape& t) {
            if (!t.needs(logits)) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& gl = t.grad(logits);
            for (int64_t i = 0; i < m; ++i) {
                T gi = g.at(i);
                if (gi == T(0)) continue;
                for (int64_t j = 0; j < n; ++j) gl.at(i, j) += gi * probs.at(i, j);
                gl.at(i, targets[static_cast<size_t>(i)]) -= gi;
            }
        });
    }

    // ---- reductions / reshaping ----

    int sum_all(int a) {
        const Tensor<T>& va = value(a);
        T s = 0;
        for (T v : va.data) s += v;
        Tensor<T> out({1});
        out.at(0) = s;
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            T g = t.grad(t.current_).at(0);
            Tensor<T>& ga = t.grad(a);
            for (auto& v : ga.data) v += g;
        });
    }

    int mean_all(int a) {
        int64_t n = value(a).numel();
        return scale(sum_all(a), T(1) / static_cast<T>(n));
    }

    int select_row(int a, int64_t i) {
        const Tensor<T>& va = value(a);
        int64_t n = va.cols();
        Tensor<T> out({n});
        std::copy(va.row(i), va.row(i) + n, out.data.begin());
        return make(std::move(out), needs(a), [a, i, n](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& ga = t.grad(a);
            for (int64_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j);
        });
    }

    int select_element(int a, int64_t i) {
        Tensor<T> out({1});
        out.at(0) = value(a).at(i);
        return make(std::move(out), needs(a), [a, i](Tape& t) {
            if (t.needs(a)) t.grad(a).at(i) += t.grad(t.current_).at(0);
        });
    }

    // mean of rows [r0, r1); empty ranges produce a zero vector
    int mean_rows(int a, int64_t r0, int64_t r1) {
        const Tensor<T>& va = value(a);
        int64_t n = va.cols();
        Tensor<T> out({n});
        int64_t cnt = r1 - r0;
        if (cnt > 0) {
            for (int64_t i = r0; i < r1; ++i)
                for (int64_t j = 0; j < n; ++j) out.at(j) += va.at(i, j);
            for (int64_t j = 0; j < n; ++j) out.at(j) /= static_cast<T>(cnt);
        }
        return make(std::move(out), needs(a) && cnt > 0, [a, r0, r1, n, cnt](Tape& t) {
            if (!t.needs(a) || cnt <= 0) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& ga = t.grad(a);
            T inv = T(1) / static_cast<T>(cnt);
            for (int64_t i = r0; i < r1; ++i)
                for (int64_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j) * inv;
        });
    }

    int slice_rows(int a, int64_t r0, int64_t r1) {
        const Tensor<T>& va = value(a);
        int64_t n = va.cols();
        Tensor<T> out({r1 - r0, n});
        std::copy(va.row(r0), va.row(r0) + (r1 - r0) * n, out.data.begin());
        return make(std::move(out), needs(a), [a, r0, r1, n](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = r0; i < r1; ++i)
                for (int64_t j = 0; j < n; ++j) ga.at(i, j) += g.at(i - r0, j);
        });
    }

    int concat_vec(int a, int b) {
        const Tensor<T>& va = value(a);
        const Tensor<T>& vb = value(b);
        int64_t na = va.numel(), nb = vb.numel();
        Tensor<T> out({na + nb});
        std::copy(va.data.begin(), va.data.end(), out.data.begin());
        std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + na);
        bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, [a, b, na, nb](Tape& t) {
            const Tensor<T>& g = t.grad(t.current_);
            if (t.needs(a)) {
                Tensor<T>& ga = t.grad(a);
                for (int64_t i = 0; i < na; ++i) ga.at(i) += g.at(i);
            }
            if (t.needs(b)) {
                Tensor<T>& gb = t.grad(b);
                for (int64_t i = 0; i < nb; ++i) gb.at(i) += g.at(na + i);
            }
        });
    }

    int slice_vec(int a, int64_t i0, int64_t i1) {
        const Tensor<T>& va = value(a);
        Tensor<T> out({i1 - i0});
        std::copy(va.data.begin() + i0, va.data.begin() + i1, out.data.begin());
        return make(std::move(out), needs(a), [a, i0, i1](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = i0; i < i1; ++i) ga.at(i) += g.at(i - i0);
        });
    }

    // reshape a vector [P*D] into a matrix [P, D] (or any compatible shape)
    int reshape(int a, std::vector<int64_t> new_shape) {
        const Tensor<T>& va = value(a);
        if (Tensor<T>::numel_of(new_shape) != va.numel())
            throw std::invalid_argument("reshape: numel mismatch");
        Tensor<T> out;
        out.shape = std::move(new_shape);
        out.data = va.data;
        return make(std::move(out), needs(a), [a](Tape& t) {
            if (!t.needs(a)) return;
            const Tensor<T>& g = t.grad(t.current_);
            Tensor<T>& ga = t.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i);
        });
    }

    // c0 + sum_i coeff_i * scalar_i
    int affine_scalars(const std::vector<int>& ids, const std::vector<T>& coeffs, T c0) {
        if (ids.size() != coeffs.size())
            throw std::invalid_argument("affine_scalars: size mismatch");
        T s = c0;
        bool ng = false;
        for (size_t i = 0; i < ids.size(); ++i) {
            s += coeffs[i] * value(ids[i]).at(0);
            ng = ng || needs(ids[i]);
        }
        Tensor<T> out({1});
        out.at(0) = s;
        return make(std::move(out), ng, [ids, coeffs](Tape& t) {
            T g = t.grad(t.current_).at(0);
            for (size_t i = 0; i < ids.size(); ++i) {
                if (t.needs(ids[i])) t.grad(ids[i]).at(0) += g * coeffs[i];
            }
        });
    }

    // log sum exp over a set of scalar nodes
    int logsumexp_scalars(const std::vector<int>& ids) {
        T maxv = -std::numeric_limits<T>::infinity();
        bool ng = false;
        for (int id : ids) {
            maxv = std::max(maxv, value(id).at(0));
            ng = ng || needs(id);
        }
        T denom = 0;
        for (int id : ids) denom += std::exp(value(id).at(0) - maxv);
        Tensor<T> out({1});
        out.at(0) = maxv + std::log(denom);
        return make(std::move(out), ng, [ids](Tape& t) {
            T g = t.grad(t.current_).at(0);
            T lse = t.value(t.current_).at(0);
            for (int id : ids) {
                if (!t.needs(id)) continue;
                T w = std::exp(t.value(id).at(0) - lse);
                t.grad(id).at(0) += g * w;
            }
        });
    }

    // ---- backward ----

    void backward(int out_id) {
        const Tensor<T>& v = value(out_id);
        if (v.numel() != 1) throw std::invalid_argument("backward: output must be scalar");
        grad(out_id).at(0) = T(1);
        for (int id = out_id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.back || n.grad.data.empty() || !n.needs) continue;
            current_ = id;
            n.back(*this);
        }
    }

    // Add tape gradients into the bound parameter accumulators and bump the
    // LM gradient counter for lm-scoped parameters.
    void flush_param_grads() {
        for (auto& [id, p] : param_bindings_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.data.empty()) continue;
            if (p->grad.data.empty()) p->grad = Tensor<T>(p->value.shape);
            for (int64_t i = 0; i < n.grad.numel(); ++i) p->grad.at(i) += n.grad.at(i);
            if (p->scope == GradScope::lm) perf().lm_param_grad_events++;
        }
    }

    int current_ = -1;  // node whose backward closure is running

private:
    static void accum(Tensor<T>& dst, const Tensor<T>& src, T c) {
        for (int64_t i = 0; i < src.numel(); ++i) dst.at(i) += c * src.at(i);
    }

    void check_same(int a, int b, const char* op) const {
        if (!value(a).same_shape(value(b)))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                        shape_str(value(a).shape) + " vs " +
                                        shape_str(value(b).shape));
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Param<T>*>> param_bindings_;
};

}  // namespace lalign
