#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lalign/common.hpp"
#include "lalign/config.hpp"
#include "lalign/optim.hpp"
#include "lalign/rng.hpp"
#include "lalign/tape.hpp"
#include "lalign/tensor.hpp"

namespace lalign {

// Per-layer key/value prefix injected into attention. Each layer holds keys
// and values of shape [prefix_len, d_model]; head h occupies columns
// [h*head_dim, (h+1)*head_dim), i.e. the flat layout of
// [n_heads x prefix_len x head_dim].
template <typename T>
struct PrefixKV {
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;

    void validate(const ModelConfig& cfg) const {
        if (static_cast<int>(keys.size()) != cfg.n_layers ||
            static_cast<int>(values.size()) != cfg.n_layers)
            throw ConfigError("prefix: layer count mismatch with model config");
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto check = [&](const Tensor<T>& t, const char* what) {
                if (t.rows() != cfg.prefix_len || t.cols() != cfg.d_model)
                    throw ConfigError(std::string("prefix: ") + what + " shape " +
                                      shape_str(t.shape) + " does not match config");
                if (!t.all_finite())
                    throw ConfigError(std::string("prefix: non-finite ") + what);
            };
            check(keys[static_cast<size_t>(l)], "keys");
            check(values[static_cast<size_t>(l)], "values");
        }
    }
};

// Tape node ids of a per-layer prefix, for differentiable paths.
struct PrefixNodes {
    std::vector<std::pair<int, int>> kv;  // (keys node, values node) per layer
};

// Named parameter registry with stable insertion order (used for optimizer
// wiring, checkpoints, and content hashing).
template <typename T>
class ParamStore {
public:
    Param<T>& add(const std::string& name, std::vector<int64_t> shape, GradScope scope) {
        items_.emplace_back(name, Param<T>{Tensor<T>(std::move(shape)), Tensor<T>{}, scope, true});
        index_[name] = &items_.back().second;
        return items_.back().second;
    }

    Param<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("param not found: " + name);
        return *it->second;
    }

    const Param<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("param not found: " + name);
        return *it->second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<std::pair<std::string, Param<T>*>> all() {
        std::vector<std::pair<std::string, Param<T>*>> out;
        for (auto& [n, p] : items_) out.emplace_back(n, &p);
        return out;
    }

    std::vector<std::pair<std::string, const Param<T>*>> all() const {
        std::vector<std::pair<std::string, const Param<T>*>> out;
        for (const auto& [n, p] : items_) out.emplace_back(n, &p);
        return out;
    }

    void set_trainable(bool v) {
        for (auto& [n, p] : items_) p.trainable = v;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [name, p] : items_) n += p.value.numel();
        return n;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, p] : items_) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(p.value.data.data(), p.value.data.size() * sizeof(T), h);
        }
        return h;
    }

private:
    std::deque<std::pair<std::string, Param<T>>> items_;  // deque: stable addresses
    std::unordered_map<std::string, Param<T>*> index_;
};

// One tape leaf per parameter per step, shared across all forwards recorded
// on that tape.
template <typename T>
class BoundParams {
public:
    explicit BoundParams(Tape<T>& tape) : tape_(&tape) {}

    int node(Param<T>& p) {
        auto it = ids_.find(&p);
        if (it != ids_.end()) return it->second;
        int id = tape_->param(p);
        ids_[&p] = id;
        return id;
    }

private:
    Tape<T>* tape_;
    std::unordered_map<const Param<T>*, int> ids_;
};

// Incremental key/value cache for sampling. Row 0..prefix_rows-1 hold the
// injected prefix; token rows follow.
template <typename T>
struct KvCache {
    std::vector<std::vector<T>> k, v;  // per layer, flat rows of width d_model
    int64_t prefix_rows = 0;
    int64_t tokens = 0;
};

// Decoder-only transformer stack (embeddings + pre-LN blocks). Used both by
// the language model and, at reduced depth, by the latent encoders.
template <typename T>
struct TransformerStack {
    int vocab_size = 0, d_model = 0, n_layers = 0, n_heads = 0, d_ff = 0, max_seq_len = 0;
    ParamStore<T>* store = nullptr;
    GradScope scope = GradScope::other;
    static constexpr T kLnEps = static_cast<T>(1e-5);

    void configure(const ModelConfig& cfg, int layers, ParamStore<T>* s, GradScope sc) {
        vocab_size = cfg.vocab_size;
        d_model = cfg.d_model;
        n_layers = layers;
        n_heads = cfg.n_heads;
        d_ff = cfg.d_ff;
        max_seq_len = cfg.max_seq_len;
        store = s;
        scope = sc;
    }

    void register_params() {
        auto& st = *store;
        st.add("tok_emb", {vocab_size, d_model}, scope);
        st.add("pos_emb", {max_seq_len, d_model}, scope);
        for (int l = 0; l < n_layers; ++l) {
            std::string p = "l" + std::to_string(l) + ".";
            st.add(p + "ln1.g", {d_model}, scope);
            st.add(p + "ln1.b", {d_model}, scope);
            st.add(p + "attn.wq", {d_model, d_model}, scope);
            st.add(p + "attn.bq", {d_model}, scope);
            st.add(p + "attn.wk", {d_model, d_model}, scope);
            st.add(p + "attn.bk", {d_model}, scope);
            st.add(p + "attn.wv", {d_model, d_model}, scope);
            st.add(p + "attn.bv", {d_model}, scope);
            st.add(p + "attn.wo", {d_model, d_model}, scope);
            st.add(p + "attn.bo", {d_model}, scope);
            st.add(p + "ln2.g", {d_model}, scope);
            st.add(p + "ln2.b", {d_model}, scope);
            st.add(p + "mlp.w1", {d_model, d_ff}, scope);
            st.add(p + "mlp.b1", {d_ff}, scope);
            st.add(p + "mlp.w2", {d_ff, d_model}, scope);
            st.add(p + "mlp.b2", {d_model}, scope);
        }
    }

    void init_weights(Rng& rng, double std) {
        for (auto& [name, p] : store->all()) {
            size_t dot = name.rfind('.');
            std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
            if (leaf == "g") {
                std::fill(p->value.data.begin(), p->value.data.end(), T(1));
            } else if (!leaf.empty() && leaf[0] == 'b') {
                p->value.zero();
            } else {
                for (auto& v : p->value.data) v = static_cast<T>(rng.normal() * std);
            }
        }
    }

    // ---- differentiable forward ----

    int hidden_tape(Tape<T>& tape, BoundParams<T>& bind, const Tokens& ids,
                    const PrefixNodes* prefix, bool attend_prefix) const {
        auto& st = *store;
        check_tokens(ids, vocab_size, "stack");
        if (static_cast<int>(ids.size()) > max_seq_len)
            throw InputError("sequence of length " + std::to_string(ids.size()) +
                             " exceeds max_seq_len " + std::to_string(max_seq_len));
        Tokens pos_ids(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) pos_ids[i] = static_cast<int32_t>(i);
        int h = tape.add(tape.embed_rows(bind.node(st.get("tok_emb")), ids),
                         tape.embed_rows(bind.node(st.get("pos_emb")), pos_ids));
        for (int l = 0; l < n_layers; ++l) {
            std::string p = "l" + std::to_string(l) + ".";
            int a = tape.layer_norm(h, bind.node(st.get(p + "ln1.g")),
                                    bind.node(st.get(p + "ln1.b")), kLnEps);
            int q = tape.add_rowvec(tape.matmul(a, bind.node(st.get(p + "attn.wq"))),
                                    bind.node(st.get(p + "attn.bq")));
            int k = tape.add_rowvec(tape.matmul(a, bind.node(st.get(p + "attn.wk"))),
                                    bind.node(st.get(p + "attn.bk")));
            int v = tape.add_rowvec(tape.matmul(a, bind.node(st.get(p + "attn.wv"))),
                                    bind.node(st.get(p + "attn.bv")));
            int pk = -1, pv = -1;
            if (prefix) {
                pk = prefix->kv[static_cast<size_t>(l)].first;
                pv = prefix->kv[static_cast<size_t>(l)].second;
            }
            int att = tape.causal_attention(q, k, v, n_heads, pk, pv, attend_prefix);
            int proj = tape.add_rowvec(tape.matmul(att, bind.node(st.get(p + "attn.wo"))),
                                       bind.node(st.get(p + "attn.bo")));
            h = tape.add(h, proj);
            int b = tape.layer_norm(h, bind.node(st.get(p + "ln2.g")),
                                    bind.node(st.get(p + "ln2.b")), kLnEps);
            int u = tape.gelu(tape.add_rowvec(tape.matmul(b, bind.node(st.get(p + "mlp.w1"))),
                                              bind.node(st.get(p + "mlp.b1"))));
            int m = tape.add_rowvec(tape.matmul(u, bind.node(st.get(p + "mlp.w2"))),
                                    bind.node(st.get(p + "mlp.b2")));
            h = tape.add(h, m);
        }
        return h;
    }

    // ---- plain (no-grad) forward, optionally incremental ----

    void seed_cache(KvCache<T>& cache, const PrefixKV<T>* prefix) const {
        cache.k.assign(static_cast<size_t>(n_layers), {});
        cache.v.assign(static_cast<size_t>(n_layers), {});
        cache.prefix_rows = 0;
        cache.tokens = 0;
        if (!prefix) return;
        cache.prefix_rows = prefix->keys[0].rows();
        for (int l = 0; l < n_layers; ++l) {
            const auto& pk = prefix->keys[static_cast<size_t>(l)];
            const auto& pv = prefix->values[static_cast<size_t>(l)];
            cache.k[static_cast<size_t>(l)].assign(pk.data.begin(), pk.data.end());
            cache.v[static_cast<size_t>(l)].assign(pv.data.begin(), pv.data.end());
        }
    }

    // Processes `ids` as new tokens appended after cache.tokens existing ones;
    // returns hidden rows for the new tokens.
    Tensor<T> hidden_plain(const Tokens& ids, KvCache<T>& cache, bool attend_prefix) const {
        auto& st = *store;
        check_tokens(ids, vocab_size, "stack");
        int64_t L = static_cast<int64_t>(ids.size());
        int64_t pos0 = cache.tokens;
        if (pos0 + L > max_seq_len)
            throw InputError("sequence of length " + std::to_string(pos0 + L) +
                             " exceeds max_seq_len " + std::to_string(max_seq_len));
        int64_t D = d_model;
        int64_t P = cache.prefix_rows;
        int64_t hd = D / n_heads;
        T scalef = T(1) / std::sqrt(static_cast<T>(hd));
        const auto& tok = st.get("tok_emb").value;
        const auto& pos = st.get("pos_emb").value;
        Tensor<T> h({L, D});
        for (int64_t i = 0; i < L; ++i) {
            const T* te = tok.row(ids[static_cast<size_t>(i)]);
            const T* pe = pos.row(pos0 + i);
            for (int64_t j = 0; j < D; ++j) h.at(i, j) = te[j] + pe[j];
        }
        Tensor<T> a({L, D}), q({L, D}), att({L, D}), tmp({L, D});
        Tensor<T> ff({L, d_ff});
        for (int l = 0; l < n_layers; ++l) {
            std::string p = "l" + std::to_string(l) + ".";
            layer_norm_plain(h, st.get(p + "ln1.g").value, st.get(p + "ln1.b").value, a);
            auto& ck = cache.k[static_cast<size_t>(l)];
            auto& cv = cache.v[static_cast<size_t>(l)];
            ck.resize(static_cast<size_t>((P + pos0 + L) * D), T(0));
            cv.resize(static_cast<size_t>((P + pos0 + L) * D), T(0));
            // q/k/v projections; new k/v rows go straight into the cache
            q.zero();
            kernels::matmul_accum(q.data.data(), a.data.data(),
                                  st.get(p + "attn.wq").value.data.data(), L, D, D);
            add_bias_rows(q, st.get(p + "attn.bq").value);
            T* krows = ck.data() + (P + pos0) * D;
            T* vrows = cv.data() + (P + pos0) * D;
            std::fill(krows, krows + L * D, T(0));
            std::fill(vrows, vrows + L * D, T(0));
            kernels::matmul_accum(krows, a.data.data(),
                                  st.get(p + "attn.wk").value.data.data(), L, D, D);
            kernels::matmul_accum(vrows, a.data.data(),
                                  st.get(p + "attn.wv").value.data.data(), L, D, D);
            const auto& bk = st.get(p + "attn.bk").value;
            const auto& bv = st.get(p + "attn.bv").value;
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < D; ++j) {
                    krows[i * D + j] += bk.at(j);
                    vrows[i * D + j] += bv.at(j);
                }
            // attention over [prefix || tokens <= current]
            att.zero();
            std::vector<T> w;
            uint64_t macs = 0;
            for (int h_i = 0; h_i < n_heads; ++h_i) {
                int64_t off = h_i * hd;
                for (int64_t i = 0; i < L; ++i) {
                    int64_t g = pos0 + i;  // global token index
                    int64_t pcols = attend_prefix ? P : 0;
                    int64_t cols = pcols + g + 1;
                    w.resize(static_cast<size_t>(cols));
                    const T* qi = q.row(i) + off;
                    T maxs = -std::numeric_limits<T>::infinity();
                    for (int64_t c = 0; c < cols; ++c) {
                        int64_t row = attend_prefix ? c : P + c;
                        const T* kc = ck.data() + row * D + off;
                        T s = 0;
                        for (int64_t d = 0; d < hd; ++d) s += qi[d] * kc[d];
                        s *= scalef;
                        w[static_cast<size_t>(c)] = s;
                        if (s > maxs) maxs = s;
                    }
                    T denom = 0;
                    for (int64_t c = 0; c < cols; ++c) {
                        w[static_cast<size_t>(c)] = std::exp(w[static_cast<size_t>(c)] - maxs);
                        denom += w[static_cast<size_t>(c)];
                    }
                    T inv = T(1) / denom;
                    T* oi = att.row(i) + off;
                    for (int64_t c = 0; c < cols; ++c) {
                        int64_t row = attend_prefix ? c : P + c;
                        const T* vc = cv.data() + row * D + off;
                        T wc = w[static_cast<size_t>(c)] * inv;
                        for (int64_t d = 0; d < hd; ++d) oi[d] += wc * vc[d];
                    }
                    macs += static_cast<uint64_t>(2 * cols * hd);
                }
            }
            perf().matmul_flops += 2 * macs;
            tmp.zero();
            kernels::matmul_accum(tmp.data.data(), att.data.data(),
                                  st.get(p + "attn.wo").value.data.data(), L, D, D);
            add_bias_rows(tmp, st.get(p + "attn.bo").value);
            for (int64_t i = 0; i < L * D; ++i) h.at(i) += tmp.at(i);
            layer_norm_plain(h, st.get(p + "ln2.g").value, st.get(p + "ln2.b").value, a);
            ff.zero();
            kernels::matmul_accum(ff.data.data(), a.data.data(),
                                  st.get(p + "mlp.w1").value.data.data(), L, D, d_ff);
            add_bias_rows(ff, st.get(p + "mlp.b1").value);
            for (auto& x : ff.data) {
                double xv = static_cast<double>(x);
                x = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * M_SQRT1_2)));
            }
            tmp.zero();
            kernels::matmul_accum(tmp.data.data(), ff.data.data(),
                                  st.get(p + "mlp.w2").value.data.data(), L, d_ff, D);
            add_bias_rows(tmp, st.get(p + "mlp.b2").value);
            for (int64_t i = 0; i < L * D; ++i) h.at(i) += tmp.at(i);
        }
        cache.tokens = pos0 + L;
        return h;
    }

private:
    static void add_bias_rows(Tensor<T>& m, const Tensor<T>& b) {
        for (int64_t i = 0; i < m.rows(); ++i)
            for (int64_t j = 0; j < m.cols(); ++j) m.at(i, j) += b.at(j);
    }

    static void layer_norm_plain(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b,
                                 Tensor<T>& out) {
        int64_t m = x.rows(), n = x.cols();
        for (int64_t i = 0; i < m; ++i) {
            T mean = 0, var = 0;
            for (int64_t j = 0; j < n; ++j) mean += x.at(i, j);
            mean /= static_cast<T>(n);
            for (int64_t j = 0; j < n; ++j) {
                T d = x.at(i, j) - mean;
                var += d * d;
            }
            var /= static_cast<T>(n);
            T is = T(1) / std::sqrt(var + kLnEps);
            for (int64_t j = 0; j < n; ++j) out.at(i, j) = g.at(j) * ((x.at(i, j) - mean) * is) + b.at(j);
        }
    }
};

// Decoder-only language model: transformer stack + final layernorm + output
// head. The head is zero-initialized so an untrained model predicts the
// uniform distribution.
template <typename T>
class TransformerLM {
public:
    ModelConfig cfg;
    ParamStore<T> store;
    TransformerStack<T> stack;

    explicit TransformerLM(const ModelConfig& c, bool random_init = true) : cfg(c) {
        cfg.validate();
        stack.configure(cfg, cfg.n_layers, &store, GradScope::lm);
        stack.register_params();
        store.add("lnf.g", {cfg.d_model}, GradScope::lm);
        store.add("lnf.b", {cfg.d_model}, GradScope::lm);
        store.add("head.w", {cfg.d_model, cfg.vocab_size}, GradScope::lm);
        store.add("head.b", {cfg.vocab_size}, GradScope::lm);
        std::fill(store.get("lnf.g").value.data.begin(), store.get("lnf.g").value.data.end(), T(1));
        if (random_init) {
            Rng rng(cfg.seed);
            stack.init_weights(rng, 0.08);
            // zero head: an untrained model predicts the uniform distribution
            store.get("head.w").value.zero();
            store.get("head.b").value.zero();
        }
    }

    TransformerLM(const TransformerLM& o) : TransformerLM(o.cfg, false) { copy_values_from(o); }
    TransformerLM& operator=(const TransformerLM&) = delete;
    TransformerLM(TransformerLM&& o) noexcept
        : cfg(o.cfg), store(std::move(o.store)), stack(o.stack) {
        stack.store = &store;
    }

    void copy_values_from(const TransformerLM& o) {
        for (auto& [name, p] : store.all()) p->value = o.store.get(name).value;
    }

    void zero_all_weights() {
        for (auto& [name, p] : store.all()) p->value.zero();
    }

    template <typename U>
    TransformerLM<U> cast() const {
        TransformerLM<U> out(cfg, false);
        for (const auto& [name, p] : store.all())
            out.store.get(name).value = p->value.template cast<U>();
        return out;
    }

    void check_lengths(const Tokens& x, const Tokens& y) const {
        if (x.empty()) throw InputError("forward: prompt must be non-empty");
        if (static_cast<int>(x.size() + y.size()) > cfg.max_seq_len)
            throw InputError("forward: combined length " + std::to_string(x.size() + y.size()) +
                             " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }

    // Differentiable per-token NLL of y given x (and an optional prefix).
    // Returns a [|y|] node; element t is -log p(y_t | x, y_<t, prefix).
    int nll_node(Tape<T>& tape, BoundParams<T>& bind, const Tokens& x, const Tokens& y,
                 const PrefixNodes* prefix = nullptr, bool attend_prefix = true) {
        check_lengths(x, y);
        check_tokens(x, cfg.vocab_size, "prompt");
        check_tokens(y, cfg.vocab_size, "response");
        perf().lm_forward_passes++;
        Tokens ids(x);
        ids.insert(ids.end(), y.begin(), y.end());
        int h = stack.hidden_tape(tape, bind, ids, prefix, attend_prefix);
        int64_t tx = static_cast<int64_t>(x.size());
        int64_t ty = static_cast<int64_t>(y.size());
        int hs = tape.slice_rows(h, tx - 1, tx - 1 + ty);
        int hn = tape.layer_norm(hs, bind.node(store.get("lnf.g")), bind.node(store.get("lnf.b")),
                                 TransformerStack<T>::kLnEps);
        int logits = tape.add_rowvec(tape.matmul(hn, bind.node(store.get("head.w"))),
                                     bind.node(store.get("head.b")));
        return tape.cross_entropy_rows(logits, y);
    }

    // No-grad per-token log-probabilities of y given x.
    std::vector<double> log_probs(const Tokens& x, const Tokens& y,
                                  const PrefixKV<T>* prefix = nullptr,
                                  bool attend_prefix = true) const {
        check_lengths(x, y);
        check_tokens(x, cfg.vocab_size, "prompt");
        check_tokens(y, cfg.vocab_size, "response");
        if (prefix) prefix->validate(cfg);
        perf().lm_forward_passes++;
        Tokens ids(x);
        ids.insert(ids.end(), y.begin(), y.end());
        KvCache<T> cache;
        stack.seed_cache(cache, prefix);
        Tensor<T> h = stack.hidden_plain(ids, cache, attend_prefix);
        std::vector<double> out(y.size());
        int64_t tx = static_cast<int64_t>(x.size());
        for (size_t t = 0; t < y.size(); ++t) {
            std::vector<T> logits = logits_for_row(h, tx - 1 + static_cast<int64_t>(t));
            out[t] = log_softmax_pick(logits, y[t]);
        }
        return out;
    }

    double sum_log_prob(const Tokens& x, const Tokens& y, const PrefixKV<T>* prefix = nullptr) const {
        auto lp = log_probs(x, y, prefix);
        double s = 0;
        for (double v : lp) s += v;
        return s;
    }

    // Ancestral sampling; temperature 0 selects the argmax (ties to the
    // lowest token id). Stops after emitting eos or max_new tokens.
    Tokens sample(const Tokens& x, const PrefixKV<T>* prefix, double temperature, int max_new,
                  Rng& rng, int32_t eos = kEosToken) const {
        if (temperature < 0) throw InputError("sample: temperature must be >= 0");
        if (x.empty()) throw InputError("sample: prompt must be non-empty");
        if (prefix) prefix->validate(cfg);
        perf().lm_forward_passes++;
        KvCache<T> cache;
        stack.seed_cache(cache, prefix);
        Tensor<T> h = stack.hidden_plain(x, cache, true);
        Tokens out;
        std::vector<T> logits = logits_for_row(h, static_cast<int64_t>(x.size()) - 1);
        for (int step = 0; step < max_new; ++step) {
            int32_t tok = draw_token(logits, temperature, rng);
            out.push_back(tok);
            if (tok == eos) break;
            if (cache.tokens + 1 > cfg.max_seq_len) break;
            Tensor<T> hn = stack.hidden_plain({tok}, cache, true);
            logits = logits_for_row(hn, 0);
        }
        return out;
    }

    std::vector<T> logits_for_row(const Tensor<T>& h, int64_t row) const {
        int64_t d = cfg.d_model, v = cfg.vocab_size;
        const auto& g = store.get("lnf.g").value;
        const auto& b = store.get("lnf.b").value;
        // final layernorm on the single row
        T mean = 0, var = 0;
        for (int64_t j = 0; j < d; ++j) mean += h.at(row, j);
        mean /= static_cast<T>(d);
        for (int64_t j = 0; j < d; ++j) {
            T df = h.at(row, j) - mean;
            var += df * df;
        }
        var /= static_cast<T>(d);
        T is = T(1) / std::sqrt(var + TransformerStack<T>::kLnEps);
        std::vector<T> hn(static_cast<size_t>(d));
        for (int64_t j = 0; j < d; ++j)
            hn[static_cast<size_t>(j)] = g.at(j) * ((h.at(row, j) - mean) * is) + b.at(j);
        const auto& hw = store.get("head.w").value;
        const auto& hb = store.get("head.b").value;
        std::vector<T> logits(static_cast<size_t>(v), T(0));
        kernels::matmul_accum(logits.data(), hn.data(), hw.data.data(), 1, d, v);
        for (int64_t j = 0; j < v; ++j) logits[static_cast<size_t>(j)] += hb.at(j);
        return logits;
    }

private:
    static double log_softmax_pick(const std::vector<T>& logits, int32_t id) {
        double maxv = -std::numeric_limits<double>::infinity();
        for (T v : logits) maxv = std::max(maxv, static_cast<double>(v));
        double denom = 0;
        for (T v : logits) denom += std::exp(static_cast<double>(v) - maxv);
        return static_cast<double>(logits[static_cast<size_t>(id)]) - maxv - std::log(denom);
    }

    static int32_t draw_token(const std::vector<T>& logits, double temperature, Rng& rng) {
        if (temperature == 0.0) {
            int32_t best = 0;
            for (size_t j = 1; j < logits.size(); ++j)
                if (logits[j] > logits[static_cast<size_t>(best)]) best = static_cast<int32_t>(j);
            return best;
        }
        double maxv = -std::numeric_limits<double>::infinity();
        for (T v : logits) maxv = std::max(maxv, static_cast<double>(v));
        std::vector<double> p(logits.size());
        double denom = 0;
        for (size_t j = 0; j < logits.size(); ++j) {
            p[j] = std::exp((static_cast<double>(logits[j]) - maxv) / temperature);
            denom += p[j];
        }
        double u = rng.uniform() * denom;
        double acc = 0;
        for (size_t j = 0; j < logits.size(); ++j) {
            acc += p[j];
            if (u < acc) return static_cast<int32_t>(j);
        }
        return static_cast<int32_t>(logits.size()) - 1;
    }
};

// Exact perplexity of a corpus under the model: exp of mean per-token NLL.
template <typename T>
double perplexity(const TransformerLM<T>& lm, const std::vector<XY>& corpus,
                  const std::function<const PrefixKV<T>*(size_t)>& prefix_for = nullptr) {
    double nll = 0;
    int64_t tokens = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        const PrefixKV<T>* pf = prefix_for ? prefix_for(i) : nullptr;
        auto lp = lm.log_probs(corpus[i].x, corpus[i].y, pf);
        for (double v : lp) nll -= v;
        tokens += static_cast<int64_t>(lp.size());
    }
    return std::exp(nll / static_cast<double>(tokens));
}

struct SftStepLog {
    int step;
    double loss;
};

// Cross-entropy training of the language model on (x, y) pairs.
template <typename T>
TransformerLM<T> sft_train(const ModelConfig& mcfg, const std::vector<XY>& corpus,
                           const SftConfig& scfg,
                           std::vector<SftStepLog>* log = nullptr) {
    if (corpus.empty()) throw InputError("sft_train: corpus must be non-empty");
    TransformerLM<T> lm(mcfg, true);
    Adam<T> opt(scfg.lr, static_cast<int64_t>(scfg.warmup_frac * scfg.steps));
    for (auto& [name, p] : lm.store.all()) opt.add(*p);
    Rng rng(scfg.seed);
    for (int step = 0; step < scfg.steps; ++step) {
        Tape<T> tape;
        BoundParams<T> bind(tape);
        std::vector<int> losses;
        int64_t tok_count = 0;
        for (int b = 0; b < scfg.batch_size; ++b) {
            const XY& ex = corpus[static_cast<size_t>(rng.uniform_int(
                static_cast<int64_t>(corpus.size())))];
            int nll = lm.nll_node(tape, bind, ex.x, ex.y);
            tok_count += tape.value(nll).numel();
            losses.push_back(tape.sum_all(nll));
        }
        std::vector<T> coeffs(losses.size(), T(1) / static_cast<T>(tok_count));
        int loss = tape.affine_scalars(losses, coeffs, T(0));
        double lv = static_cast<double>(tape.value(loss).at(0));
        if (!std::isfinite(lv))
            throw DivergenceError("sft_train: non-finite loss at step " + std::to_string(step));
        opt.zero_grad();
        tape.backward(loss);
        tape.flush_param_grads();
        opt.step();
        if (log) log->push_back({step, lv});
    }
    return lm;
}

}  // namespace lalign
