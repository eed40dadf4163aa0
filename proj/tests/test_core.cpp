#include <doctest.h>

#include <cmath>

#include "lalign/fd_check.hpp"
#include "lalign/rng.hpp"
#include "lalign/tape.hpp"
#include "lalign/tensor.hpp"

using namespace lalign;

TEST_SUITE_BEGIN("core");

TEST_CASE("rng is deterministic and moment-correct") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    double sum = 0, sum2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double z = r.normal();
        sum += z;
        sum2 += z * z;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.02));

    Rng f1 = Rng(9).fork(3), f2 = Rng(9).fork(3), f3 = Rng(9).fork(4);
    CHECK(f1.next_u64() == f2.next_u64());
    CHECK(f1.next_u64() != f3.next_u64());
}

TEST_CASE("tensor basics") {
    Tensor<double> t({2, 3});
    CHECK(t.numel() == 6);
    t.at(1, 2) = 5.0;
    CHECK(t.data[5] == 5.0);
    CHECK(t.all_finite());
    t.at(0, 0) = std::nan("");
    CHECK(!t.all_finite());
}

TEST_CASE("tape: matmul matches manual result and backward fd") {
    Tape<double> t;
    Tensor<double> a({2, 3});
    Tensor<double> b({3, 2});
    for (int i = 0; i < 6; ++i) {
        a.at(i) = 0.3 * i - 0.5;
        b.at(i) = 0.1 * i + 0.2;
    }
    int na = t.leaf(a, true);
    int nb = t.leaf(b, true);
    int nc = t.matmul(na, nb);
    // manual [0,0]
    double c00 = a.at(0, 0) * b.at(0, 0) + a.at(0, 1) * b.at(1, 0) + a.at(0, 2) * b.at(2, 0);
    CHECK(t.value(nc).at(0, 0) == doctest::Approx(c00).epsilon(1e-12));
    int s = t.sum_all(nc);
    t.backward(s);
    // d sum / d a[i][k] = sum_j b[k][j]
    CHECK(t.grad(na).at(0, 1) == doctest::Approx(b.at(1, 0) + b.at(1, 1)).epsilon(1e-12));
    CHECK(t.grad(nb).at(2, 0) == doctest::Approx(a.at(0, 2) + a.at(1, 2)).epsilon(1e-12));
}

TEST_CASE("tape: composite ops pass finite differences") {
    // random small graph mixing most primitive ops
    Param<double> w;
    w.value = Tensor<double>({4, 4});
    Param<double> v;
    v.value = Tensor<double>({4});
    Rng rng(11);
    for (auto& x : w.value.data) x = rng.normal() * 0.5;
    for (auto& x : v.value.data) x = rng.normal() * 0.5;

    auto loss_fn = [&]() {
        Tape<double> t;
        int nw = t.leaf(w.value, false);
        int nv = t.leaf(v.value, false);
        int h = t.gelu(t.add_rowvec(nw, nv));
        int g = t.tanh_(t.scale(h, 0.7));
        int q = t.mul(g, t.exp_(t.scale(h, -0.3)));
        int r = t.softplus(t.sub(q, t.square(g)));
        return static_cast<double>(t.value(t.mean_all(r)).at(0));
    };
    auto compute = [&]() {
        Tape<double> t;
        int nw = t.param(w);
        int nv = t.param(v);
        int h = t.gelu(t.add_rowvec(nw, nv));
        int g = t.tanh_(t.scale(h, 0.7));
        int q = t.mul(g, t.exp_(t.scale(h, -0.3)));
        int r = t.softplus(t.sub(q, t.square(g)));
        int loss = t.mean_all(r);
        w.zero_grad();
        v.zero_grad();
        t.backward(loss);
        t.flush_param_grads();
    };
    auto res = fd_check_params<double>(loss_fn, {{"w", &w}, {"v", &v}}, compute, 20, 5);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("tape: layer_norm and cross_entropy backward fd") {
    Param<double> x, g, b;
    x.value = Tensor<double>({3, 5});
    g.value = Tensor<double>({5});
    b.value = Tensor<double>({5});
    Rng rng(3);
    for (auto& v : x.value.data) v = rng.normal();
    for (auto& v : g.value.data) v = 1.0 + 0.1 * rng.normal();
    for (auto& v : b.value.data) v = 0.1 * rng.normal();
    std::vector<int32_t> targets{1, 4, 0};

    auto build = [&](Tape<double>& t, bool as_params) {
        int nx = as_params ? t.param(x) : t.leaf(x.value, false);
        int ng = as_params ? t.param(g) : t.leaf(g.value, false);
        int nb = as_params ? t.param(b) : t.leaf(b.value, false);
        int ln = t.layer_norm(nx, ng, nb, 1e-5);
        int ce = t.cross_entropy_rows(ln, targets);
        return t.mean_all(ce);
    };
    auto loss_fn = [&]() {
        Tape<double> t;
        return static_cast<double>(t.value(build(t, false)).at(0));
    };
    auto compute = [&]() {
        Tape<double> t;
        int loss = build(t, true);
        x.zero_grad();
        g.zero_grad();
        b.zero_grad();
        t.backward(loss);
        t.flush_param_grads();
    };
    auto res = fd_check_params<double>(loss_fn, {{"x", &x}, {"g", &g}, {"b", &b}}, compute, 30, 17);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("tape: causal attention with prefix passes finite differences") {
    const int L = 5, D = 8, P = 3, heads = 2;
    Param<double> q, k, v, pk, pv;
    for (auto* p : {&q, &k, &v}) p->value = Tensor<double>({L, D});
    for (auto* p : {&pk, &pv}) p->value = Tensor<double>({P, D});
    Rng rng(21);
    for (auto* p : {&q, &k, &v, &pk, &pv})
        for (auto& x : p->value.data) x = rng.normal() * 0.7;

    auto build = [&](Tape<double>& t, bool as_params) {
        auto node = [&](Param<double>& p) { return as_params ? t.param(p) : t.leaf(p.value, false); };
        int att = t.causal_attention(node(q), node(k), node(v), heads, node(pk), node(pv), true);
        return t.mean_all(t.square(att));
    };
    auto loss_fn = [&]() {
        Tape<double> t;
        return static_cast<double>(t.value(build(t, false)).at(0));
    };
    auto compute = [&]() {
        Tape<double> t;
        int loss = build(t, true);
        for (auto* p : {&q, &k, &v, &pk, &pv}) p->zero_grad();
        t.backward(loss);
        t.flush_param_grads();
    };
    auto res = fd_check_params<double>(
        loss_fn, {{"q", &q}, {"k", &k}, {"v", &v}, {"pk", &pk}, {"pv", &pv}}, compute, 40, 29);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("tape: logsumexp and affine scalars") {
    Tape<double> t;
    std::vector<int> ids;
    std::vector<double> vals{-1.0, 2.0, 0.5};
    for (double v : vals) {
        Tensor<double> s({1});
        s.at(0) = v;
        ids.push_back(t.leaf(s, true));
    }
    int lse = t.logsumexp_scalars(ids);
    double expect = std::log(std::exp(-1.0) + std::exp(2.0) + std::exp(0.5));
    CHECK(t.value(lse).at(0) == doctest::Approx(expect).epsilon(1e-12));
    t.backward(lse);
    double denom = std::exp(-1.0) + std::exp(2.0) + std::exp(0.5);
    CHECK(t.grad(ids[1]).at(0) == doctest::Approx(std::exp(2.0) / denom).epsilon(1e-12));

    Tape<double> t2;
    Tensor<double> s1({1}), s2({1});
    s1.at(0) = 3.0;
    s2.at(0) = -2.0;
    int a = t2.leaf(s1, true), b = t2.leaf(s2, true);
    int aff = t2.affine_scalars({a, b}, {2.0, -0.5}, 1.0);
    CHECK(t2.value(aff).at(0) == doctest::Approx(1.0 + 6.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("clamp: pass-through inside, zero gradient outside") {
    Tape<double> t;
    Tensor<double> x({3});
    x.at(0) = -12.0;
    x.at(1) = 0.5;
    x.at(2) = 11.0;
    int nx = t.leaf(x, true);
    int64_t hits = 0;
    int c = t.clamp(nx, -10.0, 10.0, &hits);
    CHECK(hits == 2);
    CHECK(t.value(c).at(0) == -10.0);
    CHECK(t.value(c).at(2) == 10.0);
    int s = t.sum_all(c);
    t.backward(s);
    CHECK(t.grad(nx).at(0) == 0.0);
    CHECK(t.grad(nx).at(1) == 1.0);
    CHECK(t.grad(nx).at(2) == 0.0);
}

TEST_SUITE_END();
