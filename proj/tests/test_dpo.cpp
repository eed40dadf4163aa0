#include <doctest.h>

#include <cmath>

#include "lalign/dpo.hpp"
#include "lalign/fd_check.hpp"

using namespace lalign;

namespace {

ModelConfig dpo_cfg(uint64_t seed = 31) {
    ModelConfig c;
    c.vocab_size = 12;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 20;
    c.prefix_len = 2;
    c.seed = seed;
    return c;
}

template <typename T>
LatentGaussian<T> gauss(std::vector<T> mean, std::vector<T> log_var) {
    LatentGaussian<T> g;
    g.mean = Tensor<T>::vector_of(std::move(mean));
    g.log_var = Tensor<T>::vector_of(std::move(log_var));
    return g;
}

template <typename T>
ClapBundle<T> tiny_bundle(const ModelConfig& cfg, int d_z, uint64_t scramble_seed = 0) {
    TransformerLM<T> lm(cfg, true);
    PosteriorEncoder<T> enc(cfg, d_z);
    enc.init_from_lm(lm);
    enc.zero_output_layer();
    if (scramble_seed) {
        Rng r(scramble_seed);
        for (auto& v : enc.store.get("pool.w").value.data)
            v = static_cast<T>(r.normal() * 0.25);
    }
    LatentAdapter<T> ad(cfg, d_z, 8);
    return ClapBundle<T>(std::move(lm), std::move(enc), std::move(ad), 0);
}

}  // namespace

TEST_SUITE_BEGIN("dpo");

TEST_CASE("latent reward proxy: identical densities give 0; closed-form shift") {
    auto q = gauss<double>({0.3, -0.2, 0.9}, {0.1, -0.3, 0.0});
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        Tensor<double> z({3});
        for (int64_t j = 0; j < 3; ++j) z.at(j) = rng.normal();
        CHECK(latent_reward_proxy(q, q, z) == 0.0);
    }
    // unit variances, z = mean_w, ||mean_w - mean_l||^2 = 2 -> log-ratio = 1.0
    auto q_w = gauss<double>({1.0, 1.0}, {0.0, 0.0});
    auto q_l = gauss<double>({0.0, 0.0}, {0.0, 0.0});
    CHECK(latent_reward_proxy(q_w, q_l, q_w.mean) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("importance reweighted reward: convexity and dominant-weight limit") {
    auto prior = LatentGaussian<double>::prior(2);
    auto q1 = gauss<double>({0.5, 0.0}, {0.2, -0.1});
    auto q2 = gauss<double>({-0.5, 0.4}, {0.0, 0.3});
    auto q3 = gauss<double>({0.0, -0.8}, {-0.2, 0.0});
    Rng rng(5);
    // all rewards equal c -> exactly c, any z, any K
    std::vector<std::pair<LatentGaussian<double>, double>> same{{q1, 2.5}, {q2, 2.5}, {q3, 2.5}};
    for (int i = 0; i < 8; ++i) {
        Tensor<double> z({2});
        z.at(0) = rng.normal() * 2;
        z.at(1) = rng.normal() * 2;
        for (int K = 1; K <= 3; ++K)
            CHECK(importance_reweighted_reward(same, prior, z, K) ==
                  doctest::Approx(2.5).epsilon(1e-12));
    }
    // K=2 with ||delta mu||^2 = 20, unit variances, z = mean_w -> ~score_w
    auto far_w = gauss<double>({std::sqrt(10.0), std::sqrt(10.0)}, {0.0, 0.0});
    auto far_l = gauss<double>({0.0, 0.0}, {0.0, 0.0});
    std::vector<std::pair<LatentGaussian<double>, double>> pair{{far_w, 0.9}, {far_l, -0.9}};
    double est = importance_reweighted_reward(pair, prior, far_w.mean, 2);
    CHECK(std::abs(est - 0.9) < 1e-3);
    // NaN inputs rejected
    std::vector<std::pair<LatentGaussian<double>, double>> bad{{q1, std::nan("")}};
    CHECK_THROWS_AS(importance_reweighted_reward(bad, prior, far_w.mean, 1), InputError);
}

TEST_CASE("pair_by_proxy: ordering, combinatorics, tie handling") {
    Tokens x{1};
    std::vector<Tensor<double>> zs;
    for (int i = 0; i < 3; ++i) {
        Tensor<double> z({1});
        z.at(0) = i;
        zs.push_back(z);
    }
    // proxies [0.5, 2.0, 1.0], top-vs-bottom -> exactly one pair (z2, z1)
    auto pairs = pair_by_proxy(x, zs, {0.5, 2.0, 1.0}, PairingStrategy::top_bottom);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].z_w.at(0) == 1.0);  // index 1 had proxy 2.0
    CHECK(pairs[0].z_l.at(0) == 0.0);  // index 0 had proxy 0.5
    CHECK(pairs[0].proxy_w == 2.0);
    CHECK(pairs[0].proxy_l == 0.5);

    // all-ordered-pairs at N=3 with distinct proxies -> exactly 3 pairs
    auto all3 = pair_by_proxy(x, zs, {0.5, 2.0, 1.0}, PairingStrategy::all_pairs);
    CHECK(all3.size() == 3);
    for (const auto& p : all3) CHECK(p.proxy_w > p.proxy_l);

    // exact ties are dropped
    auto tied = pair_by_proxy(x, zs, {1.0, 1.0, 1.0}, PairingStrategy::all_pairs);
    CHECK(tied.empty());
}

TEST_CASE("compose_latent_pairs: degenerate posteriors emit zero pairs") {
    auto cfg = dpo_cfg();
    auto bundle = tiny_bundle<double>(cfg, 4);  // zero projection: q_w == q_l == prior
    PreferencePair pref;
    pref.x = {1, 2};
    pref.y_w = {3, 4, 0};
    pref.y_l = {5, 6, 0};
    pref.score_w = 0.5;
    pref.score_l = -0.5;
    Rng rng(7);
    bool degenerate = false;
    auto pairs = compose_latent_pairs(pref, bundle.encoder, 8, PairingStrategy::top_bottom, rng,
                                      &degenerate);
    CHECK(pairs.empty());
    CHECK(degenerate);
    CHECK_THROWS_AS(
        compose_latent_pairs(pref, bundle.encoder, 1, PairingStrategy::top_bottom, rng),
        InputError);
}

TEST_CASE("compose_latent_pairs is invariant to order-preserving reward transforms") {
    auto cfg = dpo_cfg();
    auto bundle = tiny_bundle<double>(cfg, 4, /*scramble_seed=*/99);
    PreferencePair a;
    a.x = {1, 2, 3};
    a.y_w = {4, 5, 0};
    a.y_l = {6, 7, 0};
    a.score_w = 0.8;
    a.score_l = 0.1;
    PreferencePair b = a;  // same responses, transformed scores (x -> 10x + 3)
    b.score_w = 11.0;
    b.score_l = 4.0;
    Rng r1(13), r2(13);
    auto p1 = compose_latent_pairs(a, bundle.encoder, 8, PairingStrategy::top_bottom, r1);
    auto p2 = compose_latent_pairs(b, bundle.encoder, 8, PairingStrategy::top_bottom, r2);
    REQUIRE(p1.size() == p2.size());
    REQUIRE(!p1.empty());
    for (size_t i = 0; i < p1.size(); ++i) {
        CHECK(p1[i].z_w.data == p2[i].z_w.data);
        CHECK(p1[i].z_l.data == p2[i].z_l.data);
        CHECK(p1[i].proxy_w == p2[i].proxy_w);
    }
}

TEST_CASE("latent dpo loss: ln 2 at initialization, logistic limits, bounds") {
    auto cfg = dpo_cfg();
    auto bundle = tiny_bundle<double>(cfg, 4);
    PosteriorEncoder<double> p_theta(bundle.encoder);
    p_theta.zero_output_layer();

    // initialization identity: p_theta == prior exactly, for every x
    for (int i = 1; i < 5; ++i) {
        auto g = p_theta.encode({static_cast<int32_t>(i)}, {});
        CHECK(gaussian_kl_to_prior(g) == 0.0);
    }

    std::vector<LatentPair<double>> pairs;
    Rng rng(3);
    auto prior = LatentGaussian<double>::prior(4);
    for (int i = 0; i < 6; ++i) {
        LatentPair<double> p;
        p.x = {1, 2};
        p.z_w = reparam_sample(prior, rng);
        p.z_l = reparam_sample(prior, rng);
        p.proxy_w = 1.0;
        p.proxy_l = 0.0;
        pairs.push_back(p);
    }
    double loss = latent_dpo_loss_value(p_theta, pairs, 0.1);
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // monotone decreasing in margin; strictly positive everywhere
    Tape<double> t;
    auto softloss = [&](double margin, double beta) {
        Tensor<double> m({1});
        m.at(0) = margin;
        int mn = t.leaf(m, false);
        return t.value(t.softplus(t.scale(mn, -beta))).at(0);
    };
    double prev = softloss(-30.0, 0.1);
    for (double m : {-10.0, -1.0, 0.0, 1.0, 10.0, 30.0}) {
        double cur = softloss(m, 0.1);
        CHECK(cur < prev);
        CHECK(cur > 0.0);
        prev = cur;
    }
    CHECK(softloss(300.0, 0.1) < 1e-12);   // margin -> +inf: loss -> 0
    CHECK(softloss(-300.0, 0.1) > 29.0);   // margin -> -inf: loss -> inf (beta*|m|)
    CHECK(softloss(0.0, 0.7) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("latent dpo loss gradients pass finite differences") {
    auto cfg = dpo_cfg();
    auto bundle = tiny_bundle<double>(cfg, 4, 55);
    PosteriorEncoder<double> p_theta(bundle.encoder);  // non-zero projection
    std::vector<LatentPair<double>> pairs;
    Rng rng(9);
    auto prior = LatentGaussian<double>::prior(4);
    for (int i = 0; i < 4; ++i) {
        LatentPair<double> p;
        p.x = {1, 2, 3};
        p.z_w = reparam_sample(prior, rng);
        p.z_l = reparam_sample(prior, rng);
        p.proxy_w = 1.0;
        p.proxy_l = 0.0;
        pairs.push_back(p);
    }
    auto loss_fn = [&]() { return latent_dpo_loss_value(p_theta, pairs, 0.25); };
    auto compute = [&]() {
        Tape<double> t;
        BoundParams<double> bind(t);
        int loss = latent_dpo_loss_node(t, bind, p_theta, pairs, 0.25);
        for (auto& [n, p] : p_theta.store.all()) p->zero_grad();
        t.backward(loss);
        t.flush_param_grads();
    };
    std::vector<std::pair<std::string, Param<double>*>> subset{
        {"pool.w", &p_theta.store.get("pool.w")}, {"pool.b", &p_theta.store.get("pool.b")}};
    auto res = fd_check_params<double>(loss_fn, subset, compute, 24, 61);
    INFO(res.worst);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("latent_dpo_train: no-op on empty data; isolates the LM completely") {
    auto cfg = dpo_cfg();
    auto bundle = tiny_bundle<float>(cfg, 4, 77);
    LatentDpoConfig dc;
    dc.latent_samples = 6;
    dc.lr = 5e-3;

    // empty dataset: returned encoder is the prior-equivalent initialization
    TrainCostReport rep0;
    auto untouched = latent_dpo_train(bundle, {}, dc, &rep0);
    CHECK(rep0.steps == 0);
    auto g0 = untouched.encode({1, 2}, {});
    CHECK(gaussian_kl_to_prior(g0) == 0.0);

    // real run: the LM, adapter, and posterior encoder must stay bit-identical
    std::vector<PreferencePair> data;
    Rng rng(1);
    for (int i = 0; i < 12; ++i) {
        PreferencePair p;
        p.x = {static_cast<int32_t>(1 + rng.uniform_int(10)), 2};
        p.y_w = {3, 4, 0};
        p.y_l = {5, 6, 0};
        p.score_w = 0.6;
        p.score_l = -0.6;
        data.push_back(p);
    }
    uint64_t lm_hash = bundle.lm.store.content_hash();
    uint64_t ad_hash = bundle.adapter.store.content_hash();
    uint64_t q_hash = bundle.encoder.store.content_hash();
    TrainCostReport rep;
    auto p_theta = latent_dpo_train(bundle, data, dc, &rep);
    CHECK(rep.steps > 0);
    CHECK(rep.lm_grad_events == 0);
    CHECK(rep.lm_forward_passes == 0);
    CHECK(bundle.lm.store.content_hash() == lm_hash);
    CHECK(bundle.adapter.store.content_hash() == ad_hash);
    CHECK(bundle.encoder.store.content_hash() == q_hash);
    // margin starts at exactly 0, so the first logged loss is ln 2
    REQUIRE(!rep.losses.empty());
    CHECK(rep.losses.front() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    // after training the encoder has moved away from the prior
    auto g1 = p_theta.encode(data[0].x, {});
    CHECK(gaussian_kl_to_prior(g1) > 0.0);
}

TEST_CASE("full dpo baseline: first-step loss is ln 2 and instrumentation fires") {
    auto cfg = dpo_cfg();
    TransformerLM<float> sft(cfg, true);
    Rng hr(5);
    for (auto& v : sft.store.get("head.w").value.data) v = static_cast<float>(hr.normal() * 0.2);
    std::vector<PreferencePair> data;
    for (int i = 0; i < 4; ++i) {
        PreferencePair p;
        p.x = {1, 2};
        p.y_w = {3, 4, 0};
        p.y_l = {5, 6, 0};
        p.score_w = 1.0;
        p.score_l = -1.0;
        data.push_back(p);
    }
    BaselineConfig bc;
    bc.lr = 1e-4;
    TrainCostReport rep;
    auto policy = full_dpo_baseline(sft, data, bc, &rep);
    REQUIRE(!rep.losses.empty());
    CHECK(rep.losses.front() == doctest::Approx(std::log(2.0)).epsilon(1e-5));
    CHECK(rep.lm_grad_events > 0);
    CHECK(rep.grad_flops > 0);
    CHECK(policy.store.content_hash() != sft.store.content_hash());
}

TEST_CASE("personalized_generate: deterministic; prior encoder matches prior pipeline") {
    auto cfg = dpo_cfg();
    auto bundle = tiny_bundle<float>(cfg, 4);
    Rng ar(21);
    for (auto& v : bundle.adapter.store.get("w2").value.data)
        v = static_cast<float>(ar.normal() * 0.2);
    PosteriorEncoder<float> p_theta(bundle.encoder);  // zero projection == prior

    Rng r1(3), r2(3);
    auto y1 = personalized_generate(bundle, p_theta, {1, 2}, 1.0, 8, r1);
    auto y2 = personalized_generate(bundle, p_theta, {1, 2}, 1.0, 8, r2);
    CHECK(y1 == y2);

    // p_theta == prior: identical seeds give the same draws as prior sampling
    Rng r3(3);
    auto prior = LatentGaussian<float>::prior(4);
    Tensor<float> z = reparam_sample(prior, r3);
    PrefixKV<float> prefix = bundle.adapter.apply(z);
    auto y3 = bundle.lm.sample({1, 2}, &prefix, 1.0, 8, r3);
    CHECK(y1 == y3);
}

TEST_SUITE_END();
