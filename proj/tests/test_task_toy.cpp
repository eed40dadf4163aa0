#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lalign/task.hpp"
#include "lalign/toy_cvae.hpp"

using namespace lalign;

TEST_SUITE_BEGIN("task_toy");

TEST_CASE("oracle: deterministic, bounded, all-class-A scores 1.0") {
    TaskConfig tc;
    SyntheticTask task(tc);
    const auto& o = task.oracle(0);
    Tokens all_a;
    for (int i = 0; i < 6; ++i) all_a.push_back(o.class_a_begin);
    CHECK(o.score(all_a) == 1.0);
    Tokens with_eos = all_a;
    with_eos.push_back(kEosToken);  // trailing eos is not content
    CHECK(o.score(with_eos) == 1.0);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto pol = task.sample_polarities(rng);
        Tokens y = task.sample_response(pol, rng);
        double s1 = o.score(y);
        double s2 = o.score(y);
        CHECK(s1 == s2);
        CHECK(s1 >= -1.0);
        CHECK(s1 <= 1.0);
    }
    CHECK(o.score({kEosToken}) == 0.0);
}

TEST_CASE("corpus generation is deterministic and covers both signs") {
    TaskConfig tc;
    tc.n_train_prompts = 60;
    tc.n_heldout = 20;
    tc.n_eval_prompts = 20;
    SyntheticTask task(tc);
    auto c1 = task.generate_corpus();
    auto c2 = task.generate_corpus();
    REQUIRE(c1.train.size() == c2.train.size());
    for (size_t i = 0; i < c1.train.size(); ++i) {
        CHECK(c1.train[i].xy.x == c2.train[i].xy.x);
        CHECK(c1.train[i].xy.y == c2.train[i].xy.y);
        CHECK(c1.train[i].scores == c2.train[i].scores);
    }
    for (int a = 0; a < task.n_attributes(); ++a) {
        int pos = 0, neg = 0;
        for (const auto& ex : c1.train) {
            if (ex.scores[static_cast<size_t>(a)] > 0) ++pos;
            if (ex.scores[static_cast<size_t>(a)] < 0) ++neg;
        }
        CHECK(pos > 0);
        CHECK(neg > 0);
    }
}

TEST_CASE("corpus mean attribute score tracks the configured target") {
    for (double target : {0.0, 0.08}) {
        TaskConfig tc;
        tc.n_train_prompts = 700;
        tc.responses_per_train_prompt = 2;
        tc.target_mean_score = target;
        tc.seed = 99;
        SyntheticTask task(tc);
        auto c = task.generate_corpus();
        double mean = 0;
        for (const auto& ex : c.train) mean += ex.scores[0];
        mean /= static_cast<double>(c.train.size());
        CHECK(std::abs(mean - target) < 0.05);
    }
}

TEST_CASE("token ids stay inside the declared vocabulary") {
    TaskConfig tc;
    SyntheticTask task(tc);
    CHECK(task.vocab_size() <= 64);
    auto c = task.generate_corpus();
    for (const auto& ex : c.train) {
        check_tokens(ex.xy.x, task.vocab_size(), "x");
        check_tokens(ex.xy.y, task.vocab_size(), "y");
    }
}

TEST_CASE("preference pairs: ordering, margins, degenerate cases") {
    TaskConfig tc;
    SyntheticTask task(tc);
    const auto& o = task.oracle(0);
    Tokens hi, lo;
    for (int i = 0; i < 5; ++i) hi.push_back(o.class_a_begin);
    for (int i = 0; i < 5; ++i) lo.push_back(o.class_b_begin);
    Tokens x{1, 2};

    // scores [0.9-ish, -0.9-ish] -> exactly one pair, in that order
    auto d1 = build_preference_pairs({x}, {{lo, hi}}, o, 1, 0.3, 2);
    REQUIRE(d1.pairs.size() == 1);
    CHECK(d1.pairs[0].y_w == hi);
    CHECK(d1.pairs[0].y_l == lo);
    CHECK(d1.pairs[0].score_w > d1.pairs[0].score_l);
    CHECK(d1.skipped_prompts == 0);

    // direction -1 flips which response wins
    auto d1r = build_preference_pairs({x}, {{lo, hi}}, o, -1, 0.3, 2);
    REQUIRE(d1r.pairs.size() == 1);
    CHECK(d1r.pairs[0].y_w == lo);
    CHECK(d1r.pairs[0].score_w > d1r.pairs[0].score_l);

    // all responses identical -> zero pairs, skip counted
    auto d2 = build_preference_pairs({x}, {{hi, hi, hi}}, o, 1, 0.3, 2);
    CHECK(d2.pairs.empty());
    CHECK(d2.skipped_prompts == 1);

    // pair count = pairs_per_prompt x non-skipped prompts on rich response sets
    std::vector<Tokens> rich;
    Rng rng(3);
    for (int i = 0; i < 16; ++i) {
        auto pol = task.sample_polarities(rng);
        rich.push_back(task.sample_response(pol, rng));
    }
    std::vector<std::vector<Tokens>> responses{rich, {hi, hi}, rich};
    auto d3 = build_preference_pairs({x, x, x}, responses, o, 1, 0.3, 2);
    CHECK(d3.skipped_prompts == 1);
    CHECK(d3.pairs.size() == 2 * (3 - static_cast<size_t>(d3.skipped_prompts)));
}

// ---- enumerable toy CVAE ----

TEST_CASE("toy: conditional distributions are normalized to 1e-10") {
    toy::ToyCvae cv{toy::ToyCvaeConfig{}};
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
        int g = cv.sample_grid_prior(rng);
        CHECK(std::abs(cv.conditional_total_mass(0, cv.grid_point(g)) - 1.0) < 1e-10);
    }
    // prior and posterior masses normalized
    double total = 0;
    for (int g = 0; g < cv.grid_size(); ++g) total += cv.prior_mass(g);
    CHECK(std::abs(total - 1.0) < 1e-10);
    Tokens y = cv.sample_marginal(0, rng);
    auto post = cv.exact_posterior(0, y);
    CHECK(std::abs(std::accumulate(post.begin(), post.end(), 0.0) - 1.0) < 1e-10);
}

TEST_CASE("toy: importance-weight identity holds exactly on the grid") {
    // q(z|x,y)/p(z|x) == p(y|x,z)/p(y|x) when q is the exact posterior
    toy::ToyCvae cv{toy::ToyCvaeConfig{}};
    Rng rng(7);
    Tokens y = cv.sample_marginal(1, rng);
    auto post = cv.exact_posterior(1, y);
    double marg = cv.marginal_prob(1, y);
    for (int g = 0; g < cv.grid_size(); g += 157) {
        double lhs = post[static_cast<size_t>(g)] / cv.prior_mass(g);
        double rhs = std::exp(cv.log_p_y_given_xz(1, y, cv.grid_point(g))) / marg;
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-8));
    }
}

TEST_CASE("toy: flat likelihood makes the posterior equal the prior") {
    toy::ToyCvaeConfig cfg;
    cfg.signal = 0.0;
    cfg.noise = 0.0;
    toy::ToyCvae cv{cfg};
    Rng rng(2);
    Tokens y = cv.sample_marginal(0, rng);
    auto post = cv.exact_posterior(0, y);
    for (int g = 0; g < cv.grid_size(); g += 283)
        CHECK(post[static_cast<size_t>(g)] ==
              doctest::Approx(cv.prior_mass(g)).epsilon(1e-10));
    // z-independent conditional: latent reward equals the prior-expected reward
    auto reward = [&](const Tokens& yy) { return cv.attribute_score(yy); };
    double r0 = cv.exact_latent_reward(0, cv.grid_point(0), reward);
    double r1 = cv.exact_latent_reward(0, cv.grid_point(cv.grid_size() / 2), reward);
    CHECK(r0 == doctest::Approx(r1).epsilon(1e-10));
}

TEST_CASE("toy: constant oracle yields constant latent reward") {
    toy::ToyCvae cv{toy::ToyCvaeConfig{}};
    auto c_reward = [](const Tokens&) { return 3.25; };
    Rng rng(3);
    for (int i = 0; i < 3; ++i) {
        int g = cv.sample_grid_prior(rng);
        CHECK(cv.exact_latent_reward(0, cv.grid_point(g), c_reward) ==
              doctest::Approx(3.25).epsilon(1e-10));
    }
}

TEST_CASE("toy: single-token vocab degenerates to marginal 1") {
    toy::ToyCvaeConfig cfg;
    cfg.vocab = 1;
    cfg.resp_len = 3;
    toy::ToyCvae cv{cfg};
    Tokens y{0, 0, 0};
    CHECK(cv.marginal_prob(0, y) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("toy: enumeration guard refuses oversized spaces") {
    toy::ToyCvaeConfig cfg;
    cfg.vocab = 8;
    cfg.resp_len = 6;  // 8^6 = 262144, fine
    CHECK_NOTHROW(toy::ToyCvae{cfg});
    cfg.resp_len = 7;
    CHECK_THROWS(toy::ToyCvae{cfg});
}

TEST_CASE("toy: importance_weighted_mean basics") {
    // all rewards equal -> that constant, for any weights
    CHECK(toy::importance_weighted_mean({-3.0, 2.0, 0.0}, {0.7, 0.7, 0.7}) ==
          doctest::Approx(0.7).epsilon(1e-12));
    // dominant weight -> dominant reward
    CHECK(toy::importance_weighted_mean({20.0, 0.0}, {1.0, -1.0}) ==
          doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS(toy::importance_weighted_mean({std::nan("")}, {1.0}));
    CHECK_THROWS(toy::importance_weighted_mean({}, {}));
}

TEST_CASE("toy: reweighted estimate converges to the exact latent reward") {
    // reduced version of the estimator-oracle acceptance check
    toy::ToyCvae cv{toy::ToyCvaeConfig{}};
    auto reward = [&](const Tokens& y) { return 2.0 + cv.attribute_score(y); };
    Rng rng(11);
    const int x = 0;
    const int n_z = 30, K_max = 32;
    std::vector<double> err2, err8, err32;
    for (int zi = 0; zi < n_z; ++zi) {
        int zg = cv.sample_grid_prior(rng);
        double exact = cv.exact_latent_reward(x, cv.grid_point(zg), reward);
        std::vector<double> log_w, r;
        for (int k = 0; k < K_max; ++k) {
            Tokens y = cv.sample_marginal(x, rng);
            auto post = cv.exact_posterior(x, y);
            log_w.push_back(std::log(post[static_cast<size_t>(zg)]) - cv.log_prior_mass(zg));
            r.push_back(reward(y));
        }
        auto rel = [&](int K) {
            std::vector<double> lw(log_w.begin(), log_w.begin() + K);
            std::vector<double> rr(r.begin(), r.begin() + K);
            return std::abs(toy::importance_weighted_mean(lw, rr) - exact) / std::abs(exact);
        };
        err2.push_back(rel(2));
        err8.push_back(rel(8));
        err32.push_back(rel(32));
    }
    auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    CHECK(mean(err32) < 0.05);
    CHECK(mean(err8) >= mean(err32));
    CHECK(mean(err2) >= mean(err8));
}

TEST_CASE("toy: density-ratio proxy ranking agrees with exact latent reward") {
    toy::ToyCvae cv{toy::ToyCvaeConfig{}};
    auto reward = [&](const Tokens& y) { return cv.attribute_score(y); };
    Rng rng(13);
    const int x = 0;
    // draw a clearly ordered preference pair from the marginal
    Tokens y_w, y_l;
    double best = -2, worst = 2;
    for (int i = 0; i < 40; ++i) {
        Tokens y = cv.sample_marginal(x, rng);
        double s = cv.attribute_score(y);
        if (s > best) {
            best = s;
            y_w = y;
        }
        if (s < worst) {
            worst = s;
            y_l = y;
        }
    }
    REQUIRE(best > worst);
    auto post_w = cv.exact_posterior(x, y_w);
    auto post_l = cv.exact_posterior(x, y_l);

    // memoized exact rewards per grid point
    std::vector<double> exact(static_cast<size_t>(cv.grid_size()),
                              std::numeric_limits<double>::quiet_NaN());
    auto exact_at = [&](int g) {
        if (std::isnan(exact[static_cast<size_t>(g)]))
            exact[static_cast<size_t>(g)] = cv.exact_latent_reward(x, cv.grid_point(g), reward);
        return exact[static_cast<size_t>(g)];
    };
    int agree = 0, total = 0;
    for (int i = 0; i < 1500; ++i) {
        int ga = cv.sample_grid_prior(rng);
        int gb = cv.sample_grid_prior(rng);
        if (ga == gb) continue;
        double proxy_a = std::log(post_w[static_cast<size_t>(ga)]) -
                         std::log(post_l[static_cast<size_t>(ga)]);
        double proxy_b = std::log(post_w[static_cast<size_t>(gb)]) -
                         std::log(post_l[static_cast<size_t>(gb)]);
        double ea = exact_at(ga), eb = exact_at(gb);
        if (proxy_a == proxy_b || ea == eb) continue;
        ++total;
        if ((proxy_a > proxy_b) == (ea > eb)) ++agree;
    }
    REQUIRE(total > 1000);
    CHECK(static_cast<double>(agree) / total >= 0.95);
}

TEST_SUITE_END();
