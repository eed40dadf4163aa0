#include "lalign/task.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lalign {

namespace {
constexpr int kPromptSymbols = 8;
constexpr int kClassTokens = 4;  // per class, per attribute
constexpr int kNeutralTokens = 8;
}  // namespace

SyntheticTask::SyntheticTask(const TaskConfig& cfg) : cfg_(cfg) {
    // layout: [eos][prompt][a0.A][a0.B][a1.A][a1.B][neutral]
    int32_t cursor = 1;
    prompt_begin_ = cursor;
    cursor += kPromptSymbols;
    prompt_end_ = cursor;
    for (int a = 0; a < 2; ++a) {
        AttributeOracle o;
        o.attribute_id = a;
        o.class_a_begin = cursor;
        cursor += kClassTokens;
        o.class_a_end = cursor;
        o.class_b_begin = cursor;
        cursor += kClassTokens;
        o.class_b_end = cursor;
        oracles_.push_back(o);
    }
    neutral_begin_ = cursor;
    cursor += kNeutralTokens;
    neutral_end_ = cursor;
    vocab_size_ = cursor;
    if (vocab_size_ > 64) throw ConfigError("synthetic task: vocabulary exceeds 64 symbols");
    if (cfg_.prompt_len_min < 1 || cfg_.prompt_len_max < cfg_.prompt_len_min)
        throw ConfigError("synthetic task: invalid prompt length range");
    if (cfg_.resp_len_min < 1 || cfg_.resp_len_max < cfg_.resp_len_min)
        throw ConfigError("synthetic task: invalid response length range");
    if (cfg_.attr_token_prob <= 0 || cfg_.attr_token_prob * 2 >= 1.0)
        throw ConfigError("synthetic task: attr_token_prob must be in (0, 0.5)");
}

const AttributeOracle& SyntheticTask::oracle(int attribute) const {
    if (attribute < 0 || attribute >= 2)
        throw InputError("synthetic task: attribute id out of range");
    return oracles_[static_cast<size_t>(attribute)];
}

Tokens SyntheticTask::sample_prompt(Rng& rng) const {
    int len = cfg_.prompt_len_min +
              static_cast<int>(rng.uniform_int(cfg_.prompt_len_max - cfg_.prompt_len_min + 1));
    Tokens x(static_cast<size_t>(len));
    for (auto& t : x)
        t = prompt_begin_ + static_cast<int32_t>(rng.uniform_int(prompt_end_ - prompt_begin_));
    return x;
}

std::vector<double> SyntheticTask::sample_polarities(Rng& rng) const {
    // Per attribute: neutral with prob neutral_prob, otherwise +/-polarity.
    // The +/- split is tilted so the corpus mean matches target_mean_score.
    double reachable = cfg_.attr_token_prob * (1.0 - cfg_.neutral_prob) * cfg_.polarity;
    double tilt = 0.0;
    if (reachable > 0) tilt = std::clamp(cfg_.target_mean_score / (2.0 * reachable), -0.5, 0.5);
    std::vector<double> pol(2);
    for (auto& p : pol) {
        if (rng.uniform() < cfg_.neutral_prob) {
            p = 0.0;
        } else {
            p = (rng.uniform() < 0.5 + tilt) ? cfg_.polarity : -cfg_.polarity;
        }
    }
    return pol;
}

Tokens SyntheticTask::sample_response(const std::vector<double>& polarity, Rng& rng) const {
    if (polarity.size() != 2) throw InputError("synthetic task: need one polarity per attribute");
    int len = cfg_.resp_len_min +
              static_cast<int>(rng.uniform_int(cfg_.resp_len_max - cfg_.resp_len_min + 1));
    Tokens y;
    y.reserve(static_cast<size_t>(len) + 1);
    for (int i = 0; i < len; ++i) {
        double u = rng.uniform();
        if (u < 2 * cfg_.attr_token_prob) {
            int a = u < cfg_.attr_token_prob ? 0 : 1;
            const auto& o = oracles_[static_cast<size_t>(a)];
            bool pick_a = rng.uniform() < (1.0 + polarity[static_cast<size_t>(a)]) / 2.0;
            int32_t begin = pick_a ? o.class_a_begin : o.class_b_begin;
            y.push_back(begin + static_cast<int32_t>(rng.uniform_int(kClassTokens)));
        } else {
            y.push_back(neutral_begin_ +
                        static_cast<int32_t>(rng.uniform_int(neutral_end_ - neutral_begin_)));
        }
    }
    y.push_back(kEosToken);
    return y;
}

std::vector<double> SyntheticTask::score_all(const Tokens& y) const {
    std::vector<double> out;
    out.reserve(oracles_.size());
    for (const auto& o : oracles_) out.push_back(o.score(y));
    return out;
}

CorpusBundle SyntheticTask::generate_corpus() const {
    CorpusBundle out;
    Rng root(cfg_.seed);
    Rng train_rng = root.fork(1);
    Rng held_rng = root.fork(2);
    Rng eval_rng = root.fork(3);

    auto annotate = [&](Tokens x, Tokens y) {
        AnnotatedXY a;
        a.scores = score_all(y);
        a.xy = XY{std::move(x), std::move(y)};
        return a;
    };

    for (int i = 0; i < cfg_.n_train_prompts; ++i) {
        Tokens x = sample_prompt(train_rng);
        out.train_prompts.push_back(x);
        for (int r = 0; r < cfg_.responses_per_train_prompt; ++r) {
            auto pol = sample_polarities(train_rng);
            out.train.push_back(annotate(x, sample_response(pol, train_rng)));
        }
    }
    for (int i = 0; i < cfg_.n_heldout; ++i) {
        Tokens x = sample_prompt(held_rng);
        auto pol = sample_polarities(held_rng);
        out.heldout.push_back(annotate(std::move(x), sample_response(pol, held_rng)));
    }
    for (int i = 0; i < cfg_.n_eval_prompts; ++i) {
        Tokens x = sample_prompt(eval_rng);
        out.eval_prompts.push_back(x);
        auto pol = sample_polarities(eval_rng);
        out.eval_refs.push_back(annotate(std::move(x), sample_response(pol, eval_rng)));
    }
    return out;
}

PreferenceDataset build_preference_pairs(const std::vector<Tokens>& prompts,
                                         const std::vector<std::vector<Tokens>>& responses,
                                         const AttributeOracle& oracle, int direction,
                                         double margin, int pairs_per_prompt) {
    if (prompts.size() != responses.size())
        throw InputError("build_preference_pairs: prompt/response count mismatch");
    if (direction != 1 && direction != -1)
        throw InputError("build_preference_pairs: direction must be +1 or -1");
    PreferenceDataset out;
    for (size_t pi = 0; pi < prompts.size(); ++pi) {
        const auto& rs = responses[pi];
        if (rs.size() < 2)
            throw InputError("build_preference_pairs: need at least 2 responses per prompt");
        std::vector<std::pair<double, size_t>> scored;
        scored.reserve(rs.size());
        for (size_t i = 0; i < rs.size(); ++i)
            scored.emplace_back(direction * oracle.score(rs[i]), i);
        std::stable_sort(scored.begin(), scored.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        int emitted = 0;
        size_t n = scored.size();
        for (int k = 0; k < pairs_per_prompt && 2 * static_cast<size_t>(k) + 1 < n; ++k) {
            const auto& best = scored[static_cast<size_t>(k)];
            const auto& worst = scored[n - 1 - static_cast<size_t>(k)];
            if (best.first - worst.first < margin) break;  // sorted: later pairs only narrower
            PreferencePair pair;
            pair.x = prompts[pi];
            pair.y_w = rs[best.second];
            pair.y_l = rs[worst.second];
            pair.score_w = best.first;
            pair.score_l = worst.first;
            pair.validate();
            out.pairs.push_back(std::move(pair));
            ++emitted;
        }
        if (emitted == 0) out.skipped_prompts++;
    }
    return out;
}

}  // namespace lalign
