#pragma once

#include <string>
#include <vector>

#include "lalign/common.hpp"
#include "lalign/config.hpp"
#include "lalign/rng.hpp"

namespace lalign {

// Deterministic token-count reward: (class-A count - class-B count) / |y|,
// computed over content tokens (a trailing eos is not counted). Bounded in
// [-1, 1].
struct AttributeOracle {
    int attribute_id = 0;
    int32_t class_a_begin = 0, class_a_end = 0;  // [begin, end)
    int32_t class_b_begin = 0, class_b_end = 0;

    double score(const Tokens& y) const {
        int64_t n = 0, a = 0, b = 0;
        for (int32_t t : y) {
            if (t == kEosToken) continue;
            ++n;
            if (t >= class_a_begin && t < class_a_end) ++a;
            else if (t >= class_b_begin && t < class_b_end) ++b;
        }
        if (n == 0) return 0.0;
        return static_cast<double>(a - b) / static_cast<double>(n);
    }
};

struct AnnotatedXY {
    XY xy;
    std::vector<double> scores;  // one per attribute
};

struct CorpusBundle {
    std::vector<AnnotatedXY> train;
    std::vector<AnnotatedXY> heldout;
    std::vector<Tokens> train_prompts;   // unique prompts behind `train`
    std::vector<Tokens> eval_prompts;
    std::vector<AnnotatedXY> eval_refs;  // one golden reference per eval prompt
};

// Synthetic controllable-generation environment. The vocabulary is laid out
// as: eos, prompt symbols, two attribute token groups (each split into an A
// and a B class), and neutral fillers. Every response carries one latent
// polarity per attribute which biases its token mix, so a corpus contains a
// mixture of styles for the same prompt distribution.
class SyntheticTask {
public:
    explicit SyntheticTask(const TaskConfig& cfg);

    const TaskConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }
    int n_attributes() const { return 2; }
    const std::vector<AttributeOracle>& oracles() const { return oracles_; }
    const AttributeOracle& oracle(int attribute) const;

    Tokens sample_prompt(Rng& rng) const;
    // polarity: one value in [-1, 1] per attribute
    Tokens sample_response(const std::vector<double>& polarity, Rng& rng) const;
    std::vector<double> sample_polarities(Rng& rng) const;

    CorpusBundle generate_corpus() const;  // deterministic from cfg.seed

    std::vector<double> score_all(const Tokens& y) const;

private:
    TaskConfig cfg_;
    int vocab_size_ = 0;
    int32_t prompt_begin_ = 0, prompt_end_ = 0;
    int32_t neutral_begin_ = 0, neutral_end_ = 0;
    std::vector<AttributeOracle> oracles_;
};

struct PreferencePair {
    Tokens x;
    Tokens y_w;
    Tokens y_l;
    double score_w = 0;  // oracle reward of y_w under the target preference
    double score_l = 0;

    void validate() const {
        if (!(score_w > score_l))
            throw InputError("preference pair: score_w must be strictly greater than score_l");
    }
};

struct PreferenceDataset {
    std::vector<PreferencePair> pairs;
    int skipped_prompts = 0;  // prompts with no pair satisfying the margin
};

// Per prompt, pairs responses with an oracle-score gap of at least `margin`
// (widest gaps first), emitting up to `pairs_per_prompt` pairs. `direction`
// +1 prefers high scores, -1 low scores; stored scores are on the preferred
// scale, so score_w > score_l always holds.
PreferenceDataset build_preference_pairs(const std::vector<Tokens>& prompts,
                                         const std::vector<std::vector<Tokens>>& responses,
                                         const AttributeOracle& oracle, int direction,
                                         double margin, int pairs_per_prompt);

}  // namespace lalign
