#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lalign {

struct ModelConfig {
    int vocab_size = 33;
    int d_model = 48;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 128;
    int max_seq_len = 48;
    int prefix_len = 4;
    uint64_t seed = 1;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
            max_seq_len < 1)
            throw std::invalid_argument("model config: all counts must be >= 1");
        if (prefix_len < 0) throw std::invalid_argument("model config: prefix_len must be >= 0");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    }
};

struct SftConfig {
    int steps = 2200;
    int batch_size = 8;
    double lr = 3e-3;
    double warmup_frac = 0.1;
    uint64_t seed = 11;
};

struct ObjectiveFlags {
    bool contrastive = true;
    bool dg_kld = true;
};

struct ClapConfig {
    int d_z = 32;
    int K = 4;                           // responses per prompt in each batch
    int responses_per_prompt = 32;       // sampled once, up front
    int epochs_frozen = 1;
    int epochs_unfrozen = 1;
    int batches_per_prompt = 2;          // K-subsets drawn per prompt per epoch
    double kld_weight = 1.0;
    double kld_warmup_frac = 0.1;
    double lr = 1e-3;
    double lr_lm = 3e-4;                 // LM learning rate in the unfrozen epochs
    int adapter_hidden = 64;
    double sample_temperature = 1.0;
    int sample_max_new = 20;
    ObjectiveFlags flags;
    uint64_t seed = 22;

    void validate() const {
        // K = 1 is the degenerate autoencoding mode (contrastive term is 0);
        // it is allowed so the edge case stays testable.
        if (K < 1) throw std::invalid_argument("clap config: K must be >= 1");
        if (K > responses_per_prompt)
            throw std::invalid_argument("clap config: K must be <= responses_per_prompt");
        if (d_z < 1) throw std::invalid_argument("clap config: d_z must be >= 1");
    }
};

enum class PairingStrategy { top_bottom, all_pairs };

struct LatentDpoConfig {
    double beta = 0.1;
    int latent_samples = 16;  // N in the latent-pair composition
    PairingStrategy pairing = PairingStrategy::top_bottom;
    int epochs = 1;
    double lr = 1e-2;
    int attribute = 0;   // oracle attribute targeted by the preference
    int direction = 1;   // +1 prefers higher oracle scores, -1 lower
    double pair_margin = 0.3;
    int pairs_per_prompt = 2;
    uint64_t seed = 33;

    void validate() const {
        if (beta <= 0) throw std::invalid_argument("dpo config: beta must be positive");
        if (latent_samples < 2)
            throw std::invalid_argument("dpo config: latent_samples must be >= 2");
        if (direction != 1 && direction != -1)
            throw std::invalid_argument("dpo config: direction must be +1 or -1");
    }
};

struct BaselineConfig {
    double beta = 0.1;
    double lr = 1e-4;
    int epochs = 1;
    uint64_t seed = 44;
};

struct TaskConfig {
    int n_train_prompts = 320;
    int n_heldout = 160;
    int n_eval_prompts = 160;
    int prompt_len_min = 4;
    int prompt_len_max = 6;
    int resp_len_min = 8;
    int resp_len_max = 14;
    int responses_per_train_prompt = 3;  // corpus (x, y) pairs per prompt
    double attr_token_prob = 0.35;       // per-token probability of each attribute class
    double polarity = 0.85;              // strength of the per-response attribute bias
    double neutral_prob = 0.30;          // probability that a response is attribute-neutral
    double target_mean_score = 0.0;
    uint64_t seed = 7;
};

struct EvalConfig {
    int n_prompts = 160;
    double temperature = 1.0;
    int max_new = 20;
    uint64_t seed = 55;
};

struct AblateConfig {
    // Reduced scale so the 4-cell grid stays cheap; identical settings are
    // used for every cell.
    int n_prompts = 96;
    uint64_t seed = 66;
};

struct PipelineConfig {
    std::string out_dir = "runs/default";
    TaskConfig task;
    ModelConfig model;
    SftConfig sft;
    ClapConfig clap;
    LatentDpoConfig dpo;
    BaselineConfig baseline;
    EvalConfig eval;
    AblateConfig ablate;

    void validate() const {
        model.validate();
        clap.validate();
        dpo.validate();
        if (out_dir.empty()) throw std::invalid_argument("config: out_dir must be set");
    }
};

}  // namespace lalign
