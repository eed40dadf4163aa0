#include "lalign/configfile.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "lalign/common.hpp"

namespace lalign {

namespace {

struct RawValue {
    std::string text;
    int line = 0;
    bool used = false;
};

using Section = std::map<std::string, RawValue>;

struct Raw {
    std::string origin;
    std::map<std::string, Section> sections;

    [[noreturn]] void fail(int line, const std::string& msg) const {
        throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
    }
};

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

Raw tokenize(const std::string& text, const std::string& origin) {
    Raw raw;
    raw.origin = origin;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']') raw.fail(lineno, "unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) raw.fail(lineno, "empty section name");
            raw.sections[section];  // created even if empty
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos) raw.fail(lineno, "expected `key = value`");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) raw.fail(lineno, "empty key");
        if (val.empty()) raw.fail(lineno, "missing value for key `" + key + "`");
        if (section.empty()) raw.fail(lineno, "key `" + key + "` outside any [section]");
        auto [it, inserted] = raw.sections[section].emplace(key, RawValue{val, lineno, false});
        if (!inserted) raw.fail(lineno, "duplicate key `" + key + "` in [" + section + "]");
    }
    return raw;
}

class Reader {
public:
    Reader(Raw& raw, const std::string& section) : raw_(raw), name_(section) {
        auto it = raw.sections.find(section);
        sec_ = it == raw.sections.end() ? nullptr : &it->second;
    }

    template <typename T, typename Parse>
    void read(const std::string& key, T& out, Parse parse) {
        if (!sec_) return;
        auto it = sec_->find(key);
        if (it == sec_->end()) return;
        it->second.used = true;
        parse(it->second);
        (void)out;
    }

    void get_int(const std::string& key, int& out) {
        read(key, out, [&](RawValue& v) { out = static_cast<int>(parse_int(v)); });
    }
    void get_u64(const std::string& key, uint64_t& out) {
        read(key, out, [&](RawValue& v) {
            long long x = parse_int(v);
            if (x < 0) raw_.fail(v.line, "key `" + key + "` must be non-negative");
            out = static_cast<uint64_t>(x);
        });
    }
    void get_double(const std::string& key, double& out) {
        read(key, out, [&](RawValue& v) {
            try {
                size_t pos = 0;
                out = std::stod(v.text, &pos);
                if (pos != v.text.size()) throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                raw_.fail(v.line, "key `" + key + "`: not a number: " + v.text);
            }
        });
    }
    void get_bool(const std::string& key, bool& out) {
        read(key, out, [&](RawValue& v) {
            if (v.text == "true") out = true;
            else if (v.text == "false") out = false;
            else raw_.fail(v.line, "key `" + key + "`: expected true or false");
        });
    }
    void get_string(const std::string& key, std::string& out) {
        read(key, out, [&](RawValue& v) {
            std::string t = v.text;
            if (t.size() >= 2 && t.front() == '"' && t.back() == '"')
                t = t.substr(1, t.size() - 2);
            out = t;
        });
    }

private:
    long long parse_int(RawValue& v) {
        long long x = 0;
        auto [p, ec] = std::from_chars(v.text.data(), v.text.data() + v.text.size(), x);
        if (ec != std::errc{} || p != v.text.data() + v.text.size())
            raw_.fail(v.line, "not an integer: " + v.text);
        return x;
    }

    Raw& raw_;
    std::string name_;
    Section* sec_;
};

void check_all_used(const Raw& raw) {
    static const std::map<std::string, bool> known_sections{
        {"run", true},     {"task", true}, {"model", true},   {"sft", true},
        {"clap", true},    {"dpo", true},  {"baseline", true}, {"eval", true},
        {"ablate", true}};
    for (const auto& [sec, kv] : raw.sections) {
        if (!known_sections.count(sec))
            throw ConfigError(raw.origin + ": unknown section [" + sec + "]");
        for (const auto& [key, v] : kv) {
            if (!v.used)
                throw ConfigError(raw.origin + ":" + std::to_string(v.line) + ": unknown key `" +
                                  key + "` in [" + sec + "]");
        }
    }
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& text, const std::string& origin) {
    Raw raw = tokenize(text, origin);
    PipelineConfig cfg;

    {
        Reader r(raw, "run");
        r.get_string("out_dir", cfg.out_dir);
    }
    {
        Reader r(raw, "task");
        r.get_int("n_train_prompts", cfg.task.n_train_prompts);
        r.get_int("n_heldout", cfg.task.n_heldout);
        r.get_int("n_eval_prompts", cfg.task.n_eval_prompts);
        r.get_int("prompt_len_min", cfg.task.prompt_len_min);
        r.get_int("prompt_len_max", cfg.task.prompt_len_max);
        r.get_int("resp_len_min", cfg.task.resp_len_min);
        r.get_int("resp_len_max", cfg.task.resp_len_max);
        r.get_int("responses_per_train_prompt", cfg.task.responses_per_train_prompt);
        r.get_double("attr_token_prob", cfg.task.attr_token_prob);
        r.get_double("polarity", cfg.task.polarity);
        r.get_double("neutral_prob", cfg.task.neutral_prob);
        r.get_double("target_mean_score", cfg.task.target_mean_score);
        r.get_u64("seed", cfg.task.seed);
    }
    {
        Reader r(raw, "model");
        r.get_int("d_model", cfg.model.d_model);
        r.get_int("n_layers", cfg.model.n_layers);
        r.get_int("n_heads", cfg.model.n_heads);
        r.get_int("d_ff", cfg.model.d_ff);
        r.get_int("max_seq_len", cfg.model.max_seq_len);
        r.get_int("prefix_len", cfg.model.prefix_len);
        r.get_u64("seed", cfg.model.seed);
    }
    {
        Reader r(raw, "sft");
        r.get_int("steps", cfg.sft.steps);
        r.get_int("batch_size", cfg.sft.batch_size);
        r.get_double("lr", cfg.sft.lr);
        r.get_double("warmup_frac", cfg.sft.warmup_frac);
        r.get_u64("seed", cfg.sft.seed);
    }
    {
        Reader r(raw, "clap");
        r.get_int("d_z", cfg.clap.d_z);
        r.get_int("k", cfg.clap.K);
        r.get_int("responses_per_prompt", cfg.clap.responses_per_prompt);
        r.get_int("epochs_frozen", cfg.clap.epochs_frozen);
        r.get_int("epochs_unfrozen", cfg.clap.epochs_unfrozen);
        r.get_int("batches_per_prompt", cfg.clap.batches_per_prompt);
        r.get_double("kld_weight", cfg.clap.kld_weight);
        r.get_double("kld_warmup_frac", cfg.clap.kld_warmup_frac);
        r.get_double("lr", cfg.clap.lr);
        r.get_double("lr_lm", cfg.clap.lr_lm);
        r.get_int("adapter_hidden", cfg.clap.adapter_hidden);
        r.get_double("sample_temperature", cfg.clap.sample_temperature);
        r.get_int("sample_max_new", cfg.clap.sample_max_new);
        r.get_bool("contrastive", cfg.clap.flags.contrastive);
        r.get_bool("dg_kld", cfg.clap.flags.dg_kld);
        r.get_u64("seed", cfg.clap.seed);
    }
    {
        Reader r(raw, "dpo");
        r.get_double("beta", cfg.dpo.beta);
        r.get_int("latent_samples", cfg.dpo.latent_samples);
        std::string pairing = "top_bottom";
        r.get_string("pairing", pairing);
        if (pairing == "top_bottom") cfg.dpo.pairing = PairingStrategy::top_bottom;
        else if (pairing == "all_pairs") cfg.dpo.pairing = PairingStrategy::all_pairs;
        else throw ConfigError(origin + ": [dpo] pairing must be top_bottom or all_pairs");
        r.get_int("epochs", cfg.dpo.epochs);
        r.get_double("lr", cfg.dpo.lr);
        r.get_int("attribute", cfg.dpo.attribute);
        r.get_int("direction", cfg.dpo.direction);
        r.get_double("pair_margin", cfg.dpo.pair_margin);
        r.get_int("pairs_per_prompt", cfg.dpo.pairs_per_prompt);
        r.get_u64("seed", cfg.dpo.seed);
    }
    {
        Reader r(raw, "baseline");
        r.get_double("beta", cfg.baseline.beta);
        r.get_double("lr", cfg.baseline.lr);
        r.get_int("epochs", cfg.baseline.epochs);
        r.get_u64("seed", cfg.baseline.seed);
    }
    {
        Reader r(raw, "eval");
        r.get_int("n_prompts", cfg.eval.n_prompts);
        r.get_double("temperature", cfg.eval.temperature);
        r.get_int("max_new", cfg.eval.max_new);
        r.get_u64("seed", cfg.eval.seed);
    }
    {
        Reader r(raw, "ablate");
        r.get_int("n_prompts", cfg.ablate.n_prompts);
        r.get_u64("seed", cfg.ablate.seed);
    }
    check_all_used(raw);
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_pipeline_config(ss.str(), path);
}

}  // namespace lalign
