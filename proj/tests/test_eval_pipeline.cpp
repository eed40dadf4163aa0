#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lalign/checkpoint.hpp"
#include "lalign/configfile.hpp"
#include "lalign/eval.hpp"
#include "lalign/jsonl.hpp"
#include "lalign/lm.hpp"
#include "lalign/pipeline.hpp"

using namespace lalign;
namespace fs = std::filesystem;

namespace {

PipelineConfig mini_config(const std::string& out_dir) {
    PipelineConfig cfg;
    cfg.out_dir = out_dir;
    cfg.task.n_train_prompts = 10;
    cfg.task.n_heldout = 6;
    cfg.task.n_eval_prompts = 6;
    cfg.task.responses_per_train_prompt = 2;
    cfg.task.resp_len_min = 5;
    cfg.task.resp_len_max = 8;
    cfg.model.d_model = 16;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.max_seq_len = 24;
    cfg.model.prefix_len = 2;
    cfg.sft.steps = 60;
    cfg.sft.batch_size = 4;
    cfg.clap.d_z = 4;
    cfg.clap.K = 2;
    cfg.clap.responses_per_prompt = 6;
    cfg.clap.batches_per_prompt = 1;
    cfg.clap.adapter_hidden = 8;
    cfg.clap.sample_max_new = 10;
    cfg.dpo.latent_samples = 6;
    cfg.dpo.pair_margin = 0.1;
    cfg.eval.n_prompts = 6;
    cfg.eval.max_new = 10;
    cfg.ablate.n_prompts = 4;
    return cfg;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void compare_trees(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
    REQUIRE(!rel.empty());
    std::sort(rel.begin(), rel.end());
    for (const auto& r : rel) {
        if (r.filename().string().rfind("timing", 0) == 0) continue;  // wall-clock differs
        INFO("file: " << r.string());
        REQUIRE(fs::exists(b / r));
        CHECK(read_file(a / r) == read_file(b / r));
    }
}

}  // namespace

TEST_SUITE_BEGIN("eval_pipeline");

TEST_CASE("win rate: symmetry convention and dominance") {
    std::vector<double> s{0.2, -0.1, 0.5};
    auto tie = attribute_win_rate(s, s);
    CHECK(tie.value == 0.5);
    CHECK(tie.n == 3);
    auto dom = attribute_win_rate({1.0, 1.0}, {-1.0, -1.0});
    CHECK(dom.value == 1.0);
    CHECK(dom.ci_hi <= 1.0);
    CHECK_THROWS_AS(attribute_win_rate({1.0}, {}), InputError);
}

TEST_CASE("attribute probability counts ties as half") {
    CHECK(attribute_probability({1.0, -1.0, 0.0, 0.5}) == doctest::Approx(0.625));
}

TEST_CASE("pearson and latent view selection") {
    std::vector<double> labels{1.0, -1.0, 0.5, -0.5, 0.0, 0.25};
    // constant labels -> all correlations 0, dims picked by index
    std::vector<std::vector<double>> means(3, std::vector<double>{1, 2, 3, 4, 5, 6});
    auto flat = latent_view_from_means(means, std::vector<double>(6, 0.7), 0);
    CHECK(flat.dim_i == 0);
    CHECK(flat.dim_j == 1);
    CHECK(flat.corr_i == 0.0);
    CHECK(flat.corr_j == 0.0);

    // mean[0] equal to the score -> dim 0 selected with |rho| = 1
    std::vector<std::vector<double>> built(4, std::vector<double>(labels.size(), 0.0));
    built[0] = labels;
    Rng rng(3);
    for (size_t i = 0; i < labels.size(); ++i) built[2][i] = rng.normal();
    auto view = latent_view_from_means(built, labels, 1);
    CHECK(view.dim_i == 0);
    CHECK(std::abs(view.corr_i) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(view.rows.size() == labels.size());
}

TEST_CASE("analytic flop formula matches the runtime counter exactly") {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_seq_len = 32;
    cfg.prefix_len = 3;
    cfg.seed = 5;
    TransformerLM<double> lm(cfg, true);
    Tokens x{1, 2, 3, 4}, y{5, 6, 7, 0};

    PrefixKV<double> prefix;
    for (int l = 0; l < cfg.n_layers; ++l) {
        prefix.keys.push_back(Tensor<double>({cfg.prefix_len, cfg.d_model}));
        prefix.values.push_back(Tensor<double>({cfg.prefix_len, cfg.d_model}));
    }
    Tape<double> tape;
    BoundParams<double> bind(tape);
    PrefixNodes pn;
    for (int l = 0; l < cfg.n_layers; ++l)
        pn.kv.emplace_back(tape.constant(prefix.keys[static_cast<size_t>(l)]),
                           tape.constant(prefix.values[static_cast<size_t>(l)]));
    uint64_t before = perf().matmul_flops;
    lm.nll_node(tape, bind, x, y, &pn);
    uint64_t measured = perf().matmul_flops - before;
    uint64_t predicted = lm_forward_flops(cfg, static_cast<int64_t>(x.size()),
                                          static_cast<int64_t>(y.size()), cfg.prefix_len);
    CHECK(measured == predicted);

    // no-prefix variant
    Tape<double> tape2;
    BoundParams<double> bind2(tape2);
    before = perf().matmul_flops;
    lm.nll_node(tape2, bind2, x, y);
    measured = perf().matmul_flops - before;
    CHECK(measured == lm_forward_flops(cfg, 4, 4, 0));
}

TEST_CASE("config parser: values, defaults, and line-precise errors") {
    std::string good = R"(
# comment
[run]
out_dir = "runs/x"

[model]
d_model = 24
n_heads = 3

[dpo]
beta = 0.25
pairing = all_pairs
)";
    auto cfg = parse_pipeline_config(good, "test.toml");
    CHECK(cfg.out_dir == "runs/x");
    CHECK(cfg.model.d_model == 24);
    CHECK(cfg.model.n_heads == 3);
    CHECK(cfg.dpo.beta == 0.25);
    CHECK(cfg.dpo.pairing == PairingStrategy::all_pairs);
    CHECK(cfg.clap.K == 4);  // untouched default

    auto fails_with = [&](const std::string& text, const std::string& needle) {
        try {
            parse_pipeline_config(text, "bad.toml");
            FAIL_CHECK("expected ConfigError for: " << needle);
        } catch (const ConfigError& e) {
            INFO(e.what());
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    fails_with("[model]\nd_model = abc\n", "bad.toml:2");
    fails_with("[model]\nwidth = 3\n", "unknown key `width`");
    fails_with("[nope]\nx = 1\n", "unknown section");
    fails_with("x = 1\n", "outside any [section]");
    fails_with("[model]\nd_model = 7\n", "divisible by n_heads");
    fails_with("[model]\nd_model\n", "expected `key = value`");
    fails_with("[dpo]\nlatent_samples = 1\n", "latent_samples");
}

TEST_CASE("checkpoint round-trip is bit-exact and validates") {
    ModelConfig cfg;
    cfg.vocab_size = 9;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 16;
    cfg.seed = 77;
    TransformerLM<float> lm(cfg, true);
    fs::path tmp = fs::temp_directory_path() / "lalign_ckpt_test.ckpt";
    CheckpointData d;
    d.kind = "sft";
    d.meta["model_config"] = model_config_to_json(cfg);
    for (const auto& [name, p] : lm.store.all()) d.tensors.emplace_back(name, p->value);
    save_checkpoint(tmp.string(), d);
    auto loaded = load_checkpoint(tmp.string());
    CHECK(loaded.kind == "sft");
    for (const auto& [name, p] : lm.store.all())
        CHECK(loaded.tensor(name).data == p->value.data);
    // corrupt magic
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f << "NOPE garbage";
    }
    CHECK_THROWS_AS(load_checkpoint(tmp.string()), InputError);
    fs::remove(tmp);
}

TEST_CASE("jsonl round-trips corpus and response cache") {
    fs::path tmp = fs::temp_directory_path() / "lalign_jsonl_test.jsonl";
    std::vector<AnnotatedXY> corpus{{XY{{1, 2}, {3, 0}}, {0.5, -0.25}},
                                    {XY{{4}, {5, 6, 0}}, {-1.0, 0.0}}};
    write_jsonl(tmp.string(), corpus_to_rows(corpus));
    auto back = rows_to_corpus(read_jsonl(tmp.string()));
    REQUIRE(back.size() == 2);
    CHECK(back[0].xy.x == corpus[0].xy.x);
    CHECK(back[1].scores == corpus[1].scores);

    std::vector<ResponseCacheEntry> cache{{{1, 2}, {{3, 0}, {4, 0}}, {{0.1, 0.2}, {-0.1, 0.0}}}};
    write_jsonl(tmp.string(), cache_to_rows(cache));
    auto cback = rows_to_cache(read_jsonl(tmp.string()));
    REQUIRE(cback.size() == 1);
    CHECK(cback[0].ys == cache[0].ys);
    CHECK(cback[0].scores == cache[0].scores);
    fs::remove(tmp);
}

TEST_CASE("pipeline: dependency errors name the producing subcommand") {
    auto cfg = mini_config((fs::temp_directory_path() / "lalign_dep_test").string());
    fs::remove_all(cfg.out_dir);
    try {
        pipeline::latent_dpo_stage(cfg);
        FAIL_CHECK("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("clap-pretrain") != std::string::npos);
    }
    try {
        pipeline::sft(cfg);
        FAIL_CHECK("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("gen-task") != std::string::npos);
    }
    fs::remove_all(cfg.out_dir);
}

TEST_CASE("pipeline: mini end-to-end runs and is byte-deterministic") {
    fs::path base = fs::temp_directory_path() / "lalign_pipe_test";
    fs::remove_all(base);
    auto run_all = [&](const std::string& dir) {
        auto cfg = mini_config((base / dir).string());
        pipeline::gen_task(cfg);
        pipeline::sft(cfg);
        pipeline::clap_stage(cfg);
        pipeline::latent_dpo_stage(cfg);
        pipeline::dpo_baseline_stage(cfg);
        pipeline::generate_stage(cfg);
        pipeline::eval_stage(cfg);
        pipeline::latent_viz_stage(cfg);
        return cfg;
    };
    auto cfg = run_all("a");
    run_all("b");
    compare_trees(base / "a", base / "b");

    // eval report has rows for base and the personalized set
    auto rows = read_jsonl((fs::path(cfg.out_dir) / "eval" / "report.jsonl").string());
    bool saw_base = false, saw_pers = false, saw_ratio = false;
    for (const auto& r : rows) {
        if (r.contains("set") && r["set"] == "base") saw_base = true;
        if (r.contains("set") && r["set"] == "a0_pos") saw_pers = true;
        if (r.contains("metric") && r["metric"] == "train_flop_ratio_latent_vs_full") {
            saw_ratio = true;
            CHECK(r["lm_grad_events_latent"].get<uint64_t>() == 0);
            CHECK(r["value"].get<double>() < 1.0);
        }
    }
    CHECK(saw_base);
    CHECK(saw_pers);
    CHECK(saw_ratio);

    // manifest exists and names every stage
    auto manifest = read_json_file((fs::path(cfg.out_dir) / "manifest.json").string());
    for (const char* st : {"gen-task", "sft", "clap-pretrain", "latent-dpo", "generate", "eval"})
        CHECK(manifest.at("stages").contains(st));
    fs::remove_all(base);
}

TEST_SUITE_END();
