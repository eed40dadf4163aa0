#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lalign/common.hpp"
#include "lalign/configfile.hpp"
#include "lalign/pipeline.hpp"
#include "lalign/version.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDependency = 3;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent-align: latent-space preference alignment for a desk-scale LM"};
    app.set_version_flag("--version", lalign::kVersion);
    app.require_subcommand(1);

    std::string config_path;
    bool quiet = false;
    app.add_option("-c,--config", config_path, "pipeline config file (TOML-style)")
        ->required();
    app.add_flag("-q,--quiet", quiet, "suppress the stage summary on stdout");

    const char* commands[] = {"gen-task",  "sft",      "clap-pretrain", "latent-dpo",
                              "dpo-baseline", "generate", "eval",          "ablate",
                              "oracle-check", "latent-viz"};
    const char* descriptions[] = {
        "generate the synthetic task corpus and oracle annotations",
        "train the base language model",
        "extend the SFT model into a latent-conditioned model",
        "align one preference by training the personalized latent encoder",
        "sequence-level DPO over all LM parameters (efficiency baseline)",
        "sample base and personalized generations for the eval prompts",
        "compute quality and efficiency metrics",
        "run the 4-cell pretraining-objective ablation grid",
        "run the enumeration-oracle suite (nonzero exit on any breach)",
        "export the top-2 correlated latent dimensions per attribute"};
    for (size_t i = 0; i < std::size(commands); ++i)
        app.add_subcommand(commands[i], descriptions[i]);

    CLI11_PARSE(app, argc, argv);

    try {
        lalign::PipelineConfig cfg = lalign::load_pipeline_config(config_path);
        std::string cmd = app.get_subcommands().front()->get_name();
        return lalign::pipeline::run_command(cmd, cfg, quiet);
    } catch (const lalign::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const lalign::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return kExitDependency;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
