#pragma once

#include <string>

#include <json.hpp>

#include "lalign/config.hpp"

namespace lalign::pipeline {

// Stage entry points. Each reads its upstream artifacts from cfg.out_dir,
// writes its own artifacts plus a manifest entry, and returns the summary it
// wrote. Missing upstream artifacts raise DependencyError naming the
// producing subcommand. Wall-clock measurements go into separate timing
// files; every other artifact is byte-deterministic given (config, seeds).
nlohmann::json gen_task(const PipelineConfig& cfg);
nlohmann::json sft(const PipelineConfig& cfg);
nlohmann::json clap_stage(const PipelineConfig& cfg);
nlohmann::json latent_dpo_stage(const PipelineConfig& cfg);
nlohmann::json dpo_baseline_stage(const PipelineConfig& cfg);
nlohmann::json generate_stage(const PipelineConfig& cfg);
nlohmann::json eval_stage(const PipelineConfig& cfg);
nlohmann::json ablate_stage(const PipelineConfig& cfg);
nlohmann::json oracle_check(const PipelineConfig& cfg);
nlohmann::json latent_viz_stage(const PipelineConfig& cfg);

// Dispatches a subcommand by name; returns the process exit code.
int run_command(const std::string& command, const PipelineConfig& cfg, bool quiet = false);

nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg);

}  // namespace lalign::pipeline
