#pragma once

#include <string>

#include "lalign/config.hpp"

namespace lalign {

// Loads a TOML-style key-value config (sections, `key = value`, `#` comments).
// Unknown sections or keys, malformed values, and failed validation raise
// ConfigError with file:line diagnostics. The schema is documented in
// configs/default.toml.
PipelineConfig load_pipeline_config(const std::string& path);

// Parses from an in-memory string; `origin` names the source in diagnostics.
PipelineConfig parse_pipeline_config(const std::string& text, const std::string& origin);

}  // namespace lalign
