#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lalign/common.hpp"
#include "lalign/config.hpp"
#include "lalign/tensor.hpp"

namespace lalign {

// Self-describing binary container: magic, format version, a JSON header
// (kind, model config, metadata, tensor directory) and raw little-endian f32
// data. Written deterministically so identical state produces identical bytes.
struct CheckpointData {
    std::string kind;      // "sft", "clap", "ptheta", "dpo_full"
    nlohmann::json meta;   // model config + stage-specific fields
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

uint64_t file_content_hash(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace lalign
