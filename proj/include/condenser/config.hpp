#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "condenser/encoder.hpp"
#include "condenser/optim.hpp"
#include "condenser/text.hpp"
#include "condenser/training.hpp"

namespace condenser {

/// Everything a run depends on. Serialized into checkpoints and reports.
struct RunConfig {
  ModelConfig model;
  PretrainOptions pretrain;
  FinetuneOptions finetune;
  std::uint64_t seed = 0;
  int threads = 1;
  std::map<std::string, std::string> paths;

  bool operator==(const RunConfig&) const = default;
};

namespace text {
void to_json(nlohmann::json& j, const MaskingOptions& o);
void from_json(const nlohmann::json& j, MaskingOptions& o);
}  // namespace text

// Missing keys keep their defaults; unknown keys and wrong types throw Error.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AdamWOptions& o);
void from_json(const nlohmann::json& j, AdamWOptions& o);
void to_json(nlohmann::json& j, const PretrainOptions& o);
void from_json(const nlohmann::json& j, PretrainOptions& o);
void to_json(nlohmann::json& j, const FinetuneOptions& o);
void from_json(const nlohmann::json& j, FinetuneOptions& o);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace condenser
