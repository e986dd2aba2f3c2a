#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "condenser/condenser.hpp"
#include "condenser/encoder.hpp"
#include "condenser/training.hpp"

namespace condenser {

struct StoredTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;

  bool operator==(const StoredTensor&) const = default;
};

/// Single-file model container:
///   "CDSRCKPT" | u32 version | u32 kind | u64 header length | JSON header |
///   u64 tensor count | per tensor: name, u32 rank, u64 dims, f32 values.
/// All integers and floats are little-endian.
struct Checkpoint {
  ModelKind kind = ModelKind::kEncoderOnly;
  ModelConfig config;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

Checkpoint make_checkpoint(const PretrainModel& model, nlohmann::json metadata = nlohmann::json::object());
Checkpoint make_checkpoint(const Encoder& encoder, nlohmann::json metadata = nlohmann::json::object());

std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError on bad magic, truncation or trailing bytes.
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& context = "checkpoint");

/// Atomic: written to a temporary file and renamed.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
void save_checkpoint(const PretrainModel& model, const std::filesystem::path& path,
                     nlohmann::json metadata = nlohmann::json::object());
void save_checkpoint(const Encoder& encoder, const std::filesystem::path& path,
                     nlohmann::json metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Backbone tensors only; head and projection tensors are ignored.
Encoder encoder_from_checkpoint(const Checkpoint& checkpoint);
/// Requires a checkpoint of a model kind with a projection; an encoder-only
/// checkpoint throws.
PretrainModel pretrain_model_from_checkpoint(const Checkpoint& checkpoint);

Encoder load_encoder(const std::filesystem::path& path);
PretrainModel load_pretrain_model(const std::filesystem::path& path);

/// 64-bit training state for exact resumption ("CDSRSTAT").
void save_train_state(const TrainState& state, const std::filesystem::path& path);
TrainState load_train_state(const std::filesystem::path& path);

}  // namespace condenser
