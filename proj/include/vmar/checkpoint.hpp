#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vmar/model.hpp"
#include "vmar/trainer.hpp"

namespace vmar {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointData {
  Model<float> model;
  std::size_t step = 0;
  std::string rng_state;          // empty for inference-only checkpoints
  std::optional<AdamState> adam;  // present when saved from a trainer
};

// Layout: "VMAR", version byte, u32 JSON length, JSON header, then tensor
// records sorted by name (u32 name length, name, u32 rank, u32 dims, f32 data),
// all little-endian. Optimizer moments are stored as optim.m.* / optim.v.*.
std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model, std::size_t step,
                                               const std::string& rng_state,
                                               const AdamState* adam);
// Throws FormatError (with the failing byte offset) on any malformed input.
CheckpointData parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Model<float>& model);
void save_checkpoint(const std::string& path, const Trainer& trainer);
CheckpointData load_checkpoint(const std::string& path);

// Trainer continuing from a checkpoint saved by save_checkpoint(path, trainer).
Trainer resume_trainer(CheckpointData data, const TrainConfig& cfg);

}  // namespace vmar
