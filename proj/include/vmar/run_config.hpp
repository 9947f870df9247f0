#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vmar/generator.hpp"
#include "vmar/model.hpp"
#include "vmar/trainer.hpp"

namespace vmar {

struct TokenizerSettings {
  std::array<std::size_t, 3> patch{2, 2, 2};
  std::uint64_t seed = 7;
  double scale = 1.0;  // latent scaling factor applied to every token
  std::size_t pixel_frames = 13;
  std::size_t height_px = 16;
  std::size_t width_px = 16;
};

struct CurriculumSettings {
  std::size_t corpus_size = 1024;
  std::uint64_t corpus_seed = 1000;
  int max_speed = 1;
  std::vector<CurriculumStage> stages;  // grid filled from the tokenizer
  // Optional second stage at a larger pixel grid (0 steps = skipped).
  std::size_t finetune_steps = 0;
  std::size_t finetune_height_px = 24;
  std::size_t finetune_width_px = 24;
};

struct GenerationSettings {
  GenerationConfig config;
  std::string cls = "right";
  std::size_t prefix_frames = 1;
  int start_row = 4;
  int start_col = 4;
  int speed = 1;
};

struct BenchSettings {
  std::size_t seeds = 50;
  std::size_t frames = 7;  // latent frames per bench rollout (1 conditioning)
  std::size_t ar_steps = 16;
  std::size_t infer_steps = 50;
  std::size_t late_frames = 2;
  std::vector<double> temperatures{1.0, 0.98, 0.96, 0.94, 0.92, 0.90};
  std::size_t timing_frames = 7;  // bench-steps generation length
  std::size_t timing_ar_steps = 64;
  std::size_t timing_infer_steps = 100;
};

struct RunConfig {
  ModelConfig model;
  std::uint64_t init_seed = 0;
  TokenizerSettings tokenizer;
  TrainConfig train;
  std::size_t max_steps = 0;  // cap on total training steps (0 = curriculum budget)
  CurriculumSettings curriculum;
  GenerationSettings generation;
  BenchSettings bench;

  GridDims latent_dims() const;
  CorpusConfig corpus_config() const;
  ToyTokenizer make_tokenizer() const;
};

// The canonical defaults as a JSON document.
nlohmann::json default_config_json();

// Merges `doc` into the defaults; keys absent from the defaults raise
// ConfigError naming the dotted key.
nlohmann::json merge_config(const nlohmann::json& doc);

// Applies "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Typed view of a fully merged document; throws ConfigError on bad values.
RunConfig parse_run_config(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& cfg);

// Reads the JSON file (IoError if unreadable, ConfigError if malformed).
nlohmann::json read_config_file(const std::string& path);

// FNV-1a 64 of the canonical serialization, as 16 hex digits.
std::string config_hash(const nlohmann::json& doc);

// The "model" section of a run config (token and grid sizes come from the tokenizer).
nlohmann::json model_section_json(const ModelConfig& cfg);
// Complete model description including token_dim and the latent grid, as
// stored in checkpoints; model_config_from_json inverts it.
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace vmar
