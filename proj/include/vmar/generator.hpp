#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "vmar/core.hpp"
#include "vmar/diffusion.hpp"
#include "vmar/masking.hpp"
#include "vmar/model.hpp"

namespace vmar {

enum class DecodeMode : std::uint8_t {
  Masked,     // ar_steps parallel steps per frame
  NextToken,  // one token per step, raster order
};

struct StepCount {
  std::size_t spatial = 0;
  std::size_t temporal = 0;
  bool operator==(const StepCount&) const = default;
};

// (spatial, temporal) backbone steps: masked -> (ar_steps, frames), ntp -> (tokens_per_frame, frames).
StepCount count_steps(std::size_t tokens_per_frame, std::size_t generated_frames, DecodeMode mode,
                      std::size_t ar_steps = 64);

struct GenerationConfig {
  std::size_t frames = 7;  // output latent dims, may exceed training dims
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t ar_steps = 64;
  std::size_t infer_steps = 100;
  double cfg_scale = 3.0;
  TemperaturePolicy temperature = TemperaturePolicy::progressive();
  bool temperature_every_step = true;
  TokenOrder order = TokenOrder::RandomPerFrame;
  bool use_cache = true;
  // Total-mask baseline decoding: all remaining tokens of the clip are unmasked
  // jointly (ar_steps per remaining frame) under full attention, without cache.
  bool joint = false;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct FrameTrace {
  std::size_t frame = 0;
  double temperature = 1.0;
  std::vector<std::size_t> step_tokens;  // tokens written per AR step
  std::size_t backbone_calls = 0;
  std::size_t cache_bytes = 0;  // cache size (both branches) while this frame was decoded
  double wall_ms = 0;
};

struct GenerationTrace {
  std::size_t tokens_per_frame = 0;
  std::size_t prefix_frames = 0;
  bool cached = false;
  bool joint = false;
  std::vector<FrameTrace> frames;
  std::size_t backbone_calls = 0;  // AR steps that ran the backbone (both CFG branches count once)
  std::size_t backbone_passes = 0;  // individual forward passes
  std::size_t peak_cache_bytes = 0;
  double wall_ms = 0;
  StepCount steps;

  // Wall times are left out unless requested so the file is reproducible.
  nlohmann::json to_json(bool with_timing = false) const;
};

struct GenerationResult {
  TokenGrid grid;
  GenerationTrace trace;
};

// Generates frames prefix.frames .. config.frames-1 conditioned on `cond`
// (nullopt = null condition, unguided). Prefix frames are copied verbatim.
GenerationResult generate(const Model<float>& model, std::optional<MotionClass> cond,
                          const TokenGrid& prefix, const GenerationConfig& config);

// Continuation of a multi-frame prefix (k >= 2) under the null condition.
GenerationResult video_to_video(const Model<float>& model, const TokenGrid& prefix,
                                const GenerationConfig& config);

// generate() at dims beyond the training grid; requires RoPE.
GenerationResult extrapolate(const Model<float>& model, std::optional<MotionClass> cond,
                             const TokenGrid& prefix, const GenerationConfig& config);

}  // namespace vmar
