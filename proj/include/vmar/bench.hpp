#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vmar/core.hpp"
#include "vmar/generator.hpp"
#include "vmar/model.hpp"

namespace vmar {

struct RunConfig;

// Rows of strings under a header; CSV starts with a "# config_hash=" line.
struct Report {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_csv(const std::string& config_hash) const;
};

// Per pixel frame: Chebyshev distance between the brightest cell of the
// detokenized clip and the oracle position.
std::vector<int> rollout_error(const TokenGrid& generated, const MotionSpec& spec,
                               const ToyTokenizer& tokenizer);

// Mean pixel-frame error of every latent frame (latent frame 0 is pixel frame 0).
std::vector<double> latent_frame_errors(std::span<const int> pixel_errors,
                                        std::size_t latent_frames, std::size_t temporal_patch);

// Direction whose oracle trajectory (same start and speed as `spec`) is
// closest to the clip over pixel frames [first_frame, frames). Ties count as
// no decision (nullopt).
std::optional<MotionClass> classify_direction(const PixelVideo& video, const MotionSpec& spec,
                                              std::size_t first_frame);

// P(X >= k) for X ~ Binomial(n, p).
double binomial_upper_tail(std::size_t n, std::size_t k, double p);

struct EvalSettings {
  std::size_t seeds = 50;
  std::size_t frames = 4;  // latent frames including the prefix
  std::size_t prefix_frames = 1;
  std::size_t ar_steps = 16;
  std::size_t infer_steps = 50;
  double cfg_scale = 3.0;
  TemperaturePolicy temperature = TemperaturePolicy::progressive();
  bool joint = false;
  bool conditioned = true;  // false: null condition (video-to-video)
  std::uint64_t seed_base = 1000000;
  std::uint64_t sample_seed = 0;  // shifts the sampler seeds; the clips stay fixed
  std::size_t height_px = 16;
  std::size_t width_px = 16;
  int max_speed = 1;
};

// Held-out clip i of an evaluation (spec drawn from seed_base + i).
MotionSpec eval_spec(const EvalSettings& s, std::size_t i);

struct RolloutSummary {
  std::vector<double> per_frame;  // mean error per generated latent frame
  double mean = 0;
  double late_mean = 0;  // mean over the last `late` generated frames
};

RolloutSummary evaluate_rollouts(const Model<float>& model, const ToyTokenizer& tokenizer,
                                 const EvalSettings& s, std::size_t late = 2);

struct V2VSummary {
  std::size_t trials = 0;
  std::size_t correct = 0;
  double accuracy = 0;
  double p_value = 1;  // one-sided binomial test against 1/4
};

// Two-frame prefixes continued under the null condition; the oracle
// classifier must recover each clip's direction.
V2VSummary evaluate_v2v(const Model<float>& model, const ToyTokenizer& tokenizer,
                        const EvalSettings& s);

// Max |dz| on frames < k when tokens of frames >= k are replaced by noise.
double causality_leak(const Model<float>& model, AttentionRule rule, const GridDims& dims,
                      std::size_t k, std::uint64_t seed);

Report bench_steps(const Model<float>& model, const ToyTokenizer& tokenizer, const RunConfig& cfg);
Report ablate_temperature(const Model<float>& model, const ToyTokenizer& tokenizer,
                          const RunConfig& cfg);
// Extrapolation in time and space for the RoPE model and for an absolute-PE
// model (`sincos`, or a fresh one derived from the RoPE config when null).
Report ablate_pe(const Model<float>& model, const ToyTokenizer& tokenizer, const RunConfig& cfg,
                 const Model<float>* sincos = nullptr);
Report ablate_total_mask(const Model<float>& next_frame, const Model<float>& total_mask,
                         const ToyTokenizer& tokenizer, const RunConfig& cfg);
Report ablate_causal(const Model<float>& model, const RunConfig& cfg);

}  // namespace vmar
