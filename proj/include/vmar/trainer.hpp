#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vmar/core.hpp"
#include "vmar/masking.hpp"
#include "vmar/model.hpp"

namespace vmar {

enum class TrainMode : std::uint8_t {
  NextFrame,  // loss on the masked part of one frame, frame-causal attention
  TotalMask,  // masks across all frames, bidirectional attention (ablation)
};

struct TrainConfig {
  TrainMode mode = TrainMode::NextFrame;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.02;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  double mask_ratio_min = 0.7;
  double mask_ratio_max = 1.0;
  double cond_drop_prob = 0.1;
  std::size_t diffusion_batch_mul = 4;  // noise draws per loss token
  std::uint64_t seed = 0;
  // Frames after the target never influence the loss under the frame-causal
  // mask, so they can be dropped from the forward pass.
  bool truncate_future = true;

  void validate() const;  // throws ConfigError
};

struct CurriculumStage {
  std::size_t frames = 0;  // latent frames
  std::size_t steps = 0;
  std::size_t height = 8;  // latent grid
  std::size_t width = 8;
};

struct CorpusConfig {
  std::size_t size = 1024;
  std::size_t pixel_frames = 13;
  std::size_t height_px = 16;
  std::size_t width_px = 16;
  int max_speed = 1;
  std::uint64_t seed = 1234;
};

// Tokenized synthetic clips; sample i uses an RNG seeded with seed + i.
struct Corpus {
  std::vector<MotionSpec> specs;
  std::vector<TokenGrid> grids;
  GridDims dims;
  std::size_t height_px = 0;
  std::size_t width_px = 0;

  std::size_t size() const { return grids.size(); }
};

Corpus build_corpus(const CorpusConfig& cfg, const ToyTokenizer& tokenizer);

struct TrainSample {
  const TokenGrid* grid = nullptr;
  std::optional<MotionClass> cls;
  std::uint64_t id = 0;  // selects the per-sample RNG substream
};

// Bookkeeping of one sample's loss evaluation.
template <typename T>
struct SampleLoss {
  T loss = 0;
  std::size_t target = 0;          // next-frame target (0-based)
  std::size_t loss_positions = 0;  // tokens carrying diffusion loss
  std::vector<std::size_t> loss_frames;  // frame of each loss position
  std::vector<T> d_embed;          // gradient at the embedded inputs (if requested)
  std::size_t rows = 0;            // backbone rows evaluated
};

// Next-frame diffusion loss for one clip: draws t, the masked subset of frame t,
// condition dropout, and per-token noise from `rng`. Gradients scaled by
// `weight` are accumulated into grads when non-null.
template <typename T>
SampleLoss<T> next_frame_sample_loss(const Model<T>& model, const TokenGrid& grid,
                                     std::optional<MotionClass> cls, Rng& rng,
                                     const TrainConfig& cfg, ModelParams<T>* grads, T weight,
                                     bool want_d_embed = false);

// Total-mask baseline: masks tokens uniformly across all frames with full attention.
template <typename T>
SampleLoss<T> total_mask_sample_loss(const Model<T>& model, const TokenGrid& grid,
                                     std::optional<MotionClass> cls, Rng& rng,
                                     const TrainConfig& cfg, ModelParams<T>* grads, T weight,
                                     bool want_d_embed = false);

struct AdamState {
  ModelParams<float> m;
  ModelParams<float> v;
};

struct StepStats {
  float loss = 0;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> loss_positions;
  bool loss_spans_frames = false;
};

struct LogRow {
  std::size_t step = 0;
  std::size_t stage = 0;
  float loss = 0;
  double lr = 0;
  double wall_ms = 0;
};

class Trainer {
 public:
  Trainer(Model<float> model, TrainConfig cfg);

  const Model<float>& model() const { return model_; }
  Model<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t step() const { return step_; }
  Rng& rng() { return rng_; }
  std::string rng_state() const { return rng_.state(); }
  const AdamState& adam() const { return adam_; }
  const StepStats& last_stats() const { return stats_; }

  // One AdamW update on the batch. Samples are processed in id order, each
  // with its own RNG substream, so the result does not depend on batch order.
  float train_step(std::span<const TrainSample> batch);
  float train_step_total_mask(std::span<const TrainSample> batch);

  // Runs stages back to back from the current step (so a resumed trainer
  // continues where it stopped). Stops early at max_total_steps if nonzero.
  void run_curriculum(std::span<const CurriculumStage> stages, const Corpus& corpus,
                      const std::function<void(const LogRow&)>& on_step = {},
                      std::size_t max_total_steps = 0);

  // Restores optimizer/RNG/step state (used by checkpoint loading).
  void restore(std::size_t step, const std::string& rng_state, AdamState adam);

 private:
  float update(std::span<const TrainSample> batch, TrainMode mode);

  Model<float> model_;
  TrainConfig cfg_;
  Rng rng_;
  std::size_t step_ = 0;
  AdamState adam_;
  ModelParams<float> grads_;
  StepStats stats_;
};

// Moves a RoPE model to a new latent grid for fine-tuning; parameters are not
// touched. Throws UnsupportedConfigError for absolute positional encodings.
void resolution_switch(Model<float>& model, std::size_t height, std::size_t width);

}  // namespace vmar
