#include "vmar/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "vmar/errors.hpp"

namespace vmar {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr", "must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train.beta1", "must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta2", "must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("train.weight_decay", "must be non-negative");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps", "must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
  if (!(mask_ratio_min > 0 && mask_ratio_min <= mask_ratio_max && mask_ratio_max <= 1))
    throw ConfigError("train.mask_ratio", "need 0 < min <= max <= 1");
  if (!(cond_drop_prob >= 0 && cond_drop_prob <= 1))
    throw ConfigError("train.cond_drop_prob", "must be in [0, 1]");
  if (diffusion_batch_mul == 0) throw ConfigError("train.diffusion_batch_mul", "must be positive");
}

Corpus build_corpus(const CorpusConfig& cfg, const ToyTokenizer& tokenizer) {
  if (cfg.size == 0) throw ConfigError("curriculum.corpus_size", "must be positive");
  Corpus c;
  c.dims = tokenizer.latent_dims(cfg.pixel_frames, cfg.height_px, cfg.width_px);
  c.height_px = cfg.height_px;
  c.width_px = cfg.width_px;
  c.specs.reserve(cfg.size);
  c.grids.reserve(cfg.size);
  for (std::size_t i = 0; i < cfg.size; ++i) {
    Rng rng(cfg.seed + i);
    MotionSpec spec = random_motion_spec(rng, cfg.height_px, cfg.width_px, cfg.max_speed);
    PixelVideo v = gen_bouncing_ball(spec, cfg.pixel_frames, cfg.height_px, cfg.width_px, cfg.seed + i);
    c.grids.push_back(tokenizer.tokenize(v));
    c.specs.push_back(spec);
  }
  return c;
}

namespace {

template <typename T>
std::size_t draw_condition(const Model<T>& model, std::optional<MotionClass> cls, Rng& rng,
                           double drop_prob) {
  const double u = rng.uniform();
  if (!cls || u < drop_prob) return model.null_condition();
  return static_cast<std::size_t>(*cls);
}

// Runs the backbone over `frames` frames with the given masked flags and puts
// the diffusion loss on `loss_rows` (indices into the sequence).
template <typename T>
SampleLoss<T> masked_loss(const Model<T>& model, const TokenGrid& grid, std::size_t frames,
                          const std::vector<std::uint8_t>& flags,
                          const std::vector<std::size_t>& loss_rows, std::size_t cond,
                          AttentionRule rule, Rng& rng, const TrainConfig& cfg,
                          ModelParams<T>* grads, T weight, bool want_d_embed) {
  const auto& dims = grid.dims();
  const std::size_t tpf = dims.tokens_per_frame();
  const std::size_t d = grid.token_dim();
  const std::size_t dm = model.config().backbone.model_dim;
  const std::size_t n = frames * tpf;
  if (d != model.config().backbone.token_dim)
    throw ShapeError("token dim does not match the model");

  std::vector<T> tokens(n * d);
  auto src = grid.data();
  for (std::size_t i = 0; i < n * d; ++i) tokens[i] = static_cast<T>(src[i]);

  BackboneInput<T> in;
  in.frames = frames;
  in.height = dims.height;
  in.width = dims.width;
  in.first_frame = 0;
  in.tokens = tokens;
  in.masked = flags;

  const bool need_tape = grads || want_d_embed;
  const Backbone<T> bb = model.backbone();
  BackboneTape<T> tape;
  std::vector<T> z = bb.forward(in, cond, rule, nullptr, need_tape ? &tape : nullptr);

  const std::size_t mul = cfg.diffusion_batch_mul;
  const std::size_t rows = loss_rows.size() * mul;
  std::vector<T> zr(rows * dm), xr(rows * d);
  std::vector<Rng> rngs;
  rngs.reserve(rows);
  for (std::size_t i = 0; i < loss_rows.size(); ++i) {
    const std::size_t row = loss_rows[i];
    for (std::size_t m = 0; m < mul; ++m) {
      const std::size_t r = i * mul + m;
      std::copy_n(z.begin() + row * dm, dm, zr.begin() + r * dm);
      std::copy_n(tokens.begin() + row * d, d, xr.begin() + r * d);
      rngs.emplace_back(rng.next_u64());
    }
  }
  const std::vector<T> w(rows, weight / static_cast<T>(rows));
  const DenoiserMLP<T> head = model.head();

  SampleLoss<T> out;
  out.loss_positions = loss_rows.size();
  out.rows = n;
  for (std::size_t row : loss_rows) out.loss_frames.push_back(row / tpf);

  if (!need_tape) {
    out.loss = denoise_loss<T>(head, model.schedule(), zr.data(), xr.data(), w, rngs, nullptr,
                               nullptr);
    if (weight != T(0)) out.loss /= weight;
    return out;
  }
  ModelParams<T> scratch;
  ModelParams<T>* g = grads;
  if (!g) {
    scratch = ModelParams<T>(model.config());
    g = &scratch;
  }
  std::vector<T> dzr(rows * dm, T(0));
  out.loss = denoise_loss<T>(head, model.schedule(), zr.data(), xr.data(), w, rngs, &g->head,
                             dzr.data());
  std::vector<T> dz(n * dm, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t row = loss_rows[r / mul];
    for (std::size_t k = 0; k < dm; ++k) dz[row * dm + k] += dzr[r * dm + k];
  }
  bb.backward(tape, dz, g->backbone, want_d_embed ? &out.d_embed : nullptr);
  // A loss is a weighted mean; report it unweighted.
  if (weight != T(0)) out.loss /= weight;
  return out;
}

}  // namespace

template <typename T>
SampleLoss<T> next_frame_sample_loss(const Model<T>& model, const TokenGrid& grid,
                                     std::optional<MotionClass> cls, Rng& rng,
                                     const TrainConfig& cfg, ModelParams<T>* grads, T weight,
                                     bool want_d_embed) {
  const auto& dims = grid.dims();
  if (dims.frames == 0) throw ArgumentError("empty clip");
  const std::size_t tpf = dims.tokens_per_frame();
  const std::size_t t = rng.below(dims.frames);
  const auto masked = sample_train_mask(tpf, cfg.mask_ratio_min, cfg.mask_ratio_max, rng);
  const NextFrameMaskPlan plan = build_next_frame_plan(dims.frames, t, tpf, masked);
  const std::size_t cond = draw_condition(model, cls, rng, cfg.cond_drop_prob);
  const std::size_t frames = cfg.truncate_future ? t + 1 : dims.frames;
  std::vector<std::size_t> loss_rows;
  for (std::size_t p : plan.loss_positions()) loss_rows.push_back(t * tpf + p);
  SampleLoss<T> out = masked_loss(model, grid, frames, plan.masked_flags(frames), loss_rows, cond,
                                  AttentionRule::FrameCausal, rng, cfg, grads, weight, want_d_embed);
  out.target = t;
  return out;
}

template <typename T>
SampleLoss<T> total_mask_sample_loss(const Model<T>& model, const TokenGrid& grid,
                                     std::optional<MotionClass> cls, Rng& rng,
                                     const TrainConfig& cfg, ModelParams<T>* grads, T weight,
                                     bool want_d_embed) {
  const std::size_t n = grid.token_count();
  if (n == 0) throw ArgumentError("empty clip");
  const auto masked = sample_train_mask(n, cfg.mask_ratio_min, cfg.mask_ratio_max, rng);
  const std::size_t cond = draw_condition(model, cls, rng, cfg.cond_drop_prob);
  std::vector<std::uint8_t> flags(n, 0);
  for (std::size_t p : masked) flags[p] = 1;
  SampleLoss<T> out = masked_loss(model, grid, grid.dims().frames, flags, masked, cond,
                                  AttentionRule::Full, rng, cfg, grads, weight, want_d_embed);
  out.target = grid.dims().frames - 1;
  return out;
}

Trainer::Trainer(Model<float> model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
  adam_.m = ModelParams<float>(model_.config());
  adam_.v = ModelParams<float>(model_.config());
  grads_ = ModelParams<float>(model_.config());
  // Layer-norm gains are constructed as ones; optimizer moments start at zero.
  adam_.m.zero();
  adam_.v.zero();
}

void Trainer::restore(std::size_t step, const std::string& rng_state, AdamState adam) {
  rng_.restore(rng_state);
  step_ = step;
  adam_ = std::move(adam);
}

float Trainer::train_step(std::span<const TrainSample> batch) {
  return update(batch, TrainMode::NextFrame);
}

float Trainer::train_step_total_mask(std::span<const TrainSample> batch) {
  return update(batch, TrainMode::TotalMask);
}

float Trainer::update(std::span<const TrainSample> batch, TrainMode mode) {
  if (batch.empty()) throw ArgumentError("empty batch");
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return batch[a].id < batch[b].id; });

  grads_.zero();
  stats_ = StepStats{};
  const float weight = 1.0f / static_cast<float>(batch.size());
  double loss = 0;
  for (std::size_t i : order) {
    const TrainSample& s = batch[i];
    if (!s.grid) throw ArgumentError("batch sample without a clip");
    Rng rng = Rng::substream(cfg_.seed, {static_cast<std::uint64_t>(step_), s.id});
    SampleLoss<float> sl =
        mode == TrainMode::NextFrame
            ? next_frame_sample_loss(model_, *s.grid, s.cls, rng, cfg_, &grads_, weight)
            : total_mask_sample_loss(model_, *s.grid, s.cls, rng, cfg_, &grads_, weight);
    loss += static_cast<double>(sl.loss) * weight;
    stats_.targets.push_back(sl.target);
    stats_.loss_positions.push_back(sl.loss_positions);
    for (std::size_t f : sl.loss_frames)
      if (f != sl.loss_frames.front()) stats_.loss_spans_frames = true;
  }
  stats_.loss = static_cast<float>(loss);

  // AdamW, decoupled decay on matrices only.
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  std::vector<Tensor<float>*> gs, ms, vs;
  grads_.visit([&](const std::string&, Tensor<float>& x) { gs.push_back(&x); });
  adam_.m.visit([&](const std::string&, Tensor<float>& x) { ms.push_back(&x); });
  adam_.v.visit([&](const std::string&, Tensor<float>& x) { vs.push_back(&x); });
  std::size_t k = 0;
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float lr = static_cast<float>(cfg_.lr);
  const float decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
  const float eps = static_cast<float>(cfg_.adam_eps);
  const float c1 = static_cast<float>(1.0 / bc1);
  const float c2 = static_cast<float>(1.0 / bc2);
  model_.params().visit([&](const std::string&, Tensor<float>& p) {
    const auto& g = gs[k]->data;
    auto& m = ms[k]->data;
    auto& v = vs[k]->data;
    ++k;
    const bool decayed = p.shape.size() >= 2;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (decayed) p.data[i] *= decay;
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const float mh = m[i] * c1;
      const float vh = v[i] * c2;
      p.data[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  });
  ++step_;
  return stats_.loss;
}

void Trainer::run_curriculum(std::span<const CurriculumStage> stages, const Corpus& corpus,
                             const std::function<void(const LogRow&)>& on_step,
                             std::size_t max_total_steps) {
  if (stages.empty()) throw ConfigError("curriculum.stages", "no stages");
  const auto& mc = model_.config();
  for (const auto& st : stages) {
    if (st.frames == 0 || st.frames > corpus.dims.frames)
      throw ConfigError("curriculum.stages", "stage frames must be in [1, corpus frames]");
    if (st.height != corpus.dims.height || st.width != corpus.dims.width)
      throw ConfigError("curriculum.stages", "stage grid does not match the corpus");
    if (st.height != mc.grid_height || st.width != mc.grid_width)
      throw ConfigError("curriculum.stages", "stage grid does not match the model grid");
  }
  if (corpus.size() < cfg_.batch_size)
    throw ConfigError("train.batch_size", "larger than the corpus");

  std::vector<std::size_t> pool(corpus.size());
  std::size_t begin = 0;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& st = stages[si];
    const std::size_t end = begin + st.steps;
    while (step_ < end) {
      if (max_total_steps && step_ >= max_total_steps) return;
      const auto t0 = std::chrono::steady_clock::now();
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      std::vector<TokenGrid> clips;
      std::vector<TrainSample> batch;
      clips.reserve(cfg_.batch_size);
      for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
        const std::size_t j = b + rng_.below(pool.size() - b);
        std::swap(pool[b], pool[j]);
        clips.push_back(corpus.grids[pool[b]].first_frames(st.frames));
      }
      for (std::size_t b = 0; b < cfg_.batch_size; ++b)
        batch.push_back({&clips[b], corpus.specs[pool[b]].cls, pool[b]});
      const float loss = update(batch, cfg_.mode);
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (on_step) on_step(LogRow{step_, si, loss, cfg_.lr, ms});
    }
    begin = end;
  }
}

void resolution_switch(Model<float>& model, std::size_t height, std::size_t width) {
  if (model.config().backbone.positional != PositionalMode::Rope)
    throw UnsupportedConfigError(
        "resolution switch needs relative positions; absolute encodings are tied to the grid");
  model.set_grid(height, width);
}

template SampleLoss<float> next_frame_sample_loss<float>(const Model<float>&, const TokenGrid&,
                                                         std::optional<MotionClass>, Rng&,
                                                         const TrainConfig&, ModelParams<float>*,
                                                         float, bool);
template SampleLoss<double> next_frame_sample_loss<double>(const Model<double>&, const TokenGrid&,
                                                           std::optional<MotionClass>, Rng&,
                                                           const TrainConfig&,
                                                           ModelParams<double>*, double, bool);
template SampleLoss<float> total_mask_sample_loss<float>(const Model<float>&, const TokenGrid&,
                                                         std::optional<MotionClass>, Rng&,
                                                         const TrainConfig&, ModelParams<float>*,
                                                         float, bool);
template SampleLoss<double> total_mask_sample_loss<double>(const Model<double>&, const TokenGrid&,
                                                           std::optional<MotionClass>, Rng&,
                                                           const TrainConfig&,
                                                           ModelParams<double>*, double, bool);

}  // namespace vmar
