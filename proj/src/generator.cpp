#include "vmar/generator.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "vmar/errors.hpp"

namespace vmar {

namespace {

constexpr std::uint64_t kOrderStream = 0x6f72646572ULL;
constexpr std::uint64_t kTokenStream = 0x746f6b656eULL;

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Which guidance branches a sampling call needs.
struct Branches {
  bool cond = false;
  bool null = false;
  double scale = 0.0;
};

Branches branches_for(std::optional<MotionClass> cond, double cfg_scale) {
  if (!cond) return {false, true, 0.0};
  if (cfg_scale == 1.0) return {true, false, 1.0};
  if (cfg_scale == 0.0) return {false, true, 0.0};
  return {true, true, cfg_scale};
}

// Copies the rows of z listed in `rows` into a dense block.
std::vector<float> gather_rows(const std::vector<float>& z, std::span<const std::size_t> rows,
                               std::size_t dm) {
  std::vector<float> out(rows.size() * dm);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(z.begin() + rows[i] * dm, dm, out.begin() + i * dm);
  return out;
}

FrameKV<float> slice_kv(const FrameKV<float>& kv, std::size_t tokens, std::size_t dm) {
  FrameKV<float> out;
  out.tokens = tokens;
  for (std::size_t l = 0; l < kv.keys.size(); ++l) {
    out.keys.emplace_back(kv.keys[l].begin(), kv.keys[l].begin() + tokens * dm);
    out.values.emplace_back(kv.values[l].begin(), kv.values[l].begin() + tokens * dm);
  }
  return out;
}

class Session {
 public:
  Session(const Model<float>& model, std::optional<MotionClass> cond, const GenerationConfig& cfg,
          TokenGrid& grid, GenerationTrace& trace)
      : model_(model),
        cfg_(cfg),
        grid_(grid),
        trace_(trace),
        bb_(model.backbone()),
        head_(model.head()),
        br_(branches_for(cond, cfg.cfg_scale)),
        cond_id_(cond ? static_cast<std::size_t>(*cond) : model.null_condition()),
        dm_(model.config().backbone.model_dim),
        d_(grid.token_dim()),
        tpf_(grid.dims().tokens_per_frame()) {
    const auto& bc = model.config().backbone;
    if (cfg.use_cache) {
      cache_cond_.emplace(bc.layers, dm_, tpf_);
      cache_null_.emplace(bc.layers, dm_, tpf_);
    }
  }

  void run_framewise(std::size_t first) {
    const UnmaskSchedule sched = cosine_unmask_counts(tpf_, cfg_.ar_steps);
    for (std::size_t f = first; f < grid_.dims().frames; ++f) {
      const auto t0 = Clock::now();
      FrameTrace ft;
      ft.frame = f;
      ft.temperature = temperature_for_frame(f - first, cfg_.temperature);
      std::vector<std::uint8_t> masked(tpf_, 1);
      FrameOrder order(tpf_, Rng::substream(cfg_.seed, {kOrderStream, f}), cfg_.order);
      for (std::size_t s = 0; s < sched.counts.size(); ++s) {
        const auto pos = order.select_tokens_for_step(sched.counts[s]);
        step_frame(f, masked, pos, ft.temperature);
        for (std::size_t p : pos) masked[p] = 0;
        ft.step_tokens.push_back(pos.size());
        ++ft.backbone_calls;
      }
      trace_.backbone_calls += ft.backbone_calls;
      ft.cache_bytes = cache_bytes();
      trace_.peak_cache_bytes = std::max(trace_.peak_cache_bytes, ft.cache_bytes);
      ft.wall_ms = ms_since(t0);
      trace_.frames.push_back(std::move(ft));
    }
  }

  void run_joint(std::size_t first) {
    const auto t0 = Clock::now();
    const std::size_t frames = grid_.dims().frames;
    const std::size_t n = frames * tpf_;
    const std::size_t remaining = (frames - first) * tpf_;
    const UnmaskSchedule sched = cosine_unmask_counts(remaining, cfg_.ar_steps * (frames - first));
    std::vector<std::uint8_t> masked(n, 0);
    std::fill(masked.begin() + first * tpf_, masked.end(), 1);
    FrameOrder order(remaining, Rng::substream(cfg_.seed, {kOrderStream, first}), cfg_.order);
    FrameTrace ft;
    ft.frame = first;
    ft.temperature = temperature_for_frame(0, cfg_.temperature);
    for (std::size_t s = 0; s < sched.counts.size(); ++s) {
      auto pos = order.select_tokens_for_step(sched.counts[s]);
      for (auto& p : pos) p += first * tpf_;
      std::sort(pos.begin(), pos.end());
      BackboneInput<float> in = input(0, frames, masked);
      std::vector<float> zc, zn;
      if (br_.cond) zc = forward(in, cond_id_, AttentionRule::Full, nullptr, nullptr);
      if (br_.null) zn = forward(in, model_.null_condition(), AttentionRule::Full, nullptr, nullptr);
      // Tokens of different frames get their own temperature.
      std::size_t i = 0;
      while (i < pos.size()) {
        const std::size_t f = pos[i] / tpf_;
        std::size_t j = i;
        while (j < pos.size() && pos[j] / tpf_ == f) ++j;
        std::span<const std::size_t> group(pos.data() + i, j - i);
        sample_into(group, zc, zn, group, temperature_for_frame(f - first, cfg_.temperature));
        i = j;
      }
      for (std::size_t p : pos) masked[p] = 0;
      ft.step_tokens.push_back(pos.size());
      ++ft.backbone_calls;
    }
    trace_.backbone_calls += ft.backbone_calls;
    ft.wall_ms = ms_since(t0);
    trace_.frames.push_back(std::move(ft));
  }

 private:
  BackboneInput<float> input(std::size_t first_frame, std::size_t frames,
                             const std::vector<std::uint8_t>& masked) const {
    BackboneInput<float> in;
    in.frames = frames;
    in.height = grid_.dims().height;
    in.width = grid_.dims().width;
    in.first_frame = first_frame;
    in.tokens = grid_.data().subspan(first_frame * tpf_ * d_, frames * tpf_ * d_);
    in.masked = masked;
    return in;
  }

  std::vector<float> forward(const BackboneInput<float>& in, std::size_t cond, AttentionRule rule,
                             const KVCache<float>* cache, FrameKV<float>* kv) {
    ++trace_.backbone_passes;
    return bb_.forward(in, cond, rule, cache, nullptr, kv);
  }

  // One AR step on frame f: positions `pos` are sampled given the current
  // state of the frame (masked flags over the frame).
  void step_frame(std::size_t f, const std::vector<std::uint8_t>& masked,
                  const std::vector<std::size_t>& pos, double tau) {
    std::vector<std::size_t> rows(pos.begin(), pos.end());
    std::vector<float> zc, zn;
    if (cfg_.use_cache) {
      // Frames completed since the last fill are re-run together with this
      // frame and their keys/values appended to the caches.
      const std::size_t c = cached_frames_;
      const std::size_t lead = f - c;
      std::vector<std::uint8_t> flags(lead * tpf_, 0);
      flags.insert(flags.end(), masked.begin(), masked.end());
      const BackboneInput<float> in = input(c, lead + 1, flags);
      for (auto& r : rows) r += lead * tpf_;
      if (br_.cond) zc = fill_and_forward(in, cond_id_, *cache_cond_, lead);
      if (br_.null) zn = fill_and_forward(in, model_.null_condition(), *cache_null_, lead);
      cached_frames_ = f;
    } else {
      std::vector<std::uint8_t> flags(f * tpf_, 0);
      flags.insert(flags.end(), masked.begin(), masked.end());
      const BackboneInput<float> in = input(0, f + 1, flags);
      for (auto& r : rows) r += f * tpf_;
      if (br_.cond) zc = forward(in, cond_id_, AttentionRule::FrameCausal, nullptr, nullptr);
      if (br_.null)
        zn = forward(in, model_.null_condition(), AttentionRule::FrameCausal, nullptr, nullptr);
    }
    std::vector<std::size_t> targets(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) targets[i] = f * tpf_ + pos[i];
    sample_into(rows, zc, zn, targets, tau);
  }

  std::vector<float> fill_and_forward(const BackboneInput<float>& in, std::size_t cond,
                                      KVCache<float>& cache, std::size_t lead) {
    if (lead == 0) return forward(in, cond, AttentionRule::FrameCausal, &cache, nullptr);
    FrameKV<float> kv;
    std::vector<float> z = forward(in, cond, AttentionRule::FrameCausal, &cache, &kv);
    cache.append(slice_kv(kv, lead * tpf_, dm_));
    return z;
  }

  // Samples tokens for the given z rows and writes them to grid indices `targets`.
  void sample_into(std::span<const std::size_t> rows, const std::vector<float>& zc,
                   const std::vector<float>& zn, std::span<const std::size_t> targets,
                   double tau) {
    const std::vector<float> zcr = br_.cond ? gather_rows(zc, rows, dm_) : std::vector<float>{};
    const std::vector<float> znr = br_.null ? gather_rows(zn, rows, dm_) : std::vector<float>{};
    HeadPredictor pred(head_, zcr, znr);
    SamplerConfig sc;
    sc.infer_steps = cfg_.infer_steps;
    sc.temperature = tau;
    sc.cfg_scale = br_.scale;
    sc.temperature_every_step = cfg_.temperature_every_step;
    std::vector<Rng> rngs;
    rngs.reserve(targets.size());
    for (std::size_t t : targets)
      rngs.push_back(Rng::substream(cfg_.seed, {kTokenStream, t / tpf_, t % tpf_}));
    const std::vector<double> x = sample_tokens(pred, model_.schedule(), sc, rngs);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      auto tok = grid_.token(targets[i]);
      for (std::size_t k = 0; k < d_; ++k) tok[k] = static_cast<float>(x[i * d_ + k]);
    }
  }

  std::size_t cache_bytes() const {
    if (!cfg_.use_cache) return 0;
    std::size_t b = 0;
    if (br_.cond) b += cache_cond_->bytes();
    if (br_.null) b += cache_null_->bytes();
    return b;
  }

  const Model<float>& model_;
  const GenerationConfig& cfg_;
  TokenGrid& grid_;
  GenerationTrace& trace_;
  Backbone<float> bb_;
  DenoiserMLP<float> head_;
  Branches br_;
  std::size_t cond_id_;
  std::size_t dm_, d_, tpf_;
  std::optional<KVCache<float>> cache_cond_, cache_null_;
  std::size_t cached_frames_ = 0;
};

}  // namespace

StepCount count_steps(std::size_t tokens_per_frame, std::size_t generated_frames, DecodeMode mode,
                      std::size_t ar_steps) {
  if (mode == DecodeMode::NextToken) return {tokens_per_frame, generated_frames};
  return {ar_steps, generated_frames};
}

void GenerationConfig::validate() const {
  if (frames == 0 || height == 0 || width == 0)
    throw ConfigError("generation.frames", "output dims must be positive");
  if (ar_steps == 0) throw ConfigError("generation.ar_steps", "must be positive");
  if (ar_steps > height * width)
    throw ConfigError("generation.ar_steps", "more AR steps than tokens per frame");
  if (infer_steps == 0) throw ConfigError("generation.infer_steps", "must be positive");
  if (cfg_scale < 0) throw ConfigError("generation.cfg_scale", "must be non-negative");
  if (temperature.mode == TemperaturePolicy::Mode::Constant &&
      !(temperature.value > 0 && temperature.value <= 1))
    throw ConfigError("generation.temperature", "must be in (0, 1]");
}

nlohmann::json GenerationTrace::to_json(bool with_timing) const {
  nlohmann::json j;
  j["tokens_per_frame"] = tokens_per_frame;
  j["prefix_frames"] = prefix_frames;
  j["cached"] = cached;
  j["joint"] = joint;
  j["backbone_calls"] = backbone_calls;
  j["backbone_passes"] = backbone_passes;
  j["peak_cache_bytes"] = peak_cache_bytes;
  j["steps"] = {{"spatial", steps.spatial}, {"temporal", steps.temporal}};
  nlohmann::json fr = nlohmann::json::array();
  for (const auto& f : frames) {
    nlohmann::json e;
    e["frame"] = f.frame;
    e["temperature"] = f.temperature;
    e["step_tokens"] = f.step_tokens;
    e["backbone_calls"] = f.backbone_calls;
    e["cache_bytes"] = f.cache_bytes;
    if (with_timing) e["wall_ms"] = f.wall_ms;
    fr.push_back(std::move(e));
  }
  j["frames"] = std::move(fr);
  if (with_timing) j["wall_ms"] = wall_ms;
  return j;
}

GenerationResult generate(const Model<float>& model, std::optional<MotionClass> cond,
                          const TokenGrid& prefix, const GenerationConfig& config) {
  config.validate();
  const auto& mc = model.config();
  const GridDims out_dims{config.frames, config.height, config.width};
  const std::size_t k = prefix.dims().frames;
  if (prefix.dims().height != config.height || prefix.dims().width != config.width)
    throw ShapeError("prefix grid does not match the output grid");
  if (prefix.token_dim() != mc.backbone.token_dim)
    throw ShapeError("prefix token dim does not match the model");
  if (k == 0 || k >= config.frames)
    throw ArgumentError("prefix must hold at least one frame and fewer than the output");
  if (mc.backbone.positional == PositionalMode::SinCos &&
      (config.height != mc.grid_height || config.width != mc.grid_width))
    throw UnsupportedConfigError("absolute positional encoding cannot change the grid");

  const auto t0 = Clock::now();
  GenerationResult res;
  res.grid = TokenGrid(out_dims, prefix.token_dim());
  std::copy(prefix.data().begin(), prefix.data().end(), res.grid.data().begin());
  GenerationTrace& tr = res.trace;
  tr.tokens_per_frame = out_dims.tokens_per_frame();
  tr.prefix_frames = k;
  tr.joint = config.joint;
  tr.cached = config.use_cache && !config.joint;
  tr.steps = count_steps(tr.tokens_per_frame, config.frames - k, DecodeMode::Masked,
                         config.ar_steps);

  GenerationConfig cfg = config;
  if (cfg.joint) cfg.use_cache = false;
  Session session(model, cond, cfg, res.grid, tr);
  if (cfg.joint)
    session.run_joint(k);
  else
    session.run_framewise(k);
  tr.wall_ms = ms_since(t0);
  return res;
}

GenerationResult video_to_video(const Model<float>& model, const TokenGrid& prefix,
                                const GenerationConfig& config) {
  if (prefix.dims().frames < 2) throw ArgumentError("video-to-video needs at least two frames");
  return generate(model, std::nullopt, prefix, config);
}

GenerationResult extrapolate(const Model<float>& model, std::optional<MotionClass> cond,
                             const TokenGrid& prefix, const GenerationConfig& config) {
  if (model.config().backbone.positional != PositionalMode::Rope)
    throw UnsupportedConfigError("extrapolation needs rotary positions");
  return generate(model, cond, prefix, config);
}

}  // namespace vmar
