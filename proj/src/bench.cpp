#include "vmar/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "vmar/errors.hpp"
#include "vmar/run_config.hpp"

namespace vmar {

namespace {

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string fmt_size(std::size_t v) { return std::to_string(v); }

EvalSettings eval_from(const RunConfig& cfg) {
  EvalSettings s;
  s.seeds = cfg.bench.seeds;
  s.frames = cfg.bench.frames;
  s.ar_steps = cfg.bench.ar_steps;
  s.infer_steps = cfg.bench.infer_steps;
  s.cfg_scale = cfg.generation.config.cfg_scale;
  s.height_px = cfg.tokenizer.height_px;
  s.width_px = cfg.tokenizer.width_px;
  s.max_speed = cfg.curriculum.max_speed;
  s.sample_seed = cfg.generation.config.seed;
  return s;
}

GenerationConfig gen_config(const EvalSettings& s, const GridDims& dims, std::uint64_t seed) {
  GenerationConfig g;
  g.frames = s.frames;
  g.height = dims.height;
  g.width = dims.width;
  g.ar_steps = s.ar_steps;
  g.infer_steps = s.infer_steps;
  g.cfg_scale = s.cfg_scale;
  g.temperature = s.temperature;
  g.joint = s.joint;
  g.use_cache = !s.joint;
  g.seed = seed + (s.sample_seed << 32);
  return g;
}

}  // namespace

std::string Report::to_csv(const std::string& config_hash) const {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << "\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

std::vector<int> rollout_error(const TokenGrid& generated, const MotionSpec& spec,
                               const ToyTokenizer& tokenizer) {
  if (generated.token_dim() != tokenizer.token_dim())
    throw ShapeError("token dim does not match the tokenizer");
  const PixelVideo v = tokenizer.detokenize(generated);
  std::vector<int> err(v.frames);
  for (std::size_t t = 0; t < v.frames; ++t) {
    const auto got = v.argmax(t);
    const auto want = oracle_position(spec, t, v.height, v.width);
    err[t] = std::max(std::abs(got[0] - want[0]), std::abs(got[1] - want[1]));
  }
  return err;
}

std::vector<double> latent_frame_errors(std::span<const int> pixel_errors,
                                        std::size_t latent_frames, std::size_t temporal_patch) {
  if (latent_frames == 0 || pixel_errors.size() != (latent_frames - 1) * temporal_patch + 1)
    throw ShapeError("pixel error count does not match the latent frame count");
  std::vector<double> out(latent_frames);
  out[0] = pixel_errors[0];
  for (std::size_t f = 1; f < latent_frames; ++f) {
    double s = 0;
    for (std::size_t k = 0; k < temporal_patch; ++k) s += pixel_errors[(f - 1) * temporal_patch + 1 + k];
    out[f] = s / static_cast<double>(temporal_patch);
  }
  return out;
}

std::optional<MotionClass> classify_direction(const PixelVideo& video, const MotionSpec& spec,
                                              std::size_t first_frame) {
  long best = std::numeric_limits<long>::max();
  std::optional<MotionClass> pick;
  bool tie = false;
  for (std::size_t c = 0; c < kMotionClassCount; ++c) {
    MotionSpec s = spec;
    s.cls = static_cast<MotionClass>(c);
    long total = 0;
    for (std::size_t t = first_frame; t < video.frames; ++t) {
      const auto got = video.argmax(t);
      const auto want = oracle_position(s, t, video.height, video.width);
      total += std::max(std::abs(got[0] - want[0]), std::abs(got[1] - want[1]));
    }
    if (total < best) {
      best = total;
      pick = s.cls;
      tie = false;
    } else if (total == best) {
      tie = true;
    }
  }
  if (tie) return std::nullopt;
  return pick;
}

double binomial_upper_tail(std::size_t n, std::size_t k, double p) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  double total = 0;
  for (std::size_t i = k; i <= n; ++i) {
    const double lc = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(i) + 1) -
                      std::lgamma(static_cast<double>(n - i) + 1);
    total += std::exp(lc + static_cast<double>(i) * std::log(p) +
                      static_cast<double>(n - i) * std::log1p(-p));
  }
  return std::min(1.0, total);
}

MotionSpec eval_spec(const EvalSettings& s, std::size_t i) {
  Rng rng(s.seed_base + i);
  return random_motion_spec(rng, s.height_px, s.width_px, s.max_speed);
}

RolloutSummary evaluate_rollouts(const Model<float>& model, const ToyTokenizer& tokenizer,
                                 const EvalSettings& s, std::size_t late) {
  if (s.prefix_frames == 0 || s.prefix_frames >= s.frames)
    throw ArgumentError("evaluation needs at least one generated frame");
  const std::size_t gen = s.frames - s.prefix_frames;
  late = std::min(late, gen);
  RolloutSummary out;
  out.per_frame.assign(gen, 0.0);
  const std::size_t pf = tokenizer.pixel_frames(s.frames);
  for (std::size_t i = 0; i < s.seeds; ++i) {
    const MotionSpec spec = eval_spec(s, i);
    const TokenGrid grid =
        tokenizer.tokenize(gen_bouncing_ball(spec, pf, s.height_px, s.width_px, s.seed_base + i));
    const GenerationConfig g = gen_config(s, grid.dims(), s.seed_base + i);
    const auto res = generate(model, s.conditioned ? std::optional(spec.cls) : std::nullopt,
                              grid.first_frames(s.prefix_frames), g);
    const auto px = rollout_error(res.grid, spec, tokenizer);
    const auto lat = latent_frame_errors(px, s.frames, tokenizer.patch()[0]);
    for (std::size_t f = 0; f < gen; ++f) out.per_frame[f] += lat[s.prefix_frames + f];
  }
  for (auto& v : out.per_frame) v /= static_cast<double>(s.seeds);
  for (double v : out.per_frame) out.mean += v;
  out.mean /= static_cast<double>(gen);
  for (std::size_t f = gen - late; f < gen; ++f) out.late_mean += out.per_frame[f];
  out.late_mean /= static_cast<double>(late);
  return out;
}

V2VSummary evaluate_v2v(const Model<float>& model, const ToyTokenizer& tokenizer,
                        const EvalSettings& s) {
  if (s.prefix_frames < 2) throw ArgumentError("video-to-video needs at least two prefix frames");
  const std::size_t pf = tokenizer.pixel_frames(s.frames);
  const std::size_t first = tokenizer.pixel_frames(s.prefix_frames);
  V2VSummary out;
  for (std::size_t i = 0; i < s.seeds; ++i) {
    const MotionSpec spec = eval_spec(s, i);
    const TokenGrid grid =
        tokenizer.tokenize(gen_bouncing_ball(spec, pf, s.height_px, s.width_px, s.seed_base + i));
    const auto res = video_to_video(model, grid.first_frames(s.prefix_frames),
                                    gen_config(s, grid.dims(), s.seed_base + i));
    const auto cls = classify_direction(tokenizer.detokenize(res.grid), spec, first);
    ++out.trials;
    if (cls && *cls == spec.cls) ++out.correct;
  }
  out.accuracy = static_cast<double>(out.correct) / static_cast<double>(out.trials);
  out.p_value = binomial_upper_tail(out.trials, out.correct, 0.25);
  return out;
}

double causality_leak(const Model<float>& model, AttentionRule rule, const GridDims& dims,
                      std::size_t k, std::uint64_t seed) {
  if (k == 0 || k >= dims.frames) throw ArgumentError("k must split the clip");
  const std::size_t d = model.config().backbone.token_dim;
  const std::size_t dm = model.config().backbone.model_dim;
  const std::size_t tpf = dims.tokens_per_frame();
  Rng rng(seed);
  std::vector<float> tokens(dims.count() * d);
  for (auto& v : tokens) v = static_cast<float>(rng.normal());
  std::vector<std::uint8_t> masked(dims.count());
  for (auto& m : masked) m = rng.uniform() < 0.3 ? 1 : 0;
  const std::size_t cond = rng.below(model.config().backbone.num_classes + 1);
  BackboneInput<float> in{dims.frames, dims.height, dims.width, 0, tokens, masked, {}};
  const auto bb = model.backbone();
  const auto z1 = bb.forward(in, cond, rule);
  for (std::size_t i = k * tpf * d; i < tokens.size(); ++i) tokens[i] = static_cast<float>(rng.normal());
  const auto z2 = bb.forward(in, cond, rule);
  double leak = 0;
  for (std::size_t i = 0; i < k * tpf * dm; ++i)
    leak = std::max(leak, static_cast<double>(std::fabs(z1[i] - z2[i])));
  return leak;
}

Report bench_steps(const Model<float>& model, const ToyTokenizer& tokenizer, const RunConfig& cfg) {
  const auto& b = cfg.bench;
  const auto& gs = cfg.generation;
  MotionSpec spec{*parse_motion_class(gs.cls), gs.start_row, gs.start_col, gs.speed};
  const std::size_t hp = cfg.tokenizer.height_px, wp = cfg.tokenizer.width_px;
  const TokenGrid grid = tokenizer.tokenize(
      gen_bouncing_ball(spec, tokenizer.pixel_frames(b.timing_frames), hp, wp, gs.config.seed));
  const std::size_t gen = b.timing_frames - 1;
  const std::size_t tpf = grid.dims().tokens_per_frame();

  GenerationConfig g = gs.config;
  g.frames = b.timing_frames;
  g.height = grid.dims().height;
  g.width = grid.dims().width;
  g.ar_steps = b.timing_ar_steps;
  g.infer_steps = b.timing_infer_steps;

  Report r;
  r.header = {"label", "spatial_steps", "temporal_steps", "backbone_calls", "wall_ms",
              "peak_cache_bytes"};
  const StepCount ntp = count_steps(tpf, gen, DecodeMode::NextToken);
  r.rows.push_back({"ntp", fmt_size(ntp.spatial), fmt_size(ntp.temporal),
                    fmt_size(ntp.spatial * ntp.temporal), "", "0"});
  for (bool cache : {false, true}) {
    g.use_cache = cache;
    const auto res = generate(model, spec.cls, grid.first_frames(1), g);
    const auto& t = res.trace;
    r.rows.push_back({cache ? "masked_cache" : "masked_no_cache", fmt_size(t.steps.spatial),
                      fmt_size(t.steps.temporal), fmt_size(t.backbone_calls),
                      fmt(t.wall_ms, "%.1f"), fmt_size(t.peak_cache_bytes)});
  }
  return r;
}

Report ablate_temperature(const Model<float>& model, const ToyTokenizer& tokenizer,
                          const RunConfig& cfg) {
  EvalSettings s = eval_from(cfg);
  std::vector<TemperaturePolicy> policies;
  for (double t : cfg.bench.temperatures) policies.push_back(TemperaturePolicy::constant(t));
  policies.push_back(TemperaturePolicy::progressive());

  Report r;
  r.header = {"temperature"};
  for (std::size_t f = 1; f < s.frames; ++f) r.header.push_back("frame_" + std::to_string(f));
  r.header.push_back("mean_error");
  r.header.push_back("late_error");
  for (const auto& p : policies) {
    s.temperature = p;
    const auto sum = evaluate_rollouts(model, tokenizer, s, cfg.bench.late_frames);
    std::vector<std::string> row{p.label()};
    for (double v : sum.per_frame) row.push_back(fmt(v));
    row.push_back(fmt(sum.mean));
    row.push_back(fmt(sum.late_mean));
    r.rows.push_back(std::move(row));
  }
  return r;
}

Report ablate_pe(const Model<float>& model, const ToyTokenizer& tokenizer, const RunConfig& cfg,
                 const Model<float>* sincos) {
  std::optional<Model<float>> fresh;
  if (!sincos) {
    ModelConfig mc = model.config();
    mc.backbone.positional = PositionalMode::SinCos;
    // Smallest width >= the RoPE width that splits into heads and three sin/cos axes.
    const std::size_t step = 6 * mc.backbone.heads;
    mc.backbone.model_dim = (mc.backbone.model_dim + step - 1) / step * step;
    mc.backbone.head_dim = mc.backbone.model_dim / mc.backbone.heads;
    mc.backbone.rope.head_dim = mc.backbone.head_dim;  // unused by absolute encodings
    fresh.emplace(mc);
    fresh->init(cfg.init_seed);
    sincos = &*fresh;
  }
  const std::size_t hp = cfg.tokenizer.height_px, wp = cfg.tokenizer.width_px;
  struct Target {
    std::string label;
    std::size_t frames, height_px, width_px;
  };
  const std::size_t base_frames = cfg.latent_dims().frames;
  const std::vector<Target> targets{
      {"frames_x2", 2 * base_frames - 1, hp, wp},
      {"grid_x1.5", std::min<std::size_t>(base_frames, 4), hp * 3 / 2, wp * 3 / 2},
  };

  Report r;
  r.header = {"positional", "target", "frames", "height", "width", "status", "finite", "mean_error"};
  for (const Model<float>* m : {&model, sincos}) {
    const bool rope = m->config().backbone.positional == PositionalMode::Rope;
    for (const auto& t : targets) {
      EvalSettings s = eval_from(cfg);
      s.seeds = 1;
      s.frames = t.frames;
      s.height_px = t.height_px;
      s.width_px = t.width_px;
      const GridDims dims = tokenizer.latent_dims(tokenizer.pixel_frames(t.frames), t.height_px, t.width_px);
      std::vector<std::string> row{rope ? "rope" : "sincos", t.label, fmt_size(dims.frames),
                                   fmt_size(dims.height), fmt_size(dims.width)};
      const MotionSpec spec = eval_spec(s, 0);
      const TokenGrid grid = tokenizer.tokenize(
          gen_bouncing_ball(spec, tokenizer.pixel_frames(t.frames), t.height_px, t.width_px, s.seed_base));
      try {
        const auto res = extrapolate(*m, spec.cls, grid.first_frames(1), gen_config(s, dims, s.seed_base));
        const auto px = rollout_error(res.grid, spec, tokenizer);
        double mean = 0;
        for (std::size_t i = 1; i < px.size(); ++i) mean += px[i];
        mean /= static_cast<double>(px.size() - 1);
        row.insert(row.end(), {"success", res.grid.all_finite() ? "true" : "false", fmt(mean)});
      } catch (const UnsupportedConfigError&) {
        row.insert(row.end(), {"unsupported", "", ""});
      }
      r.rows.push_back(std::move(row));
    }
  }
  return r;
}

Report ablate_total_mask(const Model<float>& next_frame, const Model<float>& total_mask,
                         const ToyTokenizer& tokenizer, const RunConfig& cfg) {
  EvalSettings s = eval_from(cfg);
  Report r;
  r.header = {"mode"};
  for (std::size_t f = 1; f < s.frames; ++f) r.header.push_back("frame_" + std::to_string(f));
  r.header.push_back("mean_error");
  r.header.push_back("late_error");
  for (bool joint : {false, true}) {
    s.joint = joint;
    const auto sum = evaluate_rollouts(joint ? total_mask : next_frame, tokenizer, s,
                                       cfg.bench.late_frames);
    std::vector<std::string> row{joint ? "total_mask" : "next_frame"};
    for (double v : sum.per_frame) row.push_back(fmt(v));
    row.push_back(fmt(sum.mean));
    row.push_back(fmt(sum.late_mean));
    r.rows.push_back(std::move(row));
  }
  return r;
}

Report ablate_causal(const Model<float>& model, const RunConfig& cfg) {
  const GridDims dims = cfg.latent_dims();
  Report r;
  r.header = {"attention", "trials", "max_leak", "mean_leak"};
  const std::size_t trials = 20;
  for (AttentionRule rule : {AttentionRule::FrameCausal, AttentionRule::Full}) {
    double mx = 0, sum = 0;
    for (std::size_t i = 0; i < trials; ++i) {
      const std::size_t k = 1 + i % (dims.frames - 1);
      const double leak = causality_leak(model, rule, dims, k, 77 + i);
      mx = std::max(mx, leak);
      sum += leak;
    }
    r.rows.push_back({rule == AttentionRule::FrameCausal ? "frame_causal" : "full",
                      fmt_size(trials), fmt(mx, "%.3e"), fmt(sum / trials, "%.3e")});
  }
  return r;
}

}  // namespace vmar
