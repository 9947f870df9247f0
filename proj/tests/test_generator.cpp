#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "vmar/errors.hpp"
#include "vmar/generator.hpp"

namespace vmar {
namespace {

ModelConfig gen_config(PositionalMode pos = PositionalMode::Rope) {
  ModelConfig c;
  auto& b = c.backbone;
  b.layers = 2;
  b.model_dim = 24;
  b.heads = 3;
  b.head_dim = 8;
  b.mlp_ratio = 2;
  b.token_dim = 8;
  b.rope = RoPEFreqs::for_head_dim(8);
  b.positional = pos;
  c.head.width = 16;
  c.head.blocks = 2;
  c.head.freq_dim = 16;
  c.grid_height = 3;
  c.grid_width = 3;
  return c;
}

// Random weights everywhere (the head's output layers start at zero otherwise).
Model<float> random_model(PositionalMode pos = PositionalMode::Rope, std::uint64_t seed = 1) {
  Model<float> m(gen_config(pos));
  m.init(seed);
  Rng rng(seed + 100);
  m.params().visit([&](const std::string&, Tensor<float>& t) {
    for (auto& v : t.data) v += static_cast<float>(0.05 * rng.normal());
  });
  return m;
}

TokenGrid random_prefix(std::size_t frames, std::size_t h = 3, std::size_t w = 3) {
  Rng rng(42);
  std::vector<float> data(frames * h * w * 8);
  for (auto& v : data) v = static_cast<float>(rng.normal());
  return TokenGrid({frames, h, w}, 8, std::move(data));
}

GenerationConfig quick(std::size_t frames = 4) {
  GenerationConfig g;
  g.frames = frames;
  g.height = 3;
  g.width = 3;
  g.ar_steps = 4;
  g.infer_steps = 10;
  g.seed = 5;
  return g;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::fabs(a[i] - b[i])));
  return m;
}

TEST(CountSteps, Examples) {
  EXPECT_EQ(count_steps(64, 6, DecodeMode::Masked), (StepCount{64, 6}));
  EXPECT_EQ(count_steps(64, 6, DecodeMode::NextToken), (StepCount{64, 6}));
  EXPECT_EQ(count_steps(64, 6, DecodeMode::Masked, 16), (StepCount{16, 6}));
  EXPECT_EQ(count_steps(256, 12, DecodeMode::NextToken, 16), (StepCount{256, 12}));
}

TEST(Generate, PrefixIsKeptAndShapeIsRight) {
  const auto model = random_model();
  const auto prefix = random_prefix(2);
  const auto res = generate(model, MotionClass::Right, prefix, quick(5));
  EXPECT_EQ(res.grid.dims(), (GridDims{5, 3, 3}));
  for (std::size_t i = 0; i < prefix.data().size(); ++i) ASSERT_EQ(res.grid.data()[i], prefix.data()[i]);
  EXPECT_TRUE(res.grid.all_finite());
  EXPECT_EQ(res.trace.prefix_frames, 2u);
  EXPECT_EQ(res.trace.frames.size(), 3u);
  EXPECT_EQ(res.trace.frames.front().frame, 2u);
}

TEST(Generate, CallCountsFollowTheSchedule) {
  const auto model = random_model();
  const auto prefix = random_prefix(1);
  for (bool cache : {true, false}) {
    auto g = quick(4);
    g.use_cache = cache;
    const auto guided = generate(model, MotionClass::Up, prefix, g);
    EXPECT_EQ(guided.trace.backbone_calls, 4u * 3u);
    EXPECT_EQ(guided.trace.backbone_passes, 2u * 4u * 3u);
    EXPECT_EQ(guided.trace.steps, (StepCount{4, 3}));
    const auto unguided = generate(model, std::nullopt, prefix, g);
    EXPECT_EQ(unguided.trace.backbone_passes, 4u * 3u);
    g.cfg_scale = 1.0;
    EXPECT_EQ(generate(model, MotionClass::Up, prefix, g).trace.backbone_passes, 4u * 3u);

    const auto sched = cosine_unmask_counts(9, 4);
    for (const auto& f : guided.trace.frames) {
      EXPECT_EQ(f.step_tokens, sched.counts);
      EXPECT_EQ(f.backbone_calls, 4u);
    }
  }
}

TEST(Generate, CacheMatchesFullRecomputation) {
  for (auto pos : {PositionalMode::Rope, PositionalMode::SinCos}) {
    const auto model = random_model(pos);
    const auto prefix = random_prefix(1);
    auto g = quick(5);
    const auto cached = generate(model, MotionClass::Left, prefix, g);
    g.use_cache = false;
    const auto full = generate(model, MotionClass::Left, prefix, g);
    EXPECT_LT(max_abs_diff(cached.grid.data(), full.grid.data()), 1e-5);
    RecordProperty("max_abs_diff", std::to_string(max_abs_diff(cached.grid.data(), full.grid.data())));
    EXPECT_GT(cached.trace.peak_cache_bytes, 0u);
    EXPECT_EQ(full.trace.peak_cache_bytes, 0u);
    // Both branches hold keys and values of the four frames before the last one.
    EXPECT_EQ(cached.trace.frames.back().cache_bytes, 2u * (2 * 2 * 4 * 9 * 24 * sizeof(float)));
  }
}

TEST(Generate, DeterministicPerSeed) {
  const auto model = random_model();
  const auto prefix = random_prefix(1);
  auto g = quick(4);
  const auto a = generate(model, MotionClass::Down, prefix, g);
  const auto b = generate(model, MotionClass::Down, prefix, g);
  EXPECT_EQ(std::vector<float>(a.grid.data().begin(), a.grid.data().end()),
            std::vector<float>(b.grid.data().begin(), b.grid.data().end()));
  EXPECT_EQ(a.trace.to_json().dump(), b.trace.to_json().dump());
  g.seed = 6;
  const auto c = generate(model, MotionClass::Down, prefix, g);
  EXPECT_GT(max_abs_diff(a.grid.data(), c.grid.data()), 1e-3);
}

TEST(Generate, EarlierFramesDoNotDependOnLength) {
  const auto model = random_model();
  const auto prefix = random_prefix(1);
  for (bool cache : {true, false}) {
    auto g = quick(3);
    g.use_cache = cache;
    const auto short_run = generate(model, MotionClass::Right, prefix, g);
    g.frames = 5;
    const auto long_run = generate(model, MotionClass::Right, prefix, g);
    const auto n = short_run.grid.data().size();
    for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(short_run.grid.data()[i], long_run.grid.data()[i]);
  }
}

TEST(Generate, TemperatureFollowsGeneratedIndex) {
  const auto model = random_model();
  const auto res = generate(model, MotionClass::Right, random_prefix(2), quick(5));
  ASSERT_EQ(res.trace.frames.size(), 3u);
  EXPECT_EQ(res.trace.frames[0].temperature, 1.0);
  EXPECT_EQ(res.trace.frames[1].temperature, 0.91);
  auto g = quick(5);
  g.temperature = TemperaturePolicy::constant(0.94);
  EXPECT_EQ(generate(model, MotionClass::Right, random_prefix(2), g).trace.frames[2].temperature, 0.94);
}

TEST(Generate, TraceJsonOmitsTimingByDefault) {
  const auto model = random_model();
  const auto res = generate(model, MotionClass::Right, random_prefix(1), quick(3));
  const auto j = res.trace.to_json();
  EXPECT_FALSE(j.contains("wall_ms"));
  EXPECT_FALSE(j["frames"][0].contains("wall_ms"));
  EXPECT_EQ(j["backbone_calls"], 8);
  EXPECT_TRUE(res.trace.to_json(true).contains("wall_ms"));
}

TEST(Generate, JointDecodingBaseline) {
  const auto model = random_model();
  const auto prefix = random_prefix(1);
  auto g = quick(4);
  g.joint = true;
  const auto res = generate(model, MotionClass::Right, prefix, g);
  EXPECT_EQ(res.trace.backbone_calls, 4u * 3u);
  EXPECT_FALSE(res.trace.cached);
  EXPECT_TRUE(res.trace.joint);
  EXPECT_EQ(res.trace.peak_cache_bytes, 0u);
  std::size_t written = 0;
  for (const auto& f : res.trace.frames) written += std::accumulate(f.step_tokens.begin(), f.step_tokens.end(), std::size_t{0});
  EXPECT_EQ(written, 27u);
  for (std::size_t i = 0; i < prefix.data().size(); ++i) ASSERT_EQ(res.grid.data()[i], prefix.data()[i]);
  EXPECT_TRUE(res.grid.all_finite());
}

TEST(Generate, ExtrapolatesBeyondTrainingGrid) {
  const auto model = random_model();
  GenerationConfig g = quick(9);
  g.height = 5;
  g.width = 5;
  const auto res = extrapolate(model, MotionClass::Up, random_prefix(1, 5, 5), g);
  EXPECT_EQ(res.grid.dims(), (GridDims{9, 5, 5}));
  EXPECT_TRUE(res.grid.all_finite());

  const auto abs_model = random_model(PositionalMode::SinCos);
  EXPECT_THROW(extrapolate(abs_model, MotionClass::Up, random_prefix(1, 5, 5), g), UnsupportedConfigError);
  EXPECT_THROW(generate(abs_model, MotionClass::Up, random_prefix(1, 5, 5), g), UnsupportedConfigError);
  // Longer clips at the training grid are fine for both encodings.
  EXPECT_TRUE(generate(abs_model, MotionClass::Up, random_prefix(1), quick(9)).grid.all_finite());
}

TEST(Generate, VideoToVideo) {
  const auto model = random_model();
  const auto res = video_to_video(model, random_prefix(2), quick(4));
  EXPECT_EQ(res.trace.backbone_passes, res.trace.backbone_calls);
  EXPECT_THROW(video_to_video(model, random_prefix(1), quick(4)), ArgumentError);
}

TEST(Generate, RejectsBadRequests) {
  const auto model = random_model();
  EXPECT_THROW(generate(model, std::nullopt, random_prefix(1, 4, 3), quick(4)), ShapeError);
  EXPECT_THROW(generate(model, std::nullopt, random_prefix(4), quick(4)), ArgumentError);
  EXPECT_THROW(generate(model, std::nullopt, TokenGrid({0, 3, 3}, 8), quick(4)), ArgumentError);
  auto g = quick(4);
  g.ar_steps = 10;
  EXPECT_THROW(generate(model, std::nullopt, random_prefix(1), g), ConfigError);
  g = quick(4);
  g.temperature = TemperaturePolicy::constant(1.5);
  EXPECT_THROW(generate(model, std::nullopt, random_prefix(1), g), ConfigError);
  g = quick(4);
  g.infer_steps = 0;
  EXPECT_THROW(generate(model, std::nullopt, random_prefix(1), g), ConfigError);
}

}  // namespace
}  // namespace vmar
