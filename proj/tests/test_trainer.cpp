#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "vmar/errors.hpp"
#include "vmar/trainer.hpp"

namespace vmar {
namespace {

ModelConfig tiny_config(PositionalMode pos = PositionalMode::Rope) {
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
  c.grid_height = 2;
  c.grid_width = 2;
  return c;
}

TokenGrid random_grid(GridDims dims, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> data(dims.count() * 8);
  for (auto& v : data) v = static_cast<float>(rng.normal());
  return TokenGrid(dims, 8, std::move(data));
}

template <typename T>
void jitter(Model<T>& model, std::uint64_t seed, double scale) {
  Rng rng(seed);
  model.params().visit([&](const std::string&, Tensor<T>& t) {
    for (auto& v : t.data) v += static_cast<T>(scale * rng.normal());
  });
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mask_ratio_min = 0.9;
  c.mask_ratio_max = 0.8;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "train.mask_ratio");
  }
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NextFrameLoss, LossSitsOnMaskedTokensOfOneFrame) {
  Model<float> model(tiny_config());
  model.init(1);
  const auto grid = random_grid({5, 2, 2}, 2);
  TrainConfig cfg;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    const auto sl = next_frame_sample_loss<float>(model, grid, MotionClass::Up, rng, cfg, nullptr, 1.0f);
    ASSERT_LT(sl.target, 5u);
    EXPECT_GE(sl.loss_positions, 3u);  // round(0.7 * 4)
    EXPECT_LE(sl.loss_positions, 4u);
    EXPECT_EQ(sl.loss_frames.size(), sl.loss_positions);
    for (std::size_t f : sl.loss_frames) EXPECT_EQ(f, sl.target);
    EXPECT_EQ(sl.rows, (sl.target + 1) * 4);
    EXPECT_TRUE(std::isfinite(sl.loss));
  }
}

TEST(NextFrameLoss, TargetFrameIsUniform) {
  Model<float> model(tiny_config());
  model.init(1);
  const std::size_t T = 5;
  const auto grid = random_grid({T, 2, 2}, 3);
  TrainConfig cfg;
  cfg.diffusion_batch_mul = 1;
  std::vector<double> counts(T, 0);
  const int n = 5000;
  for (int s = 0; s < n; ++s) {
    Rng rng = Rng::substream(77, {static_cast<std::uint64_t>(s)});
    ++counts[next_frame_sample_loss<float>(model, grid, std::nullopt, rng, cfg, nullptr, 1.0f).target];
  }
  double chi2 = 0;
  const double expect = double(n) / T;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 18.47);  // chi-square, 4 dof, p = 0.001
}

TEST(NextFrameLoss, FutureFramesGetNoGradient) {
  Model<float> model(tiny_config());
  model.init(4);
  jitter(model, 5, 0.05);
  const auto grid = random_grid({4, 2, 2}, 6);
  TrainConfig full;
  full.truncate_future = false;
  TrainConfig cut;
  std::size_t seen_early = 0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng r1(s), r2(s);
    const auto a = next_frame_sample_loss<float>(model, grid, MotionClass::Left, r1, full, nullptr, 1.0f, true);
    const auto b = next_frame_sample_loss<float>(model, grid, MotionClass::Left, r2, cut, nullptr, 1.0f, true);
    ASSERT_EQ(a.target, b.target);
    ASSERT_EQ(a.d_embed.size(), 16u * 24u);
    const std::size_t boundary = (a.target + 1) * 4 * 24;
    for (std::size_t i = boundary; i < a.d_embed.size(); ++i) ASSERT_EQ(a.d_embed[i], 0.0f);
    double mass = 0;
    for (std::size_t i = 0; i < boundary; ++i) mass += std::fabs(a.d_embed[i]);
    EXPECT_GT(mass, 0.0);
    EXPECT_NEAR(a.loss, b.loss, 1e-5 * std::max(1.0f, std::fabs(a.loss)));
    if (a.target < 3) ++seen_early;
  }
  EXPECT_GT(seen_early, 0u);
}

// Full-model gradient (backbone and head) of the per-sample loss against
// central differences, with the sample's RNG replayed for every evaluation.
class SampleGradient : public ::testing::TestWithParam<std::tuple<TrainMode, PositionalMode>> {};

TEST_P(SampleGradient, MatchesFiniteDifferences) {
  const auto [mode, pos] = GetParam();
  Model<float> base(tiny_config(pos));
  base.init(8);
  Model<double> model = cast_model<double>(base);
  jitter(model, 9, 0.1);
  const auto grid = random_grid({3, 2, 2}, 10);
  TrainConfig cfg;
  cfg.diffusion_batch_mul = 2;
  auto eval = [&](ModelParams<double>* g) {
    Rng rng(123);
    return mode == TrainMode::NextFrame
               ? next_frame_sample_loss<double>(model, grid, MotionClass::Down, rng, cfg, g, 1.0)
               : total_mask_sample_loss<double>(model, grid, MotionClass::Down, rng, cfg, g, 1.0);
  };
  ModelParams<double> grad(model.config());
  grad.zero();
  const double loss0 = eval(&grad).loss;
  EXPECT_NEAR(eval(nullptr).loss, loss0, 1e-12);

  struct Entry {
    std::string name;
    double* ptr;
    double analytic;
  };
  std::vector<Tensor<double>*> gt;
  grad.visit([&](const std::string&, Tensor<double>& t) { gt.push_back(&t); });
  std::vector<Entry> entries;
  std::size_t ti = 0;
  model.params().visit([&](const std::string& name, Tensor<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) entries.push_back({name, &t.data[i], gt[ti]->data[i]});
    ++ti;
  });
  Rng pick(11);
  std::set<std::string> touched;
  for (int k = 0; k < 300; ++k) {
    auto& e = entries[pick.below(entries.size())];
    const double x = *e.ptr, h = 1e-6;
    *e.ptr = x + h;
    const double up = eval(nullptr).loss;
    *e.ptr = x - h;
    const double down = eval(nullptr).loss;
    *e.ptr = x;
    const double fd = (up - down) / (2 * h);
    const double rel = std::fabs(fd - e.analytic) / std::max({std::fabs(fd), std::fabs(e.analytic), 1e-4});
    EXPECT_LT(rel, 1e-4) << e.name << " fd " << fd << " analytic " << e.analytic;
    touched.insert(e.name.substr(0, e.name.find('.')));
  }
  EXPECT_EQ(touched.count("backbone"), 1u);
  EXPECT_EQ(touched.count("head"), 1u);
}

INSTANTIATE_TEST_SUITE_P(Modes, SampleGradient,
                         ::testing::Combine(::testing::Values(TrainMode::NextFrame, TrainMode::TotalMask),
                                            ::testing::Values(PositionalMode::Rope, PositionalMode::SinCos)));

TEST(TotalMaskLoss, SpansFrames) {
  Model<float> model(tiny_config());
  model.init(1);
  const auto grid = random_grid({4, 2, 2}, 12);
  TrainConfig cfg;
  std::size_t spanning = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const auto sl = total_mask_sample_loss<float>(model, grid, std::nullopt, rng, cfg, nullptr, 1.0f);
    EXPECT_GE(sl.loss_positions, 11u);  // round(0.7 * 16)
    std::set<std::size_t> frames(sl.loss_frames.begin(), sl.loss_frames.end());
    if (frames.size() > 1) ++spanning;
  }
  EXPECT_EQ(spanning, 50u);
}

TEST(TrainerTest, AdamWFirstStepMatchesClosedForm) {
  Model<float> model(tiny_config());
  model.init(13);
  jitter(model, 14, 0.05);
  const auto grid = random_grid({3, 2, 2}, 15);
  TrainConfig cfg;
  cfg.seed = 16;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.1;

  ModelParams<float> grad(model.config());
  grad.zero();
  Rng rng = Rng::substream(cfg.seed, {0, 42});
  next_frame_sample_loss<float>(model, grid, MotionClass::Right, rng, cfg, &grad, 1.0f);

  Trainer tr(model, cfg);
  const TrainSample s{&grid, MotionClass::Right, 42};
  tr.train_step(std::span(&s, 1));
  EXPECT_EQ(tr.step(), 1u);

  // After one step m_hat = g and v_hat = g^2, so the move is lr * g / (|g| + eps).
  std::vector<const Tensor<float>*> before, grads;
  model.params().visit([&](const std::string&, const Tensor<float>& t) { before.push_back(&t); });
  grad.visit([&](const std::string&, Tensor<float>& t) { grads.push_back(&t); });
  std::size_t k = 0;
  std::size_t checked = 0;
  const_cast<ModelParams<float>&>(tr.model().params()).visit([&](const std::string& name, Tensor<float>& t) {
    const auto& p0 = before[k]->data;
    const auto& g = grads[k]->data;
    ++k;
    const double decay = t.shape.size() >= 2 ? 1.0 - cfg.lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double want = p0[i] * decay - cfg.lr * g[i] / (std::fabs(g[i]) + cfg.adam_eps);
      ASSERT_NEAR(t.data[i], want, 2e-6) << name << "[" << i << "]";
      ++checked;
    }
  });
  EXPECT_EQ(checked, model.params().count());
}

TEST(TrainerTest, BatchOrderDoesNotMatter) {
  Model<float> model(tiny_config());
  model.init(17);
  std::vector<TokenGrid> grids;
  for (std::uint64_t i = 0; i < 4; ++i) grids.push_back(random_grid({3, 2, 2}, 100 + i));
  std::vector<TrainSample> batch;
  for (std::uint64_t i = 0; i < 4; ++i)
    batch.push_back({&grids[i], static_cast<MotionClass>(i), 10 + i});
  auto reversed = batch;
  std::reverse(reversed.begin(), reversed.end());
  TrainConfig cfg;
  cfg.seed = 3;
  Trainer a(model, cfg), b(model, cfg);
  for (int step = 0; step < 3; ++step) {
    EXPECT_EQ(a.train_step(batch), b.train_step(reversed));
  }
  std::vector<const Tensor<float>*> pa;
  a.model().params().visit([&](const std::string&, const Tensor<float>& t) { pa.push_back(&t); });
  std::size_t k = 0;
  b.model().params().visit([&](const std::string&, const Tensor<float>& t) {
    EXPECT_EQ(t.data, pa[k]->data);
    ++k;
  });
}

TEST(TrainerTest, SingleFrameClipsMatchImageMaskedModelling) {
  Model<float> model(tiny_config());
  model.init(18);
  jitter(model, 19, 0.05);
  const auto grid = random_grid({1, 2, 2}, 20);
  TrainConfig cfg;
  cfg.cond_drop_prob = 0;
  // With one frame the frame-causal mask is bidirectional, so both objectives
  // see identical attention and, for the same draws, the same loss.
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng a(s), b(s);
    b.below(1);  // the next-frame loss spends one draw on the target frame
    const auto nf = next_frame_sample_loss<float>(model, grid, MotionClass::Up, a, cfg, nullptr, 1.0f);
    const auto tm = total_mask_sample_loss<float>(model, grid, MotionClass::Up, b, cfg, nullptr, 1.0f);
    EXPECT_EQ(nf.target, 0u);
    EXPECT_EQ(nf.loss_positions, tm.loss_positions);
    EXPECT_EQ(nf.loss, tm.loss);
  }
}

TEST(TrainerTest, CurriculumRunsStagesAndLearns) {
  ToyTokenizer tok({2, 2, 2}, 7);
  CorpusConfig cc;
  cc.size = 32;
  cc.pixel_frames = 5;
  cc.height_px = 4;
  cc.width_px = 4;
  const Corpus corpus = build_corpus(cc, tok);
  ASSERT_EQ(corpus.dims, (GridDims{3, 2, 2}));
  Model<float> model(tiny_config());
  model.init(21);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 4;
  Trainer tr(model, cfg);
  const std::vector<CurriculumStage> stages{{2, 40, 2, 2}, {3, 40, 2, 2}};
  std::vector<LogRow> log;
  tr.run_curriculum(stages, corpus, [&](const LogRow& r) { log.push_back(r); });
  ASSERT_EQ(log.size(), 80u);
  EXPECT_EQ(log.front().stage, 0u);
  EXPECT_EQ(log.back().stage, 1u);
  EXPECT_EQ(log.back().step, 80u);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += log[i].loss;
    last += log[60 + i].loss;
  }
  EXPECT_LT(last, first);

  // Resuming at the end is a no-op; a cap stops early.
  tr.run_curriculum(stages, corpus, [&](const LogRow& r) { log.push_back(r); });
  EXPECT_EQ(log.size(), 80u);
  Trainer capped(model, cfg);
  capped.run_curriculum(stages, corpus, {}, 5);
  EXPECT_EQ(capped.step(), 5u);
}

TEST(TrainerTest, CurriculumRejectsBadStages) {
  ToyTokenizer tok({2, 2, 2}, 7);
  CorpusConfig cc;
  cc.size = 8;
  cc.pixel_frames = 5;
  cc.height_px = 4;
  cc.width_px = 4;
  const Corpus corpus = build_corpus(cc, tok);
  Model<float> model(tiny_config());
  model.init(1);
  TrainConfig cfg;
  cfg.batch_size = 4;
  Trainer tr(model, cfg);
  const std::vector<CurriculumStage> too_long{{4, 1, 2, 2}};
  EXPECT_THROW(tr.run_curriculum(too_long, corpus), ConfigError);
  const std::vector<CurriculumStage> wrong_grid{{2, 1, 3, 3}};
  EXPECT_THROW(tr.run_curriculum(wrong_grid, corpus), ConfigError);
  EXPECT_THROW(tr.run_curriculum({}, corpus), ConfigError);
  cfg.batch_size = 9;
  Trainer big(model, cfg);
  const std::vector<CurriculumStage> ok{{2, 1, 2, 2}};
  EXPECT_THROW(big.run_curriculum(ok, corpus), ConfigError);
}

TEST(ResolutionSwitch, KeepsParametersAndNeedsRelativePositions) {
  Model<float> rope(tiny_config());
  rope.init(1);
  const std::size_t count = rope.params().count();
  std::vector<float> before;
  rope.params().visit([&](const std::string&, const Tensor<float>& t) {
    before.insert(before.end(), t.data.begin(), t.data.end());
  });
  resolution_switch(rope, 3, 3);
  EXPECT_EQ(rope.config().grid_height, 3u);
  EXPECT_EQ(rope.params().count(), count);
  std::vector<float> after;
  rope.params().visit([&](const std::string&, const Tensor<float>& t) {
    after.insert(after.end(), t.data.begin(), t.data.end());
  });
  EXPECT_EQ(before, after);
  EXPECT_THROW(resolution_switch(rope, 0, 3), ConfigError);

  Model<float> sincos(tiny_config(PositionalMode::SinCos));
  EXPECT_THROW(resolution_switch(sincos, 3, 3), UnsupportedConfigError);
}

}  // namespace
}  // namespace vmar
