#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "vmar/diffusion.hpp"
#include "vmar/errors.hpp"

namespace vmar {
namespace {

TEST(Schedule, LinearBetasAndAlphaBar) {
  const auto s = NoiseSchedule::linear(1000);
  ASSERT_EQ(s.num_train_steps(), 1000u);
  EXPECT_DOUBLE_EQ(s.betas().front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas().back(), 0.02);
  for (std::size_t k = 1; k < 1000; ++k) {
    EXPECT_GT(s.betas()[k], s.betas()[k - 1]);
    EXPECT_LT(s.alpha_bar()[k], s.alpha_bar()[k - 1]);
    EXPECT_GT(s.alpha_bar()[k], 0.0);
  }
  EXPECT_LE(s.alpha_bar()[0], 1.0);
}

TEST(Schedule, CoefficientsSquareToOne) {
  const auto s = NoiseSchedule::linear(1000);
  for (std::size_t k = 0; k < 1000; ++k) {
    const double a = s.signal_coef(k), b = s.noise_coef(k);
    EXPECT_NEAR(a * a + b * b, 1.0, 1e-12);
  }
  EXPECT_NEAR(s.signal_coef(0), std::sqrt(0.9999), 1e-15);
  EXPECT_THROW(s.signal_coef(1000), ArgumentError);
}

TEST(Schedule, InferenceStride) {
  const auto s = NoiseSchedule::linear(1000);
  const auto st = s.inference_steps(100);
  ASSERT_EQ(st.size(), 100u);
  EXPECT_EQ(st.front(), 0u);
  EXPECT_EQ(st.back(), 999u);
  for (std::size_t i = 1; i < st.size(); ++i) {
    EXPECT_GE(st[i] - st[i - 1], 10u);
    EXPECT_LE(st[i] - st[i - 1], 11u);
  }
  EXPECT_EQ(s.inference_steps(1), (std::vector<std::size_t>{999}));
  EXPECT_EQ(s.inference_steps(1000).size(), 1000u);
  EXPECT_THROW(s.inference_steps(1001), ArgumentError);
}

TEST(QSample, ZeroNoise) {
  const auto s = NoiseSchedule::linear(1000);
  const std::vector<double> x0{1.0, -2.0, 0.5}, zero(3, 0.0);
  const auto xk = q_sample<double>(x0, 500, zero, s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(xk[i], s.signal_coef(500) * x0[i]);
  EXPECT_THROW(q_sample<double>(x0, 1000, zero, s), ArgumentError);
}

TEST(QSample, NoiseVariance) {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(1);
  const std::vector<double> x0{0.3, -0.7};
  for (std::size_t k : {10u, 300u, 999u}) {
    double sum = 0, sq = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
      const std::vector<double> e{rng.normal(), rng.normal()};
      const auto xk = q_sample<double>(x0, k, e, s);
      const double r = xk[0] - s.signal_coef(k) * x0[0];
      sum += r;
      sq += r * r;
    }
    const double var = sq / n - (sum / n) * (sum / n);
    const double want = 1.0 - s.alpha_bar()[k];
    EXPECT_NEAR(var / want, 1.0, 0.03);
  }
}

TEST(Temperature, FormulaValues) {
  const auto p = TemperaturePolicy::progressive();
  EXPECT_EQ(temperature_for_frame(0, p), 1.0);
  EXPECT_EQ(temperature_for_frame(1, p), 0.91);
  EXPECT_EQ(temperature_for_frame(3, p), 0.9001);
  EXPECT_NEAR(temperature_for_frame(9, p), 0.9000000001, 1e-15);
  for (std::size_t t = 1; t < 40; ++t) {
    const double a = temperature_for_frame(t - 1, p), b = temperature_for_frame(t, p);
    if (t < 15) {
      EXPECT_LT(b, a);
      EXPECT_GT(b, 0.9);
    }
    EXPECT_GE(b, 0.9);
    EXPECT_LE(b, 1.0);
  }
  EXPECT_EQ(temperature_for_frame(5, TemperaturePolicy::constant(0.94)), 0.94);
  EXPECT_EQ(TemperaturePolicy::constant(0.9).label(), "0.90");
  EXPECT_EQ(p.label(), "progressive");
}

DenoiserConfig small_head() {
  DenoiserConfig c;
  c.token_dim = 4;
  c.cond_dim = 6;
  c.width = 8;
  c.blocks = 2;
  c.freq_dim = 8;
  return c;
}

TEST(DenoiseLoss, ZeroOutputHeadGivesUnitLoss) {
  const DenoiserConfig cfg = small_head();
  DenoiserParams<double> p(cfg);
  Rng init(3);
  p.init(init);
  const DenoiserMLP<double> head(cfg, p);
  const auto sched = NoiseSchedule::linear(1000);
  const std::size_t rows = 4000;
  std::vector<double> z(rows * cfg.cond_dim), x0(rows * cfg.token_dim);
  Rng rng(4);
  for (auto& v : z) v = rng.normal();
  for (auto& v : x0) v = rng.normal();
  std::vector<Rng> rngs;
  for (std::size_t r = 0; r < rows; ++r) rngs.emplace_back(100 + r);
  const std::vector<double> w(rows, 1.0 / rows);
  const double loss = denoise_loss<double>(head, sched, z.data(), x0.data(), w, rngs, nullptr, nullptr);
  EXPECT_NEAR(loss, 1.0, 0.05);
}

// Central finite differences on a randomized head (zero-initialized layers
// perturbed so every parameter influences the loss).
TEST(DenoiseLoss, GradientMatchesFiniteDifferences) {
  const DenoiserConfig cfg = small_head();
  DenoiserParams<double> p(cfg);
  Rng init(5);
  p.init(init);
  p.visit([&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.data) v += 0.3 * init.normal();
  });
  const auto sched = NoiseSchedule::linear(1000);
  const std::size_t rows = 5;
  std::vector<double> z(rows * cfg.cond_dim), x0(rows * cfg.token_dim), w(rows);
  Rng rng(6);
  for (auto& v : z) v = rng.normal();
  for (auto& v : x0) v = rng.normal();
  for (auto& v : w) v = 0.2 + rng.uniform();

  auto loss_at = [&](DenoiserParams<double>* grad, double* dz) {
    const DenoiserMLP<double> head(cfg, p);
    std::vector<Rng> rngs;
    for (std::size_t r = 0; r < rows; ++r) rngs.emplace_back(1000 + r);
    return denoise_loss<double>(head, sched, z.data(), x0.data(), w, rngs, grad, dz);
  };
  DenoiserParams<double> g(cfg);
  std::vector<double> dz(z.size(), 0.0);
  loss_at(&g, dz.data());

  std::vector<std::pair<double*, double>> entries;
  std::vector<Tensor<double>*> gt;
  g.visit([&](const std::string&, Tensor<double>& t) { gt.push_back(&t); });
  std::size_t ti = 0;
  p.visit([&](const std::string&, Tensor<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) entries.push_back({&t.data[i], gt[ti]->data[i]});
    ++ti;
  });
  ASSERT_GT(entries.size(), 400u);

  Rng pick(7);
  const double h = 1e-6;
  std::size_t checked = 0;
  double worst = 0;
  for (int n = 0; n < 300; ++n) {
    auto& [ptr, analytic] = entries[pick.below(entries.size())];
    const double x = *ptr;
    *ptr = x + h;
    const double up = loss_at(nullptr, nullptr);
    *ptr = x - h;
    const double down = loss_at(nullptr, nullptr);
    *ptr = x;
    const double fd = (up - down) / (2 * h);
    const double rel = std::fabs(fd - analytic) / std::max({std::fabs(fd), std::fabs(analytic), 1e-6});
    worst = std::max(worst, rel);
    ++checked;
  }
  EXPECT_GE(checked, 200u);
  EXPECT_LT(worst, 1e-4);

  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x = z[i];
    z[i] = x + h;
    const double up = loss_at(nullptr, nullptr);
    z[i] = x - h;
    const double down = loss_at(nullptr, nullptr);
    z[i] = x;
    const double fd = (up - down) / (2 * h);
    EXPECT_LT(std::fabs(fd - dz[i]) / std::max({std::fabs(fd), std::fabs(dz[i]), 1e-6}), 1e-4);
  }
}

TEST(Posterior, TemperatureScalesInjectedNoise) {
  const auto s = NoiseSchedule::linear(1000);
  const auto steps = s.inference_steps(100);
  const auto c = posterior_coefs(s, steps, 50);
  ASSERT_GT(c.sigma, 0.0);
  const std::vector<double> x{0.4, -1.2}, e{0.1, 0.3}, zero{0.0, 0.0}, n{1.5, -0.5};
  const auto mean = posterior_step(x, e, c, 1.0, zero);
  const auto a = posterior_step(x, e, c, 1.0, n);
  const auto b = posterior_step(x, e, c, 0.9, n);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_NEAR((b[i] - mean[i]) / (a[i] - mean[i]), 0.9, 1e-12);
  EXPECT_EQ(posterior_coefs(s, steps, 0).sigma, 0.0);
}

// Exact eps predictor for data x0 ~ N(mu, sigma^2) per channel, plus a
// second branch with a different mean for guidance checks.
class GaussianOracle : public NoisePredictor {
 public:
  GaussianOracle(const NoiseSchedule& s, double mu, double sigma, bool cond, bool null)
      : s_(s), mu_(mu), sigma_(sigma), cond_(cond), null_(null) {}
  std::size_t token_dim() const override { return 2; }
  bool has_branch(Branch b) const override { return b == Branch::Cond ? cond_ : null_; }
  void predict(std::span<const double> x, std::size_t rows, std::size_t step, Branch b,
               std::span<double> eps) const override {
    const double ab = s_.alpha_bar()[step];
    const double mu = b == Branch::Cond ? mu_ : -mu_;
    const double var = ab * sigma_ * sigma_ + 1 - ab;
    for (std::size_t i = 0; i < rows * 2; ++i)
      eps[i] = std::sqrt(1 - ab) * (x[i] - std::sqrt(ab) * mu) / var;
  }

 private:
  const NoiseSchedule& s_;
  double mu_, sigma_;
  bool cond_, null_;
};

std::vector<double> run(const NoisePredictor& p, const NoiseSchedule& s, SamplerConfig cfg,
                        std::size_t rows, std::uint64_t seed) {
  std::vector<Rng> rngs;
  for (std::size_t r = 0; r < rows; ++r) rngs.push_back(Rng::substream(seed, {r}));
  return sample_tokens(p, s, cfg, rngs);
}

TEST(Sampler, GuidanceEndpointsAreBitIdentical) {
  const auto s = NoiseSchedule::linear(1000);
  const GaussianOracle both(s, 1.0, 0.5, true, true);
  const GaussianOracle cond_only(s, 1.0, 0.5, true, false);
  const GaussianOracle null_only(s, 1.0, 0.5, false, true);
  SamplerConfig cfg;
  cfg.infer_steps = 50;
  cfg.temperature = 0.95;
  cfg.cfg_scale = 1.0;
  EXPECT_EQ(run(both, s, cfg, 16, 3), run(cond_only, s, cfg, 16, 3));
  cfg.cfg_scale = 0.0;
  EXPECT_EQ(run(both, s, cfg, 16, 3), run(null_only, s, cfg, 16, 3));
  cfg.cfg_scale = 3.0;
  EXPECT_NE(run(both, s, cfg, 16, 3), run(cond_only, s, cfg, 16, 3));
}

TEST(Sampler, RowsAreIndependentOfBatching) {
  const auto s = NoiseSchedule::linear(1000);
  const GaussianOracle o(s, 0.5, 0.2, true, true);
  SamplerConfig cfg;
  cfg.infer_steps = 20;
  std::vector<Rng> all;
  for (std::uint64_t r = 0; r < 6; ++r) all.push_back(Rng::substream(9, {r}));
  const auto x = sample_tokens(o, s, cfg, all);
  for (std::uint64_t r = 0; r < 6; ++r) {
    std::vector<Rng> one{Rng::substream(9, {r})};
    const auto y = sample_tokens(o, s, cfg, one);
    EXPECT_EQ(y[0], x[r * 2]);
    EXPECT_EQ(y[1], x[r * 2 + 1]);
  }
}

// With an exact Gaussian predictor every reverse step is affine in x, so the
// output variance follows V' = A^2 V + (sigma tau)^2 from V = 1.
double analytic_variance(const NoiseSchedule& s, std::size_t infer_steps, double sigma0, double tau) {
  const auto steps = s.inference_steps(infer_steps);
  const auto& ab = s.alpha_bar();
  double v = 1.0;
  for (std::size_t idx = steps.size(); idx-- > 0;) {
    const double a = ab[steps[idx]];
    const double ap = idx > 0 ? ab[steps[idx - 1]] : 1.0;
    const double beta = 1.0 - a / ap;
    const double var_t = a * sigma0 * sigma0 + 1 - a;
    const double x0_gain = (1.0 - (1.0 - a) / var_t) / std::sqrt(a);
    const double gain = beta * std::sqrt(ap) / (1.0 - a) * x0_gain +
                        (1.0 - ap) * std::sqrt(1.0 - beta) / (1.0 - a);
    const double noise = idx > 0 ? beta * (1.0 - ap) / (1.0 - a) * tau * tau : 0.0;
    v = gain * gain * v + noise;
  }
  return v;
}

TEST(Sampler, VarianceShrinksWithTemperature) {
  const auto s = NoiseSchedule::linear(1000);
  const GaussianOracle o(s, 2.0, 0.5, true, false);
  SamplerConfig cfg;
  cfg.infer_steps = 100;
  cfg.cfg_scale = 1.0;
  std::vector<double> vars;
  for (double tau : {1.0, 0.9, 0.5}) {
    cfg.temperature = tau;
    const auto x = run(o, s, cfg, 4000, 11);
    double sum = 0, sq = 0;
    for (double v : x) {
      sum += v;
      sq += v * v;
    }
    const double n = static_cast<double>(x.size());
    vars.push_back(sq / n - (sum / n) * (sum / n));
    EXPECT_NEAR(sum / n, 2.0, 0.05);
    const double want = analytic_variance(s, 100, 0.5, tau);
    EXPECT_NEAR(vars.back() / want, 1.0, 0.05) << "tau " << tau;
  }
  EXPECT_GT(analytic_variance(s, 100, 0.5, 1.0), 0.2);
  EXPECT_GT(vars[0], vars[1]);
  EXPECT_GT(vars[1], vars[2]);
}

TEST(Sampler, RejectsBadArguments) {
  const auto s = NoiseSchedule::linear(1000);
  const GaussianOracle o(s, 0.0, 1.0, true, true);
  SamplerConfig cfg;
  cfg.temperature = 0.0;
  EXPECT_THROW(run(o, s, cfg, 1, 0), ArgumentError);
  cfg.temperature = 1.5;
  EXPECT_THROW(run(o, s, cfg, 1, 0), ArgumentError);
  cfg.temperature = 1.0;
  cfg.infer_steps = 1001;
  EXPECT_THROW(run(o, s, cfg, 1, 0), ArgumentError);
}

}  // namespace
}  // namespace vmar
