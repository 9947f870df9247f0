#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vmar/layers.hpp"
#include "vmar/tensor.hpp"

namespace vmar {

// DDPM forward-process coefficients with a linear beta schedule.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(std::size_t num_train_steps = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02);

  std::size_t num_train_steps() const { return betas_.size(); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bar() const { return alpha_bar_; }
  double signal_coef(std::size_t step) const;  // sqrt(alpha_bar)
  double noise_coef(std::size_t step) const;   // sqrt(1 - alpha_bar)

  // `count` evenly spaced train steps, ascending, always including the first
  // and the last train step.
  std::vector<std::size_t> inference_steps(std::size_t count) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

// x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps
template <typename T>
std::vector<T> q_sample(std::span<const T> x0, std::size_t step, std::span<const T> noise,
                        const NoiseSchedule& schedule);

struct TemperaturePolicy {
  enum class Mode { Constant, Progressive };
  Mode mode = Mode::Progressive;
  double value = 1.0;

  static TemperaturePolicy constant(double tau) { return {Mode::Constant, tau}; }
  static TemperaturePolicy progressive() { return {Mode::Progressive, 1.0}; }
  std::string label() const;
};

// Progressive: 0.9 + 10^-(t+1) for generated-frame index t (t = 0 is the first
// generated frame). Constant: the configured value.
double temperature_for_frame(std::size_t generated_index, const TemperaturePolicy& policy);

struct GuidanceConfig {
  double cfg_scale = 3.0;
  double null_prob = 0.1;  // condition dropout during training
};

struct DenoiserConfig {
  std::size_t token_dim = 8;
  std::size_t cond_dim = 64;
  std::size_t width = 64;
  std::size_t blocks = 3;
  std::size_t freq_dim = 64;
};

// Per-token noise predictor conditioned on the backbone output z. Residual MLP
// blocks modulated (shift, scale, gate) by the sum of the step embedding and
// the projected z; the modulation and output layers start at zero.
template <typename T>
struct DenoiserParams {
  struct Block {
    nn::Linear<T> ada;  // width -> 3 width
    nn::Linear<T> fc1;
    nn::Linear<T> fc2;
  };
  nn::Linear<T> time_fc1;
  nn::Linear<T> time_fc2;
  nn::Linear<T> cond_proj;
  nn::Linear<T> input_proj;
  std::vector<Block> blocks;
  nn::Linear<T> final_ada;  // width -> 2 width
  nn::Linear<T> final_out;

  DenoiserParams() = default;
  explicit DenoiserParams(const DenoiserConfig& cfg);
  void init(Rng& rng);

  template <typename F>
  void visit(F&& f) {
    const std::string p = "head";
    time_fc1.visit(p + ".time_fc1", f);
    time_fc2.visit(p + ".time_fc2", f);
    cond_proj.visit(p + ".cond_proj", f);
    input_proj.visit(p + ".input_proj", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string b = p + ".blocks." + std::to_string(i);
      blocks[i].ada.visit(b + ".ada", f);
      blocks[i].fc1.visit(b + ".fc1", f);
      blocks[i].fc2.visit(b + ".fc2", f);
    }
    final_ada.visit(p + ".final_ada", f);
    final_out.visit(p + ".final_out", f);
  }
};

// Sinusoidal embedding of a diffusion step: [cos(k f_i), sin(k f_i)].
template <typename T>
void step_embedding(std::size_t step, std::size_t dim, T* out);

// Activations kept for backpropagation through one batched denoiser call.
template <typename T>
struct DenoiserTape {
  std::size_t rows = 0;
  std::vector<T> x, z, temb_in, t1, c, sc;
  struct Block {
    std::vector<T> h_in, mod, xhat, rstd, m, a1, a1s, y;
  };
  std::vector<Block> blocks;
  std::vector<T> h_final, mod_f, xhat_f, rstd_f, m_f;
};

template <typename T>
class DenoiserMLP {
 public:
  DenoiserMLP(const DenoiserConfig& cfg, const DenoiserParams<T>& params)
      : cfg_(cfg), p_(params) {}

  // eps[rows x D] for noisy x[rows x D] at per-row steps, conditioned on z[rows x cond_dim].
  void forward(const T* x, std::span<const std::size_t> steps, const T* z, T* eps,
               std::size_t rows, DenoiserTape<T>* tape = nullptr) const;
  // Accumulates parameter gradients; dz (if non-null) receives += dL/dz.
  void backward(const DenoiserTape<T>& tape, const T* d_eps, DenoiserParams<T>& grad,
                T* dz) const;

  const DenoiserConfig& config() const { return cfg_; }

 private:
  const DenoiserConfig& cfg_;
  const DenoiserParams<T>& p_;
};

// Diffusion loss over a batch of tokens: each row draws a step k ~ U[0, K) and
// eps ~ N(0, I) from its own RNG; loss = sum_r weight_r |eps - eps_hat|^2 / D.
// Gradients (scaled by the same weights) are accumulated into grad and dz.
template <typename T>
T denoise_loss(const DenoiserMLP<T>& head, const NoiseSchedule& schedule, const T* z,
               const T* x0, std::span<const T> row_weight, std::span<Rng> rngs,
               DenoiserParams<T>* grad, T* dz);

// Interface the sampler needs from a noise predictor: eps for `rows` tokens at
// one train-step index, for the conditional or the null branch.
class NoisePredictor {
 public:
  enum class Branch { Cond, Null };
  virtual ~NoisePredictor() = default;
  virtual std::size_t token_dim() const = 0;
  virtual bool has_branch(Branch b) const = 0;
  virtual void predict(std::span<const double> x, std::size_t rows, std::size_t step, Branch b,
                       std::span<double> eps) const = 0;
};

struct SamplerConfig {
  std::size_t infer_steps = 100;
  double temperature = 1.0;
  double cfg_scale = 3.0;
  // false: only the last stochastic step's noise is scaled by the temperature.
  bool temperature_every_step = true;
};

// Posterior q(x_prev | x_t, x0) over the strided subsequence, at position
// `index` of `steps` (ascending).
struct PosteriorCoefs {
  double x0_from_xt;   // 1 / sqrt(ab)
  double x0_from_eps;  // sqrt(1 - ab) / sqrt(ab)
  double mean_x0;
  double mean_xt;
  double sigma;        // posterior std (0 at index 0)
};
PosteriorCoefs posterior_coefs(const NoiseSchedule& schedule, std::span<const std::size_t> steps,
                               std::size_t index);

// One reverse step for a single token: returns mean + sigma * tau * noise.
std::vector<double> posterior_step(std::span<const double> x, std::span<const double> eps_hat,
                                   const PosteriorCoefs& coefs, double tau,
                                   std::span<const double> noise);

// Ancestral sampling of rows = rngs.size() tokens with classifier-free guidance
// eps = eps_null + s (eps_cond - eps_null). s == 1 uses the conditional branch
// alone and s == 0 the null branch alone. Each row draws its initial and
// per-step noise only from its own RNG.
std::vector<double> sample_tokens(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                                  const SamplerConfig& config, std::span<Rng> rngs);

// Predictor backed by the trained head and fixed per-row conditions.
class HeadPredictor final : public NoisePredictor {
 public:
  HeadPredictor(const DenoiserMLP<float>& head, std::span<const float> z_cond,
                std::span<const float> z_null);
  std::size_t token_dim() const override { return head_.config().token_dim; }
  bool has_branch(Branch b) const override;
  void predict(std::span<const double> x, std::size_t rows, std::size_t step, Branch b,
               std::span<double> eps) const override;

 private:
  const DenoiserMLP<float>& head_;
  std::span<const float> z_cond_;
  std::span<const float> z_null_;
};

}  // namespace vmar
