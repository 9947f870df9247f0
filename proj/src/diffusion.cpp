#include "vmar/diffusion.hpp"

#include <cmath>
#include <cstdio>

#include "vmar/errors.hpp"

namespace vmar {

NoiseSchedule NoiseSchedule::linear(std::size_t num_train_steps, double beta_start,
                                    double beta_end) {
  if (num_train_steps < 2) throw ArgumentError("noise schedule needs at least 2 steps");
  if (!(0 < beta_start && beta_start < beta_end && beta_end < 1))
    throw ArgumentError("linear betas need 0 < start < end < 1");
  NoiseSchedule s;
  s.betas_.resize(num_train_steps);
  s.alpha_bar_.resize(num_train_steps);
  double prod = 1.0;
  for (std::size_t k = 0; k < num_train_steps; ++k) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(k) /
                                         static_cast<double>(num_train_steps - 1);
    s.betas_[k] = beta;
    prod *= 1.0 - beta;
    s.alpha_bar_[k] = prod;
  }
  return s;
}

double NoiseSchedule::signal_coef(std::size_t step) const {
  if (step >= alpha_bar_.size()) throw ArgumentError("diffusion step out of range");
  return std::sqrt(alpha_bar_[step]);
}

double NoiseSchedule::noise_coef(std::size_t step) const {
  if (step >= alpha_bar_.size()) throw ArgumentError("diffusion step out of range");
  return std::sqrt(1.0 - alpha_bar_[step]);
}

std::vector<std::size_t> NoiseSchedule::inference_steps(std::size_t count) const {
  const std::size_t k = num_train_steps();
  if (count == 0 || count > k) throw ArgumentError("inference step count must be in [1, train steps]");
  if (count == 1) return {k - 1};
  std::vector<std::size_t> steps(count);
  const double stride = static_cast<double>(k - 1) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i)
    steps[i] = static_cast<std::size_t>(std::llround(static_cast<double>(i) * stride));
  return steps;
}

template <typename T>
std::vector<T> q_sample(std::span<const T> x0, std::size_t step, std::span<const T> noise,
                        const NoiseSchedule& schedule) {
  if (x0.size() != noise.size()) throw ShapeError("q_sample: noise and token dims differ");
  const double a = schedule.signal_coef(step);
  const double b = schedule.noise_coef(step);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i)
    out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + b * static_cast<double>(noise[i]));
  return out;
}

template std::vector<float> q_sample<float>(std::span<const float>, std::size_t,
                                            std::span<const float>, const NoiseSchedule&);
template std::vector<double> q_sample<double>(std::span<const double>, std::size_t,
                                              std::span<const double>, const NoiseSchedule&);

std::string TemperaturePolicy::label() const {
  if (mode == Mode::Progressive) return "progressive";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", value);
  return buf;
}

double temperature_for_frame(std::size_t generated_index, const TemperaturePolicy& policy) {
  if (policy.mode == TemperaturePolicy::Mode::Constant) return policy.value;
  return 0.9 + std::pow(10.0, -static_cast<double>(generated_index + 1));
}

// ---------------------------------------------------------------------------
// Denoiser

template <typename T>
DenoiserParams<T>::DenoiserParams(const DenoiserConfig& cfg)
    : time_fc1(cfg.freq_dim, cfg.width),
      time_fc2(cfg.width, cfg.width),
      cond_proj(cfg.cond_dim, cfg.width),
      input_proj(cfg.token_dim, cfg.width),
      final_ada(cfg.width, 2 * cfg.width),
      final_out(cfg.width, cfg.token_dim) {
  blocks.resize(cfg.blocks);
  for (auto& b : blocks) {
    b.ada = nn::Linear<T>(cfg.width, 3 * cfg.width);
    b.fc1 = nn::Linear<T>(cfg.width, cfg.width);
    b.fc2 = nn::Linear<T>(cfg.width, cfg.width);
  }
}

template <typename T>
void DenoiserParams<T>::init(Rng& rng) {
  nn::fill_normal(time_fc1.w, rng, 0.02);
  nn::fill_normal(time_fc2.w, rng, 0.02);
  nn::fill_xavier(cond_proj.w, rng);
  nn::fill_xavier(input_proj.w, rng);
  for (auto& b : blocks) {
    nn::fill_xavier(b.fc1.w, rng);
    nn::fill_xavier(b.fc2.w, rng);
    b.ada.w.zero();
  }
  final_ada.w.zero();
  final_out.w.zero();
}

template <typename T>
void step_embedding(std::size_t step, std::size_t dim, T* out) {
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = static_cast<double>(step) * freq;
    out[i] = static_cast<T>(std::cos(arg));
    out[half + i] = static_cast<T>(std::sin(arg));
  }
  if (dim % 2) out[dim - 1] = T(0);
}

template void step_embedding<float>(std::size_t, std::size_t, float*);
template void step_embedding<double>(std::size_t, std::size_t, double*);

namespace {

template <typename T>
void apply_silu(const std::vector<T>& in, std::vector<T>& out) {
  out.resize(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = nn::silu(in[i]);
}

// m = xhat * (1 + scale) + shift, with shift/scale read from a modulation row.
template <typename T>
void modulate(const T* xhat, const T* mod, std::size_t mod_stride, T* m, std::size_t rows,
              std::size_t w) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* shift = mod + r * mod_stride;
    const T* scale = shift + w;
    for (std::size_t i = 0; i < w; ++i)
      m[r * w + i] = xhat[r * w + i] * (T(1) + scale[i]) + shift[i];
  }
}

}  // namespace

template <typename T>
void DenoiserMLP<T>::forward(const T* x, std::span<const std::size_t> steps, const T* z, T* eps,
                             std::size_t rows, DenoiserTape<T>* tape) const {
  const std::size_t w = cfg_.width, d = cfg_.token_dim, f = cfg_.freq_dim;
  if (steps.size() != rows) throw ShapeError("denoiser: one step index per row required");
  DenoiserTape<T> local;
  DenoiserTape<T>& tp = tape ? *tape : local;
  tp.rows = rows;
  tp.x.assign(x, x + rows * d);
  tp.z.assign(z, z + rows * cfg_.cond_dim);
  tp.temb_in.resize(rows * f);
  for (std::size_t r = 0; r < rows; ++r) step_embedding(steps[r], f, tp.temb_in.data() + r * f);

  tp.t1.resize(rows * w);
  p_.time_fc1.forward(tp.temb_in.data(), tp.t1.data(), rows);
  std::vector<T> t1s;
  apply_silu(tp.t1, t1s);
  std::vector<T> temb(rows * w);
  p_.time_fc2.forward(t1s.data(), temb.data(), rows);
  tp.c.resize(rows * w);
  p_.cond_proj.forward(z, tp.c.data(), rows);
  for (std::size_t i = 0; i < rows * w; ++i) tp.c[i] += temb[i];
  apply_silu(tp.c, tp.sc);

  std::vector<T> h(rows * w);
  p_.input_proj.forward(x, h.data(), rows);
  tp.blocks.resize(p_.blocks.size());
  for (std::size_t bi = 0; bi < p_.blocks.size(); ++bi) {
    const auto& blk = p_.blocks[bi];
    auto& bt = tp.blocks[bi];
    bt.mod.resize(rows * 3 * w);
    blk.ada.forward(tp.sc.data(), bt.mod.data(), rows);
    bt.xhat.resize(rows * w);
    bt.rstd.resize(rows);
    nn::layernorm_forward<T>(h.data(), bt.xhat.data(), bt.rstd.data(), nullptr, nullptr, rows, w);
    bt.m.resize(rows * w);
    modulate(bt.xhat.data(), bt.mod.data(), 3 * w, bt.m.data(), rows, w);
    bt.a1.resize(rows * w);
    blk.fc1.forward(bt.m.data(), bt.a1.data(), rows);
    apply_silu(bt.a1, bt.a1s);
    bt.y.resize(rows * w);
    blk.fc2.forward(bt.a1s.data(), bt.y.data(), rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gate = bt.mod.data() + r * 3 * w + 2 * w;
      for (std::size_t i = 0; i < w; ++i) h[r * w + i] += gate[i] * bt.y[r * w + i];
    }
  }
  tp.mod_f.resize(rows * 2 * w);
  p_.final_ada.forward(tp.sc.data(), tp.mod_f.data(), rows);
  tp.xhat_f.resize(rows * w);
  tp.rstd_f.resize(rows);
  nn::layernorm_forward<T>(h.data(), tp.xhat_f.data(), tp.rstd_f.data(), nullptr, nullptr, rows, w);
  tp.m_f.resize(rows * w);
  modulate(tp.xhat_f.data(), tp.mod_f.data(), 2 * w, tp.m_f.data(), rows, w);
  p_.final_out.forward(tp.m_f.data(), eps, rows);
}

template <typename T>
void DenoiserMLP<T>::backward(const DenoiserTape<T>& tp, const T* d_eps, DenoiserParams<T>& g,
                              T* dz) const {
  const std::size_t rows = tp.rows, w = cfg_.width;
  std::vector<T> d_m(rows * w, T(0));
  p_.final_out.backward(tp.m_f.data(), d_eps, d_m.data(), g.final_out, rows);

  std::vector<T> d_sc(rows * w, T(0));
  std::vector<T> dh(rows * w, T(0));
  auto modulate_backward = [&](const std::vector<T>& xhat, const std::vector<T>& rstd,
                               const std::vector<T>& mod, std::size_t stride,
                               const std::vector<T>& dm, std::vector<T>& dmod) {
    std::vector<T> dxhat(rows * w);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* scale = mod.data() + r * stride + w;
      T* dshift = dmod.data() + r * stride;
      T* dscale = dshift + w;
      for (std::size_t i = 0; i < w; ++i) {
        const T v = dm[r * w + i];
        dxhat[r * w + i] = v * (T(1) + scale[i]);
        dshift[i] += v;
        dscale[i] += v * xhat[r * w + i];
      }
    }
    nn::layernorm_backward<T>(dxhat.data(), xhat.data(), rstd.data(), nullptr, nullptr, dh.data(),
                              rows, w);
  };

  std::vector<T> d_mod_f(rows * 2 * w, T(0));
  modulate_backward(tp.xhat_f, tp.rstd_f, tp.mod_f, 2 * w, d_m, d_mod_f);
  p_.final_ada.backward(tp.sc.data(), d_mod_f.data(), d_sc.data(), g.final_ada, rows);

  for (std::size_t bi = p_.blocks.size(); bi-- > 0;) {
    const auto& blk = p_.blocks[bi];
    auto& gb = g.blocks[bi];
    const auto& bt = tp.blocks[bi];
    std::vector<T> d_mod(rows * 3 * w, T(0));
    std::vector<T> dy(rows * w);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gate = bt.mod.data() + r * 3 * w + 2 * w;
      T* dgate = d_mod.data() + r * 3 * w + 2 * w;
      for (std::size_t i = 0; i < w; ++i) {
        dy[r * w + i] = dh[r * w + i] * gate[i];
        dgate[i] += dh[r * w + i] * bt.y[r * w + i];
      }
    }
    std::vector<T> d_a1(rows * w, T(0));
    blk.fc2.backward(bt.a1s.data(), dy.data(), d_a1.data(), gb.fc2, rows);
    for (std::size_t i = 0; i < rows * w; ++i) d_a1[i] *= nn::silu_grad(bt.a1[i]);
    std::vector<T> dm(rows * w, T(0));
    blk.fc1.backward(bt.m.data(), d_a1.data(), dm.data(), gb.fc1, rows);
    modulate_backward(bt.xhat, bt.rstd, bt.mod, 3 * w, dm, d_mod);
    blk.ada.backward(tp.sc.data(), d_mod.data(), d_sc.data(), gb.ada, rows);
  }
  p_.input_proj.backward(tp.x.data(), dh.data(), nullptr, g.input_proj, rows);

  std::vector<T> d_c(rows * w);
  for (std::size_t i = 0; i < rows * w; ++i) d_c[i] = d_sc[i] * nn::silu_grad(tp.c[i]);
  p_.cond_proj.backward(tp.z.data(), d_c.data(), dz, g.cond_proj, rows);
  std::vector<T> t1s;
  apply_silu(tp.t1, t1s);
  std::vector<T> d_t1(rows * w, T(0));
  p_.time_fc2.backward(t1s.data(), d_c.data(), d_t1.data(), g.time_fc2, rows);
  for (std::size_t i = 0; i < rows * w; ++i) d_t1[i] *= nn::silu_grad(tp.t1[i]);
  p_.time_fc1.backward(tp.temb_in.data(), d_t1.data(), nullptr, g.time_fc1, rows);
}

template <typename T>
T denoise_loss(const DenoiserMLP<T>& head, const NoiseSchedule& schedule, const T* z,
               const T* x0, std::span<const T> row_weight, std::span<Rng> rngs,
               DenoiserParams<T>* grad, T* dz) {
  const std::size_t rows = rngs.size();
  const std::size_t d = head.config().token_dim;
  if (row_weight.size() != rows) throw ShapeError("denoise_loss: one weight per row required");
  std::vector<std::size_t> steps(rows);
  std::vector<T> noise(rows * d), xk(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    steps[r] = rngs[r].below(schedule.num_train_steps());
    const double a = schedule.signal_coef(steps[r]);
    const double b = schedule.noise_coef(steps[r]);
    for (std::size_t i = 0; i < d; ++i) {
      noise[r * d + i] = static_cast<T>(rngs[r].normal());
      xk[r * d + i] = static_cast<T>(a * static_cast<double>(x0[r * d + i]) +
                                     b * static_cast<double>(noise[r * d + i]));
    }
  }
  DenoiserTape<T> tape;
  std::vector<T> eps_hat(rows * d);
  head.forward(xk.data(), steps, z, eps_hat.data(), rows, grad ? &tape : nullptr);
  T loss = 0;
  std::vector<T> d_eps(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const T diff = eps_hat[r * d + i] - noise[r * d + i];
      sq += diff * diff;
      d_eps[r * d + i] = T(2) * row_weight[r] * diff / static_cast<T>(d);
    }
    loss += row_weight[r] * sq / static_cast<T>(d);
  }
  if (grad) head.backward(tape, d_eps.data(), *grad, dz);
  return loss;
}

template struct DenoiserParams<float>;
template struct DenoiserParams<double>;
template class DenoiserMLP<float>;
template class DenoiserMLP<double>;
template float denoise_loss<float>(const DenoiserMLP<float>&, const NoiseSchedule&, const float*,
                                   const float*, std::span<const float>, std::span<Rng>,
                                   DenoiserParams<float>*, float*);
template double denoise_loss<double>(const DenoiserMLP<double>&, const NoiseSchedule&,
                                     const double*, const double*, std::span<const double>,
                                     std::span<Rng>, DenoiserParams<double>*, double*);

// ---------------------------------------------------------------------------
// Sampling

PosteriorCoefs posterior_coefs(const NoiseSchedule& schedule, std::span<const std::size_t> steps,
                               std::size_t index) {
  if (index >= steps.size()) throw ArgumentError("posterior index out of range");
  const auto& ab = schedule.alpha_bar();
  const double a = ab.at(steps[index]);
  const double a_prev = index > 0 ? ab.at(steps[index - 1]) : 1.0;
  const double beta = 1.0 - a / a_prev;
  PosteriorCoefs c{};
  c.x0_from_xt = 1.0 / std::sqrt(a);
  c.x0_from_eps = std::sqrt(1.0 - a) / std::sqrt(a);
  c.mean_x0 = beta * std::sqrt(a_prev) / (1.0 - a);
  c.mean_xt = (1.0 - a_prev) * std::sqrt(1.0 - beta) / (1.0 - a);
  c.sigma = index > 0 ? std::sqrt(beta * (1.0 - a_prev) / (1.0 - a)) : 0.0;
  return c;
}

std::vector<double> posterior_step(std::span<const double> x, std::span<const double> eps_hat,
                                   const PosteriorCoefs& c, double tau,
                                   std::span<const double> noise) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = c.x0_from_xt * x[i] - c.x0_from_eps * eps_hat[i];
    out[i] = c.mean_x0 * x0 + c.mean_xt * x[i];
    if (c.sigma > 0) out[i] += c.sigma * tau * noise[i];
  }
  return out;
}

std::vector<double> sample_tokens(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                                  const SamplerConfig& config, std::span<Rng> rngs) {
  using Branch = NoisePredictor::Branch;
  if (!(config.temperature > 0 && config.temperature <= 1))
    throw ArgumentError("temperature must be in (0, 1]");
  if (config.cfg_scale < 0) throw ArgumentError("cfg scale must be non-negative");
  const std::vector<std::size_t> steps = schedule.inference_steps(config.infer_steps);
  const std::size_t rows = rngs.size();
  const std::size_t d = predictor.token_dim();

  bool use_cond = predictor.has_branch(Branch::Cond);
  bool use_null = predictor.has_branch(Branch::Null);
  if (!use_cond && !use_null) throw ArgumentError("predictor offers no branch");
  if (use_cond && use_null) {
    if (config.cfg_scale == 1.0) use_null = false;
    else if (config.cfg_scale == 0.0) use_cond = false;
  }

  std::vector<double> x(rows * d);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) x[r * d + i] = rngs[r].normal();

  std::vector<double> e_cond(rows * d), e_null(rows * d), eps(rows * d), noise(d);
  for (std::size_t idx = steps.size(); idx-- > 0;) {
    const std::size_t k = steps[idx];
    if (use_cond) predictor.predict(x, rows, k, Branch::Cond, e_cond);
    if (use_null) predictor.predict(x, rows, k, Branch::Null, e_null);
    if (use_cond && use_null) {
      for (std::size_t i = 0; i < rows * d; ++i)
        eps[i] = e_null[i] + config.cfg_scale * (e_cond[i] - e_null[i]);
    } else {
      eps = use_cond ? e_cond : e_null;
    }
    const PosteriorCoefs c = posterior_coefs(schedule, steps, idx);
    const double tau = (config.temperature_every_step || idx == 1) ? config.temperature : 1.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (idx > 0)
        for (std::size_t i = 0; i < d; ++i) noise[i] = rngs[r].normal();
      const auto xr = posterior_step({x.data() + r * d, d}, {eps.data() + r * d, d}, c, tau, noise);
      std::copy(xr.begin(), xr.end(), x.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
  }
  return x;
}

HeadPredictor::HeadPredictor(const DenoiserMLP<float>& head, std::span<const float> z_cond,
                             std::span<const float> z_null)
    : head_(head), z_cond_(z_cond), z_null_(z_null) {}

bool HeadPredictor::has_branch(Branch b) const {
  return b == Branch::Cond ? !z_cond_.empty() : !z_null_.empty();
}

void HeadPredictor::predict(std::span<const double> x, std::size_t rows, std::size_t step,
                            Branch b, std::span<double> eps) const {
  const std::size_t d = token_dim();
  const std::span<const float> z = b == Branch::Cond ? z_cond_ : z_null_;
  if (z.size() != rows * head_.config().cond_dim) throw ShapeError("head predictor: z rows mismatch");
  std::vector<float> xf(rows * d), ef(rows * d);
  for (std::size_t i = 0; i < rows * d; ++i) xf[i] = static_cast<float>(x[i]);
  const std::vector<std::size_t> steps(rows, step);
  head_.forward(xf.data(), steps, z.data(), ef.data(), rows);
  for (std::size_t i = 0; i < rows * d; ++i) eps[i] = ef[i];
}

}  // namespace vmar
