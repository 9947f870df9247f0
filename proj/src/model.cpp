#include "vmar/model.hpp"

#include "vmar/errors.hpp"

namespace vmar {

void ModelConfig::sync() {
  head.token_dim = backbone.token_dim;
  head.cond_dim = backbone.model_dim;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (head.token_dim != backbone.token_dim || head.cond_dim != backbone.model_dim)
    throw ConfigError("model", "denoiser dims do not match the backbone");
  if (head.width == 0 || head.blocks == 0 || head.freq_dim < 2)
    throw ConfigError("model.head_width", "denoiser sizes must be positive");
  if (grid_height == 0 || grid_width == 0)
    throw ConfigError("model.grid", "grid dims must be positive");
  if (diffusion_steps < 2) throw ConfigError("model.diffusion_steps", "need at least 2 steps");
}

template <typename T>
std::size_t ModelParams<T>::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
void ModelParams<T>::zero() {
  visit([](const std::string&, Tensor<T>& t) { t.zero(); });
}

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.sync();
  cfg_.validate();
  params_ = ModelParams<T>(cfg_);
  schedule_ = NoiseSchedule::linear(cfg_.diffusion_steps);
}

template <typename T>
void Model<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  params_.backbone.init(rng);
  params_.head.init(rng);
}

template <typename T>
void Model<T>::set_grid(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ConfigError("model.grid", "grid dims must be positive");
  cfg_.grid_height = height;
  cfg_.grid_width = width;
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
  Model<To> out(model.config());
  std::vector<const Tensor<From>*> src;
  model.params().visit([&](const std::string&, const Tensor<From>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.params().visit([&](const std::string&, Tensor<To>& t) {
    const Tensor<From>& s = *src.at(i++);
    for (std::size_t k = 0; k < t.size(); ++k) t.data[k] = static_cast<To>(s.data[k]);
  });
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class Model<float>;
template class Model<double>;
template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);

}  // namespace vmar
