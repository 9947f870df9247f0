#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vmar/backbone.hpp"
#include "vmar/diffusion.hpp"

namespace vmar {

struct ModelConfig {
  TransformerConfig backbone;
  DenoiserConfig head;
  std::size_t diffusion_steps = 1000;
  // Latent grid the model is currently trained for (changed by resolution_switch).
  std::size_t grid_height = 8;
  std::size_t grid_width = 8;

  // Keeps the head's input/condition widths consistent with the backbone.
  void sync();
  void validate() const;
};

template <typename T>
struct ModelParams {
  BackboneParams<T> backbone;
  DenoiserParams<T> head;

  ModelParams() = default;
  explicit ModelParams(const ModelConfig& cfg) : backbone(cfg.backbone), head(cfg.head) {}

  // Visits every tensor as (name, tensor&); names are unique.
  template <typename F>
  void visit(F&& f) {
    backbone.visit(f);
    head.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](const std::string& name, Tensor<T>& t) {
      f(name, static_cast<const Tensor<T>&>(t));
    });
  }
  std::size_t count() const;
  void zero();
};

template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig cfg);

  // Seeded initialization (xavier for projections, zero for the head's
  // modulation and output layers).
  void init(std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  void set_grid(std::size_t height, std::size_t width);
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  Backbone<T> backbone() const { return Backbone<T>(cfg_.backbone, params_.backbone); }
  DenoiserMLP<T> head() const { return DenoiserMLP<T>(cfg_.head, params_.head); }
  std::size_t null_condition() const { return cfg_.backbone.num_classes; }

 private:
  ModelConfig cfg_;
  ModelParams<T> params_;
  NoiseSchedule schedule_ = NoiseSchedule::linear(1000);
};

// Element-wise cast of every parameter (e.g. float -> double for gradient checks).
template <typename To, typename From>
Model<To> cast_model(const Model<From>& model);

}  // namespace vmar
