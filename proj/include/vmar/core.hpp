#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "vmar/tensor.hpp"

namespace vmar {

// Latent grid extent: frames x height x width tokens.
struct GridDims {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t tokens_per_frame() const { return height * width; }
  std::size_t count() const { return frames * height * width; }
  bool operator==(const GridDims&) const = default;
};

// Raster index t*H*W + h*W + w. Throws IndexError for out-of-range coordinates.
std::size_t flatten_index(std::size_t t, std::size_t h, std::size_t w, const GridDims& dims);

// T x H x W continuous tokens, each token_dim floats, stored in raster order.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(GridDims dims, std::size_t token_dim);
  TokenGrid(GridDims dims, std::size_t token_dim, std::vector<float> data);

  const GridDims& dims() const { return dims_; }
  std::size_t token_dim() const { return token_dim_; }
  std::size_t token_count() const { return dims_.count(); }

  std::span<float> token(std::size_t index) {
    return {data_.data() + index * token_dim_, token_dim_};
  }
  std::span<const float> token(std::size_t index) const {
    return {data_.data() + index * token_dim_, token_dim_};
  }
  std::span<float> frame(std::size_t f);
  std::span<const float> frame(std::size_t f) const;
  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  // Copy of frames [0, count).
  TokenGrid first_frames(std::size_t count) const;
  bool all_finite() const;

 private:
  GridDims dims_;
  std::size_t token_dim_ = 0;
  std::vector<float> data_;
};

// Grayscale clip, values nominally in [0, 1].
struct PixelVideo {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  PixelVideo() = default;
  PixelVideo(std::size_t t, std::size_t h, std::size_t w) : frames(t), height(h), width(w), data(t * h * w, 0.0f) {}
  float& at(std::size_t t, std::size_t r, std::size_t c) { return data[(t * height + r) * width + c]; }
  float at(std::size_t t, std::size_t r, std::size_t c) const {
    return data[(t * height + r) * width + c];
  }
  // Row-major position of the brightest pixel of frame t (first on ties).
  std::array<int, 2> argmax(std::size_t t) const;
};

enum class MotionClass : std::uint8_t { Right = 0, Left = 1, Down = 2, Up = 3 };
inline constexpr std::size_t kMotionClassCount = 4;

std::string_view motion_class_name(MotionClass c);
std::optional<MotionClass> parse_motion_class(std::string_view name);

// Discrete stand-in for a text prompt: which way the ball travels.
struct MotionSpec {
  MotionClass cls = MotionClass::Right;
  int row = 0;
  int col = 0;
  int speed = 1;
};

// Draws a spec whose motion is possible on an H x W grid.
MotionSpec random_motion_spec(Rng& rng, std::size_t height, std::size_t width, int max_speed);

// Single bright cell moving `speed` cells per frame. When the next step would
// leave the grid the direction flips before moving.
PixelVideo gen_bouncing_ball(const MotionSpec& spec, std::size_t frames, std::size_t height,
                             std::size_t width, std::uint64_t seed);

// Closed-form position of the ball at pixel frame t.
std::array<int, 2> oracle_position(const MotionSpec& spec, std::size_t t, std::size_t height,
                                   std::size_t width);

// Invertible linear patchify tokenizer. A token is proj * (patch pixels),
// where proj is a seeded orthonormal D x D matrix (D = pt*ph*pw) times
// `scale`. The first pixel frame is tokenized alone, replicated across its
// temporal patch.
class ToyTokenizer {
 public:
  ToyTokenizer(std::array<std::size_t, 3> patch, std::uint64_t seed, double scale = 1.0);

  const std::array<std::size_t, 3>& patch() const { return patch_; }
  std::size_t token_dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  double scale() const { return scale_; }

  GridDims latent_dims(std::size_t frames_px, std::size_t height_px, std::size_t width_px) const;
  std::size_t pixel_frames(std::size_t latent_frames) const;

  TokenGrid tokenize(const PixelVideo& video) const;
  PixelVideo detokenize(const TokenGrid& grid) const;

  std::span<const double> proj() const { return proj_; }
  std::span<const double> proj_inv() const { return proj_inv_; }

 private:
  std::array<std::size_t, 3> patch_;
  std::size_t dim_;
  std::uint64_t seed_;
  double scale_;
  std::vector<double> proj_;      // D x D, row-major
  std::vector<double> proj_inv_;  // transpose of proj
};

}  // namespace vmar
