#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace vmar {

// Token coordinate (frame, row, col). Signed so that negated coordinates can
// undo a rotation.
struct Coord3 {
  std::int64_t t = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
};

// Rotary frequencies for one attention head, split across the three axes.
// Each axis block of width d_a rotates pairs (2i, 2i+1) by coord * theta^(-2i/d_a).
struct RoPEFreqs {
  std::size_t head_dim = 16;
  std::array<std::size_t, 3> axis_split{8, 4, 4};
  double theta_base = 10000.0;

  // Default split: half the channels to time, a quarter to each spatial axis.
  static RoPEFreqs for_head_dim(std::size_t head_dim, double theta_base = 10000.0);
  void validate() const;  // throws ShapeError
};

// Rotation angles for one coordinate, one per channel pair (head_dim / 2).
std::vector<double> rope_angles(const Coord3& coord, const RoPEFreqs& freqs);

template <typename T>
std::vector<T> apply_rope_3d(std::span<const T> vec, const Coord3& coord, const RoPEFreqs& freqs);

// Precomputed cos/sin for a run of token coordinates; used by the backbone.
class RopeTable {
 public:
  RopeTable() = default;
  RopeTable(std::span<const Coord3> coords, const RoPEFreqs& freqs);

  std::size_t pairs() const { return pairs_; }
  const double* cos_row(std::size_t token) const { return cos_.data() + token * pairs_; }
  const double* sin_row(std::size_t token) const { return sin_.data() + token * pairs_; }

  // Rotate one head vector in place; inverse=true applies the transpose (used
  // for backpropagation).
  template <typename T>
  void rotate(T* vec, std::size_t token, bool inverse) const;

 private:
  std::size_t pairs_ = 0;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

// Concatenated per-axis sinusoidal encoding: for each axis, model_dim/3 channels
// laid out as [sin(p w_0), cos(p w_0), sin(p w_1), ...] with w_i = 10000^(-2i/(model_dim/3)).
std::vector<double> sincos_abs_pe(const Coord3& coord, std::size_t model_dim);

}  // namespace vmar
