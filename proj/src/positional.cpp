#include "vmar/positional.hpp"

#include <cmath>
#include <sstream>

#include "vmar/errors.hpp"

namespace vmar {

RoPEFreqs RoPEFreqs::for_head_dim(std::size_t head_dim, double theta_base) {
  RoPEFreqs f;
  f.head_dim = head_dim;
  f.axis_split = {head_dim / 2, head_dim / 4, head_dim / 4};
  f.theta_base = theta_base;
  f.validate();
  return f;
}

void RoPEFreqs::validate() const {
  const auto [dt, dh, dw] = axis_split;
  if (head_dim == 0 || head_dim % 2 != 0) throw ShapeError("rope head_dim must be even");
  if (dt % 2 || dh % 2 || dw % 2) throw ShapeError("rope axis split entries must be even");
  if (dt + dh + dw != head_dim) {
    std::ostringstream os;
    os << "rope axis split (" << dt << "," << dh << "," << dw << ") does not sum to head_dim "
       << head_dim;
    throw ShapeError(os.str());
  }
  if (!(theta_base > 0)) throw ShapeError("rope theta_base must be positive");
}

std::vector<double> rope_angles(const Coord3& coord, const RoPEFreqs& freqs) {
  freqs.validate();
  std::vector<double> angles;
  angles.reserve(freqs.head_dim / 2);
  const std::int64_t pos[3] = {coord.t, coord.h, coord.w};
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t d = freqs.axis_split[axis];
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double inv_freq = std::pow(freqs.theta_base, -2.0 * static_cast<double>(i) / d);
      angles.push_back(static_cast<double>(pos[axis]) * inv_freq);
    }
  }
  return angles;
}

template <typename T>
std::vector<T> apply_rope_3d(std::span<const T> vec, const Coord3& coord, const RoPEFreqs& freqs) {
  if (vec.size() != freqs.head_dim) throw ShapeError("rope input length != head_dim");
  const std::vector<double> angles = rope_angles(coord, freqs);
  std::vector<T> out(vec.begin(), vec.end());
  for (std::size_t p = 0; p < angles.size(); ++p) {
    const double c = std::cos(angles[p]);
    const double s = std::sin(angles[p]);
    const double a = vec[2 * p];
    const double b = vec[2 * p + 1];
    out[2 * p] = static_cast<T>(a * c - b * s);
    out[2 * p + 1] = static_cast<T>(a * s + b * c);
  }
  return out;
}

template std::vector<float> apply_rope_3d<float>(std::span<const float>, const Coord3&,
                                                 const RoPEFreqs&);
template std::vector<double> apply_rope_3d<double>(std::span<const double>, const Coord3&,
                                                   const RoPEFreqs&);

RopeTable::RopeTable(std::span<const Coord3> coords, const RoPEFreqs& freqs)
    : pairs_(freqs.head_dim / 2) {
  cos_.resize(coords.size() * pairs_);
  sin_.resize(coords.size() * pairs_);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::vector<double> a = rope_angles(coords[i], freqs);
    for (std::size_t p = 0; p < pairs_; ++p) {
      cos_[i * pairs_ + p] = std::cos(a[p]);
      sin_[i * pairs_ + p] = std::sin(a[p]);
    }
  }
}

template <typename T>
void RopeTable::rotate(T* vec, std::size_t token, bool inverse) const {
  const double* c = cos_row(token);
  const double* s = sin_row(token);
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t p = 0; p < pairs_; ++p) {
    const T cp = static_cast<T>(c[p]);
    const T sp = static_cast<T>(sign * s[p]);
    const T a = vec[2 * p];
    const T b = vec[2 * p + 1];
    vec[2 * p] = a * cp - b * sp;
    vec[2 * p + 1] = a * sp + b * cp;
  }
}

template void RopeTable::rotate<float>(float*, std::size_t, bool) const;
template void RopeTable::rotate<double>(double*, std::size_t, bool) const;

std::vector<double> sincos_abs_pe(const Coord3& coord, std::size_t model_dim) {
  if (model_dim == 0 || model_dim % 6 != 0)
    throw ShapeError("sincos positional encoding needs model_dim divisible by 6");
  const std::size_t d = model_dim / 3;
  std::vector<double> pe(model_dim);
  const std::int64_t pos[3] = {coord.t, coord.h, coord.w};
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / d);
      const double a = static_cast<double>(pos[axis]) * w;
      pe[axis * d + 2 * i] = std::sin(a);
      pe[axis * d + 2 * i + 1] = std::cos(a);
    }
  }
  return pe;
}

}  // namespace vmar
