#include "vmar/core.hpp"

#include <cmath>
#include <sstream>

#include "vmar/errors.hpp"

namespace vmar {

Rng Rng::substream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(2 * (keys.size() + 1));
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (std::uint64_t k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> raw{};
  seq.generate(raw.begin(), raw.end());
  return Rng((static_cast<std::uint64_t>(raw[1]) << 32) | raw[0]);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ArgumentError("Rng::below requires n > 0");
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << normal_ << ' ' << uniform_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_ >> normal_ >> uniform_;
  if (!is) throw ArgumentError("malformed RNG state");
}

std::size_t flatten_index(std::size_t t, std::size_t h, std::size_t w, const GridDims& dims) {
  if (t >= dims.frames || h >= dims.height || w >= dims.width) {
    std::ostringstream os;
    os << "coordinate (" << t << "," << h << "," << w << ") outside grid (" << dims.frames << ","
       << dims.height << "," << dims.width << ")";
    throw IndexError(os.str());
  }
  return (t * dims.height + h) * dims.width + w;
}

TokenGrid::TokenGrid(GridDims dims, std::size_t token_dim)
    : dims_(dims), token_dim_(token_dim), data_(dims.count() * token_dim, 0.0f) {}

TokenGrid::TokenGrid(GridDims dims, std::size_t token_dim, std::vector<float> data)
    : dims_(dims), token_dim_(token_dim), data_(std::move(data)) {
  if (data_.size() != dims_.count() * token_dim_)
    throw ShapeError("token grid data size does not match T*H*W*D");
}

std::span<float> TokenGrid::frame(std::size_t f) {
  if (f >= dims_.frames) throw IndexError("frame index out of range");
  const std::size_t n = dims_.tokens_per_frame() * token_dim_;
  return {data_.data() + f * n, n};
}

std::span<const float> TokenGrid::frame(std::size_t f) const {
  if (f >= dims_.frames) throw IndexError("frame index out of range");
  const std::size_t n = dims_.tokens_per_frame() * token_dim_;
  return {data_.data() + f * n, n};
}

TokenGrid TokenGrid::first_frames(std::size_t count) const {
  if (count == 0 || count > dims_.frames) throw ShapeError("first_frames: count out of range");
  GridDims d{count, dims_.height, dims_.width};
  const std::size_t n = d.count() * token_dim_;
  return TokenGrid(d, token_dim_, std::vector<float>(data_.begin(), data_.begin() + n));
}

bool TokenGrid::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::array<int, 2> PixelVideo::argmax(std::size_t t) const {
  std::size_t best = 0;
  const float* f = data.data() + t * height * width;
  for (std::size_t i = 1; i < height * width; ++i)
    if (f[i] > f[best]) best = i;
  return {static_cast<int>(best / width), static_cast<int>(best % width)};
}

std::string_view motion_class_name(MotionClass c) {
  switch (c) {
    case MotionClass::Right: return "right";
    case MotionClass::Left: return "left";
    case MotionClass::Down: return "down";
    case MotionClass::Up: return "up";
  }
  return "?";
}

std::optional<MotionClass> parse_motion_class(std::string_view name) {
  for (std::size_t i = 0; i < kMotionClassCount; ++i) {
    auto c = static_cast<MotionClass>(i);
    if (motion_class_name(c) == name) return c;
  }
  return std::nullopt;
}

namespace {

bool horizontal(MotionClass c) { return c == MotionClass::Right || c == MotionClass::Left; }
int sign_of(MotionClass c) { return (c == MotionClass::Right || c == MotionClass::Down) ? 1 : -1; }

void check_spec(const MotionSpec& spec, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ArgumentError("grid dims must be positive");
  if (static_cast<std::size_t>(spec.cls) >= kMotionClassCount)
    throw ArgumentError("motion class out of range");
  if (spec.row < 0 || spec.col < 0 || static_cast<std::size_t>(spec.row) >= height ||
      static_cast<std::size_t>(spec.col) >= width)
    throw ArgumentError("motion start outside the grid");
  const long extent = static_cast<long>(horizontal(spec.cls) ? width : height);
  const long p0 = horizontal(spec.cls) ? spec.col : spec.row;
  if (spec.speed < 1 || (p0 + spec.speed >= extent && p0 - spec.speed < 0))
    throw ArgumentError("ball cannot move: speed too large for its start on this axis");
}

}  // namespace

MotionSpec random_motion_spec(Rng& rng, std::size_t height, std::size_t width, int max_speed) {
  MotionSpec s;
  s.cls = static_cast<MotionClass>(rng.below(kMotionClassCount));
  const std::size_t extent = horizontal(s.cls) ? width : height;
  const int cap = std::min<int>(max_speed, static_cast<int>(extent) - 1);
  if (cap < 1) throw ArgumentError("grid too small for any motion");
  s.speed = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(cap)));
  // Redraw starts from which the ball could not move at all.
  for (;;) {
    s.row = static_cast<int>(rng.below(height));
    s.col = static_cast<int>(rng.below(width));
    const int p = horizontal(s.cls) ? s.col : s.row;
    if (p + s.speed < static_cast<int>(extent) || p - s.speed >= 0) return s;
  }
}

PixelVideo gen_bouncing_ball(const MotionSpec& spec, std::size_t frames, std::size_t height,
                             std::size_t width, std::uint64_t /*seed: background is noiseless*/) {
  if (frames == 0) throw ArgumentError("frame count must be positive");
  check_spec(spec, height, width);
  PixelVideo v(frames, height, width);
  int pos[2] = {spec.row, spec.col};
  const int axis = horizontal(spec.cls) ? 1 : 0;
  const int extent = static_cast<int>(axis == 1 ? width : height);
  int vel = sign_of(spec.cls) * spec.speed;
  for (std::size_t t = 0; t < frames; ++t) {
    v.at(t, pos[0], pos[1]) = 1.0f;
    int next = pos[axis] + vel;
    if (next < 0 || next >= extent) {
      vel = -vel;
      next = pos[axis] + vel;
    }
    pos[axis] = next;
  }
  return v;
}

std::array<int, 2> oracle_position(const MotionSpec& spec, std::size_t t, std::size_t height,
                                   std::size_t width) {
  check_spec(spec, height, width);
  const bool horiz = horizontal(spec.cls);
  const long extent = static_cast<long>(horiz ? width : height);
  const long s = spec.speed;
  const long p0 = horiz ? spec.col : spec.row;
  // The ball only visits p0 mod s + k*s; on that lattice it traces a triangle
  // wave over [0, m] with period 2m.
  const long base = p0 % s;
  const long m = (extent - 1 - base) / s;
  const long j0 = (p0 - base) / s;
  const long period = 2 * m;
  const long start_phase = sign_of(spec.cls) > 0 ? j0 : (period - j0) % period;
  const long phase = (start_phase + static_cast<long>(t % static_cast<std::size_t>(period))) % period;
  const long j = phase <= m ? phase : period - phase;
  const int p = static_cast<int>(base + s * j);
  return horiz ? std::array<int, 2>{spec.row, p} : std::array<int, 2>{p, spec.col};
}

ToyTokenizer::ToyTokenizer(std::array<std::size_t, 3> patch, std::uint64_t seed, double scale)
    : patch_(patch), dim_(patch[0] * patch[1] * patch[2]), seed_(seed), scale_(scale) {
  if (dim_ == 0) throw ArgumentError("patch factors must be positive");
  if (!(scale > 0) || !std::isfinite(scale)) throw ArgumentError("tokenizer scale must be positive");
  // Orthonormalize a seeded Gaussian matrix (modified Gram-Schmidt on rows).
  Rng rng(seed);
  const std::size_t d = dim_;
  std::vector<double> q(d * d);
  for (double& x : q) x = rng.normal();
  for (std::size_t i = 0; i < d; ++i) {
    double* ri = q.data() + i * d;
    for (std::size_t j = 0; j < i; ++j) {
      const double* rj = q.data() + j * d;
      double proj = 0;
      for (std::size_t k = 0; k < d; ++k) proj += ri[k] * rj[k];
      for (std::size_t k = 0; k < d; ++k) ri[k] -= proj * rj[k];
    }
    double norm = 0;
    for (std::size_t k = 0; k < d; ++k) norm += ri[k] * ri[k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) ri[k] /= norm;
  }
  proj_ = q;
  proj_inv_.resize(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) proj_inv_[j * d + i] = proj_[i * d + j];
}

GridDims ToyTokenizer::latent_dims(std::size_t frames_px, std::size_t height_px,
                                   std::size_t width_px) const {
  const auto [pt, ph, pw] = patch_;
  if (frames_px == 0 || height_px == 0 || width_px == 0)
    throw ShapeError("pixel dims must be positive");
  if ((frames_px - 1) % pt != 0 || height_px % ph != 0 || width_px % pw != 0) {
    std::ostringstream os;
    os << "pixel dims " << frames_px << "x" << height_px << "x" << width_px
       << " incompatible with patch (" << pt << "," << ph << "," << pw
       << "); need frames = 1 mod " << pt;
    throw ShapeError(os.str());
  }
  return {(frames_px - 1) / pt + 1, height_px / ph, width_px / pw};
}

std::size_t ToyTokenizer::pixel_frames(std::size_t latent_frames) const {
  if (latent_frames == 0) throw ShapeError("latent frame count must be positive");
  return (latent_frames - 1) * patch_[0] + 1;
}

TokenGrid ToyTokenizer::tokenize(const PixelVideo& video) const {
  const GridDims dims = latent_dims(video.frames, video.height, video.width);
  const auto [pt, ph, pw] = patch_;
  const std::size_t d = dim_;
  TokenGrid grid(dims, d);
  std::vector<double> patch(d);
  for (std::size_t t = 0; t < dims.frames; ++t) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        std::size_t k = 0;
        for (std::size_t dt = 0; dt < pt; ++dt) {
          const std::size_t src_t = t == 0 ? 0 : (t - 1) * pt + 1 + dt;
          for (std::size_t dh = 0; dh < ph; ++dh)
            for (std::size_t dw = 0; dw < pw; ++dw)
              patch[k++] = video.at(src_t, h * ph + dh, w * pw + dw);
        }
        auto tok = grid.token(flatten_index(t, h, w, dims));
        for (std::size_t i = 0; i < d; ++i) {
          double acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += proj_[i * d + j] * patch[j];
          tok[i] = static_cast<float>(scale_ * acc);
        }
      }
    }
  }
  return grid;
}

PixelVideo ToyTokenizer::detokenize(const TokenGrid& grid) const {
  if (grid.token_dim() != dim_) throw ShapeError("token dim does not match tokenizer");
  const GridDims& dims = grid.dims();
  if (dims.count() == 0) throw ShapeError("empty token grid");
  const auto [pt, ph, pw] = patch_;
  const std::size_t d = dim_;
  PixelVideo video(pixel_frames(dims.frames), dims.height * ph, dims.width * pw);
  std::vector<double> patch(d);
  for (std::size_t t = 0; t < dims.frames; ++t) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        auto tok = grid.token(flatten_index(t, h, w, dims));
        for (std::size_t i = 0; i < d; ++i) {
          double acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += proj_inv_[i * d + j] * tok[j];
          patch[i] = acc / scale_;
        }
        const std::size_t plane = ph * pw;
        for (std::size_t dh = 0; dh < ph; ++dh) {
          for (std::size_t dw = 0; dw < pw; ++dw) {
            const std::size_t off = dh * pw + dw;
            if (t == 0) {
              // The first frame was replicated across the temporal patch.
              double mean = 0;
              for (std::size_t dt = 0; dt < pt; ++dt) mean += patch[dt * plane + off];
              video.at(0, h * ph + dh, w * pw + dw) = static_cast<float>(mean / pt);
            } else {
              for (std::size_t dt = 0; dt < pt; ++dt)
                video.at((t - 1) * pt + 1 + dt, h * ph + dh, w * pw + dw) =
                    static_cast<float>(patch[dt * plane + off]);
            }
          }
        }
      }
    }
  }
  return video;
}

}  // namespace vmar
