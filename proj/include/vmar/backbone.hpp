#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "vmar/layers.hpp"
#include "vmar/positional.hpp"

namespace vmar {

enum class PositionalMode : std::uint8_t { Rope, SinCos };
enum class AttentionRule : std::uint8_t {
  FrameCausal,  // i may attend j iff frame(j) <= frame(i)
  Full,         // bidirectional over the whole clip
};

struct TransformerConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t mlp_ratio = 4;
  std::size_t token_dim = 8;
  std::size_t num_classes = 4;  // the null condition is row num_classes
  PositionalMode positional = PositionalMode::Rope;
  RoPEFreqs rope = RoPEFreqs::for_head_dim(16);
  bool cross_attention = true;

  void validate() const;  // throws ConfigError
};

struct AttentionMaskSpec {
  std::size_t tokens_per_frame = 0;
  std::size_t frame_count = 0;
  AttentionRule rule = AttentionRule::FrameCausal;

  std::size_t size() const { return tokens_per_frame * frame_count; }
  bool allow(std::size_t i, std::size_t j) const {
    return rule == AttentionRule::Full || j / tokens_per_frame <= i / tokens_per_frame;
  }
};

AttentionMaskSpec build_frame_causal_mask(std::size_t frame_count, std::size_t tokens_per_frame);

template <typename T>
struct BlockParams {
  nn::LayerNorm<T> ln1;
  nn::Linear<T> wq, wk, wv, wo;
  nn::LayerNorm<T> lnx;
  nn::Linear<T> xq, xk, xv, xo;  // cross-attention onto the condition slot
  nn::LayerNorm<T> ln2;
  nn::Linear<T> fc1, fc2;
};

template <typename T>
struct BackboneParams {
  nn::Linear<T> embed;      // token_dim -> model_dim
  Tensor<T> mask_token;     // [model_dim]
  Tensor<T> cond_table;     // [(num_classes + 1) x model_dim], last row = null
  std::vector<BlockParams<T>> blocks;
  nn::LayerNorm<T> ln_f;

  BackboneParams() = default;
  explicit BackboneParams(const TransformerConfig& cfg);
  void init(Rng& rng);

  template <typename F>
  void visit(F&& f) {
    const std::string p = "backbone";
    embed.visit(p + ".embed", f);
    f(p + ".mask_token", mask_token);
    f(p + ".cond_table", cond_table);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      char idx[8];
      std::snprintf(idx, sizeof idx, "%02zu", i);
      const std::string b = p + ".blocks." + idx;
      auto& blk = blocks[i];
      blk.ln1.visit(b + ".ln1", f);
      blk.wq.visit(b + ".attn.wq", f);
      blk.wk.visit(b + ".attn.wk", f);
      blk.wv.visit(b + ".attn.wv", f);
      blk.wo.visit(b + ".attn.wo", f);
      blk.lnx.visit(b + ".lnx", f);
      blk.xq.visit(b + ".xattn.wq", f);
      blk.xk.visit(b + ".xattn.wk", f);
      blk.xv.visit(b + ".xattn.wv", f);
      blk.xo.visit(b + ".xattn.wo", f);
      blk.ln2.visit(b + ".ln2", f);
      blk.fc1.visit(b + ".mlp.fc1", f);
      blk.fc2.visit(b + ".mlp.fc2", f);
    }
    ln_f.visit(p + ".ln_f", f);
  }
};

// Keys (post-rotation) and values of one or more whole frames, per layer.
template <typename T>
struct FrameKV {
  std::size_t tokens = 0;
  std::vector<std::vector<T>> keys;    // [layer][tokens x model_dim]
  std::vector<std::vector<T>> values;  // [layer][tokens x model_dim]
};

// Append-only temporal cache of completed frames.
template <typename T>
class KVCache {
 public:
  KVCache(std::size_t layers, std::size_t model_dim, std::size_t tokens_per_frame);

  std::size_t frames() const { return frames_; }
  std::size_t length() const { return frames_ * tokens_per_frame_; }
  std::size_t tokens_per_frame() const { return tokens_per_frame_; }
  std::size_t layers() const { return keys_.size(); }
  std::size_t model_dim() const { return model_dim_; }
  std::size_t bytes() const { return 2 * layers() * length() * model_dim_ * sizeof(T); }
  const std::vector<T>& keys(std::size_t layer) const { return keys_[layer]; }
  const std::vector<T>& values(std::size_t layer) const { return values_[layer]; }

  // Appends whole frames; throws ShapeError if kv is not a whole number of
  // frames with matching layer/model dims.
  void append(const FrameKV<T>& kv);

 private:
  std::size_t model_dim_;
  std::size_t tokens_per_frame_;
  std::size_t frames_ = 0;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

// Returns a new cache with kv appended (the input is left unchanged).
template <typename T>
KVCache<T> append_frame_to_cache(const KVCache<T>& cache, const FrameKV<T>& kv);

// A run of whole frames fed to the backbone. first_frame is the absolute frame
// index of the first row (positional coordinates continue from it).
template <typename T>
struct BackboneInput {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t first_frame = 0;
  std::span<const T> tokens;          // [n x token_dim]
  std::span<const std::uint8_t> masked;  // [n], nonzero = replace with mask token
  std::span<const Coord3> coords;        // optional per-row coordinates; raster order if empty

  std::size_t tokens_per_frame() const { return height * width; }
  std::size_t rows() const { return frames * height * width; }
};

template <typename T>
struct BackboneTape {
  std::size_t rows = 0;
  std::size_t cond = 0;
  std::size_t tokens_per_frame = 0;
  AttentionRule rule = AttentionRule::FrameCausal;
  std::vector<T> tokens;
  std::vector<std::uint8_t> masked;
  RopeTable rope;
  struct Layer {
    std::vector<T> ln1_xhat, ln1_rstd, a, q, k, v, probs, o;
    std::vector<T> lnx_xhat, lnx_rstd, ax, qx, kx, vx, px, ox;
    std::vector<T> ln2_xhat, ln2_rstd, m, h1, g;
  };
  std::vector<Layer> layers;
  std::vector<T> lnf_xhat, lnf_rstd;
  std::vector<T> ctx;
};

template <typename T>
class Backbone {
 public:
  Backbone(const TransformerConfig& cfg, const BackboneParams<T>& params)
      : cfg_(cfg), p_(params) {}

  // Hidden vectors z [rows x model_dim] for every input row. With a cache the
  // input must start at frame cache.frames(); cached frames are attended to
  // but not recomputed. kv_out (optional) receives this call's keys/values.
  std::vector<T> forward(const BackboneInput<T>& in, std::size_t cond, AttentionRule rule,
                         const KVCache<T>* cache = nullptr, BackboneTape<T>* tape = nullptr,
                         FrameKV<T>* kv_out = nullptr) const;

  // Accumulates parameter gradients. d_embed (optional, rows x model_dim)
  // receives the gradient at the embedded input sequence.
  void backward(const BackboneTape<T>& tape, std::span<const T> dz, BackboneParams<T>& grad,
                std::vector<T>* d_embed = nullptr) const;

  const TransformerConfig& config() const { return cfg_; }

 private:
  const TransformerConfig& cfg_;
  const BackboneParams<T>& p_;
};

}  // namespace vmar
