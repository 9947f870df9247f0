#include "vmar/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "vmar/errors.hpp"

namespace vmar {

void TransformerConfig::validate() const {
  if (layers == 0 || model_dim == 0 || heads == 0 || head_dim == 0 || mlp_ratio == 0 ||
      token_dim == 0 || num_classes == 0)
    throw ConfigError("model", "all transformer sizes must be positive");
  if (heads * head_dim != model_dim) {
    std::ostringstream os;
    os << "heads * head_dim (" << heads << " * " << head_dim << ") != model_dim (" << model_dim
       << ")";
    throw ConfigError("model.heads", os.str());
  }
  if (positional == PositionalMode::Rope) {
    if (rope.head_dim != head_dim) throw ConfigError("model.rope_split", "rope head_dim mismatch");
    try {
      rope.validate();
    } catch (const ShapeError& e) {
      throw ConfigError("model.rope_split", e.what());
    }
  } else if (model_dim % 6 != 0) {
    throw ConfigError("model.model_dim", "sincos positional encoding needs model_dim % 6 == 0");
  }
}

AttentionMaskSpec build_frame_causal_mask(std::size_t frame_count, std::size_t tokens_per_frame) {
  if (frame_count == 0 || tokens_per_frame == 0)
    throw ArgumentError("mask needs positive frame and token counts");
  return {tokens_per_frame, frame_count, AttentionRule::FrameCausal};
}

template <typename T>
BackboneParams<T>::BackboneParams(const TransformerConfig& cfg)
    : embed(cfg.token_dim, cfg.model_dim),
      mask_token({cfg.model_dim}),
      cond_table({cfg.num_classes + 1, cfg.model_dim}),
      ln_f(cfg.model_dim) {
  const std::size_t d = cfg.model_dim;
  const std::size_t hidden = cfg.mlp_ratio * d;
  blocks.resize(cfg.layers);
  for (auto& b : blocks) {
    b.ln1 = nn::LayerNorm<T>(d);
    b.wq = nn::Linear<T>(d, d);
    b.wk = nn::Linear<T>(d, d);
    b.wv = nn::Linear<T>(d, d);
    b.wo = nn::Linear<T>(d, d);
    b.lnx = nn::LayerNorm<T>(d);
    b.xq = nn::Linear<T>(d, d);
    b.xk = nn::Linear<T>(d, d);
    b.xv = nn::Linear<T>(d, d);
    b.xo = nn::Linear<T>(d, d);
    b.ln2 = nn::LayerNorm<T>(d);
    b.fc1 = nn::Linear<T>(d, hidden);
    b.fc2 = nn::Linear<T>(hidden, d);
  }
}

template <typename T>
void BackboneParams<T>::init(Rng& rng) {
  nn::fill_xavier(embed.w, rng);
  nn::fill_normal(mask_token, rng, 0.02);
  nn::fill_normal(cond_table, rng, 0.02);
  for (auto& b : blocks) {
    for (auto* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.xq, &b.xk, &b.xv, &b.xo, &b.fc1, &b.fc2})
      nn::fill_xavier(lin->w, rng);
  }
}

template <typename T>
KVCache<T>::KVCache(std::size_t layers, std::size_t model_dim, std::size_t tokens_per_frame)
    : model_dim_(model_dim), tokens_per_frame_(tokens_per_frame), keys_(layers), values_(layers) {
  if (layers == 0 || model_dim == 0 || tokens_per_frame == 0)
    throw ShapeError("KV cache dims must be positive");
}

template <typename T>
void KVCache<T>::append(const FrameKV<T>& kv) {
  if (kv.keys.size() != layers() || kv.values.size() != layers())
    throw ShapeError("KV append: layer count mismatch");
  if (kv.tokens == 0 || kv.tokens % tokens_per_frame_ != 0)
    throw ShapeError("KV append: token count is not a whole number of frames");
  for (std::size_t l = 0; l < layers(); ++l) {
    if (kv.keys[l].size() != kv.tokens * model_dim_ || kv.values[l].size() != kv.tokens * model_dim_)
      throw ShapeError("KV append: tensor size mismatch");
  }
  for (std::size_t l = 0; l < layers(); ++l) {
    keys_[l].insert(keys_[l].end(), kv.keys[l].begin(), kv.keys[l].end());
    values_[l].insert(values_[l].end(), kv.values[l].begin(), kv.values[l].end());
  }
  frames_ += kv.tokens / tokens_per_frame_;
}

template <typename T>
KVCache<T> append_frame_to_cache(const KVCache<T>& cache, const FrameKV<T>& kv) {
  KVCache<T> out = cache;
  out.append(kv);
  return out;
}

namespace {

template <typename T>
void softmax_inplace(T* s, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, s[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    s[j] = std::exp(s[j] - mx);
    sum += s[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) s[j] *= inv;
}

}  // namespace

template <typename T>
std::vector<T> Backbone<T>::forward(const BackboneInput<T>& in, std::size_t cond,
                                    AttentionRule rule, const KVCache<T>* cache,
                                    BackboneTape<T>* tape, FrameKV<T>* kv_out) const {
  const std::size_t n = in.rows();
  const std::size_t dm = cfg_.model_dim, hd = cfg_.head_dim, nh = cfg_.heads;
  const std::size_t tpf = in.tokens_per_frame();
  const std::size_t hidden = cfg_.mlp_ratio * dm;
  if (n == 0) throw ShapeError("backbone input is empty");
  if (in.tokens.size() != n * cfg_.token_dim) throw ShapeError("backbone: token buffer size mismatch");
  if (in.masked.size() != n) throw ShapeError("backbone: mask flag count mismatch");
  if (cond > cfg_.num_classes) throw ArgumentError("condition index out of range");
  if (tape && cache) throw ArgumentError("backbone: training tape is not supported with a KV cache");
  std::size_t prefix = 0;
  if (cache) {
    if (cache->layers() != cfg_.layers || cache->model_dim() != dm)
      throw ShapeError("KV cache layout does not match the model");
    if (cache->tokens_per_frame() != tpf)
      throw StateError("KV cache tokens_per_frame differs from the input frame size");
    if (cache->frames() != in.first_frame) {
      std::ostringstream os;
      os << "input starts at frame " << in.first_frame << " but the cache holds "
         << cache->frames() << " frames";
      throw StateError(os.str());
    }
    prefix = cache->length();
  }

  BackboneTape<T> scratch;
  BackboneTape<T>& tp = tape ? *tape : scratch;
  tp.rows = n;
  tp.cond = cond;
  tp.tokens_per_frame = tpf;
  tp.rule = rule;

  if (!in.coords.empty() && in.coords.size() != n)
    throw ShapeError("backbone: coordinate count mismatch");
  std::vector<Coord3> coords(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (!in.coords.empty()) {
      coords[r] = in.coords[r];
      continue;
    }
    const std::size_t local = r % tpf;
    coords[r] = {static_cast<std::int64_t>(in.first_frame + r / tpf),
                 static_cast<std::int64_t>(local / in.width),
                 static_cast<std::int64_t>(local % in.width)};
  }
  if (cfg_.positional == PositionalMode::Rope) tp.rope = RopeTable(coords, cfg_.rope);

  // Embedding.
  std::vector<T> x(n * dm);
  p_.embed.forward(in.tokens.data(), x.data(), n);
  for (std::size_t r = 0; r < n; ++r) {
    if (in.masked[r]) std::copy(p_.mask_token.data.begin(), p_.mask_token.data.end(), x.begin() + r * dm);
    if (cfg_.positional == PositionalMode::SinCos) {
      const std::vector<double> pe = sincos_abs_pe(coords[r], dm);
      for (std::size_t i = 0; i < dm; ++i) x[r * dm + i] += static_cast<T>(pe[i]);
    }
  }
  if (tape) {
    tp.tokens.assign(in.tokens.begin(), in.tokens.end());
    tp.masked.assign(in.masked.begin(), in.masked.end());
  }
  tp.ctx.assign(p_.cond_table.data.begin() + cond * dm, p_.cond_table.data.begin() + (cond + 1) * dm);

  if (kv_out) {
    kv_out->tokens = n;
    kv_out->keys.assign(cfg_.layers, {});
    kv_out->values.assign(cfg_.layers, {});
  }
  if (tape) tp.layers.assign(cfg_.layers, {});

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t keys_total = prefix + n;
  std::vector<T> scores(keys_total);
  std::vector<T> tmp(n * dm);
  std::vector<T> xhat(n * dm), rstd(n), a(n * dm), q(n * dm), k(n * dm), v(n * dm), o(n * dm);
  std::vector<T> hbuf(n * hidden), gbuf(n * hidden);

  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const auto& blk = p_.blocks[l];
    typename BackboneTape<T>::Layer* lt = tape ? &tp.layers[l] : nullptr;

    // Self-attention.
    nn::layernorm_forward(x.data(), xhat.data(), rstd.data(), a.data(), &blk.ln1, n, dm);
    blk.wq.forward(a.data(), q.data(), n);
    blk.wk.forward(a.data(), k.data(), n);
    blk.wv.forward(a.data(), v.data(), n);
    if (cfg_.positional == PositionalMode::Rope) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t h = 0; h < nh; ++h) {
          tp.rope.rotate(q.data() + r * dm + h * hd, r, false);
          tp.rope.rotate(k.data() + r * dm + h * hd, r, false);
        }
    }
    const T* cache_k = cache ? cache->keys(l).data() : nullptr;
    const T* cache_v = cache ? cache->values(l).data() : nullptr;
    auto key_row = [&](std::size_t j) { return j < prefix ? cache_k + j * dm : k.data() + (j - prefix) * dm; };
    auto val_row = [&](std::size_t j) { return j < prefix ? cache_v + j * dm : v.data() + (j - prefix) * dm; };
    if (lt) lt->probs.assign(nh * n * keys_total, T(0));
    std::fill(o.begin(), o.end(), T(0));
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t limit =
          rule == AttentionRule::Full ? keys_total : std::min(keys_total, prefix + (r / tpf + 1) * tpf);
      for (std::size_t h = 0; h < nh; ++h) {
        const T* qr = q.data() + r * dm + h * hd;
        for (std::size_t j = 0; j < limit; ++j) scores[j] = kernels::dot(qr, key_row(j) + h * hd, hd) * scale;
        softmax_inplace(scores.data(), limit);
        T* orow = o.data() + r * dm + h * hd;
        for (std::size_t j = 0; j < limit; ++j) kernels::axpy(scores[j], val_row(j) + h * hd, orow, hd);
        if (lt) std::copy(scores.begin(), scores.begin() + limit, lt->probs.begin() + (h * n + r) * keys_total);
      }
    }
    blk.wo.forward(o.data(), tmp.data(), n);
    for (std::size_t i = 0; i < n * dm; ++i) x[i] += tmp[i];
    if (kv_out) {
      kv_out->keys[l] = k;
      kv_out->values[l] = v;
    }
    if (lt) {
      lt->ln1_xhat = xhat;
      lt->ln1_rstd = rstd;
      lt->a = a;
      lt->q = q;
      lt->k = k;
      lt->v = v;
      lt->o = o;
    }

    // Cross-attention onto the single condition slot.
    if (cfg_.cross_attention) {
      std::vector<T> kx(dm), vx(dm), qx(n * dm), ox(n * dm, T(0)), px(nh * n);
      nn::layernorm_forward(x.data(), xhat.data(), rstd.data(), a.data(), &blk.lnx, n, dm);
      blk.xq.forward(a.data(), qx.data(), n);
      blk.xk.forward(tp.ctx.data(), kx.data(), 1);
      blk.xv.forward(tp.ctx.data(), vx.data(), 1);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t h = 0; h < nh; ++h) {
          T s = kernels::dot(qx.data() + r * dm + h * hd, kx.data() + h * hd, hd) * scale;
          softmax_inplace(&s, 1);
          px[h * n + r] = s;
          kernels::axpy(s, vx.data() + h * hd, ox.data() + r * dm + h * hd, hd);
        }
      blk.xo.forward(ox.data(), tmp.data(), n);
      for (std::size_t i = 0; i < n * dm; ++i) x[i] += tmp[i];
      if (lt) {
        lt->lnx_xhat = xhat;
        lt->lnx_rstd = rstd;
        lt->ax = a;
        lt->qx = std::move(qx);
        lt->kx = std::move(kx);
        lt->vx = std::move(vx);
        lt->px = std::move(px);
        lt->ox = std::move(ox);
      }
    }

    // MLP.
    nn::layernorm_forward(x.data(), xhat.data(), rstd.data(), a.data(), &blk.ln2, n, dm);
    blk.fc1.forward(a.data(), hbuf.data(), n);
    for (std::size_t i = 0; i < n * hidden; ++i) gbuf[i] = nn::gelu(hbuf[i]);
    blk.fc2.forward(gbuf.data(), tmp.data(), n);
    for (std::size_t i = 0; i < n * dm; ++i) x[i] += tmp[i];
    if (lt) {
      lt->ln2_xhat = xhat;
      lt->ln2_rstd = rstd;
      lt->m = a;
      lt->h1 = hbuf;
      lt->g = gbuf;
    }
  }

  std::vector<T> z(n * dm);
  tp.lnf_xhat.resize(n * dm);
  tp.lnf_rstd.resize(n);
  nn::layernorm_forward(x.data(), tp.lnf_xhat.data(), tp.lnf_rstd.data(), z.data(), &p_.ln_f, n, dm);
  return z;
}

template <typename T>
void Backbone<T>::backward(const BackboneTape<T>& tp, std::span<const T> dz,
                           BackboneParams<T>& g, std::vector<T>* d_embed) const {
  const std::size_t n = tp.rows;
  const std::size_t dm = cfg_.model_dim, hd = cfg_.head_dim, nh = cfg_.heads;
  const std::size_t hidden = cfg_.mlp_ratio * dm;
  const std::size_t tpf = tp.tokens_per_frame;
  if (dz.size() != n * dm) throw ShapeError("backbone backward: dz size mismatch");
  if (tp.layers.size() != cfg_.layers) throw StateError("backbone backward: tape was not recorded");
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  std::vector<T> dx(n * dm, T(0));
  nn::layernorm_backward(dz.data(), tp.lnf_xhat.data(), tp.lnf_rstd.data(), &p_.ln_f, &g.ln_f,
                         dx.data(), n, dm);
  std::vector<T> d_ctx(dm, T(0));
  std::vector<T> da(n * dm), dg(n * hidden);

  for (std::size_t l = cfg_.layers; l-- > 0;) {
    const auto& blk = p_.blocks[l];
    auto& gb = g.blocks[l];
    const auto& lt = tp.layers[l];

    // MLP.
    std::fill(dg.begin(), dg.end(), T(0));
    blk.fc2.backward(lt.g.data(), dx.data(), dg.data(), gb.fc2, n);
    for (std::size_t i = 0; i < n * hidden; ++i) dg[i] *= nn::gelu_grad(lt.h1[i]);
    std::fill(da.begin(), da.end(), T(0));
    blk.fc1.backward(lt.m.data(), dg.data(), da.data(), gb.fc1, n);
    nn::layernorm_backward(da.data(), lt.ln2_xhat.data(), lt.ln2_rstd.data(), &blk.ln2, &gb.ln2,
                           dx.data(), n, dm);

    // Cross-attention.
    if (cfg_.cross_attention) {
      std::vector<T> dox(n * dm, T(0)), dqx(n * dm, T(0)), dkx(dm, T(0)), dvx(dm, T(0));
      blk.xo.backward(lt.ox.data(), dx.data(), dox.data(), gb.xo, n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t h = 0; h < nh; ++h) {
          const T* dor = dox.data() + r * dm + h * hd;
          const T p = lt.px[h * n + r];
          const T dp = kernels::dot(dor, lt.vx.data() + h * hd, hd);
          kernels::axpy(p, dor, dvx.data() + h * hd, hd);
          const T ds = p * (dp - p * dp) * scale;
          kernels::axpy(ds, lt.kx.data() + h * hd, dqx.data() + r * dm + h * hd, hd);
          kernels::axpy(ds, lt.qx.data() + r * dm + h * hd, dkx.data() + h * hd, hd);
        }
      std::fill(da.begin(), da.end(), T(0));
      blk.xq.backward(lt.ax.data(), dqx.data(), da.data(), gb.xq, n);
      blk.xk.backward(tp.ctx.data(), dkx.data(), d_ctx.data(), gb.xk, 1);
      blk.xv.backward(tp.ctx.data(), dvx.data(), d_ctx.data(), gb.xv, 1);
      nn::layernorm_backward(da.data(), lt.lnx_xhat.data(), lt.lnx_rstd.data(), &blk.lnx, &gb.lnx,
                             dx.data(), n, dm);
    }

    // Self-attention.
    std::vector<T> d_o(n * dm, T(0)), dq(n * dm, T(0)), dk(n * dm, T(0)), dv(n * dm, T(0));
    blk.wo.backward(lt.o.data(), dx.data(), d_o.data(), gb.wo, n);
    std::vector<T> dp(n);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t limit = tp.rule == AttentionRule::Full ? n : std::min(n, (r / tpf + 1) * tpf);
      for (std::size_t h = 0; h < nh; ++h) {
        const T* p = lt.probs.data() + (h * n + r) * n;
        const T* dor = d_o.data() + r * dm + h * hd;
        T sum = 0;
        for (std::size_t j = 0; j < limit; ++j) {
          dp[j] = kernels::dot(dor, lt.v.data() + j * dm + h * hd, hd);
          sum += p[j] * dp[j];
        }
        const T* qr = lt.q.data() + r * dm + h * hd;
        T* dqr = dq.data() + r * dm + h * hd;
        for (std::size_t j = 0; j < limit; ++j) {
          kernels::axpy(p[j], dor, dv.data() + j * dm + h * hd, hd);
          const T ds = p[j] * (dp[j] - sum) * scale;
          kernels::axpy(ds, lt.k.data() + j * dm + h * hd, dqr, hd);
          kernels::axpy(ds, qr, dk.data() + j * dm + h * hd, hd);
        }
      }
    }
    if (cfg_.positional == PositionalMode::Rope) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t h = 0; h < nh; ++h) {
          tp.rope.rotate(dq.data() + r * dm + h * hd, r, true);
          tp.rope.rotate(dk.data() + r * dm + h * hd, r, true);
        }
    }
    std::fill(da.begin(), da.end(), T(0));
    blk.wq.backward(lt.a.data(), dq.data(), da.data(), gb.wq, n);
    blk.wk.backward(lt.a.data(), dk.data(), da.data(), gb.wk, n);
    blk.wv.backward(lt.a.data(), dv.data(), da.data(), gb.wv, n);
    nn::layernorm_backward(da.data(), lt.ln1_xhat.data(), lt.ln1_rstd.data(), &blk.ln1, &gb.ln1,
                           dx.data(), n, dm);
  }

  // Condition slot and embeddings.
  for (std::size_t i = 0; i < dm; ++i) g.cond_table.data[tp.cond * dm + i] += d_ctx[i];
  std::vector<T> d_visible = dx;
  for (std::size_t r = 0; r < n; ++r) {
    if (!tp.masked[r]) continue;
    for (std::size_t i = 0; i < dm; ++i) {
      g.mask_token.data[i] += dx[r * dm + i];
      d_visible[r * dm + i] = T(0);
    }
  }
  p_.embed.backward(tp.tokens.data(), d_visible.data(), nullptr, g.embed, n);
  if (d_embed) *d_embed = std::move(dx);
}

template struct BackboneParams<float>;
template struct BackboneParams<double>;
template class KVCache<float>;
template class KVCache<double>;
template KVCache<float> append_frame_to_cache(const KVCache<float>&, const FrameKV<float>&);
template KVCache<double> append_frame_to_cache(const KVCache<double>&, const FrameKV<double>&);
template class Backbone<float>;
template class Backbone<double>;

}  // namespace vmar
