#pragma once

// Dual-resolution convolutional window self-attention.
//
// The feature map Z is attended at full resolution and after an r x r max
// pool. Each branch gets its own 1x1 Q/K/V projections and single-head
// attention inside non-overlapping w x w windows. The low branch is brought
// back with nearest upsampling, the two are summed, projected by a 1x1 conv
// and refined by a gated depthwise-conv feed-forward block (GDFN).

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/ops.hpp"
#include "hybrid/param.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"

namespace hyb {

struct AttentionConfig {
  std::size_t window_size = 10;
  std::size_t reduction = 2;
  double scale = 0.0;  // <= 0 selects sqrt(D)
  std::size_t heads = 1;
  double gdfn_expansion = 2.0;
  std::size_t depth = 1;
  bool norm = false;  // channel layer norm before Q/K/V and before the GDFN

  void validate() const {
    if (heads != 1) throw ConfigError("attention: only single-head attention is supported");
    if (window_size == 0) throw ConfigError("attention: window_size must be >= 1");
    if (reduction == 0) throw ConfigError("attention: reduction must be >= 1");
    if (!(gdfn_expansion > 0.0)) throw ConfigError("attention: gdfn_expansion must be positive");
    if (depth == 0) throw ConfigError("attention: attn_depth must be >= 1");
  }
  double alpha(std::size_t feature_dim) const {
    return scale > 0.0 ? scale : std::sqrt(static_cast<double>(feature_dim));
  }
};

// Tokens of all windows, shape (n * rows * cols, 1, w * w, D). Windows are in
// row-major grid order per image; tokens are row-major inside a window.
template <class T>
struct WindowBatch {
  Tensor<T> tokens;
  std::size_t n = 0, channels = 0, height = 0, width = 0;
  std::size_t window = 1;
  std::size_t rows = 0, cols = 0;  // window grid
  std::size_t pad_h = 0, pad_w = 0;

  std::size_t num_windows() const noexcept { return rows * cols; }
  std::size_t tokens_per_window() const noexcept { return window * window; }

  // Keys that come from zero padding are excluded from attention.
  KeyMask key_mask() const {
    KeyMask m;
    m.cols = tokens_per_window();
    m.keep.assign(n * num_windows() * m.cols, 0);
    for (std::size_t b = 0; b < n * num_windows(); ++b) {
      const std::size_t widx = b % num_windows();
      const std::size_t wr = widx / cols, wc = widx % cols;
      for (std::size_t t = 0; t < m.cols; ++t) {
        const std::size_t y = wr * window + t / window, x = wc * window + t % window;
        m.keep[b * m.cols + t] = (y < height && x < width) ? 1 : 0;
      }
    }
    return m;
  }

  WindowBatch with_tokens(Tensor<T> t) const {
    WindowBatch out = *this;
    out.tokens = std::move(t);
    return out;
  }
};

namespace detail {

// For token slot i of a window batch, the flat index into the (n, D, M, N) map,
// or npos for padding.
template <class T>
std::vector<std::size_t> window_index(const WindowBatch<T>& wb) {
  const std::size_t T_ = wb.tokens_per_window();
  const std::size_t D = wb.channels;
  std::vector<std::size_t> idx(wb.n * wb.num_windows() * T_ * D);
  for (std::size_t n = 0; n < wb.n; ++n)
    for (std::size_t wr = 0; wr < wb.rows; ++wr)
      for (std::size_t wc = 0; wc < wb.cols; ++wc) {
        const std::size_t b = (n * wb.rows + wr) * wb.cols + wc;
        for (std::size_t t = 0; t < T_; ++t) {
          const std::size_t y = wr * wb.window + t / wb.window, x = wc * wb.window + t % wb.window;
          const bool inside = y < wb.height && x < wb.width;
          for (std::size_t d = 0; d < D; ++d) {
            idx[(b * T_ + t) * D + d] =
                inside ? ((n * D + d) * wb.height + y) * wb.width + x : static_cast<std::size_t>(-1);
          }
        }
      }
  return idx;
}

}  // namespace detail

// Zero-pads bottom/right to multiples of w.
template <class T>
WindowBatch<T> window_partition(const Tensor<T>& z, std::size_t w) {
  if (w == 0) throw ShapeError("window_partition: window size must be >= 1");
  const Shape s = z.shape();
  WindowBatch<T> wb;
  wb.n = s.n;
  wb.channels = s.c;
  wb.height = s.h;
  wb.width = s.w;
  wb.window = w;
  wb.rows = (s.h + w - 1) / w;
  wb.cols = (s.w + w - 1) / w;
  wb.pad_h = wb.rows * w - s.h;
  wb.pad_w = wb.cols * w - s.w;
  const auto idx = detail::window_index(wb);
  const Shape os{s.n * wb.num_windows(), 1, w * w, s.c};
  std::vector<T> out(os.size(), T(0));
  auto zd = z.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    if (idx[i] != static_cast<std::size_t>(-1)) out[i] = zd[idx[i]];
  auto pz = z.node_ptr();
  wb.tokens = detail::make_result<T>(os, std::move(out), "window_partition", {&z},
                                     [pz, idx](typename Tensor<T>::Node& self) {
                                       auto& gz = pz->ensure_grad();
                                       for (std::size_t i = 0; i < idx.size(); ++i)
                                         if (idx[i] != static_cast<std::size_t>(-1)) gz[idx[i]] += self.grad[i];
                                     });
  return wb;
}

// Inverse of window_partition; padded tokens are dropped.
template <class T>
Tensor<T> window_merge(const WindowBatch<T>& wb) {
  const Shape ts = wb.tokens.shape();
  const bool grid_ok = wb.window > 0 && wb.rows == (wb.height + wb.window - 1) / wb.window &&
                       wb.cols == (wb.width + wb.window - 1) / wb.window &&
                       wb.pad_h == wb.rows * wb.window - wb.height && wb.pad_w == wb.cols * wb.window - wb.width;
  if (!grid_ok || ts != Shape{wb.n * wb.num_windows(), 1, wb.tokens_per_window(), wb.channels}) {
    throw ShapeError("window_merge: grid metadata inconsistent with token tensor " + ts.str());
  }
  const auto idx = detail::window_index(wb);
  const Shape os{wb.n, wb.channels, wb.height, wb.width};
  std::vector<T> out(os.size(), T(0));
  auto td = wb.tokens.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    if (idx[i] != static_cast<std::size_t>(-1)) out[idx[i]] = td[i];
  auto pt = wb.tokens.node_ptr();
  return detail::make_result<T>(os, std::move(out), "window_merge", {&wb.tokens},
                                [pt, idx](typename Tensor<T>::Node& self) {
                                  auto& gt = pt->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    if (idx[i] != static_cast<std::size_t>(-1)) gt[i] += self.grad[idx[i]];
                                });
}

// Softmax(Q K^T / alpha) per window, shape (B, 1, T, T).
template <class T>
Tensor<T> window_attention_weights(const WindowBatch<T>& q, const WindowBatch<T>& k, T alpha) {
  if (!(alpha > T(0))) throw ConfigError("attention: scale must be positive");
  if (q.tokens.shape() != k.tokens.shape()) throw ShapeError("attention: Q and K window batches differ in shape");
  const KeyMask mask = k.key_mask();
  return softmax_rows(scale(batched_matmul(q.tokens, k.tokens, true), T(1) / alpha), &mask);
}

template <class T>
WindowBatch<T> window_self_attention(const WindowBatch<T>& q, const WindowBatch<T>& k, const WindowBatch<T>& v,
                                     T alpha) {
  if (v.tokens.shape() != q.tokens.shape()) throw ShapeError("attention: Q and V window batches differ in shape");
  return v.with_tokens(batched_matmul(window_attention_weights(q, k, alpha), v.tokens));
}

template <class T>
struct Qkv {
  Tensor<T> q, k, v;
};

// Three independent 1x1 convolutions D -> D.
template <class T>
class QkvProjection {
 public:
  QkvProjection(std::size_t dim, ParamStore<T>& store, Rng& rng, const std::string& prefix) {
    const char* names[3] = {"q", "k", "v"};
    for (int i = 0; i < 3; ++i) {
      w_[i] = store.he_uniform(prefix + "." + names[i] + ".weight", {dim, dim, 1, 1}, dim, rng);
      b_[i] = store.zeros(prefix + "." + names[i] + ".bias", {dim, 1, 1, 1});
    }
  }

  Qkv<T> operator()(const Tensor<T>& z) const {
    return {conv2d(z, w_[0], &b_[0]), conv2d(z, w_[1], &b_[1]), conv2d(z, w_[2], &b_[2])};
  }

 private:
  Tensor<T> w_[3], b_[3];
};

// Per-channel affine applied after a channel layer norm.
template <class T>
struct ChannelNorm {
  Tensor<T> gain, bias;
  ChannelNorm() = default;
  ChannelNorm(std::size_t dim, ParamStore<T>& store, const std::string& prefix)
      : gain(store.constant(prefix + ".gain", {dim, 1, 1, 1}, T(1))), bias(store.zeros(prefix + ".bias", {dim, 1, 1, 1})) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return depthwise_conv2d(channel_layer_norm(x), gain, &bias); }
};

// X + P_out(GELU(B1) * B2) with [B1, B2] = dwconv3x3(conv1x1(X)), D -> 2*gamma*D.
template <class T>
class Gdfn {
 public:
  Gdfn(std::size_t dim, double expansion, ParamStore<T>& store, Rng& rng, const std::string& prefix, bool norm = false)
      : dim_(dim) {
    const double hidden = expansion * static_cast<double>(dim);
    if (!(expansion > 0.0) || std::floor(hidden) != hidden || hidden < 1.0) {
      throw ConfigError("gdfn: expansion * D = " + std::to_string(hidden) + " must be a positive integer");
    }
    hidden_ = static_cast<std::size_t>(hidden);
    if (norm) norm_ = ChannelNorm<T>(dim, store, prefix + ".norm");
    has_norm_ = norm;
    w_in_ = store.he_uniform(prefix + ".expand.weight", {2 * hidden_, dim, 1, 1}, dim, rng);
    b_in_ = store.zeros(prefix + ".expand.bias", {2 * hidden_, 1, 1, 1});
    w_dw_ = store.he_uniform(prefix + ".dwconv.weight", {2 * hidden_, 1, 3, 3}, 9, rng);
    b_dw_ = store.zeros(prefix + ".dwconv.bias", {2 * hidden_, 1, 1, 1});
    w_out_ = store.he_uniform(prefix + ".project.weight", {dim, hidden_, 1, 1}, hidden_, rng);
    b_out_ = store.zeros(prefix + ".project.bias", {dim, 1, 1, 1});
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != dim_) throw ShapeError("gdfn: expected " + std::to_string(dim_) + " channels");
    const Tensor<T> xin = has_norm_ ? norm_(x) : x;
    const Tensor<T> h = depthwise_conv2d(conv2d(xin, w_in_, &b_in_), w_dw_, &b_dw_, {1, 1});
    const Tensor<T> gate = mul(gelu(slice_channels(h, 0, hidden_)), slice_channels(h, hidden_, 2 * hidden_));
    return add(x, conv2d(gate, w_out_, &b_out_));
  }

  std::size_t hidden() const noexcept { return hidden_; }

 private:
  std::size_t dim_, hidden_ = 0;
  bool has_norm_ = false;
  ChannelNorm<T> norm_;
  Tensor<T> w_in_, b_in_, w_dw_, b_dw_, w_out_, b_out_;
};

// One transformer block: W = GDFN(Proj(SA_h + Up(SA_l))).
template <class T>
class DualResolutionBlock {
 public:
  DualResolutionBlock(std::size_t dim, const AttentionConfig& cfg, ParamStore<T>& store, Rng& rng,
                      const std::string& prefix)
      : cfg_(cfg),
        dim_(dim),
        alpha_(static_cast<T>(cfg.alpha(dim))),
        high_(dim, store, rng, prefix + ".high"),
        low_(dim, store, rng, prefix + ".low"),
        w_proj_(store.he_uniform(prefix + ".proj.weight", {dim, dim, 1, 1}, dim, rng)),
        b_proj_(store.zeros(prefix + ".proj.bias", {dim, 1, 1, 1})),
        gdfn_(dim, cfg.gdfn_expansion, store, rng, prefix + ".gdfn", cfg.norm) {
    cfg.validate();
    if (cfg.norm) norm_ = ChannelNorm<T>(dim, store, prefix + ".norm");
  }

  // SA over the full-resolution map.
  Tensor<T> high_branch(const Tensor<T>& z) const { return attend(high_, z); }

  // SA over the max-pooled map, upsampled and cropped back to z's extent.
  Tensor<T> low_branch(const Tensor<T>& z) const {
    const Tensor<T> low = attend(low_, max_pool2d(z, cfg_.reduction));
    return crop(upsample_nearest(low, cfg_.reduction), z.shape().h, z.shape().w);
  }

  // SA_h + Up(SA_l), before the projection.
  Tensor<T> fused(const Tensor<T>& z) const {
    const Tensor<T> zin = cfg_.norm ? norm_(z) : z;
    return add(high_branch(zin), low_branch(zin));
  }

  Tensor<T> project_and_refine(const Tensor<T>& fused_map) const { return gdfn_(conv2d(fused_map, w_proj_, &b_proj_)); }

  Tensor<T> operator()(const Tensor<T>& z) const {
    if (z.shape().c != dim_) throw ShapeError("attention: expected " + std::to_string(dim_) + " channels");
    return project_and_refine(fused(z));
  }

 private:
  Tensor<T> attend(const QkvProjection<T>& proj, const Tensor<T>& z) const {
    const Qkv<T> qkv = proj(z);
    const std::size_t w = cfg_.window_size;
    const auto q = window_partition(qkv.q, w);
    const auto k = window_partition(qkv.k, w);
    const auto v = window_partition(qkv.v, w);
    return window_merge(window_self_attention(q, k, v, alpha_));
  }

  AttentionConfig cfg_;
  std::size_t dim_;
  T alpha_;
  QkvProjection<T> high_, low_;
  Tensor<T> w_proj_, b_proj_;
  Gdfn<T> gdfn_;
  ChannelNorm<T> norm_;
};

template <class T>
class DualResolutionAttention {
 public:
  DualResolutionAttention(std::size_t dim, const AttentionConfig& cfg, ParamStore<T>& store, Rng& rng,
                          const std::string& prefix = "attention") {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_.emplace_back(dim, cfg, store, rng, prefix + ".block" + std::to_string(i));
  }

  Tensor<T> operator()(const Tensor<T>& z) const {
    Tensor<T> h = z;
    for (const auto& b : blocks_) h = b(h);
    return h;
  }

  const std::vector<DualResolutionBlock<T>>& blocks() const noexcept { return blocks_; }

 private:
  std::vector<DualResolutionBlock<T>> blocks_;
};

}  // namespace hyb
