#pragma once

// Spatial and matrix ops: convolution (dense and depthwise), pooling,
// nearest upsampling and batched matrix products, each with its adjoint.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hybrid/tensor.hpp"

namespace hyb {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (s == 0) throw ShapeError("conv: stride must be >= 1");
  if (in + 2 * p < k) {
    throw ShapeError("conv: kernel " + std::to_string(k) + " does not fit padded extent " + std::to_string(in + 2 * p));
  }
  return (in + 2 * p - k) / s + 1;
}

namespace detail {

constexpr std::size_t kTile = 256;

// cols[(ci*kh + ki)*kw + kj][oy*ow + ox]
template <class T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t s, std::size_t p, std::size_t oh, std::size_t ow, T* cols) {
  const std::size_t opl = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((ci * kh + ki) * kw + kj) * opl;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s + ki) - static_cast<long>(p);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(dst, ow, T(0));
            continue;
          }
          const T* src = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * s + kj) - static_cast<long>(p);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t s, std::size_t p, std::size_t oh, std::size_t ow, T* gx) {
  const std::size_t opl = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((ci * kh + ki) * kw + kj) * opl;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s + ki) - static_cast<long>(p);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = gx + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * s + kj) - static_cast<long>(p);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

// out[m][p] (+)= sum_k a[m][k] * b[k][p]; a is (M,K), b is (K,P).
// Four output rows share each load of b; every element still sums k in order.
template <class T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t M, std::size_t K, std::size_t P) {
  for (std::size_t p0 = 0; p0 < P; p0 += kTile) {
    const std::size_t pn = std::min(kTile, P - p0);
    std::size_t m = 0;
    for (; m + 4 <= M; m += 4) {
      T* o0 = out + m * P + p0;
      T* o1 = o0 + P;
      T* o2 = o1 + P;
      T* o3 = o2 + P;
      for (std::size_t k = 0; k < K; ++k) {
        const T a0 = a[m * K + k], a1 = a[(m + 1) * K + k], a2 = a[(m + 2) * K + k], a3 = a[(m + 3) * K + k];
        const T* br = b + k * P + p0;
        for (std::size_t i = 0; i < pn; ++i) {
          const T bv = br[i];
          o0[i] += a0 * bv;
          o1[i] += a1 * bv;
          o2[i] += a2 * bv;
          o3[i] += a3 * bv;
        }
      }
    }
    for (; m < M; ++m) {
      T* o = out + m * P + p0;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[m * K + k];
        const T* br = b + k * P + p0;
        for (std::size_t i = 0; i < pn; ++i) o[i] += av * br[i];
      }
    }
  }
}

// out[k][p] += sum_m a[m][k] * g[m][p]  (a^T g)
template <class T>
void gemm_tn_acc(const T* a, const T* g, T* out, std::size_t M, std::size_t K, std::size_t P) {
  for (std::size_t p0 = 0; p0 < P; p0 += kTile) {
    const std::size_t pn = std::min(kTile, P - p0);
    std::size_t k = 0;
    for (; k + 4 <= K; k += 4) {
      T* o0 = out + k * P + p0;
      T* o1 = o0 + P;
      T* o2 = o1 + P;
      T* o3 = o2 + P;
      for (std::size_t m = 0; m < M; ++m) {
        const T* am = a + m * K + k;
        const T a0 = am[0], a1 = am[1], a2 = am[2], a3 = am[3];
        const T* gr = g + m * P + p0;
        for (std::size_t i = 0; i < pn; ++i) {
          const T gv = gr[i];
          o0[i] += a0 * gv;
          o1[i] += a1 * gv;
          o2[i] += a2 * gv;
          o3[i] += a3 * gv;
        }
      }
    }
    for (; k < K; ++k) {
      T* o = out + k * P + p0;
      for (std::size_t m = 0; m < M; ++m) {
        const T av = a[m * K + k];
        const T* gr = g + m * P + p0;
        for (std::size_t i = 0; i < pn; ++i) o[i] += av * gr[i];
      }
    }
  }
}

// Fixed-order eight-lane dot product.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lane[j] += a[i + j] * b[i + j];
  }
  T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// out[j] = dot(a, b[j]) for four rows b[j] = b + j * stride, with dot's exact
// summation order.
template <class T>
void dot4(const T* a, const T* b, std::size_t stride, std::size_t n, T* out) {
  T lane[4][8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) {
      const T av = a[i + j];
      lane[0][j] += av * b[i + j];
      lane[1][j] += av * b[stride + i + j];
      lane[2][j] += av * b[2 * stride + i + j];
      lane[3][j] += av * b[3 * stride + i + j];
    }
  }
  for (std::size_t r = 0; r < 4; ++r) {
    const T* l = lane[r];
    T acc = ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
    for (std::size_t t = i; t < n; ++t) acc += a[t] * b[r * stride + t];
    out[r] = acc;
  }
}

// out[m][k] += dot(g[m], x[k]) over rows of length P.
template <class T>
void gemm_nt_acc(const T* g, const T* x, T* out, std::size_t M, std::size_t K, std::size_t P) {
  T tmp[4];
  for (std::size_t m = 0; m < M; ++m) {
    std::size_t k = 0;
    for (; k + 4 <= K; k += 4) {
      dot4(g + m * P, x + k * P, P, P, tmp);
      for (std::size_t r = 0; r < 4; ++r) out[m * K + k + r] += tmp[r];
    }
    for (; k < K; ++k) out[m * K + k] += dot(g + m * P, x + k * P, P);
  }
}

}  // namespace detail

// weight (outC, inC, kh, kw); bias, when given, holds outC values in any shape.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, Conv2dOptions opt = {}) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels but weight " + ws.str() + " expects " +
                     std::to_string(ws.c));
  }
  if (bias && bias->size() != ws.n) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias->size()) + " entries, expected " + std::to_string(ws.n));
  }
  const std::size_t oh = conv_out_extent(xs.h, ws.h, opt.stride, opt.padding);
  const std::size_t ow = conv_out_extent(xs.w, ws.w, opt.stride, opt.padding);
  if (oh == 0 || ow == 0) throw ShapeError("conv2d: zero-size output");
  const Shape os{xs.n, ws.n, oh, ow};
  const std::size_t K = ws.c * ws.h * ws.w;
  const std::size_t P = oh * ow;
  const bool pointwise = ws.h == 1 && ws.w == 1 && opt.stride == 1 && opt.padding == 0;

  std::vector<T> out(os.size(), T(0));
  std::vector<T> cols(pointwise ? 0 : K * P);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* xn = xd.data() + n * xs.c * xs.plane();
    T* on = out.data() + n * os.c * P;
    if (bias) {
      for (std::size_t oc = 0; oc < os.c; ++oc) std::fill_n(on + oc * P, P, bias->data()[oc]);
    }
    const T* src = xn;
    if (!pointwise) {
      detail::im2col(xn, xs.c, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.padding, oh, ow, cols.data());
      src = cols.data();
    }
    detail::gemm_acc(wd.data(), src, on, os.c, K, P);
  }

  auto px = x.node_ptr(), pw = weight.node_ptr();
  std::shared_ptr<typename Tensor<T>::Node> pb = bias ? bias->node_ptr() : nullptr;
  auto backward = [px, pw, pb, xs, ws, os, opt, K, P, pointwise](typename Tensor<T>::Node& self) {
    std::vector<T>* gx = detail::grad_of<T>(px);
    std::vector<T>* gw = detail::grad_of<T>(pw);
    std::vector<T>* gb = pb ? detail::grad_of<T>(pb) : nullptr;
    std::vector<T> cols(pointwise ? 0 : K * P);
    std::vector<T> gcols(pointwise || !gx ? 0 : K * P);
    for (std::size_t n = 0; n < xs.n; ++n) {
      const T* go = self.grad.data() + n * os.c * P;
      const T* xn = px->data.data() + n * xs.c * xs.plane();
      if (gb) {
        for (std::size_t oc = 0; oc < os.c; ++oc) {
          T acc = T(0);
          for (std::size_t i = 0; i < P; ++i) acc += go[i + oc * P];
          (*gb)[oc] += acc;
        }
      }
      if (gw) {
        const T* src = xn;
        if (!pointwise) {
          detail::im2col(xn, xs.c, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.padding, os.h, os.w, cols.data());
          src = cols.data();
        }
        detail::gemm_nt_acc(go, src, gw->data(), os.c, K, P);
      }
      if (gx) {
        T* gxn = gx->data() + n * xs.c * xs.plane();
        if (pointwise) {
          detail::gemm_tn_acc(pw->data.data(), go, gxn, os.c, K, P);
        } else {
          std::fill(gcols.begin(), gcols.end(), T(0));
          detail::gemm_tn_acc(pw->data.data(), go, gcols.data(), os.c, K, P);
          detail::col2im(gcols.data(), xs.c, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.padding, os.h, os.w, gxn);
        }
      }
    }
  };
  if (bias) return detail::make_result<T>(os, std::move(out), "conv2d", {&x, &weight, bias}, backward);
  return detail::make_result<T>(os, std::move(out), "conv2d", {&x, &weight}, backward);
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
  return conv2d(x, weight, &bias, opt);
}

// weight (C, 1, kh, kw): one spatial kernel per channel.
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, Conv2dOptions opt = {}) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c || ws.c != 1) {
    throw ShapeError("depthwise_conv2d: weight " + ws.str() + " does not provide one kernel for each of " +
                     std::to_string(xs.c) + " channels");
  }
  if (bias && bias->size() != xs.c) throw ShapeError("depthwise_conv2d: bias size mismatch");
  const std::size_t oh = conv_out_extent(xs.h, ws.h, opt.stride, opt.padding);
  const std::size_t ow = conv_out_extent(xs.w, ws.w, opt.stride, opt.padding);
  if (oh == 0 || ow == 0) throw ShapeError("depthwise_conv2d: zero-size output");
  const Shape os{xs.n, xs.c, oh, ow};
  const std::size_t s = opt.stride;
  const long p = static_cast<long>(opt.padding);

  // Visits every (output, input, tap) triple that lies inside the input.
  auto for_each_tap = [xs, ws, oh, ow, s, p](std::size_t plane_in, std::size_t plane_out, std::size_t c, auto&& fn) {
    for (std::size_t ki = 0; ki < ws.h; ++ki) {
      for (std::size_t kj = 0; kj < ws.w; ++kj) {
        const std::size_t tap = (c * ws.h + ki) * ws.w + kj;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s + ki) - p;
          if (iy < 0 || iy >= static_cast<long>(xs.h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * s + kj) - p;
            if (ix < 0 || ix >= static_cast<long>(xs.w)) continue;
            fn(plane_out + oy * ow + ox, plane_in + static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix), tap);
          }
        }
      }
    }
  };

  std::vector<T> out(os.size(), T(0));
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const std::size_t pin = (n * xs.c + c) * xs.plane();
      const std::size_t pout = (n * xs.c + c) * os.plane();
      if (bias) std::fill_n(out.begin() + pout, os.plane(), bias->data()[c]);
      for_each_tap(pin, pout, c, [&](std::size_t o, std::size_t i, std::size_t t) { out[o] += wd[t] * xd[i]; });
    }
  }

  auto px = x.node_ptr(), pw = weight.node_ptr();
  std::shared_ptr<typename Tensor<T>::Node> pb = bias ? bias->node_ptr() : nullptr;
  auto backward = [px, pw, pb, xs, os, for_each_tap](typename Tensor<T>::Node& self) {
    std::vector<T>* gx = detail::grad_of<T>(px);
    std::vector<T>* gw = detail::grad_of<T>(pw);
    std::vector<T>* gb = pb ? detail::grad_of<T>(pb) : nullptr;
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t pin = (n * xs.c + c) * xs.plane();
        const std::size_t pout = (n * xs.c + c) * os.plane();
        if (gb) {
          T acc = T(0);
          for (std::size_t i = 0; i < os.plane(); ++i) acc += self.grad[pout + i];
          (*gb)[c] += acc;
        }
        for_each_tap(pin, pout, c, [&](std::size_t o, std::size_t i, std::size_t t) {
          const T g = self.grad[o];
          if (gx) (*gx)[i] += pw->data[t] * g;
          if (gw) (*gw)[t] += px->data[i] * g;
        });
      }
    }
  };
  if (bias) return detail::make_result<T>(os, std::move(out), "depthwise_conv2d", {&x, &weight, bias}, backward);
  return detail::make_result<T>(os, std::move(out), "depthwise_conv2d", {&x, &weight}, backward);
}

template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
  return depthwise_conv2d(x, weight, &bias, opt);
}

// r x r windows with stride r; ragged borders behave as if padded with -inf.
// Gradient goes to the first maximal element in row-major window order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t r) {
  if (r == 0) throw ShapeError("max_pool2d: reduction factor must be >= 1");
  const Shape xs = x.shape();
  if (xs.size() == 0) throw ShapeError("max_pool2d: empty input");
  const Shape os{xs.n, xs.c, (xs.h + r - 1) / r, (xs.w + r - 1) / r};
  std::vector<T> out(os.size());
  std::vector<std::size_t> argmax(os.size());
  auto xd = x.data();
  for (std::size_t pl = 0; pl < xs.n * xs.c; ++pl) {
    for (std::size_t oy = 0; oy < os.h; ++oy) {
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t at = 0;
        for (std::size_t y = oy * r; y < std::min(xs.h, oy * r + r); ++y) {
          for (std::size_t xx = ox * r; xx < std::min(xs.w, ox * r + r); ++xx) {
            const std::size_t i = (pl * xs.h + y) * xs.w + xx;
            if (xd[i] > best) {
              best = xd[i];
              at = i;
            }
          }
        }
        const std::size_t o = (pl * os.h + oy) * os.w + ox;
        out[o] = best;
        argmax[o] = at;
      }
    }
  }
  auto px = x.node_ptr();
  return detail::make_result<T>(os, std::move(out), "max_pool2d", {&x},
                                [px, argmax = std::move(argmax)](typename Tensor<T>::Node& self) {
                                  auto& gx = px->ensure_grad();
                                  for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
                                });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape xs = x.shape();
  if (xs.plane() == 0 || xs.size() == 0) throw ShapeError("global_avg_pool: empty input");
  const Shape os{xs.n, xs.c, 1, 1};
  const std::size_t hw = xs.plane();
  const T inv = T(1) / static_cast<T>(hw);
  std::vector<T> out(os.size());
  auto xd = x.data();
  for (std::size_t pl = 0; pl < xs.n * xs.c; ++pl) {
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += xd[pl * hw + i];
    out[pl] = acc * inv;
  }
  auto px = x.node_ptr();
  return detail::make_result<T>(os, std::move(out), "global_avg_pool", {&x},
                                [px, hw, inv](typename Tensor<T>::Node& self) {
                                  auto& gx = px->ensure_grad();
                                  for (std::size_t pl = 0; pl < self.grad.size(); ++pl) {
                                    const T g = self.grad[pl] * inv;
                                    for (std::size_t i = 0; i < hw; ++i) gx[pl * hw + i] += g;
                                  }
                                });
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t r) {
  if (r == 0) throw ShapeError("upsample_nearest: factor must be >= 1");
  if (r == 1) return x;
  const Shape xs = x.shape();
  const Shape os{xs.n, xs.c, xs.h * r, xs.w * r};
  std::vector<T> out(os.size());
  auto xd = x.data();
  for (std::size_t pl = 0; pl < xs.n * xs.c; ++pl)
    for (std::size_t y = 0; y < os.h; ++y)
      for (std::size_t xx = 0; xx < os.w; ++xx)
        out[(pl * os.h + y) * os.w + xx] = xd[(pl * xs.h + y / r) * xs.w + xx / r];
  auto px = x.node_ptr();
  return detail::make_result<T>(os, std::move(out), "upsample_nearest", {&x},
                                [px, xs, os, r](typename Tensor<T>::Node& self) {
                                  auto& gx = px->ensure_grad();
                                  for (std::size_t pl = 0; pl < xs.n * xs.c; ++pl)
                                    for (std::size_t y = 0; y < os.h; ++y)
                                      for (std::size_t xx = 0; xx < os.w; ++xx)
                                        gx[(pl * xs.h + y / r) * xs.w + xx / r] += self.grad[(pl * os.h + y) * os.w + xx];
                                });
}

// Matrices live in the (h, w) plane; batch is the (n, c) pair, which must agree.
// With transpose_b the right operand is read as its transpose.
template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.n != bs.n || as.c != bs.c) throw ShapeError("batched_matmul: batch dims differ: " + as.str() + " vs " + bs.str());
  const std::size_t M = as.h, K = as.w;
  const std::size_t bk = transpose_b ? bs.w : bs.h;
  const std::size_t N = transpose_b ? bs.h : bs.w;
  if (bk != K) throw ShapeError("batched_matmul: inner dims differ: " + as.str() + " vs " + bs.str());
  const std::size_t B = as.n * as.c;
  const Shape os{as.n, as.c, M, N};
  std::vector<T> out(os.size(), T(0));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < B; ++i) {
    const T* A = ad.data() + i * M * K;
    const T* Bm = bd.data() + i * K * N;
    T* O = out.data() + i * M * N;
    if (transpose_b) {
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) O[m * N + n] = detail::dot(A + m * K, Bm + n * K, K);
    } else {
      detail::gemm_acc(A, Bm, O, M, K, N);
    }
  }
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(
      os, std::move(out), "batched_matmul", {&a, &b},
      [pa, pb, B, M, K, N, transpose_b](typename Tensor<T>::Node& self) {
        std::vector<T>* ga = detail::grad_of<T>(pa);
        std::vector<T>* gb = detail::grad_of<T>(pb);
        for (std::size_t i = 0; i < B; ++i) {
          const T* G = self.grad.data() + i * M * N;
          const T* A = pa->data.data() + i * M * K;
          const T* Bm = pb->data.data() + i * K * N;
          if (ga) {
            T* GA = ga->data() + i * M * K;
            if (transpose_b) {  // dA = G * Bt^T = G (M,N) * Bstored (N,K)
              detail::gemm_acc(G, Bm, GA, M, N, K);
            } else {  // dA[m][k] = sum_n G[m][n] B[k][n]
              for (std::size_t m = 0; m < M; ++m)
                for (std::size_t k = 0; k < K; ++k) GA[m * K + k] += detail::dot(G + m * N, Bm + k * N, N);
            }
          }
          if (gb) {
            T* GB = gb->data() + i * K * N;
            if (transpose_b) {  // dBstored[n][k] = sum_m G[m][n] A[m][k]
              detail::gemm_tn_acc(G, A, GB, M, N, K);
            } else {  // dB[k][n] = sum_m A[m][k] G[m][n]
              detail::gemm_tn_acc(A, G, GB, M, K, N);
            }
          }
        }
      });
}

}  // namespace hyb
