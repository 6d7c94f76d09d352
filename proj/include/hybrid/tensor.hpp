#pragma once

// Dense rank-4 tensors (n, c, h, w) with a define-by-run gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Ops that see at least one
// input with requires_grad record a backward closure on their output node;
// backward() walks the recorded graph in reverse topological order. The graph
// lives exactly as long as the tensors that reference it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hybrid/errors.hpp"

namespace hyb {

struct Shape {
  std::size_t n = 1, c = 1, h = 1, w = 1;

  constexpr std::size_t size() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

// Thread-local switch; when disabled no op records backward closures.
class GradMode {
 public:
  static bool enabled() noexcept { return flag(); }
  static void set(bool on) noexcept { flag() = on; }

 private:
  static bool& flag() noexcept {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

    bool is_leaf() const noexcept { return !backward; }
    std::vector<T>& ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), T(0));
      return grad;
    }
  };

  Tensor() : node_(std::make_shared<Node>()) {}

  static Tensor zeros(Shape s, bool requires_grad = false) {
    Tensor t;
    t.node_->shape = s;
    t.node_->data.assign(s.size(), T(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape s, T value) {
    Tensor t = zeros(s);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from_data(Shape s, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != s.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + s.str());
    }
    Tensor t;
    t.node_->shape = s;
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data(Shape{1, 1, 1, 1}, {v}, requires_grad);
  }

  const Shape& shape() const noexcept { return node_->shape; }
  std::size_t size() const noexcept { return node_->data.size(); }
  std::span<T> data() noexcept { return node_->data; }
  std::span<const T> data() const noexcept { return node_->data; }
  std::span<T> grad() noexcept { return node_->grad; }
  std::span<const T> grad() const noexcept { return node_->grad; }
  bool has_grad() const noexcept { return node_->grad.size() == node_->data.size(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    const Shape& s = node_->shape;
    return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = node_->shape;
    return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape().str());
    return node_->data[0];
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Deep copy of values, detached from any tape.
  Tensor clone() const { return from_data(shape(), node_->data, false); }
  Tensor detach() const { return clone(); }

  Node& node() noexcept { return *node_; }
  const Node& node() const noexcept { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

  // Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
  // interior grads are reset at the start of each sweep.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape().str());
    if (!node_->requires_grad) throw ShapeError("backward() on a tensor that is not on the tape");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [nd, next] = stack.back();
      if (next < nd->parents.size()) {
        Node* p = nd->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(nd);
        stack.pop_back();
      }
    }
    for (Node* nd : order) {
      if (!nd->is_leaf()) nd->grad.assign(nd->data.size(), T(0));
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* nd = *it;
      if (nd->is_leaf()) continue;
      nd->backward(*nd);
    }
    for (Node* nd : order) {
      if (!nd->is_leaf()) continue;
      for (T g : nd->grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient after backward pass");
      }
    }
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

// Creates the output tensor of an op; installs parents/backward only when the
// tape is active and some input participates in it.
template <class T>
Tensor<T> make_result(Shape s, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(typename Tensor<T>::Node&)> backward) {
  check_finite(data, op);
  Tensor<T> out = Tensor<T>::from_data(s, std::move(data));
  bool needs = false;
  if (GradMode::enabled()) {
    for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    auto& nd = out.node();
    nd.requires_grad = true;
    for (const Tensor<T>* in : inputs) nd.parents.push_back(in->node_ptr());
    nd.backward = std::move(backward);
  }
  return out;
}

template <class T>
std::vector<T>* grad_of(const std::shared_ptr<typename Tensor<T>::Node>& p) {
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

// b broadcasts over a when b.n == 1 and the remaining dims agree.
inline bool broadcastable(const Shape& a, const Shape& b) {
  return a == b || (b.n == 1 && a.c == b.c && a.h == b.h && a.w == b.w);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::broadcastable(a.shape(), b.shape())) {
    throw ShapeError("add: incompatible shapes " + a.shape().str() + " and " + b.shape().str());
  }
  const std::size_t per = b.size();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % per];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b},
                                [pa, pb, per](typename Tensor<T>::Node& self) {
                                  if (auto* ga = detail::grad_of<T>(pa)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
                                  }
                                  if (auto* gb = detail::grad_of<T>(pb)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % per] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::broadcastable(a.shape(), b.shape())) {
    throw ShapeError("mul: incompatible shapes " + a.shape().str() + " and " + b.shape().str());
  }
  const std::size_t per = b.size();
  std::vector<T> out(a.size());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i % per];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                                [pa, pb, per](typename Tensor<T>::Node& self) {
                                  if (auto* ga = detail::grad_of<T>(pa)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*ga)[i] += self.grad[i] * pb->data[i % per];
                                  }
                                  if (auto* gb = detail::grad_of<T>(pb)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*gb)[i % per] += self.grad[i] * pa->data[i];
                                  }
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& x : out) x *= s;
  auto pa = a.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {&a},
                                [pa, s](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * s;
                                });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  auto pa = a.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), "relu", {&a},
                                [pa](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    if (pa->data[i] > T(0)) ga[i] += self.grad[i];
                                });
}

// Exact (erf) form.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(a.size());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * ad[i] * (T(1) + std::erf(ad[i] * inv_sqrt2));
  }
  auto pa = a.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), "gelu", {&a},
                                [pa](typename Tensor<T>::Node& self) {
                                  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    const T x = pa->data[i];
                                    const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                                    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                                    ga[i] += self.grad[i] * (cdf + x * pdf);
                                  }
                                });
}

// Subgradient at 0 is 0.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(ad[i]);
  auto pa = a.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), "abs", {&a},
                                [pa](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    const T x = pa->data[i];
                                    if (x > T(0)) ga[i] += self.grad[i];
                                    else if (x < T(0)) ga[i] -= self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T x : a.data()) acc += x;
  auto pa = a.node_ptr();
  return detail::make_result<T>(Shape{}, {acc}, "sum", {&a}, [pa](typename Tensor<T>::Node& self) {
    auto& ga = pa->ensure_grad();
    for (T& g : ga) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  if (s.size() != a.size()) throw ShapeError("reshape: " + a.shape().str() + " -> " + s.str());
  std::vector<T> out(a.data().begin(), a.data().end());
  auto pa = a.node_ptr();
  return detail::make_result<T>(s, std::move(out), "reshape", {&a}, [pa](typename Tensor<T>::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

// Channels [c0, c1).
template <class T>
Tensor<T> slice_channels(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  const Shape& s = a.shape();
  if (c0 >= c1 || c1 > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + s.str());
  }
  const Shape os{s.n, c1 - c0, s.h, s.w};
  const std::size_t hw = s.plane();
  std::vector<T> out(os.size());
  auto ad = a.data();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(ad.begin() + (n * s.c + c0) * hw, os.c * hw, out.begin() + n * os.c * hw);
  }
  auto pa = a.node_ptr();
  return detail::make_result<T>(os, std::move(out), "slice_channels", {&a},
                                [pa, s, os, c0, hw](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t n = 0; n < s.n; ++n) {
                                    const T* src = self.grad.data() + n * os.c * hw;
                                    T* dst = ga.data() + (n * s.c + c0) * hw;
                                    for (std::size_t i = 0; i < os.c * hw; ++i) dst[i] += src[i];
                                  }
                                });
}

// Keeps the top-left (h, w) region of every plane.
template <class T>
Tensor<T> crop(const Tensor<T>& a, std::size_t h, std::size_t w) {
  const Shape& s = a.shape();
  if (h > s.h || w > s.w || h == 0 || w == 0) {
    throw ShapeError("crop: target " + std::to_string(h) + "x" + std::to_string(w) + " invalid for " + s.str());
  }
  if (h == s.h && w == s.w) return a;
  const Shape os{s.n, s.c, h, w};
  std::vector<T> out(os.size());
  auto ad = a.data();
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(ad.begin() + (p * s.h + y) * s.w, w, out.begin() + (p * h + y) * w);
  auto pa = a.node_ptr();
  return detail::make_result<T>(os, std::move(out), "crop", {&a}, [pa, s, h, w](typename Tensor<T>::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t p = 0; p < s.n * s.c; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) ga[(p * s.h + y) * s.w + x] += self.grad[(p * h + y) * w + x];
  });
}

// ---------------------------------------------------------------------------
// Softmax family. Rows are the last (w) axis.

struct KeyMask {
  // mask[b * cols + j] == 0 excludes key j for every row of batch entry b.
  std::vector<unsigned char> keep;
  std::size_t cols = 0;
};

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a, const KeyMask* mask = nullptr) {
  const Shape& s = a.shape();
  const std::size_t cols = s.w;
  const std::size_t rows = s.n * s.c * s.h;
  const std::size_t rows_per_batch = s.c * s.h;
  if (mask && (mask->cols != cols || mask->keep.size() != s.n * cols)) {
    throw ShapeError("softmax_rows: key mask does not match " + s.str());
  }
  auto ad = a.data();
  std::vector<T> out(a.size(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ad.data() + r * cols;
    T* y = out.data() + r * cols;
    const unsigned char* keep = mask ? mask->keep.data() + (r / rows_per_batch) * cols : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(x[j])) throw NumericError("softmax: non-finite logit");
      if (!keep || keep[j]) mx = std::max(mx, x[j]);
    }
    if (!std::isfinite(mx)) throw ShapeError("softmax: every key of a row is masked");
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      if (!keep || keep[j]) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
      }
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= z;
  }
  std::shared_ptr<typename Tensor<T>::Node> pa = a.node_ptr();
  return detail::make_result<T>(s, std::move(out), "softmax", {&a},
                                [pa, rows, cols](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * cols;
                                    const T* g = self.grad.data() + r * cols;
                                    T dot = T(0);
                                    for (std::size_t j = 0; j < cols; ++j) dot += y[j] * g[j];
                                    for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += y[j] * (g[j] - dot);
                                  }
                                });
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  const Shape& s = a.shape();
  const std::size_t cols = s.w;
  const std::size_t rows = s.n * s.c * s.h;
  auto ad = a.data();
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ad.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(x[j])) throw NumericError("log_softmax: non-finite logit");
      mx = std::max(mx, x[j]);
    }
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x[j] - lz;
  }
  auto pa = a.node_ptr();
  return detail::make_result<T>(s, std::move(out), "log_softmax", {&a},
                                [pa, rows, cols](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * cols;
                                    const T* g = self.grad.data() + r * cols;
                                    T gs = T(0);
                                    for (std::size_t j = 0; j < cols; ++j) gs += g[j];
                                    for (std::size_t j = 0; j < cols; ++j)
                                      ga[r * cols + j] += g[j] - std::exp(y[j]) * gs;
                                  }
                                });
}

// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
template <class T>
Tensor<T> nll_rows(const Tensor<T>& logp, const std::vector<std::size_t>& labels) {
  const Shape& s = logp.shape();
  const std::size_t cols = s.w;
  const std::size_t rows = s.n * s.c * s.h;
  if (labels.size() != rows) {
    throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  T acc = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw ShapeError("nll: label " + std::to_string(labels[r]) + " out of range");
    acc -= logp.data()[r * cols + labels[r]];
  }
  acc /= static_cast<T>(rows);
  auto pa = logp.node_ptr();
  return detail::make_result<T>(Shape{}, {acc}, "nll", {&logp},
                                [pa, labels, rows, cols](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  const T g = self.grad[0] / static_cast<T>(rows);
                                  for (std::size_t r = 0; r < rows; ++r) ga[r * cols + labels[r]] -= g;
                                });
}

// Per-position normalization across channels (no affine part).
template <class T>
Tensor<T> channel_layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
  const Shape& s = a.shape();
  const std::size_t hw = s.plane();
  auto ad = a.data();
  std::vector<T> out(a.size());
  std::vector<T> inv_std(s.n * hw);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T mu = T(0);
      for (std::size_t c = 0; c < s.c; ++c) mu += ad[(n * s.c + c) * hw + p];
      mu /= static_cast<T>(s.c);
      T var = T(0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const T d = ad[(n * s.c + c) * hw + p] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.c);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[n * hw + p] = is;
      for (std::size_t c = 0; c < s.c; ++c) out[(n * s.c + c) * hw + p] = (ad[(n * s.c + c) * hw + p] - mu) * is;
    }
  }
  auto pa = a.node_ptr();
  return detail::make_result<T>(s, std::move(out), "channel_layer_norm", {&a},
                                [pa, s, hw, inv_std](typename Tensor<T>::Node& self) {
                                  auto& ga = pa->ensure_grad();
                                  const T inv_c = T(1) / static_cast<T>(s.c);
                                  for (std::size_t n = 0; n < s.n; ++n) {
                                    for (std::size_t p = 0; p < hw; ++p) {
                                      T mg = T(0), mgy = T(0);
                                      for (std::size_t c = 0; c < s.c; ++c) {
                                        const std::size_t i = (n * s.c + c) * hw + p;
                                        mg += self.grad[i];
                                        mgy += self.grad[i] * self.data[i];
                                      }
                                      mg *= inv_c;
                                      mgy *= inv_c;
                                      for (std::size_t c = 0; c < s.c; ++c) {
                                        const std::size_t i = (n * s.c + c) * hw + p;
                                        ga[i] += inv_std[n * hw + p] * (self.grad[i] - mg - self.data[i] * mgy);
                                      }
                                    }
                                  }
                                });
}

}  // namespace hyb
