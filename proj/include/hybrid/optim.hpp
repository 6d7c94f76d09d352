#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/param.hpp"

namespace hyb {

// lr0 * (1 + cos(pi t / T)) / 2, clamped at 0.
inline double cosine_lr(long t, long T, double lr0) {
  if (T <= 0) throw ConfigError("cosine_lr: T must be positive");
  if (t < 0 || t > T) throw ConfigError("cosine_lr: t=" + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  const double v = lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) / static_cast<double>(T)));
  return v > 0.0 ? v : 0.0;
}

// Plain SGD with coupled L2: p <- p - lr * (g + wd * p). With momentum m > 0
// the step uses the heavy-ball buffer v <- m v + (g + wd p).
template <class T>
class Sgd {
 public:
  explicit Sgd(double weight_decay, double momentum = 0.0) : wd_(weight_decay), momentum_(momentum) {
    if (weight_decay < 0.0) throw ConfigError("sgd: weight_decay must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd: momentum must be in [0, 1)");
  }

  // Parameters are visited in registration order.
  void step(ParamStore<T>& store, double lr) {
    for (auto& p : store.all()) {
      if (!p.value.has_grad()) throw NumericError("sgd: parameter '" + p.name + "' has no gradient");
      auto x = p.value.data();
      auto g = p.value.grad();
      std::vector<T>* v = nullptr;
      if (momentum_ > 0.0) {
        auto& buf = velocity_[p.name];
        if (buf.empty()) buf.assign(x.size(), T(0));
        v = &buf;
      }
      for (std::size_t i = 0; i < x.size(); ++i) {
        T d = g[i] + static_cast<T>(wd_) * x[i];
        if (v) d = (*v)[i] = static_cast<T>(momentum_) * (*v)[i] + d;
        x[i] -= static_cast<T>(lr) * d;
      }
    }
  }

  double weight_decay() const noexcept { return wd_; }
  double momentum() const noexcept { return momentum_; }

 private:
  double wd_, momentum_;
  std::unordered_map<std::string, std::vector<T>> velocity_;
};

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (auto& p : store.all())
    if (p.value.has_grad())
      for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& p : store.all())
      if (p.value.has_grad())
        for (T& g : p.value.grad()) g *= f;
  }
  return norm;
}

}  // namespace hyb
