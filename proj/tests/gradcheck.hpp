#pragma once

// Central finite-difference checks in double precision.

#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hybrid/param.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"

namespace gradcheck {

using hyb::Tensor;

struct Coord {
  std::string input;
  std::size_t index = 0;
  double analytic = 0.0, numeric = 0.0;
  bool ok = false;
};

struct Report {
  std::vector<Coord> coords;
  std::size_t near_kink = 0;  // coordinates redrawn because one-sided slopes disagreed

  bool all_ok() const {
    if (coords.empty()) return false;
    for (const auto& c : coords)
      if (!c.ok) return false;
    return true;
  }
  double worst_rel() const {
    double w = 0.0;
    for (const auto& c : coords) {
      const double d = std::fabs(c.analytic - c.numeric);
      const double s = std::max(std::fabs(c.analytic), std::fabs(c.numeric));
      w = std::max(w, s > 0 ? d / s : d);
    }
    return w;
  }
  std::string first_failure() const {
    for (const auto& c : coords)
      if (!c.ok)
      {
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic %.9g numeric %.9g", c.analytic, c.numeric);
        return c.input + "[" + std::to_string(c.index) + buf;
      }
    return {};
  }
};

inline bool close(double a, double n, double rel = 1e-5, double floor = 1e-8) {
  return std::fabs(a - n) <= std::max(rel * std::max(std::fabs(a), std::fabs(n)), floor);
}

struct Input {
  std::string name;
  Tensor<double> t;
};

// Checks `count` random coordinates spread over the inputs against the
// central difference D(h). D(2h) is evaluated too: on smooth stretches the two
// agree to O(h^2) and |D(2h) - D(h)| / 3 bounds the truncation error of D(h).
// A coordinate whose gap exceeds 3 * (kink_tol * |D| + floor) sits near a
// ReLU/abs/max kink and is redrawn; the test never consults the analytic
// gradient, and the number of redraws is reported.
inline Report check(std::vector<Input> inputs, const std::function<Tensor<double>()>& loss, std::size_t count,
                    std::uint64_t seed, double h = 1e-5, double kink_tol = 1e-5, double floor = 1e-8,
                    double rel = 1e-5) {
  for (auto& in : inputs) {
    in.t.set_requires_grad(true);
    in.t.node().ensure_grad();
    in.t.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> grads;
  for (auto& in : inputs) grads.emplace_back(in.t.grad().begin(), in.t.grad().end());

  hyb::Rng rng(seed);
  Report rep;
  hyb::NoGradGuard ng;
  std::size_t attempts = 0;
  auto at = [&](std::span<double> d, std::size_t i, double x) {
    d[i] = x;
    return loss().item();
  };
  while (rep.coords.size() < count && attempts < count * 20) {
    ++attempts;
    const auto which = static_cast<std::size_t>(rng.below(inputs.size()));
    auto& in = inputs[which];
    const auto i = static_cast<std::size_t>(rng.below(in.t.size()));
    auto d = in.t.data();
    const double orig = d[i];
    const double d1 = (at(d, i, orig + h) - at(d, i, orig - h)) / (2 * h);
    const double d2 = (at(d, i, orig + 2 * h) - at(d, i, orig - 2 * h)) / (4 * h);
    d[i] = orig;
    if (std::fabs(d2 - d1) > 3 * (kink_tol * std::max(std::fabs(d1), std::fabs(d2)) + floor)) {
      ++rep.near_kink;
      continue;
    }
    Coord c{in.name, i, grads[which][i], d1, false};
    c.ok = close(c.analytic, c.numeric, rel, floor);
    rep.coords.push_back(c);
  }
  return rep;
}

// Key biases add q.b to every score of a query; softmax cancels that, so the
// true gradient is exactly zero and the difference quotient is pure roundoff
// of the scores. They are left out here and checked for exact invariance.
inline bool shift_invariant(const std::string& name) {
  return name.size() >= 7 && name.compare(name.size() - 7, 7, ".k.bias") == 0;
}

template <class Store>
void add_params(std::vector<Input>& in, Store& store) {
  for (auto& p : store.all())
    if (!shift_invariant(p.name)) in.push_back({p.name, p.value});
}

// Scalarizes a tensor-valued op with fixed random weights: sum(op(x) * R).
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  hyb::Rng rng(seed);
  std::vector<double> w(y.size());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return hyb::sum(hyb::mul(y, Tensor<double>::from_data(y.shape(), std::move(w))));
}

inline Tensor<double> random_tensor(hyb::Shape s, hyb::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(s.size());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_data(s, std::move(v));
}

}  // namespace gradcheck
