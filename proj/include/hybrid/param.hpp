#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"

namespace hyb {

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
};

// Owns every trainable tensor of a model under a unique dotted name.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Tensor<T> t = Tensor<T>::from_data(shape, std::move(values), true);
    index_.emplace(name, params_.size());
    params_.push_back({name, t});
    return t;
  }

  Tensor<T> zeros(const std::string& name, Shape shape) { return add(name, shape, std::vector<T>(shape.size(), T(0))); }

  Tensor<T> constant(const std::string& name, Shape shape, T v) {
    return add(name, shape, std::vector<T>(shape.size(), v));
  }

  // Uniform in +-sqrt(3) * sqrt(2 / fan_in), i.e. He scaling.
  Tensor<T> he_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(3.0) * std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> v(shape.size());
    for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, shape, std::move(v));
  }

  std::vector<Param<T>>& all() noexcept { return params_; }
  const std::vector<Param<T>>& all() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  const Param<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Param<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.value.node().ensure_grad();
      p.value.zero_grad();
    }
  }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hyb
