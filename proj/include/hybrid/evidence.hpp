#pragma once

// Class-evidence layer, prediction by spatial averaging, and the
// cross-entropy + L1(evidence) objective.

#include <cstddef>
#include <string>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/ops.hpp"
#include "hybrid/param.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"

namespace hyb {

template <class T>
struct EvidenceMap {
  Tensor<T> A;               // (n, C, M, N), includes the classifier bias
  std::vector<T> bias;       // per-class bias folded into A
  std::vector<std::string> class_names;
  std::string source;
  std::string checkpoint_id;

  std::size_t classes() const noexcept { return A.shape().c; }
};

inline std::vector<std::string> default_class_names(std::size_t c) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < c; ++i) v.push_back("grade" + std::to_string(i));
  return v;
}

// 1x1 convolution with C kernels.
template <class T>
class EvidenceHead {
 public:
  EvidenceHead(std::size_t dim, std::size_t classes, ParamStore<T>& store, Rng& rng, const std::string& prefix = "head")
      : dim_(dim),
        classes_(classes),
        weight_(store.he_uniform(prefix + ".weight", {classes, dim, 1, 1}, dim, rng)),
        bias_(store.zeros(prefix + ".bias", {classes, 1, 1, 1})) {
    if (classes < 2) throw ConfigError("evidence head: need at least two classes");
  }

  EvidenceMap<T> operator()(const Tensor<T>& w) const {
    if (w.shape().c != dim_) {
      throw ShapeError("evidence head: input has " + std::to_string(w.shape().c) + " channels, expected " +
                       std::to_string(dim_));
    }
    EvidenceMap<T> e;
    e.A = conv2d(w, weight_, &bias_);
    e.bias.assign(bias_.data().begin(), bias_.data().end());
    e.class_names = default_class_names(classes_);
    return e;
  }

  const Tensor<T>& weight() const noexcept { return weight_; }
  const Tensor<T>& bias() const noexcept { return bias_; }

 private:
  std::size_t dim_, classes_;
  Tensor<T> weight_, bias_;
};

// Spatial mean of each class map, laid out as (n, 1, 1, C) rows.
template <class T>
Tensor<T> class_logits(const Tensor<T>& A) {
  const Shape s = A.shape();
  return reshape(global_avg_pool(A), Shape{s.n, 1, 1, s.c});
}

// Softmax(AvgPool(A)), shape (n, 1, 1, C).
template <class T>
Tensor<T> predict(const Tensor<T>& A) {
  return softmax_rows(class_logits(A));
}

template <class T>
Tensor<T> predict(const EvidenceMap<T>& e) {
  return predict(e.A);
}

// Lowest index wins ties.
template <class T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& probs) {
  const std::size_t c = probs.shape().w;
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r * c < probs.size(); ++r) out.push_back(argmax<T>(probs.data().subspan(r * c, c)));
  return out;
}

struct LossBreakdown {
  double ce = 0.0;
  double l1 = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

template <class T>
struct Loss {
  Tensor<T> total;  // on the tape
  Tensor<T> ce, l1;
  LossBreakdown breakdown;
};

// CE(y, Softmax(AvgPool(A))) + lambda * sum |A|, both terms averaged over the batch.
template <class T>
Loss<T> total_loss(const Tensor<T>& A, const std::vector<std::size_t>& labels, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("loss: lambda must be >= 0");
  const Shape s = A.shape();
  if (labels.size() != s.n) throw ShapeError("loss: label count does not match batch size");
  for (std::size_t y : labels) {
    if (y >= s.c) throw std::invalid_argument("loss: label " + std::to_string(y) + " outside [0, " + std::to_string(s.c) + ")");
  }
  Loss<T> L;
  L.ce = nll_rows(log_softmax_rows(class_logits(A)), labels);
  L.l1 = scale(sum(abs(A)), T(1) / static_cast<T>(s.n));
  L.total = add(L.ce, scale(L.l1, static_cast<T>(lambda)));
  L.breakdown = {static_cast<double>(L.ce.item()), static_cast<double>(L.l1.item()), lambda,
                 static_cast<double>(L.total.item())};
  return L;
}

template <class T>
Loss<T> total_loss(const EvidenceMap<T>& e, const std::vector<std::size_t>& labels, double lambda) {
  return total_loss(e.A, labels, lambda);
}

}  // namespace hyb
