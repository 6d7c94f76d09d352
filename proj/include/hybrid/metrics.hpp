#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/rng.hpp"

namespace hyb {

// counts[truth][prediction]
struct ConfusionMatrix {
  std::vector<std::vector<double>> counts;

  std::size_t classes() const noexcept { return counts.size(); }
  double total() const {
    double t = 0;
    for (const auto& r : counts)
      for (double v : r) t += v;
    return t;
  }
};

inline void check_pairs(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  if (truth.size() != pred.size()) throw ShapeError("metrics: truth and prediction lengths differ");
  if (truth.empty()) throw ShapeError("metrics: no samples");
}

inline ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                                        std::size_t classes) {
  check_pairs(truth, pred);
  ConfusionMatrix m{std::vector<std::vector<double>>(classes, std::vector<double>(classes, 0.0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || pred[i] >= classes) throw ShapeError("metrics: class index out of range");
    m.counts[truth[i]][pred[i]] += 1.0;
  }
  return m;
}

inline double accuracy(const ConfusionMatrix& m) {
  double diag = 0;
  for (std::size_t i = 0; i < m.classes(); ++i) diag += m.counts[i][i];
  return diag / m.total();
}

inline double accuracy(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  check_pairs(truth, pred);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

enum class KappaWeights { none, linear, quadratic };

inline KappaWeights parse_kappa_weights(const std::string& s) {
  if (s == "none" || s == "unweighted") return KappaWeights::none;
  if (s == "linear") return KappaWeights::linear;
  if (s == "quadratic") return KappaWeights::quadratic;
  throw ConfigError("unknown kappa weighting '" + s + "' (expected none, linear or quadratic)");
}

inline std::string to_string(KappaWeights w) {
  return w == KappaWeights::none ? "none" : w == KappaWeights::linear ? "linear" : "quadratic";
}

// kappa = 1 - sum(w * O) / sum(w * E), E from the marginals. NaN when the
// expected disagreement is zero (a single class in both marginals).
inline double cohen_kappa(const ConfusionMatrix& m, KappaWeights weights = KappaWeights::none) {
  const std::size_t C = m.classes();
  const double N = m.total();
  if (C < 2 || !(N > 0)) throw ShapeError("cohen_kappa: need at least two classes and one sample");
  std::vector<double> row(C, 0.0), col(C, 0.0);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      row[i] += m.counts[i][j];
      col[j] += m.counts[i][j];
    }
  double obs = 0.0, exp = 0.0;
  const double span = static_cast<double>(C - 1);
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const double d = std::fabs(static_cast<double>(i) - static_cast<double>(j));
      const double w = weights == KappaWeights::none ? (i != j ? 1.0 : 0.0)
                       : weights == KappaWeights::linear ? d / span
                                                         : (d * d) / (span * span);
      obs += w * m.counts[i][j] / N;
      exp += w * row[i] * col[j] / (N * N);
    }
  }
  if (exp == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return 1.0 - obs / exp;
}

struct BootstrapCI {
  double estimate = 0.0;  // on the full sample
  double lower = 0.0, upper = 0.0;
  double level = 0.95;
  std::size_t resamples = 0;

  double length() const noexcept { return upper - lower; }
};

using PairMetric = std::function<double(const std::vector<std::size_t>&, const std::vector<std::size_t>&)>;

// Percentile interval from image-level resampling with replacement.
// Resamples where the metric is NaN are dropped.
inline BootstrapCI bootstrap_ci(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                                const PairMetric& metric, std::uint64_t seed, std::size_t resamples = 1000,
                                double level = 0.95) {
  check_pairs(truth, pred);
  if (resamples == 0) throw ConfigError("bootstrap: resamples must be positive");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap: level must lie in (0,1)");
  BootstrapCI ci;
  ci.level = level;
  ci.estimate = metric(truth, pred);
  Rng rng(derive_seed({seed, 0x626f6f74ull}));
  std::vector<double> stats;
  std::vector<std::size_t> t(truth.size()), p(truth.size());
  for (std::size_t b = 0; b < resamples; ++b) {
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto k = static_cast<std::size_t>(rng.below(truth.size()));
      t[i] = truth[k];
      p[i] = pred[k];
    }
    const double v = metric(t, p);
    if (!std::isnan(v)) stats.push_back(v);
  }
  ci.resamples = stats.size();
  if (stats.empty()) {
    ci.lower = ci.upper = std::numeric_limits<double>::quiet_NaN();
    return ci;
  }
  std::sort(stats.begin(), stats.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(stats.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, stats.size() - 1);
    return stats[lo] + (pos - static_cast<double>(lo)) * (stats[hi] - stats[lo]);
  };
  ci.lower = quantile((1.0 - level) / 2.0);
  ci.upper = quantile(1.0 - (1.0 - level) / 2.0);
  return ci;
}

inline PairMetric accuracy_metric() {
  return [](const std::vector<std::size_t>& t, const std::vector<std::size_t>& p) { return accuracy(t, p); };
}

inline PairMetric kappa_metric(std::size_t classes, KappaWeights w) {
  return [classes, w](const std::vector<std::size_t>& t, const std::vector<std::size_t>& p) {
    return cohen_kappa(confusion_matrix(t, p, classes), w);
  };
}

}  // namespace hyb
