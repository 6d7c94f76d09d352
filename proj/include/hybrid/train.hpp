#pragma once

// Mini-batch SGD with a per-epoch cosine schedule and best-validation model selection.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "hybrid/checkpoint.hpp"
#include "hybrid/dataset.hpp"
#include "hybrid/evidence.hpp"
#include "hybrid/model.hpp"
#include "hybrid/optim.hpp"
#include "hybrid/rng.hpp"

namespace hyb {

struct TrainConfig {
  double lr0 = 1e-4;
  double weight_decay = 5e-4;
  double momentum = 0.0;
  std::size_t epochs = 200;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  double lambda = 0.0;
  double clip_norm = 0.0;  // global gradient norm cap, 0 disables
  double val_fraction = 0.1;
  double test_fraction = 0.15;
  Augment augment;

  void validate() const {
    if (!(lr0 >= 0.0)) throw ConfigError("train.lr0 must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (batch == 0) throw ConfigError("train.batch must be positive");
    if (!(lambda >= 0.0)) throw ConfigError("train.lambda must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
    if (!(val_fraction > 0.0 && val_fraction < 1.0 && test_fraction > 0.0 && test_fraction < 1.0 &&
          val_fraction + test_fraction < 1.0)) {
      throw ConfigError("train: val_fraction and test_fraction must lie in (0,1) with a sum below 1");
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double ce = 0.0;  // sample-weighted means over the epoch
  double l1 = 0.0;
  double total = 0.0;  // ce + lambda * l1
  double val_accuracy = 0.0;
  double val_mean_abs_evidence = 0.0;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
};

struct EvalResult {
  std::vector<std::size_t> labels, predictions;
  std::vector<std::vector<double>> probabilities;
  double mean_abs_evidence = 0.0;  // mean of |A| over every entry, bias included

  double accuracy() const {
    if (labels.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == predictions[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
  }
};

template <class T>
EvalResult evaluate(const HybridModel<T>& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                    std::size_t batch = 16) {
  NoGradGuard ng;
  EvalResult r;
  double abs_sum = 0.0, count = 0.0;
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    std::vector<const Image*> imgs;
    for (std::size_t i = b; i < std::min(idx.size(), b + batch); ++i) {
      imgs.push_back(&ds.samples[idx[i]].image);
      r.labels.push_back(ds.samples[idx[i]].label);
    }
    const EvidenceMap<T> e = model.forward(to_batch<T>(imgs));
    for (T v : e.A.data()) abs_sum += std::fabs(static_cast<double>(v));
    count += static_cast<double>(e.A.size());
    const Tensor<T> p = predict(e);
    const std::size_t C = p.shape().w;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      auto row = p.data().subspan(i * C, C);
      r.probabilities.emplace_back(row.begin(), row.end());
      r.predictions.push_back(argmax<T>(row));
    }
  }
  r.mean_abs_evidence = count > 0 ? abs_sum / count : 0.0;
  return r;
}

// Keys augmentation on (seed, image id, epoch) so batches do not depend on visiting order.
inline Rng augment_rng(std::uint64_t seed, const std::string& id, std::size_t epoch) {
  return Rng(derive_seed({seed, 0x617567ull, fnv1a64(id), epoch}));
}

using EpochCallback = std::function<void(const EpochRecord&)>;

template <class T>
FitResult fit(HybridModel<T>& model, const Dataset& ds, const Split& split, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (split.train.empty() || split.val.empty()) throw ConfigError("fit: empty train or validation split");
  if (ds.classes != model.config().classes) {
    throw ConfigError("fit: dataset has " + std::to_string(ds.classes) + " classes, model expects " +
                      std::to_string(model.config().classes));
  }
  FitResult out;
  const std::vector<float> train_mean = channel_means(ds, split.train);
  Sgd<T> opt(cfg.weight_decay, cfg.momentum);
  std::vector<std::size_t> order = split.train;
  double best_acc = -1.0;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cosine_lr(static_cast<long>(e), static_cast<long>(cfg.epochs), cfg.lr0);
    Rng shuffle_rng(derive_seed({cfg.seed, 0x65706f6368ull, e}));
    order = split.train;
    shuffle_rng.shuffle(order.begin(), order.end());

    double ce_sum = 0.0, l1_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      std::vector<Image> imgs;
      std::vector<std::size_t> labels;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch); ++i) {
        const Sample& s = ds.samples[order[i]];
        Rng arng = augment_rng(cfg.seed, s.id, e);
        imgs.push_back(augment(s.image, cfg.augment, arng));
        labels.push_back(s.label);
      }
      std::vector<const Image*> ptrs;
      for (const auto& im : imgs) ptrs.push_back(&im);
      model.params().zero_grad();
      const EvidenceMap<T> ev = model.forward(to_batch<T>(ptrs));
      const Loss<T> loss = total_loss(ev, labels, cfg.lambda);
      loss.total.backward();
      if (cfg.clip_norm > 0.0) clip_grad_norm(model.params(), cfg.clip_norm);
      opt.step(model.params(), lr);
      const double n = static_cast<double>(labels.size());
      ce_sum += loss.breakdown.ce * n;
      l1_sum += loss.breakdown.l1 * n;
    }

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = lr;
    const double n_train = static_cast<double>(order.size());
    rec.ce = ce_sum / n_train;
    rec.l1 = l1_sum / n_train;
    rec.total = rec.ce + cfg.lambda * rec.l1;
    if (!std::isfinite(rec.total)) throw NumericError("training loss became non-finite at epoch " + std::to_string(e + 1));
    const EvalResult val = evaluate(model, ds, split.val);
    rec.val_accuracy = val.accuracy();
    rec.val_mean_abs_evidence = val.mean_abs_evidence;
    out.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      out.best = capture(model);
      out.best.epoch = rec.epoch;
      out.best.val_accuracy = rec.val_accuracy;
      out.best.rng_digest = derive_seed({cfg.seed, e});
      out.best.train_mean = train_mean;
    }
  }
  return out;
}

inline std::string format_history_csv(const std::vector<EpochRecord>& h) {
  std::string s = "epoch,lr,ce,l1,total,val_accuracy,val_mean_abs_evidence\n";
  char buf[512];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr, r.ce, r.l1, r.total,
                  r.val_accuracy, r.val_mean_abs_evidence);
    s += buf;
  }
  return s;
}

inline void write_history_csv(const std::vector<EpochRecord>& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << format_history_csv(h);
}

}  // namespace hyb
