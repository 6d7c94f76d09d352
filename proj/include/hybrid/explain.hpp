#pragma once

// Evidence heatmaps and the two interpretability measurements: patch
// precision against lesion masks and deletion-based faithfulness.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hybrid/dataset.hpp"
#include "hybrid/evidence.hpp"
#include "hybrid/model.hpp"
#include "hybrid/rng.hpp"

namespace hyb {

// Image-aligned float map, row-major.
struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  double mean() const {
    return values.empty() ? 0.0 : std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  }
};

// Patch size used when none is given: 8 px for small inputs, 33 px otherwise.
inline std::size_t default_patch_size(std::size_t image_extent) { return image_extent < 256 ? 8 : 33; }

// Channel c of sample n expanded to height x width by nearest-neighbour
// lookup (source row = floor(y * M / height)). Values stay signed and raw.
template <class T>
Heatmap evidence_heatmap(const EvidenceMap<T>& e, std::size_t n, std::size_t c, std::size_t height, std::size_t width) {
  const Shape s = e.A.shape();
  if (n >= s.n || c >= s.c) throw ShapeError("evidence_heatmap: sample or class index out of range");
  if (height == 0 || width == 0) throw ShapeError("evidence_heatmap: empty output size");
  Heatmap h{height, width, std::vector<double>(height * width)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * s.h / height;
    for (std::size_t x = 0; x < width; ++x) {
      h.values[y * width + x] = static_cast<double>(e.A.at(n, c, sy, x * s.w / width));
    }
  }
  return h;
}

// Symmetric 8-bit encoding: 0 evidence maps to 128, +-max|v| to 255 / 1.
inline std::vector<std::uint8_t> heatmap_bytes(const Heatmap& h) {
  double peak = 0.0;
  for (double v : h.values) peak = std::max(peak, std::fabs(v));
  std::vector<std::uint8_t> out(h.values.size(), 128);
  if (peak == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(128.0 + 127.0 * h.values[i] / peak), 0L, 255L));
  }
  return out;
}

struct Patch {
  std::size_t y0 = 0, x0 = 0, height = 0, width = 0;
  double mean = 0.0;           // signed mean evidence
  double positive_mean = 0.0;  // mean of max(v, 0)
  bool lesion = false;

  std::size_t area() const noexcept { return height * width; }
};

// Non-overlapping p x p tiling; the last row/column may hold smaller patches.
struct PatchGrid {
  std::size_t patch = 0, rows = 0, cols = 0;
  std::vector<Patch> patches;  // row-major
};

inline PatchGrid patch_grid(const Heatmap& h, const LesionMask* mask, std::size_t p) {
  if (p == 0) throw ConfigError("patch size must be positive");
  if (mask && (mask->height != h.height || mask->width != h.width)) {
    throw ShapeError("patch grid: heatmap is " + std::to_string(h.height) + "x" + std::to_string(h.width) + " but mask is " +
                     std::to_string(mask->height) + "x" + std::to_string(mask->width));
  }
  PatchGrid g;
  g.patch = p;
  g.rows = (h.height + p - 1) / p;
  g.cols = (h.width + p - 1) / p;
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols; ++c) {
      Patch P;
      P.y0 = r * p;
      P.x0 = c * p;
      P.height = std::min(p, h.height - P.y0);
      P.width = std::min(p, h.width - P.x0);
      double sum = 0.0, pos = 0.0;
      for (std::size_t y = P.y0; y < P.y0 + P.height; ++y) {
        for (std::size_t x = P.x0; x < P.x0 + P.width; ++x) {
          const double v = h.at(y, x);
          sum += v;
          pos += std::max(v, 0.0);
          if (mask && mask->at(y, x)) P.lesion = true;
        }
      }
      P.mean = sum / static_cast<double>(P.area());
      P.positive_mean = pos / static_cast<double>(P.area());
      g.patches.push_back(P);
    }
  }
  return g;
}

struct PrecisionResult {
  std::size_t activated = 0;  // patches with mean evidence > 0
  std::size_t hits = 0;       // activated patches holding at least one lesion pixel
  std::optional<double> precision;
};

inline PrecisionResult patch_precision(const Heatmap& h, const LesionMask& mask, std::size_t p) {
  const PatchGrid g = patch_grid(h, &mask, p);
  PrecisionResult r;
  for (const Patch& P : g.patches) {
    if (!(P.mean > 0.0)) continue;
    ++r.activated;
    r.hits += P.lesion;
  }
  if (r.activated) r.precision = static_cast<double>(r.hits) / static_cast<double>(r.activated);
  return r;
}

// Element-wise mean of several maps of equal size.
inline Heatmap average_heatmaps(const std::vector<Heatmap>& maps) {
  if (maps.empty()) throw ShapeError("average_heatmaps: no maps");
  Heatmap out{maps[0].height, maps[0].width, std::vector<double>(maps[0].values.size(), 0.0)};
  for (const Heatmap& m : maps) {
    if (m.height != out.height || m.width != out.width) throw ShapeError("average_heatmaps: size mismatch");
    for (std::size_t i = 0; i < m.values.size(); ++i) out.values[i] += m.values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(maps.size());
  return out;
}

inline LesionMask mask_union(const std::vector<const LesionMask*>& masks) {
  LesionMask u = LesionMask::empty(masks[0]->height, masks[0]->width);
  for (const LesionMask* m : masks) {
    if (m->height != u.height || m->width != u.width) throw ShapeError("mask_union: size mismatch");
    for (std::size_t i = 0; i < u.px.size(); ++i) u.px[i] |= m->px[i];
  }
  return u;
}

enum class PrecisionProtocol {
  mean_disease,  // (a) mean of every class c > 0 heatmap vs. all lesions
  grade_types,   // (b) one grade's heatmap vs. the union of chosen lesion types
  top_grade,     // (c) highest grade's heatmap vs. all lesions
};

inline std::string to_string(PrecisionProtocol p) {
  switch (p) {
    case PrecisionProtocol::mean_disease: return "a";
    case PrecisionProtocol::grade_types: return "b";
    case PrecisionProtocol::top_grade: return "c";
  }
  return "?";
}

struct PrecisionOptions {
  PrecisionProtocol protocol = PrecisionProtocol::mean_disease;
  std::size_t patch = 0;              // 0: default_patch_size
  std::size_t grade = 1;              // protocol (b)
  std::vector<std::string> lesion_types;  // protocol (b); empty = combined mask
  bool diseased_only = true;          // skip images labelled 0
  std::size_t batch = 16;
};

struct PrecisionRow {
  std::string image;
  PrecisionResult result;
};

struct PrecisionReport {
  std::string protocol;
  std::vector<PrecisionRow> rows;
  std::vector<std::string> skipped;  // images without the required masks
  std::optional<double> mean;        // macro mean over images with a defined precision
};

namespace detail {

// The map a protocol scores for one image.
template <class T>
Heatmap protocol_heatmap(const EvidenceMap<T>& e, std::size_t n, std::size_t H, std::size_t W, const PrecisionOptions& opt) {
  const std::size_t C = e.classes();
  switch (opt.protocol) {
    case PrecisionProtocol::mean_disease: {
      std::vector<Heatmap> maps;
      for (std::size_t c = 1; c < C; ++c) maps.push_back(evidence_heatmap(e, n, c, H, W));
      return average_heatmaps(maps);
    }
    case PrecisionProtocol::grade_types:
      if (opt.grade >= C) throw ConfigError("precision protocol b: grade " + std::to_string(opt.grade) + " out of range");
      return evidence_heatmap(e, n, opt.grade, H, W);
    case PrecisionProtocol::top_grade:
      return evidence_heatmap(e, n, C - 1, H, W);
  }
  throw ConfigError("unknown precision protocol");
}

inline std::optional<LesionMask> protocol_mask(const Sample& s, const PrecisionOptions& opt) {
  if (opt.protocol != PrecisionProtocol::grade_types || opt.lesion_types.empty()) {
    const LesionMask* m = s.combined_mask();
    return m ? std::optional<LesionMask>(*m) : std::nullopt;
  }
  std::vector<const LesionMask*> parts;
  for (const auto& t : opt.lesion_types) {
    auto it = s.masks.find(t);
    if (it == s.masks.end()) return std::nullopt;
    parts.push_back(&it->second);
  }
  return mask_union(parts);
}

}  // namespace detail

template <class T>
PrecisionReport precision_protocol(const HybridModel<T>& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                                   PrecisionOptions opt) {
  NoGradGuard ng;
  PrecisionReport rep;
  rep.protocol = to_string(opt.protocol);
  std::vector<std::size_t> todo;
  std::vector<LesionMask> masks;
  for (std::size_t i : idx) {
    const Sample& s = ds.samples[i];
    if (opt.diseased_only && s.label == 0) continue;
    auto m = detail::protocol_mask(s, opt);
    if (!m) {
      rep.skipped.push_back(s.id);
      continue;
    }
    todo.push_back(i);
    masks.push_back(std::move(*m));
  }
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t b = 0; b < todo.size(); b += opt.batch) {
    std::vector<const Image*> imgs;
    for (std::size_t i = b; i < std::min(todo.size(), b + opt.batch); ++i) imgs.push_back(&ds.samples[todo[i]].image);
    const EvidenceMap<T> e = model.forward(to_batch<T>(imgs));
    for (std::size_t k = 0; k < imgs.size(); ++k) {
      const Image& im = *imgs[k];
      const std::size_t p = opt.patch ? opt.patch : default_patch_size(std::max(im.height, im.width));
      const Heatmap h = detail::protocol_heatmap(e, k, im.height, im.width, opt);
      PrecisionRow row{ds.samples[todo[b + k]].id, patch_precision(h, masks[b + k], p)};
      if (row.result.precision) {
        sum += *row.result.precision;
        ++defined;
      }
      rep.rows.push_back(std::move(row));
    }
  }
  if (defined) rep.mean = sum / static_cast<double>(defined);
  return rep;
}

enum class RemovalOrder { evidence, random };

inline std::string to_string(RemovalOrder o) { return o == RemovalOrder::evidence ? "evidence" : "random"; }

struct CurvePoint {
  std::size_t k = 0;
  double confidence = 0.0;
};

struct FaithfulnessCurve {
  RemovalOrder order = RemovalOrder::evidence;
  std::uint64_t seed = 0;       // random order only
  std::size_t predicted = 0;    // class whose confidence is tracked
  std::vector<CurvePoint> points;

  double confidence_at(std::size_t k) const {
    for (const auto& p : points)
      if (p.k == k) return p.confidence;
    throw ConfigError("faithfulness curve has no point at k=" + std::to_string(k));
  }
};

// k = 0, 1..10, then every further 5% of the patches.
inline std::vector<std::size_t> default_removal_schedule(std::size_t n_patches) {
  std::vector<std::size_t> ks;
  for (std::size_t k = 0; k <= std::min<std::size_t>(10, n_patches); ++k) ks.push_back(k);
  for (std::size_t j = 1; j <= 20; ++j) {
    const auto k = static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(j) * static_cast<double>(n_patches)));
    if (k > ks.back() && k <= n_patches) ks.push_back(k);
  }
  return ks;
}

// Patch indices, highest mean positive evidence first (ties: lower index first).
inline std::vector<std::size_t> evidence_ranking(const PatchGrid& g) {
  std::vector<std::size_t> order(g.patches.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return g.patches[a].positive_mean > g.patches[b].positive_mean; });
  return order;
}

inline void fill_patch(Image& im, const Patch& P, const std::vector<float>& fill) {
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t y = P.y0; y < P.y0 + P.height; ++y)
      for (std::size_t x = P.x0; x < P.x0 + P.width; ++x) im.at(c, y, x) = fill[c];
}

struct FaithfulnessOptions {
  std::size_t patch = 0;               // 0: default_patch_size
  std::vector<std::size_t> schedule;   // empty: default_removal_schedule; k = 0 is always included
  RemovalOrder order = RemovalOrder::evidence;
  std::uint64_t seed = 0;
  std::vector<float> fill;             // per-channel fill value (training mean)
};

// One batched forward scores every prefix in the schedule.
template <class T>
FaithfulnessCurve faithfulness_curve(const HybridModel<T>& model, const Image& image, const FaithfulnessOptions& opt) {
  NoGradGuard ng;
  if (opt.fill.size() != image.channels) throw ConfigError("faithfulness: fill needs one value per channel");
  const std::size_t p = opt.patch ? opt.patch : default_patch_size(std::max(image.height, image.width));
  const EvidenceMap<T> e0 = model.forward(to_batch<T>(image));
  const Tensor<T> y0 = predict(e0);
  FaithfulnessCurve curve;
  curve.order = opt.order;
  curve.seed = opt.seed;
  curve.predicted = argmax<T>(y0.data());
  const PatchGrid g = patch_grid(evidence_heatmap(e0, 0, curve.predicted, image.height, image.width), nullptr, p);

  std::vector<std::size_t> ks = opt.schedule.empty() ? default_removal_schedule(g.patches.size()) : opt.schedule;
  if (ks.empty() || ks.front() != 0) ks.insert(ks.begin(), 0);
  for (std::size_t i = 1; i < ks.size(); ++i) {
    if (ks[i] <= ks[i - 1]) throw ConfigError("faithfulness: schedule must be strictly increasing");
  }
  if (ks.back() > g.patches.size()) {
    throw ConfigError("faithfulness: schedule removes " + std::to_string(ks.back()) + " patches but the image has " +
                      std::to_string(g.patches.size()));
  }

  std::vector<std::size_t> order;
  if (opt.order == RemovalOrder::evidence) {
    order = evidence_ranking(g);
  } else {
    order.resize(g.patches.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed({opt.seed, 0x64656c6574ull}));
    rng.shuffle(order.begin(), order.end());
  }

  curve.points.push_back({0, static_cast<double>(y0.data()[curve.predicted])});
  if (ks.size() == 1) return curve;
  std::vector<Image> variants;
  Image cur = image;
  std::size_t removed = 0;
  for (std::size_t i = 1; i < ks.size(); ++i) {
    for (; removed < ks[i]; ++removed) fill_patch(cur, g.patches[order[removed]], opt.fill);
    variants.push_back(cur);
  }
  std::vector<const Image*> ptrs;
  for (const auto& v : variants) ptrs.push_back(&v);
  constexpr std::size_t kChunk = 16;
  for (std::size_t b = 0; b < ptrs.size(); b += kChunk) {
    std::vector<const Image*> part(ptrs.begin() + static_cast<std::ptrdiff_t>(b),
                                   ptrs.begin() + static_cast<std::ptrdiff_t>(std::min(ptrs.size(), b + kChunk)));
    const Tensor<T> y = predict(model.forward(to_batch<T>(part)));
    const std::size_t C = y.shape().w;
    for (std::size_t j = 0; j < part.size(); ++j) {
      curve.points.push_back({ks[b + j + 1], static_cast<double>(y.data()[j * C + curve.predicted])});
    }
  }
  return curve;
}

struct FaithfulnessRow {
  std::string image;
  double evidence_drop = 0.0;     // confidence(0) - confidence(k), evidence order
  double random_drop = 0.0;       // mean over the random repeats
  bool evidence_wins = false;     // evidence_drop > random_drop
};

struct FaithfulnessReport {
  std::size_t k = 0;
  std::vector<FaithfulnessRow> rows;
  std::vector<std::pair<std::string, FaithfulnessCurve>> curves;
  std::size_t evaluated = 0;  // correctly classified images with label > 0

  double win_fraction() const {
    if (rows.empty()) return 0.0;
    std::size_t w = 0;
    for (const auto& r : rows) w += r.evidence_wins;
    return static_cast<double>(w) / static_cast<double>(rows.size());
  }
};

// Evidence-ranked versus seeded random deletion on correctly classified
// positives. Each image gets `repeats` random orders derived from (seed, id, repeat).
template <class T>
FaithfulnessReport faithfulness_comparison(const HybridModel<T>& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                                           const std::vector<float>& fill, std::size_t k, std::size_t repeats,
                                           std::uint64_t seed, std::size_t patch = 0,
                                           std::vector<std::size_t> schedule = {}) {
  if (repeats == 0) throw ConfigError("faithfulness: need at least one random repeat");
  FaithfulnessReport rep;
  rep.k = k;
  if (schedule.empty()) schedule = {0, k};
  if (std::find(schedule.begin(), schedule.end(), k) == schedule.end()) {
    schedule.push_back(k);
    std::sort(schedule.begin(), schedule.end());
  }
  for (std::size_t i : idx) {
    const Sample& s = ds.samples[i];
    if (s.label == 0) continue;
    FaithfulnessOptions opt;
    opt.patch = patch;
    opt.schedule = schedule;
    opt.fill = fill;
    const FaithfulnessCurve ev = faithfulness_curve(model, s.image, opt);
    if (ev.predicted != s.label) continue;
    FaithfulnessRow row;
    row.image = s.id;
    row.evidence_drop = ev.confidence_at(0) - ev.confidence_at(k);
    rep.curves.push_back({s.id, ev});
    opt.order = RemovalOrder::random;
    for (std::size_t r = 0; r < repeats; ++r) {
      opt.seed = derive_seed({seed, fnv1a64(s.id), r});
      const FaithfulnessCurve rc = faithfulness_curve(model, s.image, opt);
      row.random_drop += (rc.confidence_at(0) - rc.confidence_at(k)) / static_cast<double>(repeats);
      rep.curves.push_back({s.id, rc});
    }
    row.evidence_wins = row.evidence_drop > row.random_drop;
    rep.rows.push_back(row);
  }
  rep.evaluated = rep.rows.size();
  return rep;
}

template <class T>
struct Explanation {
  std::vector<double> probabilities;
  std::size_t predicted = 0;
  std::vector<Heatmap> heatmaps;  // one per class
  EvidenceMap<T> evidence;
};

// Prediction and every class heatmap from a single forward pass.
template <class T>
Explanation<T> explain_once(const HybridModel<T>& model, const Image& image, const std::string& source = {}) {
  NoGradGuard ng;
  Explanation<T> out;
  out.evidence = model.forward(to_batch<T>(image));
  out.evidence.source = source;
  const Tensor<T> y = predict(out.evidence);
  out.probabilities.assign(y.data().begin(), y.data().end());
  out.predicted = argmax<T>(y.data());
  for (std::size_t c = 0; c < out.evidence.classes(); ++c) {
    out.heatmaps.push_back(evidence_heatmap(out.evidence, 0, c, image.height, image.width));
  }
  return out;
}

inline std::string format_precision_csv(const std::vector<PrecisionReport>& reports) {
  std::string s = "image,protocol,activated,hits,precision\n";
  char buf[64];
  for (const auto& rep : reports) {
    for (const auto& r : rep.rows) {
      s += r.image + "," + rep.protocol + "," + std::to_string(r.result.activated) + "," + std::to_string(r.result.hits) + ",";
      if (r.result.precision) {
        std::snprintf(buf, sizeof buf, "%.17g", *r.result.precision);
        s += buf;
      }
      s += "\n";
    }
  }
  return s;
}

inline std::string format_curve_csv(const std::vector<std::pair<std::string, FaithfulnessCurve>>& curves) {
  std::string s = "image,k,confidence,mode\n";
  char buf[64];
  for (const auto& [image, c] : curves) {
    for (const auto& p : c.points) {
      std::snprintf(buf, sizeof buf, "%.17g", p.confidence);
      s += image + "," + std::to_string(p.k) + "," + buf + "," + to_string(c.order) + "\n";
    }
  }
  return s;
}

}  // namespace hyb
