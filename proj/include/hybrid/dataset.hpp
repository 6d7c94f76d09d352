#pragma once

// Labelled image collections: the synthetic lesion-blob generator, the
// on-disk directory format, subject-level splits and augmentation.
//
// Directory layout:
//   images/<file>.ppm|.pgm
//   labels.csv            header "filename,label"
//   masks/<stem>.pgm      optional, binary 0/255, all lesion types combined
//   masks/<type>/<stem>.pgm  optional per-lesion-type masks

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/image_io.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"

namespace hyb {

inline constexpr const char* kCombinedMask = "all";

struct Sample {
  std::string id;       // file name inside images/
  std::string subject;  // split unit; defaults to id
  Image image;
  std::size_t label = 0;
  std::map<std::string, LesionMask> masks;  // kCombinedMask plus optional per-type masks

  const LesionMask* combined_mask() const {
    auto it = masks.find(kCombinedMask);
    return it == masks.end() ? nullptr : &it->second;
  }
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return samples.size(); }
  bool has_masks() const {
    return !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return !s.masks.empty(); });
  }
};

struct Disk {
  double cx = 0, cy = 0, radius = 0;
};

struct SynthSpec {
  std::size_t count = 600;
  std::size_t image_size = 64;
  std::size_t classes = 3;
  // Inclusive lesion-count range per grade; empty selects default_lesion_counts(classes).
  std::vector<std::pair<std::size_t, std::size_t>> lesion_counts;
  double radius_min = 2.0, radius_max = 3.0;
  double radius_step = 0.0;  // added to both radius bounds per grade above 1
  double noise = 0.03;
  std::vector<double> proportions;  // per grade; empty = uniform
  std::uint64_t seed = 1;

  static std::vector<std::pair<std::size_t, std::size_t>> default_lesion_counts(std::size_t classes) {
    std::vector<std::pair<std::size_t, std::size_t>> v{{0, 0}};
    for (std::size_t g = 1; g < classes; ++g) v.push_back(g == 1 ? std::pair<std::size_t, std::size_t>{1, 2}
                                                                   : std::pair<std::size_t, std::size_t>{3 * g - 1, 3 * g + 2});
    return v;
  }
  std::vector<std::pair<std::size_t, std::size_t>> resolved_counts() const {
    return lesion_counts.empty() ? default_lesion_counts(classes) : lesion_counts;
  }
  std::vector<double> resolved_proportions() const {
    return proportions.empty() ? std::vector<double>(classes, 1.0 / static_cast<double>(classes)) : proportions;
  }

  void validate() const {
    if (classes < 2) throw ConfigError("synth: need at least two classes");
    if (count == 0) throw ConfigError("synth: count must be positive");
    if (image_size < 8) throw ConfigError("synth: image_size must be >= 8");
    if (!(radius_min > 0.0) || radius_max < radius_min) throw ConfigError("synth: need 0 < radius_min <= radius_max");
    if (radius_step < 0.0) throw ConfigError("synth: radius_step must be >= 0");
    const double largest = radius_max + radius_step * static_cast<double>(classes - 2);
    if (2.0 * largest + 2.0 > static_cast<double>(image_size)) {
      throw ConfigError("synth: lesion radius " + std::to_string(largest) + " does not fit a " +
                        std::to_string(image_size) + " px image");
    }
    if (noise < 0.0) throw ConfigError("synth: noise must be >= 0");
    const auto counts = resolved_counts();
    if (counts.size() != classes) throw ConfigError("synth: lesion_counts needs one range per grade");
    if (counts[0].first != 0 || counts[0].second != 0) throw ConfigError("synth: grade 0 must have no lesions");
    for (std::size_t g = 1; g < classes; ++g) {
      if (counts[g].first < 1 || counts[g].second < counts[g].first) {
        throw ConfigError("synth: grade " + std::to_string(g) + " needs a lesion range with 1 <= min <= max");
      }
    }
    const auto props = resolved_proportions();
    if (props.size() != classes) throw ConfigError("synth: proportions needs one value per grade");
    double total = 0;
    for (double p : props) {
      if (p < 0.0) throw ConfigError("synth: proportions must be non-negative");
      total += p;
    }
    if (!(total > 0.0)) throw ConfigError("synth: proportions sum to zero");
  }
};

// Largest-remainder allocation of `count` over the grade proportions.
inline std::vector<std::size_t> grade_allocation(const SynthSpec& spec) {
  const auto props = spec.resolved_proportions();
  const double total = std::accumulate(props.begin(), props.end(), 0.0);
  std::vector<std::size_t> n(props.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t g = 0; g < props.size(); ++g) {
    const double exact = static_cast<double>(spec.count) * props[g] / total;
    n[g] = static_cast<std::size_t>(std::floor(exact));
    used += n[g];
    rem.push_back({exact - std::floor(exact), g});
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; used < spec.count; ++i, ++used) ++n[rem[i % rem.size()].second];
  return n;
}

// Pixel (x, y) belongs to a disk when its centre (x + .5, y + .5) lies inside.
inline bool disk_contains(const Disk& d, std::size_t x, std::size_t y) {
  const double dx = static_cast<double>(x) + 0.5 - d.cx, dy = static_cast<double>(y) + 0.5 - d.cy;
  return dx * dx + dy * dy <= d.radius * d.radius;
}

struct SynthSample {
  Sample sample;
  std::vector<Disk> disks;
};

inline SynthSample synth_sample(const SynthSpec& spec, std::size_t index, std::size_t grade) {
  Rng rng(derive_seed({spec.seed, 0x73796e7468ull, index}));
  const std::size_t S = spec.image_size;
  const double sz = static_cast<double>(S);
  SynthSample out;
  Sample& s = out.sample;
  char name[32];
  std::snprintf(name, sizeof name, "img%05zu.ppm", index);
  s.id = name;
  s.subject = s.id;
  s.label = grade;
  s.image = Image::blank(3, S, S);

  // Dark reddish background with low-frequency texture and pixel noise.
  const float base[3] = {0.30f, 0.12f, 0.06f};
  double fx[3], fy[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    fx[k] = rng.uniform(0.5, 3.0) * 6.283185307179586 / sz;
    fy[k] = rng.uniform(0.5, 3.0) * 6.283185307179586 / sz;
    ph[k] = rng.uniform(0.0, 6.283185307179586);
  }
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      double tex = 0;
      for (int k = 0; k < 3; ++k) tex += std::sin(fx[k] * static_cast<double>(x) + fy[k] * static_cast<double>(y) + ph[k]);
      tex *= 0.03;
      for (std::size_t c = 0; c < 3; ++c) {
        s.image.at(c, y, x) = static_cast<float>(base[c] + tex * (c == 0 ? 1.0 : 0.5) + spec.noise * rng.normal());
      }
    }
  }

  const auto counts = spec.resolved_counts();
  const std::size_t n_lesions =
      grade == 0 ? 0 : static_cast<std::size_t>(rng.range(static_cast<long>(counts[grade].first), static_cast<long>(counts[grade].second)));
  for (std::size_t i = 0; i < n_lesions; ++i) {
    Disk d;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double grow = spec.radius_step * static_cast<double>(grade - 1);
      d.radius = rng.uniform(spec.radius_min + grow, spec.radius_max + grow);
      d.cx = rng.uniform(d.radius + 1.0, sz - d.radius - 1.0);
      d.cy = rng.uniform(d.radius + 1.0, sz - d.radius - 1.0);
      bool clear = true;
      for (const Disk& o : out.disks) {
        const double dist = std::hypot(d.cx - o.cx, d.cy - o.cy);
        clear = clear && dist > d.radius + o.radius + 2.0;
      }
      if (clear) break;
    }
    out.disks.push_back(d);
  }

  LesionMask mask = LesionMask::empty(S, S);
  const float lesion[3] = {0.95f, 0.85f, 0.35f};
  for (const Disk& d : out.disks) {
    const float gain = static_cast<float>(rng.uniform(0.85, 1.0));
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        if (disk_contains(d, x, y)) {
          mask.px[y * S + x] = 1;
          for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) = lesion[c] * gain + static_cast<float>(spec.noise * rng.normal());
        }
  }
  // Quantize so the in-memory dataset equals its 8-bit on-disk form.
  for (float& v : s.image.data) v = static_cast<float>(to_byte(v)) / 255.0f;
  s.masks.emplace(kCombinedMask, std::move(mask));
  return out;
}

// Deterministic from spec.seed; grade counts follow grade_allocation.
inline Dataset synth_dataset(const SynthSpec& spec) {
  spec.validate();
  const auto alloc = grade_allocation(spec);
  std::vector<std::size_t> grades;
  for (std::size_t g = 0; g < alloc.size(); ++g) grades.insert(grades.end(), alloc[g], g);
  Rng rng(derive_seed({spec.seed, 0x6772616465ull}));
  rng.shuffle(grades.begin(), grades.end());
  Dataset ds;
  ds.classes = spec.classes;
  for (std::size_t i = 0; i < grades.size(); ++i) ds.samples.push_back(synth_sample(spec, i, grades[i]).sample);
  return ds;
}

inline std::string file_stem(const std::string& name) { return std::filesystem::path(name).stem().string(); }

inline void write_dataset_dir(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.csv");
  if (!labels) throw FormatError("cannot write " + (dir / "labels.csv").string());
  labels << "filename,label\n";
  for (const Sample& s : ds.samples) {
    write_pnm(dir / "images" / s.id, s.image);
    labels << s.id << "," << s.label << "\n";
    for (const auto& [type, m] : s.masks) {
      const fs::path mdir = type == kCombinedMask ? dir / "masks" : dir / "masks" / type;
      fs::create_directories(mdir);
      write_mask(mdir / (file_stem(s.id) + ".pgm"), m);
    }
  }
}

// `classes` = 0 infers the class count as max label + 1.
inline Dataset load_dataset_dir(const std::filesystem::path& dir, std::size_t classes = 0) {
  namespace fs = std::filesystem;
  const fs::path labels_path = dir / "labels.csv";
  std::ifstream in(labels_path);
  if (!in) throw FormatError("missing label table " + labels_path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(labels_path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "filename,label") throw FormatError(labels_path.string() + ": header must be 'filename,label'");
  Dataset ds;
  std::vector<std::string> types;
  if (fs::is_directory(dir / "masks")) {
    for (const auto& e : fs::directory_iterator(dir / "masks"))
      if (e.is_directory()) types.push_back(e.path().filename().string());
    std::sort(types.begin(), types.end());
  }
  std::size_t max_label = 0;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError(labels_path.string() + ":" + std::to_string(lineno) + ": expected 'filename,label'");
    Sample s;
    s.id = line.substr(0, comma);
    s.subject = s.id;
    try {
      std::size_t used = 0;
      s.label = std::stoul(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(labels_path.string() + ":" + std::to_string(lineno) + ": invalid label");
    }
    max_label = std::max(max_label, s.label);
    s.image = read_pnm(dir / "images" / s.id);
    const std::string mask_name = file_stem(s.id) + ".pgm";
    if (fs::exists(dir / "masks" / mask_name)) s.masks.emplace(kCombinedMask, read_mask(dir / "masks" / mask_name));
    for (const auto& t : types) {
      if (fs::exists(dir / "masks" / t / mask_name)) s.masks.emplace(t, read_mask(dir / "masks" / t / mask_name));
    }
    // Per-type masks alone still give a combined annotation.
    if (!s.masks.empty() && !s.masks.count(kCombinedMask)) {
      LesionMask u = LesionMask::empty(s.image.height, s.image.width);
      for (const auto& [t, m] : s.masks)
        for (std::size_t i = 0; i < u.px.size() && i < m.px.size(); ++i) u.px[i] |= m.px[i];
      s.masks.emplace(kCombinedMask, std::move(u));
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw FormatError(labels_path.string() + ": no samples");
  ds.classes = classes ? classes : max_label + 1;
  for (const Sample& s : ds.samples) {
    if (s.label >= ds.classes) throw FormatError(labels_path.string() + ": label " + std::to_string(s.label) + " out of range");
  }
  return ds;
}

struct Split {
  std::vector<std::size_t> train, val, test;  // indices into Dataset::samples, ascending
};

// Whole subjects go to one split; sizes are rounded from the fractions.
inline Split split_dataset(const Dataset& ds, double val_fraction, double test_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0)) {
    throw ConfigError("split: fractions must be in (0,1) with a sum below 1");
  }
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) groups[ds.samples[i].subject].push_back(i);
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [k, v] : groups) order.push_back(&v);
  Rng rng(derive_seed({seed, 0x73706c6974ull}));
  rng.shuffle(order.begin(), order.end());
  const auto n = static_cast<double>(ds.samples.size());
  const auto want_test = static_cast<std::size_t>(std::llround(n * test_fraction));
  const auto want_val = static_cast<std::size_t>(std::llround(n * val_fraction));
  Split sp;
  for (const auto* g : order) {
    auto& dst = sp.test.size() < want_test ? sp.test : sp.val.size() < want_val ? sp.val : sp.train;
    dst.insert(dst.end(), g->begin(), g->end());
  }
  if (sp.train.empty() || sp.val.empty() || sp.test.empty()) throw ConfigError("split: a split is empty");
  for (auto* v : {&sp.train, &sp.val, &sp.test}) std::sort(v->begin(), v->end());
  return sp;
}

inline std::vector<float> channel_means(const Dataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ConfigError("channel_means: empty index set");
  const std::size_t C = ds.samples[idx[0]].image.channels;
  std::vector<double> acc(C, 0.0);
  double count = 0;
  for (std::size_t i : idx) {
    const Image& im = ds.samples[i].image;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < im.pixels(); ++p) acc[c] += im.data[c * im.pixels() + p];
    count += static_cast<double>(im.pixels());
  }
  std::vector<float> out(C);
  for (std::size_t c = 0; c < C; ++c) out[c] = static_cast<float>(acc[c] / count);
  return out;
}

struct Augment {
  bool flip = true;
  bool rotation = true;
  double rotation_deg = 10.0;
  bool crop = false;        // random shift of up to crop_px, edge-clamped
  std::size_t crop_px = 4;
  bool brightness = false;  // +-10% gain
};

// Bilinear resampling with edge clamping.
inline float sample_bilinear(const Image& im, std::size_t c, double y, double x) {
  const double maxy = static_cast<double>(im.height - 1), maxx = static_cast<double>(im.width - 1);
  y = std::clamp(y, 0.0, maxy);
  x = std::clamp(x, 0.0, maxx);
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, im.height - 1), x1 = std::min(x0 + 1, im.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double v = (1 - fy) * ((1 - fx) * im.at(c, y0, x0) + fx * im.at(c, y0, x1)) +
                   fy * ((1 - fx) * im.at(c, y1, x0) + fx * im.at(c, y1, x1));
  return static_cast<float>(v);
}

inline Image augment(const Image& src, const Augment& a, Rng& rng) {
  Image im = src;
  const bool hflip = a.flip && rng.uniform() < 0.5;
  const bool vflip = a.flip && rng.uniform() < 0.5;
  const double angle = a.rotation ? rng.uniform(-a.rotation_deg, a.rotation_deg) * 3.14159265358979323846 / 180.0 : 0.0;
  const double sy = a.crop ? static_cast<double>(rng.range(-static_cast<long>(a.crop_px), static_cast<long>(a.crop_px))) : 0.0;
  const double sx = a.crop ? static_cast<double>(rng.range(-static_cast<long>(a.crop_px), static_cast<long>(a.crop_px))) : 0.0;
  const double gain = a.brightness ? rng.uniform(0.9, 1.1) : 1.0;
  const double cy = (static_cast<double>(im.height) - 1) / 2, cx = (static_cast<double>(im.width) - 1) / 2;
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < im.height; ++y) {
    for (std::size_t x = 0; x < im.width; ++x) {
      double yy = static_cast<double>(vflip ? im.height - 1 - y : y);
      double xx = static_cast<double>(hflip ? im.width - 1 - x : x);
      yy += sy;
      xx += sx;
      const double ry = ca * (yy - cy) - sa * (xx - cx) + cy;
      const double rx = sa * (yy - cy) + ca * (xx - cx) + cx;
      for (std::size_t c = 0; c < im.channels; ++c) {
        const float v = angle == 0.0 && sy == 0.0 && sx == 0.0 ? src.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx))
                                                               : sample_bilinear(src, c, ry, rx);
        im.at(c, y, x) = static_cast<float>(std::clamp(v * gain, 0.0, 1.0));
      }
    }
  }
  return im;
}

template <class T>
Tensor<T> to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("to_batch: no images");
  const Image& f = *images[0];
  Tensor<T> t = Tensor<T>::zeros({images.size(), f.channels, f.height, f.width});
  auto d = t.data();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = *images[i];
    if (im.channels != f.channels || im.height != f.height || im.width != f.width) {
      throw ShapeError("to_batch: images differ in size");
    }
    std::copy(im.data.begin(), im.data.end(), d.begin() + static_cast<std::ptrdiff_t>(i * im.data.size()));
  }
  return t;
}

template <class T>
Tensor<T> to_batch(const Image& image) {
  return to_batch<T>(std::vector<const Image*>{&image});
}

}  // namespace hyb
