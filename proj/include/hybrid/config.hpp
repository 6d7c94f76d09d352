#pragma once

// Run configuration: an INI-style file with [section] headers and
// `key = value` lines. Every key has a default; unknown keys are errors.
//
//   [model]      backbone, in_channels, feature_dim, classes, image_size, layers, seed
//   [attention]  window_size, reduction, scale, gdfn_expansion, attn_depth, norm
//   [train]      lr0, weight_decay, momentum, clip_norm, epochs, batch, seed, lambda,
//                val_fraction, test_fraction, flip, rotation, rotation_deg,
//                crop, crop_px, brightness
//   [data]       source (synth | dir), path
//   [synth]      count, image_size, classes, lesion_counts, radius_min,
//                radius_max, radius_step, noise, proportions, seed
//   [eval]       metric, kappa_weights, resamples, seed, patch, protocol,
//                grade, lesion_types, diseased_only, random_repeats, remove_k
//   [output]     dir

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hybrid/dataset.hpp"
#include "hybrid/errors.hpp"
#include "hybrid/explain.hpp"
#include "hybrid/metrics.hpp"
#include "hybrid/model.hpp"
#include "hybrid/train.hpp"

namespace hyb {

enum class DataSource { synth, dir };

struct EvalConfig {
  std::string metric = "accuracy";  // accuracy | kappa | precision | faithfulness
  KappaWeights kappa_weights = KappaWeights::none;
  std::size_t resamples = 1000;
  std::uint64_t seed = 1;
  std::size_t patch = 0;  // 0: automatic
  PrecisionProtocol protocol = PrecisionProtocol::mean_disease;
  std::size_t grade = 1;
  std::vector<std::string> lesion_types;
  bool diseased_only = true;
  std::size_t random_repeats = 5;
  std::size_t remove_k = 5;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSource source = DataSource::synth;
  std::string data_path;
  SynthSpec synth;
  EvalConfig eval;
  std::string out_dir = "run";

  // Cross-section consistency.
  void validate() const {
    train.validate();
    model.resolved().attention.validate();
    if (source == DataSource::synth) {
      synth.validate();
      if (synth.classes != model.classes) {
        throw ConfigError("synth.classes (" + std::to_string(synth.classes) + ") differs from model.classes (" +
                          std::to_string(model.classes) + ")");
      }
      if (synth.image_size != model.backbone.input_size) {
        throw ConfigError("synth.image_size (" + std::to_string(synth.image_size) + ") differs from model.image_size (" +
                          std::to_string(model.backbone.input_size) + ")");
      }
    } else if (data_path.empty()) {
      throw ConfigError("data.path is required when data.source = dir");
    }
    if (eval.metric != "accuracy" && eval.metric != "kappa" && eval.metric != "precision" && eval.metric != "faithfulness") {
      throw ConfigError("eval.metric must be accuracy, kappa, precision or faithfulness");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v, const std::string& sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string flag(bool b) { return b ? "true" : "false"; }

// "0-0,1-2,5-8"
inline std::vector<std::pair<std::size_t, std::size_t>> parse_ranges(const std::string& v, const std::string& key) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& item : split_list(v)) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) throw ConfigError("'" + key + "': expected ranges like 1-2, got '" + item + "'");
    out.push_back({parse_size(trim(item.substr(0, dash)), key), parse_size(trim(item.substr(dash + 1)), key)});
  }
  return out;
}

}  // namespace detail

// Applies one dotted key; throws ConfigError for unknown keys or bad values.
inline void apply_run_key(RunConfig& rc, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string value = trim(raw);
  if (apply_model_key(rc.model, key, value)) return;
  TrainConfig& t = rc.train;
  SynthSpec& s = rc.synth;
  EvalConfig& e = rc.eval;
  if (key == "train.lr0") t.lr0 = parse_double(value, key);
  else if (key == "train.weight_decay") t.weight_decay = parse_double(value, key);
  else if (key == "train.momentum") t.momentum = parse_double(value, key);
  else if (key == "train.clip_norm") t.clip_norm = parse_double(value, key);
  else if (key == "train.epochs") t.epochs = parse_size(value, key);
  else if (key == "train.batch") t.batch = parse_size(value, key);
  else if (key == "train.seed") t.seed = parse_size(value, key);
  else if (key == "train.lambda") t.lambda = parse_double(value, key);
  else if (key == "train.val_fraction") t.val_fraction = parse_double(value, key);
  else if (key == "train.test_fraction") t.test_fraction = parse_double(value, key);
  else if (key == "train.flip") t.augment.flip = parse_bool(value, key);
  else if (key == "train.rotation") t.augment.rotation = parse_bool(value, key);
  else if (key == "train.rotation_deg") t.augment.rotation_deg = parse_double(value, key);
  else if (key == "train.crop") t.augment.crop = parse_bool(value, key);
  else if (key == "train.crop_px") t.augment.crop_px = parse_size(value, key);
  else if (key == "train.brightness") t.augment.brightness = parse_bool(value, key);
  else if (key == "data.source") {
    if (value == "synth") rc.source = DataSource::synth;
    else if (value == "dir") rc.source = DataSource::dir;
    else throw ConfigError("'data.source' must be synth or dir, got '" + value + "'");
  } else if (key == "data.path") rc.data_path = value;
  else if (key == "synth.count") s.count = parse_size(value, key);
  else if (key == "synth.image_size") s.image_size = parse_size(value, key);
  else if (key == "synth.classes") s.classes = parse_size(value, key);
  else if (key == "synth.lesion_counts") s.lesion_counts = value == "default" ? decltype(s.lesion_counts){} : parse_ranges(value, key);
  else if (key == "synth.radius_min") s.radius_min = parse_double(value, key);
  else if (key == "synth.radius_max") s.radius_max = parse_double(value, key);
  else if (key == "synth.radius_step") s.radius_step = parse_double(value, key);
  else if (key == "synth.noise") s.noise = parse_double(value, key);
  else if (key == "synth.proportions") {
    s.proportions.clear();
    if (value != "uniform")
      for (const auto& p : split_list(value)) s.proportions.push_back(parse_double(p, key));
  } else if (key == "synth.seed") s.seed = parse_size(value, key);
  else if (key == "eval.metric") e.metric = value;
  else if (key == "eval.kappa_weights") e.kappa_weights = parse_kappa_weights(value);
  else if (key == "eval.resamples") e.resamples = parse_size(value, key);
  else if (key == "eval.seed") e.seed = parse_size(value, key);
  else if (key == "eval.patch") e.patch = value == "auto" ? 0 : parse_size(value, key);
  else if (key == "eval.protocol") {
    if (value == "a") e.protocol = PrecisionProtocol::mean_disease;
    else if (value == "b") e.protocol = PrecisionProtocol::grade_types;
    else if (value == "c") e.protocol = PrecisionProtocol::top_grade;
    else throw ConfigError("'eval.protocol' must be a, b or c");
  } else if (key == "eval.grade") e.grade = parse_size(value, key);
  else if (key == "eval.lesion_types") e.lesion_types = value == "all" ? std::vector<std::string>{} : split_list(value);
  else if (key == "eval.diseased_only") e.diseased_only = parse_bool(value, key);
  else if (key == "eval.random_repeats") e.random_repeats = parse_size(value, key);
  else if (key == "eval.remove_k") e.remove_k = parse_size(value, key);
  else if (key == "output.dir") rc.out_dir = value;
  else throw ConfigError("unknown configuration key '" + key + "'");
}

// `key=value` with a dotted key, as given to --set.
inline void apply_override(RunConfig& rc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  apply_run_key(rc, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void parse_run_config(RunConfig& rc, std::istream& in) {
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", lineno);
      section = detail::trim(line.substr(1, line.size() - 2));
      static const char* known[] = {"model", "attention", "train", "data", "synth", "eval", "output"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known)) {
        throw ConfigError("unknown section [" + section + "]", lineno);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", lineno);
    if (section.empty()) throw ConfigError("key outside of a section", lineno);
    const std::string key = section + "." + detail::trim(line.substr(0, eq));
    try {
      apply_run_key(rc, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), lineno);
    }
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  parse_run_config(rc, in);
  return rc;
}

// Fully resolved configuration in the file format; parsing it back yields the same run.
inline std::string format_run_config(const RunConfig& rc) {
  using namespace detail;
  std::ostringstream os;
  std::string current;
  auto put = [&](const std::string& key, const std::string& value) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != current) {
      os << (current.empty() ? "" : "\n") << "[" << sec << "]\n";
      current = sec;
    }
    os << key.substr(dot + 1) << " = " << value << "\n";
  };
  for (const auto& [k, v] : model_config_entries(rc.model)) put(k, v);
  const TrainConfig& t = rc.train;
  put("train.lr0", num(t.lr0));
  put("train.weight_decay", num(t.weight_decay));
  put("train.momentum", num(t.momentum));
  put("train.clip_norm", num(t.clip_norm));
  put("train.epochs", std::to_string(t.epochs));
  put("train.batch", std::to_string(t.batch));
  put("train.seed", std::to_string(t.seed));
  put("train.lambda", num(t.lambda));
  put("train.val_fraction", num(t.val_fraction));
  put("train.test_fraction", num(t.test_fraction));
  put("train.flip", flag(t.augment.flip));
  put("train.rotation", flag(t.augment.rotation));
  put("train.rotation_deg", num(t.augment.rotation_deg));
  put("train.crop", flag(t.augment.crop));
  put("train.crop_px", std::to_string(t.augment.crop_px));
  put("train.brightness", flag(t.augment.brightness));
  put("data.source", rc.source == DataSource::synth ? "synth" : "dir");
  put("data.path", rc.data_path);
  const SynthSpec& s = rc.synth;
  put("synth.count", std::to_string(s.count));
  put("synth.image_size", std::to_string(s.image_size));
  put("synth.classes", std::to_string(s.classes));
  std::vector<std::string> ranges;
  for (const auto& [lo, hi] : s.resolved_counts()) ranges.push_back(std::to_string(lo) + "-" + std::to_string(hi));
  put("synth.lesion_counts", join(ranges));
  put("synth.radius_min", num(s.radius_min));
  put("synth.radius_max", num(s.radius_max));
  put("synth.radius_step", num(s.radius_step));
  put("synth.noise", num(s.noise));
  std::vector<std::string> props;
  for (double p : s.proportions) props.push_back(num(p));
  put("synth.proportions", props.empty() ? "uniform" : join(props));
  put("synth.seed", std::to_string(s.seed));
  const EvalConfig& e = rc.eval;
  put("eval.metric", e.metric);
  put("eval.kappa_weights", to_string(e.kappa_weights));
  put("eval.resamples", std::to_string(e.resamples));
  put("eval.seed", std::to_string(e.seed));
  put("eval.patch", e.patch ? std::to_string(e.patch) : "auto");
  put("eval.protocol", to_string(e.protocol));
  put("eval.grade", std::to_string(e.grade));
  put("eval.lesion_types", e.lesion_types.empty() ? "all" : join(e.lesion_types));
  put("eval.diseased_only", flag(e.diseased_only));
  put("eval.random_repeats", std::to_string(e.random_repeats));
  put("eval.remove_k", std::to_string(e.remove_k));
  put("output.dir", rc.out_dir);
  return os.str();
}

// --seed: one value for every seed in the run.
inline void apply_global_seed(RunConfig& rc, std::uint64_t seed) {
  rc.model.backbone.seed = seed;
  rc.train.seed = seed;
  rc.synth.seed = seed;
  rc.eval.seed = seed;
}

}  // namespace hyb
