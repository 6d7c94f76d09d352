#pragma once

// The full classifier: backbone -> dual-resolution attention -> evidence head.

#include <cctype>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hybrid/attention.hpp"
#include "hybrid/backbone.hpp"
#include "hybrid/errors.hpp"
#include "hybrid/evidence.hpp"
#include "hybrid/param.hpp"
#include "hybrid/rng.hpp"

namespace hyb {

struct ModelConfig {
  BackboneConfig backbone;
  AttentionConfig attention;
  std::size_t classes = 3;
  bool window_auto = true;  // window_size follows the backbone kind (10 bagnet, 8 resnet)

  ModelConfig resolved() const {
    ModelConfig r = *this;
    if (window_auto) r.attention.window_size = backbone.kind == BackboneKind::bagnet_mini ? 10 : 8;
    r.window_auto = false;
    if (r.backbone.layers.empty()) r.backbone.layers = default_layer_specs(backbone.kind, backbone.feature_dim);
    return r;
  }
};

// "k3s1p1c8" per layer, comma separated; a leading 'r' marks a residual block.
inline std::string format_layer_specs(const std::vector<LayerSpec>& specs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& l = specs[i];
    if (i) os << ',';
    os << (l.residual ? "r" : "") << 'k' << l.kernel << 's' << l.stride << 'p' << l.padding << 'c' << l.out_channels;
  }
  return os.str();
}

inline std::vector<LayerSpec> parse_layer_specs(const std::string& text) {
  std::vector<LayerSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (item.empty()) continue;
    LayerSpec l;
    std::size_t pos = 0;
    if (item[pos] == 'r') {
      l.residual = true;
      ++pos;
    }
    auto field = [&](char tag) -> std::size_t {
      if (pos >= item.size() || item[pos] != tag) throw ConfigError("layer spec '" + item + "': expected '" + tag + "'");
      ++pos;
      const std::size_t start = pos;
      while (pos < item.size() && std::isdigit(static_cast<unsigned char>(item[pos]))) ++pos;
      if (start == pos) throw ConfigError("layer spec '" + item + "': missing number after '" + tag + "'");
      return std::stoul(item.substr(start, pos - start));
    };
    l.kernel = field('k');
    l.stride = field('s');
    l.padding = field('p');
    l.out_channels = field('c');
    if (pos != item.size()) throw ConfigError("layer spec '" + item + "': trailing characters");
    out.push_back(l);
  }
  if (out.empty()) throw ConfigError("layer spec list is empty");
  return out;
}

// Architecture keys, in canonical order. The checkpoint digest hashes exactly this text.
inline std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& cfg) {
  const ModelConfig r = cfg.resolved();
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"model.backbone", to_string(r.backbone.kind)},
      {"model.in_channels", std::to_string(r.backbone.in_channels)},
      {"model.feature_dim", std::to_string(r.backbone.feature_dim)},
      {"model.classes", std::to_string(r.classes)},
      {"model.image_size", std::to_string(r.backbone.input_size)},
      {"model.layers", format_layer_specs(r.backbone.layers)},
      {"model.seed", std::to_string(r.backbone.seed)},
      {"attention.window_size", std::to_string(r.attention.window_size)},
      {"attention.reduction", std::to_string(r.attention.reduction)},
      {"attention.scale", r.attention.scale > 0.0 ? num(r.attention.scale) : "auto"},
      {"attention.gdfn_expansion", num(r.attention.gdfn_expansion)},
      {"attention.attn_depth", std::to_string(r.attention.depth)},
      {"attention.norm", r.attention.norm ? "true" : "false"},
  };
}

inline std::string canonical_model_config(const ModelConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : model_config_entries(cfg)) s += k + "=" + v + "\n";
  return s;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t model_config_digest(const ModelConfig& cfg) { return fnv1a64(canonical_model_config(cfg)); }

namespace detail {
inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "': expected a boolean, got '" + v + "'");
}
inline std::size_t parse_size(const std::string& v, const std::string& key) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "': expected an integer, got '" + v + "'");
  }
  if (used != v.size() || x < 0) throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}
inline double parse_double(const std::string& v, const std::string& key) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  return x;
}
}  // namespace detail

// Returns false when the key does not belong to the model configuration.
inline bool apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "model.backbone") {
    cfg.backbone.kind = parse_backbone_kind(value);
  } else if (key == "model.in_channels") {
    cfg.backbone.in_channels = parse_size(value, key);
  } else if (key == "model.feature_dim") {
    cfg.backbone.feature_dim = parse_size(value, key);
  } else if (key == "model.classes") {
    cfg.classes = parse_size(value, key);
  } else if (key == "model.image_size") {
    cfg.backbone.input_size = parse_size(value, key);
  } else if (key == "model.layers") {
    cfg.backbone.layers = value == "default" ? std::vector<LayerSpec>{} : parse_layer_specs(value);
  } else if (key == "model.seed") {
    cfg.backbone.seed = parse_size(value, key);
  } else if (key == "attention.window_size") {
    cfg.window_auto = value == "auto";
    if (!cfg.window_auto) cfg.attention.window_size = parse_size(value, key);
  } else if (key == "attention.reduction") {
    cfg.attention.reduction = parse_size(value, key);
  } else if (key == "attention.scale") {
    cfg.attention.scale = value == "auto" ? 0.0 : parse_double(value, key);
    if (value != "auto" && !(cfg.attention.scale > 0.0)) throw ConfigError("'attention.scale' must be positive or auto");
  } else if (key == "attention.gdfn_expansion") {
    cfg.attention.gdfn_expansion = parse_double(value, key);
  } else if (key == "attention.attn_depth") {
    cfg.attention.depth = parse_size(value, key);
  } else if (key == "attention.norm") {
    cfg.attention.norm = parse_bool(value, key);
  } else {
    return false;
  }
  return true;
}

inline ModelConfig parse_canonical_model_config(const std::string& text) {
  ModelConfig cfg;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("model config echo: malformed line '" + line + "'");
    if (!apply_model_key(cfg, line.substr(0, eq), line.substr(eq + 1))) {
      throw FormatError("model config echo: unknown key '" + line.substr(0, eq) + "'");
    }
  }
  return cfg;
}

template <class T>
class HybridModel {
 public:
  explicit HybridModel(const ModelConfig& cfg)
      : cfg_(cfg.resolved()),
        rng_(derive_seed({cfg_.backbone.seed, 0x6d6f64656cull})),
        backbone_(cfg_.backbone, store_, rng_),
        attention_(cfg_.backbone.feature_dim, cfg_.attention, store_, rng_),
        head_(cfg_.backbone.feature_dim, cfg_.classes, store_, rng_) {}

  HybridModel(const HybridModel&) = delete;
  HybridModel& operator=(const HybridModel&) = delete;

  // One full forward pass; x is (n, in_channels, H, W).
  EvidenceMap<T> forward(const Tensor<T>& x) const {
    ++forward_calls_;
    const FeatureMap<T> z = backbone_.forward(x);
    EvidenceMap<T> e = head_(attention_(z.z));
    e.checkpoint_id = checkpoint_id;
    return e;
  }

  FeatureMap<T> features(const Tensor<T>& x) const { return backbone_.forward(x); }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }
  const Backbone<T>& backbone() const noexcept { return backbone_; }
  const DualResolutionAttention<T>& attention() const noexcept { return attention_; }
  const EvidenceHead<T>& head() const noexcept { return head_; }

  std::size_t forward_count() const noexcept { return forward_calls_; }
  void reset_forward_count() noexcept { forward_calls_ = 0; }

  std::string checkpoint_id;

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  Rng rng_;
  Backbone<T> backbone_;
  DualResolutionAttention<T> attention_;
  EvidenceHead<T> head_;
  mutable std::size_t forward_calls_ = 0;
};

}  // namespace hyb
