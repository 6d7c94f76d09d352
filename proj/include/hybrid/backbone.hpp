#pragma once

// Convolutional feature extractors and receptive-field accounting.
//
// bagnet_mini keeps every 3x3 conv at stride 1 or 2 early so the receptive
// field stays around 11 px; resnet_mini stacks strided residual blocks and
// reaches 45 px. Both end with `feature_dim` channels.

#include <cstddef>
#include <string>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/ops.hpp"
#include "hybrid/param.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"

namespace hyb {

enum class BackboneKind { bagnet_mini, resnet_mini };

inline std::string to_string(BackboneKind k) { return k == BackboneKind::bagnet_mini ? "bagnet_mini" : "resnet_mini"; }

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "bagnet_mini") return BackboneKind::bagnet_mini;
  if (s == "resnet_mini") return BackboneKind::resnet_mini;
  throw ConfigError("unknown backbone kind '" + s + "' (expected bagnet_mini or resnet_mini)");
}

// With residual set, the spec describes a basic block: conv(k, stride) then
// conv(k, 1), summed with an identity or 1x1-projection shortcut.
struct LayerSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t out_channels = 0;
  bool residual = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ReceptiveGeometry {
  std::size_t size = 1;    // receptive field, px
  std::size_t jump = 1;    // product of strides
  double start = 0.0;      // input coordinate of output position 0's centre
};

inline ReceptiveGeometry receptive_geometry(const std::vector<LayerSpec>& specs) {
  ReceptiveGeometry g;
  auto step = [&g](std::size_t k, std::size_t s, std::size_t p) {
    g.size += (k - 1) * g.jump;
    g.start += ((static_cast<double>(k) - 1.0) / 2.0 - static_cast<double>(p)) * static_cast<double>(g.jump);
    g.jump *= s;
  };
  for (const auto& l : specs) {
    step(l.kernel, l.stride, l.padding);
    if (l.residual) step(l.kernel, 1, l.padding);
  }
  return g;
}

// RF <- RF + (k - 1) * jump; jump <- jump * s.
inline std::size_t receptive_field(const std::vector<LayerSpec>& specs) {
  if (specs.empty()) throw ConfigError("receptive_field: empty layer list");
  return receptive_geometry(specs).size;
}

// Main path of BagNet-33 (ResNet-50 layout, 3x3 only in the first block of
// each stage, strides 2,2,2,1, no stem pooling).
inline std::vector<LayerSpec> bagnet33_layer_specs() {
  std::vector<LayerSpec> v{{1, 1, 0, 64, false}, {3, 1, 0, 64, false}};
  const std::size_t blocks[4] = {3, 4, 6, 3};
  const std::size_t strides[4] = {2, 2, 2, 1};
  const std::size_t width[4] = {64, 128, 256, 512};
  for (int s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < blocks[s]; ++b) {
      const bool first = b == 0;
      v.push_back({1, 1, 0, width[s], false});
      v.push_back({first ? 3u : 1u, first ? strides[s] : 1u, 0, width[s], false});
      v.push_back({1, 1, 0, width[s] * 4, false});
    }
  }
  return v;
}

// Main path of ResNet-50 (stride on the 3x3 conv of each stage's first block).
inline std::vector<LayerSpec> resnet50_layer_specs() {
  std::vector<LayerSpec> v{{7, 2, 3, 64, false}, {3, 2, 1, 64, false} /* max pool */};
  const std::size_t blocks[4] = {3, 4, 6, 3};
  const std::size_t strides[4] = {1, 2, 2, 2};
  const std::size_t width[4] = {64, 128, 256, 512};
  for (int s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < blocks[s]; ++b) {
      v.push_back({1, 1, 0, width[s], false});
      v.push_back({3, b == 0 ? strides[s] : 1u, 1, width[s], false});
      v.push_back({1, 1, 0, width[s] * 4, false});
    }
  }
  return v;
}

inline std::vector<LayerSpec> default_layer_specs(BackboneKind kind, std::size_t feature_dim) {
  if (kind == BackboneKind::bagnet_mini) {
    return {{3, 1, 1, 8, false},  {1, 1, 0, 8, false},  {3, 1, 1, 8, false},  {1, 1, 0, 8, false},
            {3, 1, 1, 8, false},  {1, 2, 0, 16, false}, {3, 1, 1, feature_dim, false}, {1, 2, 0, feature_dim, false}};
  }
  return {{3, 1, 1, 16, false}, {3, 2, 1, 16, true}, {3, 2, 1, feature_dim, true}, {3, 2, 1, feature_dim, true}};
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::bagnet_mini;
  std::size_t in_channels = 3;
  std::size_t feature_dim = 32;
  std::vector<LayerSpec> layers;  // empty: default_layer_specs(kind, feature_dim)
  std::size_t input_size = 64;    // documented input extent used for validation
  std::uint64_t seed = 0;

  std::vector<LayerSpec> resolved_layers() const {
    return layers.empty() ? default_layer_specs(kind, feature_dim) : layers;
  }
};

template <class T>
struct FeatureMap {
  Tensor<T> z;  // (n, D, M, N)
  std::size_t stride_to_input = 1;
  std::size_t receptive_field_px = 1;
};

template <class T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, ParamStore<T>& store, Rng& rng, const std::string& prefix = "backbone")
      : cfg_(cfg), specs_(cfg.resolved_layers()) {
    if (specs_.empty()) throw ConfigError("backbone: no layers");
    if (cfg.feature_dim == 0) throw ConfigError("backbone: feature_dim must be positive");
    if (specs_.back().out_channels != cfg.feature_dim) {
      throw ConfigError("backbone: last layer has " + std::to_string(specs_.back().out_channels) +
                        " channels but feature_dim is " + std::to_string(cfg.feature_dim));
    }
    std::size_t in = cfg.in_channels;
    std::size_t extent = cfg.input_size;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const LayerSpec& s = specs_[i];
      if (s.kernel == 0 || s.stride == 0 || s.out_channels == 0) {
        throw ConfigError("backbone layer " + std::to_string(i) + ": kernel, stride and channels must be positive");
      }
      auto next = [&](std::size_t e, std::size_t stride) -> std::size_t {
        if (e + 2 * s.padding < s.kernel) {
          throw ConfigError("backbone layer " + std::to_string(i) + ": spatial extent becomes non-positive for input size " +
                            std::to_string(cfg.input_size));
        }
        return (e + 2 * s.padding - s.kernel) / stride + 1;
      };
      extent = next(extent, s.stride);
      if (s.residual) extent = next(extent, 1);

      const std::string base = prefix + ".layer" + std::to_string(i);
      Layer L;
      L.spec = s;
      const std::size_t k = s.kernel;
      if (!s.residual) {
        L.w1 = store.he_uniform(base + ".conv.weight", {s.out_channels, in, k, k}, in * k * k, rng);
        L.scale1 = store.constant(base + ".affine.scale", {s.out_channels, 1, 1, 1}, T(1));
        L.shift1 = store.zeros(base + ".affine.shift", {s.out_channels, 1, 1, 1});
      } else {
        L.w1 = store.he_uniform(base + ".conv1.weight", {s.out_channels, in, k, k}, in * k * k, rng);
        L.scale1 = store.constant(base + ".affine1.scale", {s.out_channels, 1, 1, 1}, T(1));
        L.shift1 = store.zeros(base + ".affine1.shift", {s.out_channels, 1, 1, 1});
        L.w2 = store.he_uniform(base + ".conv2.weight", {s.out_channels, s.out_channels, k, k}, s.out_channels * k * k, rng);
        L.scale2 = store.constant(base + ".affine2.scale", {s.out_channels, 1, 1, 1}, T(1));
        L.shift2 = store.zeros(base + ".affine2.shift", {s.out_channels, 1, 1, 1});
        L.projection = s.stride != 1 || in != s.out_channels;
        if (L.projection) {
          L.ws = store.he_uniform(base + ".shortcut.weight", {s.out_channels, in, 1, 1}, in, rng);
          L.scale_s = store.constant(base + ".shortcut_affine.scale", {s.out_channels, 1, 1, 1}, T(1));
          L.shift_s = store.zeros(base + ".shortcut_affine.shift", {s.out_channels, 1, 1, 1});
        }
      }
      layers_.push_back(std::move(L));
      in = s.out_channels;
    }
    if (extent == 0) throw ConfigError("backbone: zero-size feature map");
    geometry_ = receptive_geometry(specs_);
    output_extent_ = extent;
  }

  FeatureMap<T> forward(const Tensor<T>& x) const {
    if (x.shape().c != cfg_.in_channels) {
      throw ShapeError("backbone: input has " + std::to_string(x.shape().c) + " channels, config expects " +
                       std::to_string(cfg_.in_channels));
    }
    const Tensor<T>* const kNoBias = nullptr;
    Tensor<T> h = x;
    for (const Layer& L : layers_) {
      const Conv2dOptions o1{L.spec.stride, L.spec.padding};
      if (!L.spec.residual) {
        h = relu(affine(conv2d(h, L.w1, kNoBias, o1), L.scale1, L.shift1));
        continue;
      }
      Tensor<T> main = relu(affine(conv2d(h, L.w1, kNoBias, o1), L.scale1, L.shift1));
      main = affine(conv2d(main, L.w2, kNoBias, {1, L.spec.padding}), L.scale2, L.shift2);
      Tensor<T> shortcut = L.projection ? affine(conv2d(h, L.ws, kNoBias, {L.spec.stride, 0}), L.scale_s, L.shift_s) : h;
      h = relu(add(main, shortcut));
    }
    return {h, geometry_.jump, geometry_.size};
  }

  const BackboneConfig& config() const noexcept { return cfg_; }
  const std::vector<LayerSpec>& layer_specs() const noexcept { return specs_; }
  std::size_t stride_to_input() const noexcept { return geometry_.jump; }
  std::size_t receptive_field_px() const noexcept { return geometry_.size; }
  const ReceptiveGeometry& geometry() const noexcept { return geometry_; }
  // Feature-map extent for a square input of cfg.input_size.
  std::size_t output_extent() const noexcept { return output_extent_; }

 private:
  struct Layer {
    LayerSpec spec;
    Tensor<T> w1, scale1, shift1;
    Tensor<T> w2, scale2, shift2;
    Tensor<T> ws, scale_s, shift_s;
    bool projection = false;
  };

  static Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
    return depthwise_conv2d(x, scale, &shift);
  }

  BackboneConfig cfg_;
  std::vector<LayerSpec> specs_;
  std::vector<Layer> layers_;
  ReceptiveGeometry geometry_;
  std::size_t output_extent_ = 0;
};

}  // namespace hyb
