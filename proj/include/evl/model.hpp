#pragma once

// The three classifiers behind one interface: ViTLoRA, the EfficientNet-style
// CNN, and the hybrid (backbone tap -> 1x1 bridge -> upsample -> ViTLoRA).

#include <cstdint>
#include <memory>
#include <string>

#include "evl/backbone.hpp"
#include "evl/vit.hpp"

namespace evl {

enum class FeatureLayer { cls, tap, bridged };

inline FeatureLayer parse_feature_layer(const std::string &s) {
  if (s == "cls") return FeatureLayer::cls;
  if (s == "tap") return FeatureLayer::tap;
  if (s == "bridged") return FeatureLayer::bridged;
  throw UsageError("unknown feature layer '" + s + "' (expected cls, tap or bridged)");
}

inline const char *to_string(FeatureLayer f) {
  switch (f) {
  case FeatureLayer::cls: return "cls";
  case FeatureLayer::tap: return "tap";
  case FeatureLayer::bridged: return "bridged";
  }
  return "?";
}

template <class T> class Classifier {
public:
  virtual ~Classifier() = default;

  const ModelConfig &config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  ParamRegistry<T> &params() { return params_; }
  const ParamRegistry<T> &params() const { return params_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  /// Output of the leading frozen part of the network, computed without
  /// tracking. Identity unless the model has a frozen prefix.
  virtual Tensor<T> frozen_prefix(const Tensor<T> &images) { return images; }
  virtual bool has_frozen_prefix() const { return false; }

  /// Logits [N, n_classes] from a frozen_prefix() output.
  virtual Var<T> forward_from_prefix(const Var<T> &prefix) = 0;

  Var<T> forward(const Tensor<T> &images) { return forward_from_prefix(constant(frozen_prefix(images))); }

  /// Flattened per-sample features [N, F] at the given layer.
  virtual Tensor<T> features(FeatureLayer layer, const Tensor<T> &images) = 0;

  virtual void merge_adapters() {}
  virtual void unmerge_adapters() {}

protected:
  Classifier(const ModelConfig &cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {}

  static Tensor<T> flatten(const Var<T> &v) {
    const std::size_t n = v.dim(0);
    return v.value().reshaped({n, v.numel() / n});
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  ParamRegistry<T> params_;
  bool training_ = false;
};

template <class T> class ViTLoRAClassifier final : public Classifier<T> {
public:
  ViTLoRAClassifier(const ModelConfig &cfg, std::uint64_t seed)
      : Classifier<T>(cfg, seed), vit_(this->params_, cfg.vit, seed) {}

  Var<T> forward_from_prefix(const Var<T> &images) override { return vit_.forward(images, this->training_); }

  Tensor<T> features(FeatureLayer layer, const Tensor<T> &images) override {
    if (layer != FeatureLayer::cls) {
      throw UsageError(std::string("feature layer '") + to_string(layer) + "' is not available for vitlora");
    }
    NoGradGuard ng;
    return this->flatten(vit_.cls_features(constant(images)));
  }

  void merge_adapters() override { vit_.merge_adapters(); }
  void unmerge_adapters() override { vit_.unmerge_adapters(); }

  ViTModel<T> &vit() { return vit_; }

private:
  ViTModel<T> vit_;
};

/// Backbone -> global average pool -> linear classifier.
template <class T> class EffNetClassifier final : public Classifier<T> {
public:
  EffNetClassifier(const ModelConfig &cfg, std::uint64_t seed)
      : Classifier<T>(cfg, seed), backbone_(this->params_, cfg.backbone, seed) {
    classifier_ = Linear<T>(this->params_, "head.fc", cfg.backbone.tap_channels(), cfg.n_classes, true, "head");
    auto rng = stream_for(seed, "head");
    classifier_.init_glorot(rng);
  }

  bool has_frozen_prefix() const override { return this->cfg_.backbone.frozen; }

  Tensor<T> frozen_prefix(const Tensor<T> &images) override {
    if (!has_frozen_prefix()) return images;
    NoGradGuard ng;
    return backbone_(constant(images), false).value();
  }

  Var<T> forward_from_prefix(const Var<T> &prefix) override {
    Var<T> tap = has_frozen_prefix() ? prefix : backbone_(prefix, this->training_);
    return classifier_(global_avg_pool(tap));
  }

  Tensor<T> features(FeatureLayer layer, const Tensor<T> &images) override {
    if (layer != FeatureLayer::tap) {
      throw UsageError(std::string("feature layer '") + to_string(layer) + "' is not available for effnet");
    }
    NoGradGuard ng;
    return this->flatten(backbone_(constant(images), false));
  }

  Backbone<T> &backbone() { return backbone_; }

private:
  Backbone<T> backbone_;
  Linear<T> classifier_;
};

/// 1x1 convolution from the tap width to 3 channels, then upsampling to the
/// ViT input extent. Parameter group "bridge".
template <class T> class Bridge {
public:
  Bridge(ParamRegistry<T> &reg, const BridgeConfig &cfg, std::uint64_t seed) : cfg_(cfg) {
    weight = reg.add("bridge.weight", Tensor<T>({cfg.out_channels, cfg.in_channels, 1, 1}), true, "bridge");
    if (cfg.bias) bias = reg.add("bridge.bias", Tensor<T>({cfg.out_channels}), true, "bridge");
    auto rng = stream_for(seed, "bridge");
    fill_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(cfg.in_channels)));
  }

  /// [N, C, h, w] (or [C, h, w]) -> [N, 3, S, S].
  Var<T> operator()(const Var<T> &features) const {
    const std::size_t c_axis = features.shape().size() == 3 ? 0 : 1;
    if (features.shape().size() < 3 || features.dim(c_axis) != cfg_.in_channels) {
      throw DimensionError("bridge: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                           shape_str(features.shape()));
    }
    const auto mode = cfg_.upsample == UpsampleKind::bilinear ? UpsampleMode::bilinear : UpsampleMode::nearest;
    return upsample(conv2d(features, weight, bias, 1, 0, 1), cfg_.target_size, cfg_.target_size, mode);
  }

  const BridgeConfig &config() const { return cfg_; }

  Var<T> weight, bias;

private:
  BridgeConfig cfg_;
};

template <class T> class HybridClassifier final : public Classifier<T> {
public:
  HybridClassifier(const ModelConfig &cfg, std::uint64_t seed)
      : Classifier<T>(cfg, seed), backbone_(this->params_, cfg.backbone, seed), bridge_(this->params_, cfg.bridge, seed),
        vit_(this->params_, cfg.vit, seed) {}

  bool has_frozen_prefix() const override { return this->cfg_.backbone.frozen; }

  Tensor<T> frozen_prefix(const Tensor<T> &images) override {
    if (!has_frozen_prefix()) return images;
    NoGradGuard ng;
    return backbone_(constant(images), false).value();
  }

  Var<T> forward_from_prefix(const Var<T> &prefix) override {
    Var<T> tap = has_frozen_prefix() ? prefix : backbone_(prefix, this->training_);
    return vit_.forward(bridge_(tap), this->training_);
  }

  Tensor<T> features(FeatureLayer layer, const Tensor<T> &images) override {
    NoGradGuard ng;
    Var<T> tap = backbone_(constant(images), false);
    if (layer == FeatureLayer::tap) return this->flatten(tap);
    Var<T> bridged = bridge_(tap);
    if (layer == FeatureLayer::bridged) return this->flatten(bridged);
    return this->flatten(vit_.cls_features(bridged));
  }

  void merge_adapters() override { vit_.merge_adapters(); }
  void unmerge_adapters() override { vit_.unmerge_adapters(); }

  Backbone<T> &backbone() { return backbone_; }
  Bridge<T> &bridge() { return bridge_; }
  ViTModel<T> &vit() { return vit_; }

private:
  Backbone<T> backbone_;
  Bridge<T> bridge_;
  ViTModel<T> vit_;
};

/// Builds a freshly seeded model; identical (config, seed) give bit-identical
/// weights.
template <class T> std::unique_ptr<Classifier<T>> make_model(ModelConfig cfg, std::uint64_t seed) {
  cfg.resolve();
  switch (cfg.kind) {
  case ModelKind::vitlora: return std::make_unique<ViTLoRAClassifier<T>>(cfg, seed);
  case ModelKind::effnet: return std::make_unique<EffNetClassifier<T>>(cfg, seed);
  case ModelKind::hybrid: return std::make_unique<HybridClassifier<T>>(cfg, seed);
  }
  throw ConfigError("unknown model kind");
}

} // namespace evl
