#pragma once

// Plain configuration records for every model component.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "evl/error.hpp"

namespace evl {

enum class BlockPlacement { all, last_two, list };
enum class LoraMode { fused, per_head };

struct LoraTargets {
  bool query = true;
  bool key = true;
  bool value = true;

  std::size_t count() const { return std::size_t(query) + std::size_t(key) + std::size_t(value); }
};

/// Which encoder blocks and projections receive adapters, and their rank.
/// rank == 0 disables adaptation.
struct LoraPlacement {
  std::size_t rank = 4;
  BlockPlacement blocks = BlockPlacement::all;
  std::vector<std::size_t> block_list; // used when blocks == list
  LoraTargets targets;
  LoraMode mode = LoraMode::fused;
  double init_std = 0.02;

  /// Per-block flag for an encoder of the given depth.
  std::vector<bool> active_blocks(std::size_t depth) const {
    std::vector<bool> on(depth, false);
    if (rank == 0) return on;
    switch (blocks) {
    case BlockPlacement::all:
      on.assign(depth, true);
      break;
    case BlockPlacement::last_two:
      for (std::size_t i = depth >= 2 ? depth - 2 : 0; i < depth; ++i) on[i] = true;
      break;
    case BlockPlacement::list:
      for (auto b : block_list) {
        if (b >= depth) {
          throw ConfigError("lora block index " + std::to_string(b) + " outside encoder depth " +
                            std::to_string(depth));
        }
        on[b] = true;
      }
      break;
    }
    return on;
  }
};

struct ViTConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t d_model = 768;
  std::size_t n_heads = 12;
  std::size_t depth = 12;
  std::size_t mlp_hidden = 3072;
  std::size_t head_hidden = 256;
  std::size_t n_classes = 3;
  double head_dropout = 0.0;
  double ln_eps = 1e-6;
  /// Pretrained-equivalent weights frozen (the adaptation setting).
  bool frozen = true;
  LoraPlacement lora;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid() + 1; }
  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("vit.image_size (" + std::to_string(image_size) +
                        ") must be a positive multiple of vit.patch_size (" + std::to_string(patch_size) + ")");
    }
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
      throw ConfigError("vit.d_model (" + std::to_string(d_model) + ") must be divisible by vit.n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (mlp_hidden == 0 || head_hidden == 0 || n_classes == 0) {
      throw ConfigError("vit.mlp_hidden, vit.head_hidden and vit.n_classes must be positive");
    }
    (void)lora.active_blocks(depth);
  }

  /// ViT-B/16 with the 256-unit three-class head and rank-4 adapters.
  static ViTConfig full() { return ViTConfig{}; }

  static ViTConfig toy() {
    ViTConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.d_model = 64;
    c.n_heads = 4;
    c.depth = 2;
    c.mlp_hidden = 128;
    c.head_hidden = 32;
    return c;
  }
};

enum class BlockKind { fused_mbconv, mbconv };

struct StageSpec {
  BlockKind kind = BlockKind::mbconv;
  std::size_t repeats = 1;
  std::size_t stride = 1; // of the first block
  std::size_t channels = 16;
  std::size_t expansion = 4;
  std::size_t se_reduction = 4; // mbconv only; 0 disables SE
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  /// Input is bilinearly resized to this square extent before the stem
  /// (0 keeps the incoming resolution).
  std::size_t input_size = 0;
  std::size_t stem_channels = 24;
  std::size_t stem_stride = 2;
  std::vector<StageSpec> stages;
  std::size_t tap_stage = 0; // index into stages
  std::size_t tap_block = 0; // index within the tap stage
  bool frozen = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-3;

  std::size_t tap_channels() const { return stages.at(tap_stage).channels; }

  void validate() const {
    if (stages.empty()) throw ConfigError("backbone needs at least one stage");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto &s = stages[i];
      if (s.stride != 1 && s.stride != 2) {
        throw ConfigError("backbone stage " + std::to_string(i) + ": stride must be 1 or 2");
      }
      if (s.channels == 0 || s.repeats == 0 || s.expansion == 0) {
        throw ConfigError("backbone stage " + std::to_string(i) + ": channels, repeats and expansion must be positive");
      }
    }
    if (stem_stride != 1 && stem_stride != 2) throw ConfigError("backbone stem stride must be 1 or 2");
    if (tap_stage >= stages.size() || tap_block >= stages[tap_stage].repeats) {
      throw ConfigError("backbone tap (stage " + std::to_string(tap_stage) + ", block " + std::to_string(tap_block) +
                        ") is unreachable");
    }
  }

  /// Spatial extent of the tap for a square input of the given size.
  std::size_t tap_extent(std::size_t input) const {
    std::size_t s = input_size ? input_size : input;
    auto down = [](std::size_t x, std::size_t stride) { return stride == 1 ? x : (x + 1) / 2; };
    s = down(s, stem_stride);
    for (std::size_t i = 0; i <= tap_stage; ++i) s = down(s, stages[i].stride);
    return s;
  }

  /// EfficientNetV2-S stage table up to the 256-channel MBConv stage, tapped
  /// at its 15th block. Inputs are resized to 384 so the /32 tap is 12x12.
  static BackboneConfig full() {
    BackboneConfig c;
    c.input_size = 384;
    c.stem_channels = 24;
    c.stem_stride = 2;
    c.stages = {
        {BlockKind::fused_mbconv, 2, 1, 24, 1, 0},
        {BlockKind::fused_mbconv, 4, 2, 48, 4, 0},
        {BlockKind::fused_mbconv, 4, 2, 64, 4, 0},
        {BlockKind::mbconv, 6, 2, 128, 4, 4},
        {BlockKind::mbconv, 9, 1, 160, 6, 4},
        {BlockKind::mbconv, 15, 2, 256, 6, 4},
    };
    c.tap_stage = 5;
    c.tap_block = 14;
    return c;
  }

  /// Two fused and two MBConv stages; strides 2,2 give an 8x8 tap on 32x32.
  static BackboneConfig toy() {
    BackboneConfig c;
    c.stem_channels = 8;
    c.stem_stride = 1;
    c.stages = {
        {BlockKind::fused_mbconv, 1, 1, 8, 1, 0},
        {BlockKind::fused_mbconv, 1, 2, 16, 4, 0},
        {BlockKind::mbconv, 1, 2, 24, 4, 4},
        {BlockKind::mbconv, 1, 1, 32, 4, 4},
    };
    c.tap_stage = 3;
    c.tap_block = 0;
    return c;
  }
};

enum class UpsampleKind { bilinear, nearest };

struct BridgeConfig {
  std::size_t in_channels = 256;
  std::size_t out_channels = 3;
  std::size_t target_size = 224;
  UpsampleKind upsample = UpsampleKind::bilinear;
  bool bias = true;
};

enum class ModelKind { vitlora, effnet, hybrid };

inline const char *to_string(ModelKind k) {
  switch (k) {
  case ModelKind::vitlora: return "vitlora";
  case ModelKind::effnet: return "effnet";
  case ModelKind::hybrid: return "hybrid";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string &s) {
  if (s == "vitlora") return ModelKind::vitlora;
  if (s == "effnet") return ModelKind::effnet;
  if (s == "hybrid") return ModelKind::hybrid;
  throw ConfigError("unknown model '" + s + "' (expected vitlora, effnet or hybrid)");
}

/// Full architectural description of one of the three classifiers.
struct ModelConfig {
  ModelKind kind = ModelKind::hybrid;
  ViTConfig vit;
  BackboneConfig backbone;
  BridgeConfig bridge;
  /// Square input image extent fed to the model.
  std::size_t image_size = 224;
  std::size_t n_classes = 3;

  /// Derives dependent fields (bridge widths, class counts) and validates.
  void resolve() {
    vit.n_classes = n_classes;
    if (kind != ModelKind::effnet) vit.validate();
    if (kind != ModelKind::vitlora) backbone.validate();
    if (kind == ModelKind::vitlora && image_size != vit.image_size) {
      throw ConfigError("vitlora input size " + std::to_string(image_size) + " differs from vit.image_size " +
                        std::to_string(vit.image_size) + "; positional embeddings are not interpolated");
    }
    if (kind == ModelKind::hybrid) {
      bridge.in_channels = backbone.tap_channels();
      bridge.out_channels = 3;
      bridge.target_size = vit.image_size;
      const std::size_t tap = backbone.tap_extent(image_size);
      if (tap > bridge.target_size) {
        throw ConfigError("backbone tap extent " + std::to_string(tap) + " exceeds bridge target " +
                          std::to_string(bridge.target_size));
      }
    }
  }

  static ModelConfig full(ModelKind kind) {
    ModelConfig c;
    c.kind = kind;
    c.vit = ViTConfig::full();
    c.backbone = BackboneConfig::full();
    c.backbone.frozen = kind == ModelKind::hybrid;
    c.image_size = 224;
    c.resolve();
    return c;
  }

  static ModelConfig toy(ModelKind kind) {
    ModelConfig c;
    c.kind = kind;
    c.vit = ViTConfig::toy();
    c.backbone = BackboneConfig::toy();
    c.backbone.frozen = kind == ModelKind::hybrid;
    c.image_size = 32;
    c.resolve();
    return c;
  }
};

} // namespace evl
