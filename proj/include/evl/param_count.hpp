#pragma once

// Closed-form parameter accounting from a configuration alone; no tensors
// are allocated, so full-size counts are instant.

#include <cstddef>

#include "evl/config.hpp"
#include "evl/nn.hpp"

namespace evl {

struct ParamBreakdown {
  std::size_t lora = 0;
  std::size_t head = 0;
  std::size_t bridge = 0;
  std::size_t backbone = 0; // trainable backbone weights (unfrozen only)
  std::size_t vit = 0;      // trainable ViT base weights (unfrozen only)
  std::size_t total = 0;    // trainable
  std::size_t frozen = 0;
};

/// Adapter parameters across the encoder.
inline std::size_t lora_param_count(const ViTConfig &vit) {
  const auto &pl = vit.lora;
  const auto active = pl.active_blocks(vit.depth);
  std::size_t blocks = 0;
  for (bool on : active) blocks += on ? 1 : 0;
  const std::size_t d = vit.d_model;
  const std::size_t per_projection =
      pl.mode == LoraMode::fused ? pl.rank * (d + d) : vit.n_heads * pl.rank * (d + vit.d_head());
  return blocks * pl.targets.count() * per_projection;
}

/// Pretrained-equivalent ViT weights (patch projection, CLS, positions,
/// encoder blocks).
inline std::size_t vit_base_param_count(const ViTConfig &vit) {
  const std::size_t d = vit.d_model, m = vit.mlp_hidden;
  const std::size_t patch = 3 * vit.patch_size * vit.patch_size * d + d;
  const std::size_t embed = patch + d + vit.tokens() * d;
  const std::size_t block = 2 * (2 * d)    // two layer norms
                            + 4 * (d * d + d) // q, k, v, out
                            + (d * m + m) + (m * d + d);
  return embed + vit.depth * block;
}

inline std::size_t vit_head_param_count(const ViTConfig &vit) {
  return vit.d_model * vit.head_hidden + vit.head_hidden + vit.head_hidden * vit.n_classes + vit.n_classes;
}

/// One backbone block with input width `cin` (convolutions bias-free, each
/// followed by a batch norm with scale and shift).
inline std::size_t block_param_count(const StageSpec &spec, std::size_t cin) {
  const std::size_t mid = cin * spec.expansion;
  const std::size_t cout = spec.channels;
  std::size_t n = 0;
  if (spec.kind == BlockKind::fused_mbconv) {
    n += 9 * cin * mid + 2 * mid;
  } else {
    n += cin * mid + 2 * mid; // 1x1 expand
    n += 9 * mid + 2 * mid;   // depthwise 3x3
    if (spec.se_reduction) {
      const std::size_t r = SqueezeExcite<double>::reduced_width(mid, spec.se_reduction);
      n += mid * r + r + r * mid + mid;
    }
  }
  n += mid * cout + 2 * cout; // 1x1 project
  return n;
}

/// Stem plus every block up to and including the tap.
inline std::size_t backbone_param_count(const BackboneConfig &bb) {
  std::size_t n = 9 * bb.in_channels * bb.stem_channels + 2 * bb.stem_channels;
  std::size_t cin = bb.stem_channels;
  for (std::size_t s = 0; s <= bb.tap_stage && s < bb.stages.size(); ++s) {
    const auto &spec = bb.stages[s];
    const std::size_t count = s == bb.tap_stage ? bb.tap_block + 1 : spec.repeats;
    for (std::size_t b = 0; b < count; ++b) {
      n += block_param_count(spec, cin);
      cin = spec.channels;
    }
  }
  return n;
}

inline std::size_t bridge_param_count(const BridgeConfig &br) {
  return br.out_channels * br.in_channels + (br.bias ? br.out_channels : 0);
}

/// Exact trainable/frozen split for a model configuration.
inline ParamBreakdown count_trainable(ModelConfig cfg) {
  cfg.resolve();
  ParamBreakdown out;
  std::size_t all = 0;
  if (cfg.kind != ModelKind::effnet) {
    out.lora = lora_param_count(cfg.vit);
    out.head = vit_head_param_count(cfg.vit);
    const std::size_t base = vit_base_param_count(cfg.vit);
    out.vit = cfg.vit.frozen ? 0 : base;
    all += out.lora + out.head + base;
  }
  if (cfg.kind != ModelKind::vitlora) {
    const std::size_t bb = backbone_param_count(cfg.backbone);
    out.backbone = cfg.backbone.frozen ? 0 : bb;
    all += bb;
  }
  if (cfg.kind == ModelKind::effnet) {
    out.head = cfg.backbone.tap_channels() * cfg.n_classes + cfg.n_classes;
    all += out.head;
  }
  if (cfg.kind == ModelKind::hybrid) {
    out.bridge = bridge_param_count(cfg.bridge);
    all += out.bridge;
  }
  out.total = out.lora + out.head + out.bridge + out.backbone + out.vit;
  out.frozen = all - out.total;
  return out;
}

} // namespace evl
