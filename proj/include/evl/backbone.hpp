#pragma once

// EfficientNetV2-style convolutional feature extractor (Fused-MBConv early
// stages, MBConv + squeeze-excitation late stages) with an intermediate tap.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evl/config.hpp"
#include "evl/nn.hpp"

namespace evl {

/// Bias-free convolution followed by batch norm.
template <class T> class ConvBn {
public:
  ConvBn() = default;
  ConvBn(ParamRegistry<T> &reg, const std::string &name, std::size_t cin, std::size_t cout, std::size_t k,
         std::size_t stride, std::size_t groups, bool trainable, const BackboneConfig &cfg)
      : stride_(stride), pad_(k / 2), groups_(groups) {
    weight = reg.add(name + ".conv.weight", Tensor<T>({cout, cin / groups, k, k}), trainable, "backbone");
    bn = BatchNorm2d<T>(reg, name + ".bn", cout, trainable, "backbone", static_cast<T>(cfg.bn_momentum),
                        static_cast<T>(cfg.bn_eps));
  }

  Var<T> operator()(const Var<T> &x, bool training) const {
    return bn(conv2d(x, weight, Var<T>(), stride_, pad_, groups_), training);
  }

  Var<T> weight;
  BatchNorm2d<T> bn;

private:
  std::size_t stride_ = 1, pad_ = 0, groups_ = 1;
};

/// One Fused-MBConv or MBConv block.
///   fused:  3x3 conv (expand, stride) -> BN -> SiLU -> 1x1 project -> BN
///   mbconv: 1x1 expand -> BN -> SiLU -> 3x3 depthwise (stride) -> BN -> SiLU
///           -> SE -> 1x1 project -> BN
/// Residual add when stride is 1 and widths match.
template <class T> class MBConvBlock {
public:
  MBConvBlock() = default;
  MBConvBlock(ParamRegistry<T> &reg, const std::string &name, BlockKind kind, std::size_t cin, std::size_t cout,
              std::size_t stride, std::size_t expansion, std::size_t se_reduction, bool trainable,
              const BackboneConfig &cfg)
      : kind_(kind), cin_(cin), cout_(cout), stride_(stride) {
    const std::size_t mid = cin * expansion;
    if (kind == BlockKind::fused_mbconv) {
      expand = ConvBn<T>(reg, name + ".expand", cin, mid, 3, stride, 1, trainable, cfg);
    } else {
      expand = ConvBn<T>(reg, name + ".expand", cin, mid, 1, 1, 1, trainable, cfg);
      depthwise = ConvBn<T>(reg, name + ".depthwise", mid, mid, 3, stride, mid, trainable, cfg);
      if (se_reduction) se = SqueezeExcite<T>(reg, name + ".se", mid, se_reduction, trainable, "backbone");
    }
    project = ConvBn<T>(reg, name + ".project", mid, cout, 1, 1, 1, trainable, cfg);
  }

  bool residual() const { return stride_ == 1 && cin_ == cout_; }
  BlockKind kind() const { return kind_; }

  Var<T> operator()(const Var<T> &x, bool training) const {
    Var<T> h = silu(expand(x, training));
    if (kind_ == BlockKind::mbconv) {
      h = silu(depthwise(h, training));
      if (se) h = (*se)(h);
    }
    h = project(h, training);
    return residual() ? add(h, x) : h;
  }

  ConvBn<T> expand, depthwise, project;
  std::optional<SqueezeExcite<T>> se;

private:
  BlockKind kind_ = BlockKind::mbconv;
  std::size_t cin_ = 0, cout_ = 0, stride_ = 1;
};

/// Parameter group "backbone". Runs the stem and stages up to the tap and
/// returns the tap activation [N, C_tap, h, w].
template <class T> class Backbone {
public:
  Backbone(ParamRegistry<T> &reg, const BackboneConfig &cfg, std::uint64_t seed) : cfg_(cfg), reg_(&reg) {
    cfg_.validate();
    const bool trainable = !cfg_.frozen;
    stem_ = ConvBn<T>(reg, "backbone.stem", cfg_.in_channels, cfg_.stem_channels, 3, cfg_.stem_stride, 1, trainable,
                      cfg_);
    std::size_t cin = cfg_.stem_channels;
    for (std::size_t s = 0; s <= cfg_.tap_stage; ++s) {
      const auto &spec = cfg_.stages[s];
      std::vector<MBConvBlock<T>> stage;
      const std::size_t count = s == cfg_.tap_stage ? cfg_.tap_block + 1 : spec.repeats;
      for (std::size_t b = 0; b < count; ++b) {
        const std::string name = "backbone.stages." + std::to_string(s) + "." + std::to_string(b);
        stage.emplace_back(reg, name, spec.kind, cin, spec.channels, b == 0 ? spec.stride : 1, spec.expansion,
                           spec.se_reduction, trainable, cfg_);
        cin = spec.channels;
      }
      stages_.push_back(std::move(stage));
    }
    load_pseudo_pretrained(seed);
  }

  Backbone(const Backbone &) = delete;
  Backbone &operator=(const Backbone &) = delete;

  /// Seeded stand-in for pretrained weights: He-normal convolutions, unit BN
  /// scales, zero shifts, running statistics (0, 1).
  void load_pseudo_pretrained(std::uint64_t seed) {
    for (auto &e : reg_->entries()) {
      if (e.group != "backbone") continue;
      const std::string &n = e.name;
      auto ends_with = [&](const std::string &s) {
        return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
      };
      if (ends_with(".gamma")) {
        e.var.mutable_value().fill(T(1));
      } else if (ends_with(".beta") || ends_with(".bias")) {
        e.var.mutable_value().fill(T(0));
      } else {
        const auto &s = e.var.shape();
        // conv [Cout, Cin/g, k, k]; linear (SE) [in, out]
        const double fan_in = s.size() == 4 ? static_cast<double>(s[1] * s[2] * s[3]) : static_cast<double>(s[0]);
        double gain = 2.0;
        if (n.find(".project.") != std::string::npos) gain = 0.5; // keeps residual sums bounded
        auto rng = stream_for(seed, n);
        fill_normal(e.var, rng, std::sqrt(gain / fan_in));
      }
    }
    for (auto &[name, buf] : reg_->buffers()) {
      if (name.rfind("backbone.", 0) != 0) continue;
      buf->fill(name.ends_with(".running_var") ? T(1) : T(0));
    }
  }

  /// [N, C, S, S] images to the tap activation. A frozen backbone always runs
  /// batch norm in inference mode.
  Var<T> operator()(const Var<T> &images, bool training) const {
    if (images.shape().size() != 4 || images.dim(1) != cfg_.in_channels) {
      throw ValidationError("backbone: expected images [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                            shape_str(images.shape()));
    }
    const bool bn_train = training && !cfg_.frozen;
    Var<T> x = images;
    if (cfg_.input_size && (x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size)) {
      x = upsample(x, cfg_.input_size, cfg_.input_size, UpsampleMode::bilinear);
    }
    x = silu(stem_(x, bn_train));
    if (audit) audit(0, x.shape());
    std::size_t k = 1;
    for (const auto &stage : stages_) {
      for (const auto &block : stage) x = block(x, bn_train);
      if (audit) audit(k++, x.shape());
    }
    return x;
  }

  const BackboneConfig &config() const { return cfg_; }
  std::vector<std::vector<MBConvBlock<T>>> &stages() { return stages_; }
  ConvBn<T> &stem() { return stem_; }

  /// (stage boundary index, activation shape); 0 is the stem output.
  std::function<void(std::size_t, const Shape &)> audit;

private:
  BackboneConfig cfg_;
  ParamRegistry<T> *reg_;
  ConvBn<T> stem_;
  std::vector<std::vector<MBConvBlock<T>>> stages_;
};

} // namespace evl
