#pragma once

// Low-rank adaptation of frozen linear maps: h = x W + (x B) A, where
// B is [d_in x r] and A is [r x d_out], so the update dW = B A has the shape
// of the base weight. There is no alpha/r scaling.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "evl/config.hpp"
#include "evl/nn.hpp"

namespace evl {

template <class T> struct LoraAdapter {
  Var<T> A; // [r x d_out], seeded Gaussian
  Var<T> B; // [d_in x r], zero at attach
  std::size_t rank = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  bool exceeds_full_rank = false;

  std::size_t trainable_count() const { return rank * (d_in + d_out); }

  /// (x B) A, evaluated as two products so dW is never materialized.
  Var<T> delta(const Var<T> &x) const { return matmul(matmul(x, B), A); }

  /// dW = B A as a dense [d_in x d_out] tensor.
  Tensor<T> delta_weight() const {
    Tensor<T> dw({d_in, d_out});
    kernels::gemm(B.value().ptr(), A.value().ptr(), dw.ptr(), d_in, rank, d_out, false, false, false);
    return dw;
  }
};

/// Creates an adapter for a map of shape [d_in x d_out]. A ~ N(0, std) from
/// `seed`, B = 0, so the adapted map equals the base map until B moves.
template <class T>
LoraAdapter<T> make_adapter(ParamRegistry<T> &reg, const std::string &name, std::size_t d_in, std::size_t d_out,
                            std::size_t rank, std::uint64_t seed, double init_std = 0.02) {
  if (rank == 0) throw ConfigError("lora rank must be at least 1");
  LoraAdapter<T> ad;
  ad.rank = rank;
  ad.d_in = d_in;
  ad.d_out = d_out;
  ad.exceeds_full_rank = rank > std::min(d_in, d_out);
  if (ad.exceeds_full_rank) {
    std::clog << "warning: lora rank " << rank << " for '" << name << "' exceeds full rank "
              << std::min(d_in, d_out) << "\n";
  }
  ad.A = reg.add(name + ".A", Tensor<T>({rank, d_out}), true, "lora");
  ad.B = reg.add(name + ".B", Tensor<T>({d_in, rank}), true, "lora");
  auto rng = stream_for(seed, name + ".A");
  fill_normal(ad.A, rng, init_std);
  return ad;
}

/// Attaches an adapter to a frozen linear layer. The base weights are not
/// modified.
template <class T>
LoraAdapter<T> attach(const Linear<T> &base, std::size_t rank, std::uint64_t seed, ParamRegistry<T> &reg,
                      const std::string &name, double init_std = 0.02) {
  if (!base.frozen()) throw UsageError("lora attach: base layer '" + name + "' must be frozen");
  return make_adapter(reg, name, base.d_in(), base.d_out(), rank, seed, init_std);
}

/// Two-branch adapted map x W + (x B) A.
template <class T> Var<T> lora_forward(const Var<T> &x, const Var<T> &weight, const LoraAdapter<T> &adapter) {
  if (weight.shape() != Shape{adapter.d_in, adapter.d_out}) {
    throw DimensionError("lora_forward: base weight " + shape_str(weight.shape()) + " does not match adapter " +
                         shape_str({adapter.d_in, adapter.d_out}));
  }
  return add(matmul(x, weight), adapter.delta(x));
}

/// W + B A.
template <class T> Tensor<T> merge(const Tensor<T> &weight, const LoraAdapter<T> &adapter) {
  Tensor<T> out = adapter.delta_weight();
  weight.require_same_shape(out, "lora merge");
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = weight[i] + out[i];
  return out;
}

/// merged - B A. Floating-point subtraction need not return the original
/// bits; AdaptedLinear::unmerge restores the stashed base instead.
template <class T> Tensor<T> unmerge(const Tensor<T> &merged, const LoraAdapter<T> &adapter) {
  Tensor<T> dw = adapter.delta_weight();
  merged.require_same_shape(dw, "lora unmerge");
  for (std::size_t i = 0; i < dw.numel(); ++i) dw[i] = merged[i] - dw[i];
  return dw;
}

/// A linear projection that may carry either one fused adapter or one adapter
/// per attention head (column block of width d_out / heads).
template <class T> class AdaptedLinear {
public:
  AdaptedLinear() = default;
  AdaptedLinear(ParamRegistry<T> &reg, const std::string &name, std::size_t d_in, std::size_t d_out,
                bool base_trainable, const std::string &group)
      : name_(name), base(reg, name, d_in, d_out, base_trainable, group) {}

  void attach_fused(ParamRegistry<T> &reg, std::size_t rank, std::uint64_t seed, double init_std) {
    fused = attach(base, rank, seed, reg, name_ + ".lora", init_std);
  }

  void attach_per_head(ParamRegistry<T> &reg, std::size_t rank, std::size_t heads, std::uint64_t seed,
                       double init_std) {
    if (!base.frozen()) throw UsageError("lora attach: base layer '" + name_ + "' must be frozen");
    const std::size_t dk = base.d_out() / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      per_head.push_back(
          make_adapter(reg, name_ + ".lora.h" + std::to_string(h), base.d_in(), dk, rank, seed, init_std));
    }
  }

  bool adapted() const { return fused.has_value() || !per_head.empty(); }
  bool merged() const { return merged_; }

  Var<T> operator()(const Var<T> &x) const {
    Var<T> y = base(x);
    if (merged_ || !adapted()) return y;
    if (fused) return add(y, fused->delta(x));
    std::vector<Var<T>> parts;
    parts.reserve(per_head.size());
    for (const auto &ad : per_head) parts.push_back(ad.delta(x));
    return add(y, concat_last(parts));
  }

  /// Total dW over all adapters, [d_in x d_out].
  Tensor<T> delta_weight() const {
    if (fused) return fused->delta_weight();
    Tensor<T> dw({base.d_in(), base.d_out()});
    const std::size_t dk = per_head.empty() ? 0 : base.d_out() / per_head.size();
    for (std::size_t h = 0; h < per_head.size(); ++h) {
      Tensor<T> part = per_head[h].delta_weight();
      for (std::size_t i = 0; i < base.d_in(); ++i)
        for (std::size_t j = 0; j < dk; ++j) dw[i * base.d_out() + h * dk + j] = part[i * dk + j];
    }
    return dw;
  }

  /// Folds dW into the base weight; adapters are bypassed until unmerge().
  void merge() {
    if (merged_ || !adapted()) return;
    stash_ = base.weight.value();
    Tensor<T> dw = delta_weight();
    auto &w = base.weight.mutable_value();
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = w[i] + dw[i];
    merged_ = true;
  }

  /// Restores the exact pre-merge base weight.
  void unmerge() {
    if (!merged_) return;
    base.weight.mutable_value() = stash_;
    stash_ = Tensor<T>();
    merged_ = false;
  }

  std::size_t adapter_trainable_count() const {
    std::size_t n = fused ? fused->trainable_count() : 0;
    for (const auto &ad : per_head) n += ad.trainable_count();
    return n;
  }

private:
  std::string name_;

public:
  Linear<T> base;
  std::optional<LoraAdapter<T>> fused;
  std::vector<LoraAdapter<T>> per_head;

private:
  bool merged_ = false;
  Tensor<T> stash_;
};

} // namespace evl
