#pragma once

#include <cstdint>
#include <string>

#include "evl/lora.hpp"

namespace evl {

/// Multi-head self-attention with fused [d_model x d_model] projections.
/// Head h uses columns [h*d_k, (h+1)*d_k) of W_Q, W_K and W_V.
template <class T> class MultiHeadSelfAttention {
public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(ParamRegistry<T> &reg, const std::string &name, std::size_t d_model, std::size_t n_heads,
                         bool trainable, const std::string &group)
      : n_heads_(n_heads), d_model_(d_model) {
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("attention width " + std::to_string(d_model) + " is not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    query = AdaptedLinear<T>(reg, name + ".query", d_model, d_model, trainable, group);
    key = AdaptedLinear<T>(reg, name + ".key", d_model, d_model, trainable, group);
    value = AdaptedLinear<T>(reg, name + ".value", d_model, d_model, trainable, group);
    out = Linear<T>(reg, name + ".out", d_model, d_model, trainable, group);
  }

  /// Adds adapters to the selected projections.
  void attach_lora(ParamRegistry<T> &reg, const LoraPlacement &placement, std::uint64_t seed) {
    auto attach_one = [&](AdaptedLinear<T> &proj, bool on) {
      if (!on) return;
      if (placement.mode == LoraMode::fused) {
        proj.attach_fused(reg, placement.rank, seed, placement.init_std);
      } else {
        proj.attach_per_head(reg, placement.rank, n_heads_, seed, placement.init_std);
      }
    };
    attach_one(query, placement.targets.query);
    attach_one(key, placement.targets.key);
    attach_one(value, placement.targets.value);
  }

  /// x [N, T, d_model] -> [N, T, d_model].
  Var<T> operator()(const Var<T> &x) const {
    if (x.shape().size() != 3 || x.dim(2) != d_model_) {
      throw DimensionError("mhsa: expected [N,T," + std::to_string(d_model_) + "], got " + shape_str(x.shape()));
    }
    Var<T> q = split_heads(query(x), n_heads_);
    Var<T> k = split_heads(key(x), n_heads_);
    Var<T> v = split_heads(value(x), n_heads_);
    return out(merge_heads(attention(q, k, v), n_heads_));
  }

  void merge_adapters() {
    query.merge();
    key.merge();
    value.merge();
  }
  void unmerge_adapters() {
    query.unmerge();
    key.unmerge();
    value.unmerge();
  }

  std::size_t n_heads() const { return n_heads_; }
  std::size_t d_model() const { return d_model_; }
  std::size_t d_head() const { return d_model_ / n_heads_; }

  AdaptedLinear<T> query, key, value;
  Linear<T> out;

private:
  std::size_t n_heads_ = 1;
  std::size_t d_model_ = 0;
};

} // namespace evl
