#pragma once

// Reusable layers on top of the differentiable ops.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>

#include "evl/ops.hpp"
#include "evl/params.hpp"

namespace evl {

/// Stable 64-bit FNV-1a, used to derive per-parameter RNG streams.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Deterministic generator for a named tensor under a model seed.
inline std::mt19937_64 stream_for(std::uint64_t seed, std::string_view name) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(name)), static_cast<std::uint32_t>(fnv1a(name) >> 32)};
  return std::mt19937_64(seq);
}

template <class T> void fill_normal(Var<T> &v, std::mt19937_64 &rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto &x : v.mutable_value().data()) x = static_cast<T>(dist(rng));
}

template <class T> void fill_uniform(Var<T> &v, std::mt19937_64 &rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto &x : v.mutable_value().data()) x = static_cast<T>(dist(rng));
}

/// y = x W + b with W stored [d_in x d_out].
template <class T> class Linear {
public:
  Linear() = default;
  Linear(ParamRegistry<T> &reg, const std::string &name, std::size_t d_in, std::size_t d_out, bool trainable,
         const std::string &group, bool bias = true)
      : d_in_(d_in), d_out_(d_out) {
    weight = reg.add(name + ".weight", Tensor<T>({d_in, d_out}), trainable, group);
    if (bias) this->bias = reg.add(name + ".bias", Tensor<T>({d_out}), trainable, group);
  }

  Var<T> operator()(const Var<T> &x) const {
    Var<T> y = matmul(x, weight);
    return bias.defined() ? add_broadcast(y, bias) : y;
  }

  /// Glorot-uniform weights, zero bias.
  void init_glorot(std::mt19937_64 &rng) {
    fill_uniform(weight, rng, std::sqrt(6.0 / static_cast<double>(d_in_ + d_out_)));
    if (bias.defined()) bias.mutable_value().fill(T(0));
  }

  std::size_t d_in() const { return d_in_; }
  std::size_t d_out() const { return d_out_; }
  bool frozen() const { return !weight.requires_grad(); }
  std::size_t trainable_count() const {
    return frozen() ? 0 : weight.numel() + (bias.defined() ? bias.numel() : 0);
  }

  Var<T> weight;
  Var<T> bias;

private:
  std::size_t d_in_ = 0, d_out_ = 0;
};

template <class T> class LayerNorm {
public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry<T> &reg, const std::string &name, std::size_t d, bool trainable, const std::string &group,
            T eps = T(1e-6))
      : eps_(eps) {
    gamma = reg.add(name + ".gamma", Tensor<T>({d}, T(1)), trainable, group);
    beta = reg.add(name + ".beta", Tensor<T>({d}, T(0)), trainable, group);
  }

  Var<T> operator()(const Var<T> &x) const { return layer_norm(x, gamma, beta, eps_); }

  Var<T> gamma, beta;

private:
  T eps_ = T(1e-6);
};

template <class T> class BatchNorm2d {
public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamRegistry<T> &reg, const std::string &name, std::size_t channels, bool trainable,
              const std::string &group, T momentum, T eps)
      : stats_(std::make_shared<BatchNormStats<T>>(channels)), momentum_(momentum), eps_(eps) {
    gamma = reg.add(name + ".gamma", Tensor<T>({channels}, T(1)), trainable, group);
    beta = reg.add(name + ".beta", Tensor<T>({channels}, T(0)), trainable, group);
    reg.add_buffer(name + ".running_mean", &stats_->running_mean);
    reg.add_buffer(name + ".running_var", &stats_->running_var);
  }

  Var<T> operator()(const Var<T> &x, bool training) const {
    return batch_norm(x, gamma, beta, *stats_, training, momentum_, eps_);
  }

  BatchNormStats<T> &stats() { return *stats_; }
  const BatchNormStats<T> &stats() const { return *stats_; }

  Var<T> gamma, beta;

private:
  std::shared_ptr<BatchNormStats<T>> stats_;
  T momentum_ = T(0.1);
  T eps_ = T(1e-5);
};

/// softmax(Q K^T / sqrt(d_k)) V for Q, K, V of shape [B, T, d_k] or [T, d_k].
template <class T> Var<T> attention(const Var<T> &q, const Var<T> &k, const Var<T> &v) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: Q, K, V shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  if (q.shape().size() == 2) {
    const Shape batched{1, q.dim(0), q.dim(1)};
    Var<T> out = attention(reshape(q, batched), reshape(k, batched), reshape(v, batched));
    return reshape(out, q.shape());
  }
  if (q.shape().size() != 3) throw DimensionError("attention: expected [B,T,d_k], got " + shape_str(q.shape()));
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  Var<T> scores = scale(bmm(q, k, /*trans_b=*/true), inv_sqrt_dk);
  return bmm(softmax_lastdim(scores), v);
}

/// Squeeze-and-excitation gate on [N, C, H, W]: GAP -> linear -> SiLU ->
/// linear -> sigmoid -> per-channel rescale.
template <class T> class SqueezeExcite {
public:
  SqueezeExcite() = default;
  SqueezeExcite(ParamRegistry<T> &reg, const std::string &name, std::size_t channels, std::size_t reduction,
                bool trainable, const std::string &group)
      : reduce(reg, name + ".reduce", channels, reduced_width(channels, reduction), trainable, group),
        expand(reg, name + ".expand", reduced_width(channels, reduction), channels, trainable, group) {}

  static std::size_t reduced_width(std::size_t channels, std::size_t reduction) {
    return std::max<std::size_t>(1, reduction ? channels / reduction : channels);
  }

  Var<T> gate(const Var<T> &x) const { return sigmoid(expand(silu(reduce(global_avg_pool(x))))); }
  Var<T> operator()(const Var<T> &x) const { return channel_scale(x, gate(x)); }

  Linear<T> reduce, expand;
};

} // namespace evl
