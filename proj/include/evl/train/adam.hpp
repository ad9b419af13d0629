#pragma once

#include <cmath>
#include <map>
#include <string>

#include "evl/params.hpp"

namespace evl {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are allocated lazily, and only for
/// parameters that are trainable when a step is taken.
template <class T> class Adam {
public:
  struct Moments {
    Tensor<T> m, v;
  };

  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig &config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::map<std::string, Moments> &moments() { return state_; }
  const std::map<std::string, Moments> &moments() const { return state_; }

  /// Total moment elements per moment kind (m or v).
  std::size_t moment_count() const {
    std::size_t n = 0;
    for (const auto &[name, s] : state_) n += s.m.numel();
    return n;
  }

  /// One update over every trainable parameter. All gradients are checked
  /// before any parameter moves, so a non-finite gradient leaves the model
  /// untouched.
  void step(ParamRegistry<T> &reg) {
    for (auto &e : reg.entries()) {
      if (!e.var.requires_grad()) continue;
      if (!e.var.has_grad()) throw UsageError("adam: trainable parameter '" + e.name + "' has no gradient");
      for (T g : e.var.grad().storage()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("adam: non-finite gradient in parameter '" + e.name + "'");
        }
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (auto &e : reg.entries()) {
      if (!e.var.requires_grad()) continue;
      auto it = state_.find(e.name);
      if (it == state_.end()) {
        it = state_.emplace(e.name, Moments{Tensor<T>(e.var.shape()), Tensor<T>(e.var.shape())}).first;
      }
      auto &m = it->second.m.storage();
      auto &v = it->second.v.storage();
      const auto &g = e.var.grad().storage();
      auto &w = e.var.mutable_value().storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

} // namespace evl
