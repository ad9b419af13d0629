#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "evl/params.hpp"

namespace evl {

struct GradCheckOptions {
  double tolerance = 1e-4;
  /// Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
  /// 0 checks every element; otherwise a seeded subset per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  enum class Status { passed, failed, skipped, non_finite };
  std::string name;
  Status status = Status::skipped;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  std::string worst_param;
  double worst_rel_error = 0.0;
  bool passed = true;

  std::size_t count(ParamCheck::Status s) const {
    return static_cast<std::size_t>(std::count_if(params.begin(), params.end(),
                                                  [s](const ParamCheck &p) { return p.status == s; }));
  }
};

inline const char *to_string(ParamCheck::Status s) {
  switch (s) {
  case ParamCheck::Status::passed: return "pass";
  case ParamCheck::Status::failed: return "FAIL";
  case ParamCheck::Status::skipped: return "skipped (frozen)";
  case ParamCheck::Status::non_finite: return "FAIL (non-finite gradient)";
  }
  return "?";
}

/// Compares autodiff gradients of `loss_fn` against central differences
/// with step h = 1e-5 * max(1, |theta|) for every trainable parameter.
/// `loss_fn` must be deterministic and return a scalar.
template <class T>
GradCheckReport grad_check(const std::function<Var<T>()> &loss_fn, ParamRegistry<T> &params,
                           const GradCheckOptions &opt = {}) {
  params.zero_grad();
  backward(loss_fn());

  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  for (auto &entry : params.entries()) {
    ParamCheck pc;
    pc.name = entry.name;
    Var<T> &p = entry.var;
    if (!p.requires_grad()) {
      pc.status = ParamCheck::Status::skipped;
      report.params.push_back(pc);
      continue;
    }
    Tensor<T> analytic = p.has_grad() ? p.grad() : Tensor<T>(p.shape());
    if (!analytic.all_finite()) {
      pc.status = ParamCheck::Status::non_finite;
      pc.max_rel_error = INFINITY;
      report.passed = false;
      report.worst_param = pc.name;
      report.worst_rel_error = INFINITY;
      report.params.push_back(pc);
      continue;
    }
    std::vector<std::size_t> indices(p.numel());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (opt.max_entries_per_param && indices.size() > opt.max_entries_per_param) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(opt.max_entries_per_param);
    }
    NoGradGuard no_grad;
    auto &theta = p.mutable_value();
    for (auto i : indices) {
      const T orig = theta[i];
      const T h = static_cast<T>(1e-5) * std::max(T(1), std::abs(orig));
      theta[i] = orig + h;
      const double up = static_cast<double>(loss_fn().value()[0]);
      theta[i] = orig - h;
      const double down = static_cast<double>(loss_fn().value()[0]);
      theta[i] = orig;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      pc.max_rel_error = std::max(pc.max_rel_error, abs_err / denom);
      ++pc.checked;
    }
    pc.status = pc.max_rel_error <= opt.tolerance ? ParamCheck::Status::passed : ParamCheck::Status::failed;
    if (pc.status == ParamCheck::Status::failed) report.passed = false;
    if (pc.max_rel_error >= report.worst_rel_error) {
      report.worst_rel_error = pc.max_rel_error;
      report.worst_param = pc.name;
    }
    report.params.push_back(pc);
  }
  params.zero_grad();
  return report;
}

} // namespace evl
