#pragma once

// Shared helpers for the test suites. Everything here evaluates forward
// values only; it never consults autodiff gradients.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "evl/ops.hpp"

namespace evl::test {

using TensorD = Tensor<double>;
using VarD = Var<double>;

inline TensorD random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return TensorD::uniform(std::move(shape), rng, lo, hi);
}

/// Central-difference gradient of a scalar function of one tensor.
inline TensorD numeric_gradient(const std::function<double(const TensorD &)> &f, TensorD x, double h = 1e-5) {
  TensorD g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_rel_error(const TensorD &a, const TensorD &b, double floor = 1e-8) {
  a.require_same_shape(b, "max_rel_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Checks d/dx sum(w * op(x)) against central differences, where w is a fixed
/// random weighting so every output element contributes distinctly.
inline double op_gradient_error(const std::function<VarD(const VarD &)> &op, const TensorD &x0,
                                std::uint64_t seed = 99) {
  TensorD probe_out = op(constant(x0)).value();
  TensorD w = random_tensor(probe_out.shape(), seed);
  auto loss_value = [&](const TensorD &x) {
    NoGradGuard ng;
    TensorD y = op(constant(x)).value();
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += w[i] * y[i];
    return s;
  };
  VarD x = parameter(x0);
  backward(sum(mul(op(x), constant(w))));
  return max_rel_error(x.grad(), numeric_gradient(loss_value, x0));
}

inline void expect_tensor_near(const TensorD &a, const TensorD &b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at flat index " << i;
}

/// Direct 6-nested-loop cross-correlation reference for [N,Cin,H,W].
inline TensorD naive_conv2d(const TensorD &x, const TensorD &w, const TensorD *bias, std::size_t stride,
                            std::size_t pad, std::size_t groups) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  TensorD out({n, cout, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[co] : 0.0;
          const std::size_t g = co / cout_g;
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(oy * stride + ky) - long(pad);
                const long ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                acc += x.at({b, g * cin_g + ci, std::size_t(iy), std::size_t(ix)}) * w.at({co, ci, ky, kx});
              }
          out.at({b, co, oy, ox}) = acc;
        }
  return out;
}

} // namespace evl::test
