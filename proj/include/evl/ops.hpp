#pragma once

// Differentiable operations. Shapes follow a batch-first convention:
// images are [N, C, H, W], token sequences [N, T, D].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "evl/autodiff.hpp"
#include "evl/kernels.hpp"

namespace evl {

namespace detail {

inline void require(bool ok, const std::string &msg) {
  if (!ok) throw DimensionError(msg);
}

inline std::string pair_str(const Shape &a, const Shape &b) {
  return shape_str(a) + " and " + shape_str(b);
}

} // namespace detail

template <class T> Var<T> constant(Tensor<T> value) { return Var<T>(std::move(value), false); }
template <class T> Var<T> parameter(Tensor<T> value) { return Var<T>(std::move(value), true); }

// ---------------------------------------------------------------------------
// Elementwise

template <class T> Var<T> add(const Var<T> &a, const Var<T> &b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  return make_result<T>("add", a.value() + b.value(), {a, b}, [](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) { g += self.grad; });
    accumulate_into(self, 1, [&](Tensor<T> &g) { g += self.grad; });
  });
}

template <class T> Var<T> sub(const Var<T> &a, const Var<T> &b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  return make_result<T>("sub", a.value() - b.value(), {a, b}, [](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) { g += self.grad; });
    accumulate_into(self, 1, [&](Tensor<T> &g) { g -= self.grad; });
  });
}

template <class T> Var<T> mul(const Var<T> &a, const Var<T> &b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result<T>("mul", std::move(out), {a, b}, [](Node<T> &self) {
    const auto &av = self.inputs[0]->value;
    const auto &bv = self.inputs[1]->value;
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    });
    accumulate_into(self, 1, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    });
  });
}

template <class T> Var<T> scale(const Var<T> &a, T s) {
  return make_result<T>("scale", a.value() * s, {a}, [s](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
    });
  });
}

/// x + y where y's shape equals the trailing dimensions of x (bias, positional
/// embeddings).
template <class T> Var<T> add_broadcast(const Var<T> &x, const Var<T> &y) {
  const auto &xs = x.shape();
  const auto &ys = y.shape();
  bool ok = ys.size() <= xs.size() && std::equal(ys.rbegin(), ys.rend(), xs.rbegin());
  detail::require(ok, "add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / inner;
  Tensor<T> out = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += y.value()[i];
  return make_result<T>("add_broadcast", std::move(out), {x, y}, [outer, inner](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) { g += self.grad; });
    accumulate_into(self, 1, [&](Tensor<T> &g) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
    });
  });
}

template <class T> Var<T> reshape(const Var<T> &x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>("reshape", std::move(out), {x}, [](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
  });
}

template <class T> Var<T> sum(const Var<T> &x) {
  T total = T(0);
  for (auto v : x.value().data()) total += v;
  return make_result<T>("sum", Tensor<T>::scalar(total), {x}, [](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (auto &v : g.data()) v += self.grad[0];
    });
  });
}

template <class T> Var<T> mean(const Var<T> &x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Activations

namespace detail {
template <class T, class Fwd, class Deriv>
Var<T> unary(const char *name, const Var<T> &x, Fwd fwd, Deriv deriv) {
  Tensor<T> out = x.value();
  for (auto &v : out.data()) v = fwd(v);
  return make_result<T>(name, std::move(out), {x}, [deriv](Node<T> &self) {
    const auto &xv = self.inputs[0]->value;
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * deriv(xv[i], self.value[i]);
    });
  });
}
} // namespace detail

template <class T> Var<T> relu(const Var<T> &x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T> Var<T> sigmoid(const Var<T> &x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                          [](T, T y) { return y * (T(1) - y); });
}

template <class T> Var<T> silu(const Var<T> &x) {
  return detail::unary<T>(
      "silu", x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

/// Exact (erf-based) GELU.
template <class T> Var<T> gelu(const Var<T> &x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

/// Inverted dropout; identity when p == 0.
template <class T, class Rng> Var<T> dropout(const Var<T> &x, T p, Rng &rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw ConfigError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  Tensor<T> mask(x.shape());
  const T s = T(1) / (T(1) - p);
  for (auto &m : mask.data()) m = keep(rng) ? s : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return make_result<T>("dropout", std::move(out), {x}, [mask](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * mask[i];
    });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a [..., k] times b [k, n] -> [..., n]. Leading dims of a are flattened.
template <class T> Var<T> matmul(const Var<T> &a, const Var<T> &b) {
  const auto &as = a.shape();
  const auto &bs = b.shape();
  detail::require(as.size() >= 2 && bs.size() == 2 && as.back() == bs[0],
                  "matmul: cannot multiply " + detail::pair_str(as, bs));
  const std::size_t k = bs[0];
  const std::size_t n = bs[1];
  const std::size_t m = a.numel() / k;
  Shape out_shape = as;
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  kernels::gemm(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n, false, false, false);
  return make_result<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T> &self) {
    const auto &av = self.inputs[0]->value;
    const auto &bv = self.inputs[1]->value;
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      kernels::gemm(self.grad.ptr(), bv.ptr(), g.ptr(), m, n, k, false, true, true);
    });
    accumulate_into(self, 1, [&](Tensor<T> &g) {
      if (debug::corrupt_matmul_backward.load()) {
        Tensor<T> tmp(g.shape());
        kernels::gemm(av.ptr(), self.grad.ptr(), tmp.ptr(), k, m, n, true, false, false);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += T(1.5) * tmp[i];
      } else {
        kernels::gemm(av.ptr(), self.grad.ptr(), g.ptr(), k, m, n, true, false, true);
      }
    });
  });
}

/// Batched product: a [B, m, k] times b [B, k, n] (or b [B, n, k] with
/// trans_b) -> [B, m, n].
template <class T> Var<T> bmm(const Var<T> &a, const Var<T> &b, bool trans_b = false) {
  const auto &as = a.shape();
  const auto &bs = b.shape();
  const bool ok = as.size() == 3 && bs.size() == 3 && as[0] == bs[0] &&
                  as[2] == (trans_b ? bs[2] : bs[1]);
  detail::require(ok, "bmm: cannot multiply " + detail::pair_str(as, bs));
  const std::size_t batch = as[0], m = as[1], k = as[2];
  const std::size_t n = trans_b ? bs[1] : bs[2];
  Tensor<T> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(a.value().ptr() + i * m * k, b.value().ptr() + i * k * n,
                  out.ptr() + i * m * n, m, k, n, false, trans_b, false);
  }
  return make_result<T>("bmm", std::move(out), {a, b}, [batch, m, k, n, trans_b](Node<T> &self) {
    const auto &av = self.inputs[0]->value;
    const auto &bv = self.inputs[1]->value;
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < batch; ++i) {
        // dA = dC * op(B)^T
        kernels::gemm(self.grad.ptr() + i * m * n, bv.ptr() + i * k * n, g.ptr() + i * m * k,
                      m, n, k, false, !trans_b, true);
      }
    });
    accumulate_into(self, 1, [&](Tensor<T> &g) {
      for (std::size_t i = 0; i < batch; ++i) {
        if (trans_b) {
          // d(B^T) = A^T dC  =>  dB = dC^T A
          kernels::gemm(self.grad.ptr() + i * m * n, av.ptr() + i * m * k, g.ptr() + i * k * n,
                        n, m, k, true, false, true);
        } else {
          kernels::gemm(av.ptr() + i * m * k, self.grad.ptr() + i * m * n, g.ptr() + i * k * n,
                        k, m, n, true, false, true);
        }
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, losses

/// Softmax over the last dimension, with max subtraction.
template <class T> Var<T> softmax_lastdim(const Var<T> &x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  const T *src = x.value().ptr();
  T *dst = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T *in = src + r * n;
    T *o = dst + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return make_result<T>("softmax", std::move(out), {x}, [rows, n](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T *y = self.value.ptr() + r * n;
        const T *dy = self.grad.ptr() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
      }
    });
  });
}

/// Per-slice standardization over the last dimension followed by the
/// elementwise affine map gamma * xhat + beta.
template <class T>
Var<T> layer_norm(const Var<T> &x, const Var<T> &gamma, const Var<T> &beta, T eps = T(1e-6)) {
  const std::size_t d = x.shape().back();
  detail::require(gamma.shape() == Shape{d} && beta.shape() == Shape{d},
                  "layer_norm: affine parameters must be [" + std::to_string(d) + "]");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T *in = x.value().ptr() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gamma.value()[j] * h + beta.value()[j];
    }
  }
  return make_result<T>(
      "layer_norm", std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T> &self) {
        const auto &gv = self.inputs[1]->value;
        accumulate_into(self, 0, [&](Tensor<T> &g) {
          for (std::size_t r = 0; r < rows; ++r) {
            const T *dy = self.grad.ptr() + r * d;
            const T *h = xhat.ptr() + r * d;
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = dy[j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * h[j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = dy[j] * gv[j];
              g[r * d + j] += inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
            }
          }
        });
        accumulate_into(self, 1, [&](Tensor<T> &g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * xhat[r * d + j];
        });
        accumulate_into(self, 2, [&](Tensor<T> &g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
        });
      });
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
template <class T>
Var<T> cross_entropy(const Var<T> &logits, const std::vector<std::size_t> &labels) {
  detail::require(logits.shape().size() == 2, "cross_entropy: logits must be [B x C], got " +
                                                  shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) +
                          " labels for a batch of " + std::to_string(batch));
  }
  for (auto l : labels) {
    if (l >= classes) {
      throw ValidationError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                            std::to_string(classes) + ")");
    }
  }
  Tensor<T> probs({batch, classes});
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T *row = logits.value().ptr() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = T(0);
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[b]];
  }
  loss /= static_cast<T>(batch);
  return make_result<T>("cross_entropy", Tensor<T>::scalar(loss), {logits},
                        [probs = std::move(probs), labels, batch, classes](Node<T> &self) {
                          accumulate_into(self, 0, [&](Tensor<T> &g) {
                            const T s = self.grad[0] / static_cast<T>(batch);
                            for (std::size_t b = 0; b < batch; ++b) {
                              for (std::size_t c = 0; c < classes; ++c) {
                                const T onehot = c == labels[b] ? T(1) : T(0);
                                g[b * classes + c] += s * (probs[b * classes + c] - onehot);
                              }
                            }
                          });
                        });
}

// ---------------------------------------------------------------------------
// Convolution and image ops

namespace detail {
/// Views a rank-3 image as a batch of one.
template <class T> Var<T> as_batch(const Var<T> &x, bool &squeezed) {
  squeezed = x.shape().size() == 3;
  if (squeezed) return reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  detail::require(x.shape().size() == 4, "expected an image [C,H,W] or batch [N,C,H,W], got " +
                                             shape_str(x.shape()));
  return x;
}

template <class T> Var<T> maybe_squeeze(const Var<T> &y, bool squeezed) {
  if (!squeezed) return y;
  return reshape(y, Shape{y.dim(1), y.dim(2), y.dim(3)});
}
} // namespace detail

/// 2-d cross-correlation. x is [N, Cin, H, W] or [Cin, H, W]; w is
/// [Cout, Cin/groups, k, k]; bias may be undefined.
template <class T>
Var<T> conv2d(const Var<T> &input, const Var<T> &w, const Var<T> &bias, std::size_t stride = 1,
              std::size_t pad = 0, std::size_t groups = 1) {
  bool squeezed = false;
  Var<T> x = detail::as_batch(input, squeezed);
  const auto &ws = w.shape();
  detail::require(ws.size() == 4 && ws[2] == ws[3], "conv2d: weight must be [Cout,Cin/g,k,k], got " +
                                                         shape_str(ws));
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = ws[0], k = ws[2];
  detail::require(groups >= 1 && cin % groups == 0 && cout % groups == 0 && ws[1] == cin / groups,
                  "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(ws) + " for groups=" + std::to_string(groups));
  detail::require(stride >= 1, "conv2d: stride must be positive");
  const long span_h = static_cast<long>(h + 2 * pad) - static_cast<long>(k);
  const long span_w = static_cast<long>(wd + 2 * pad) - static_cast<long>(k);
  detail::require(span_h >= 0 && span_w >= 0,
                  "conv2d: nonpositive output extent for input " + shape_str(x.shape()) +
                      " with kernel " + std::to_string(k) + " and padding " + std::to_string(pad));
  const std::size_t ho = static_cast<std::size_t>(span_h) / stride + 1;
  const std::size_t wo = static_cast<std::size_t>(span_w) / stride + 1;
  if (bias.defined()) {
    detail::require(bias.shape() == Shape{cout}, "conv2d: bias must be [" + std::to_string(cout) + "]");
  }
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  const std::size_t plane = ho * wo;
  const bool depthwise = groups == cin && cout == cin;

  Tensor<T> out({n, cout, ho, wo});
  const T *xv = x.value().ptr();
  const T *wv = w.value().ptr();
  if (depthwise) {
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t c = 0; c < cin; ++c) {
        const T *src = xv + (b * cin + c) * h * wd;
        const T *ker = wv + c * k * k;
        T *dst = out.ptr() + (b * cout + c) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          for (std::size_t ox = 0; ox < wo; ++ox) {
            T acc = T(0);
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                acc += src[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)] * ker[ky * k + kx];
              }
            }
            dst[oy * wo + ox] = acc;
          }
        }
      }
    }
  } else {
    std::vector<T> cols(cin_g * k * k * plane);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t g = 0; g < groups; ++g) {
        kernels::im2col(xv + b * cin * h * wd, g * cin_g, cin_g, h, wd, k, stride, pad, ho, wo, cols.data());
        kernels::gemm(wv + g * cout_g * cin_g * k * k, cols.data(),
                      out.ptr() + (b * cout + g * cout_g) * plane, cout_g, cin_g * k * k, plane,
                      false, false, false);
      }
    }
  }
  if (bias.defined()) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < cout; ++c) {
        T *dst = out.ptr() + (b * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += bias.value()[c];
      }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  auto y = make_result<T>(
      "conv2d", std::move(out), std::move(inputs),
      [=](Node<T> &self) {
        const auto &xin = self.inputs[0]->value;
        const auto &win = self.inputs[1]->value;
        const T *dy = self.grad.ptr();
        if (depthwise) {
          auto loop = [&](auto &&visit) {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t oy = 0; oy < ho; ++oy)
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T go = dy[(b * cout + c) * plane + oy * wo + ox];
                    for (std::size_t ky = 0; ky < k; ++ky) {
                      const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                      if (iy < 0 || iy >= static_cast<long>(h)) continue;
                      for (std::size_t kx = 0; kx < k; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                        const std::size_t xi = (b * cin + c) * h * wd +
                                               static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix);
                        visit(go, xi, c * k * k + ky * k + kx);
                      }
                    }
                  }
          };
          accumulate_into(self, 0, [&](Tensor<T> &g) {
            loop([&](T go, std::size_t xi, std::size_t wi) { g[xi] += go * win[wi]; });
          });
          accumulate_into(self, 1, [&](Tensor<T> &g) {
            loop([&](T go, std::size_t xi, std::size_t wi) { g[wi] += go * xin[xi]; });
          });
        } else {
          const bool need_x = self.inputs[0]->requires_grad;
          const bool need_w = self.inputs[1]->requires_grad;
          std::vector<T> cols(cin_g * k * k * plane);
          std::vector<T> dcols(need_x ? cols.size() : 0);
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t g = 0; g < groups; ++g) {
              const T *dyg = dy + (b * cout + g * cout_g) * plane;
              if (need_w) {
                kernels::im2col(xin.ptr() + b * cin * h * wd, g * cin_g, cin_g, h, wd, k, stride, pad, ho,
                                wo, cols.data());
                Tensor<T> &gw = self.inputs[1]->grad_buffer();
                kernels::gemm(dyg, cols.data(), gw.ptr() + g * cout_g * cin_g * k * k, cout_g, plane,
                              cin_g * k * k, false, true, true);
              }
              if (need_x) {
                kernels::gemm(win.ptr() + g * cout_g * cin_g * k * k, dyg, dcols.data(), cin_g * k * k,
                              cout_g, plane, true, false, false);
                Tensor<T> &gx = self.inputs[0]->grad_buffer();
                kernels::col2im(dcols.data(), g * cin_g, cin_g, h, wd, k, stride, pad, ho, wo,
                                gx.ptr() + b * cin * h * wd);
              }
            }
          }
        }
        if (self.inputs.size() > 2) {
          accumulate_into(self, 2, [&](Tensor<T> &g) {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t c = 0; c < cout; ++c)
                for (std::size_t i = 0; i < plane; ++i) g[c] += dy[(b * cout + c) * plane + i];
          });
        }
      });
  return detail::maybe_squeeze(y, squeezed);
}

/// Running statistics owned by a batch-norm layer.
template <class T> struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean({channels}, T(0)), running_var({channels}, T(1)) {}
};

/// Per-channel batch normalization over [N, C, H, W]. Training mode uses
/// batch statistics and updates the running estimates (unbiased variance);
/// inference mode applies the stored statistics as a fixed affine map.
template <class T>
Var<T> batch_norm(const Var<T> &x, const Var<T> &gamma, const Var<T> &beta, BatchNormStats<T> &stats,
                  bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require(x.shape().size() == 4, "batch_norm: expected [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
                  "batch_norm: affine parameters must be [" + std::to_string(c) + "]");
  const std::size_t count = n * plane;
  std::vector<T> mu(c), inv_std(c);
  const T *xv = x.value().ptr();
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = T(0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) s += xv[(b * c + ch) * plane + i];
      mu[ch] = s / static_cast<T>(count);
      T v = T(0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = xv[(b * c + ch) * plane + i] - mu[ch];
          v += d * d;
        }
      const T biased = v / static_cast<T>(count);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : biased;
      inv_std[ch] = T(1) / std::sqrt(biased + eps);
      stats.running_mean[ch] = (T(1) - momentum) * stats.running_mean[ch] + momentum * mu[ch];
      stats.running_var[ch] = (T(1) - momentum) * stats.running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (b * c + ch) * plane + i;
        xhat[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
        out[idx] = gamma.value()[ch] * xhat[idx] + beta.value()[ch];
      }
  return make_result<T>(
      "batch_norm", std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat)](Node<T> &self) {
        const auto &gv = self.inputs[1]->value;
        const T *dy = self.grad.ptr();
        accumulate_into(self, 0, [&](Tensor<T> &g) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            if (!training) {
              for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                  const std::size_t idx = (b * c + ch) * plane + i;
                  g[idx] += dy[idx] * gv[ch] * inv_std[ch];
                }
              continue;
            }
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * c + ch) * plane + i;
                const T dh = dy[idx] * gv[ch];
                mean_dh += dh;
                mean_dh_h += dh * xhat[idx];
              }
            mean_dh /= static_cast<T>(count);
            mean_dh_h /= static_cast<T>(count);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * c + ch) * plane + i;
                g[idx] += inv_std[ch] * (dy[idx] * gv[ch] - mean_dh - xhat[idx] * mean_dh_h);
              }
          }
        });
        accumulate_into(self, 1, [&](Tensor<T> &g) {
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * c + ch) * plane + i;
                g[ch] += dy[idx] * xhat[idx];
              }
        });
        accumulate_into(self, 2, [&](Tensor<T> &g) {
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t i = 0; i < plane; ++i) g[ch] += dy[(b * c + ch) * plane + i];
        });
      });
}

enum class UpsampleMode { nearest, bilinear };

namespace detail {
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac; // weight of hi
};

/// Source taps along one axis. Bilinear uses the half-pixel (align corners
/// false) mapping src = (i + 0.5) * in / out - 0.5, clamped to [0, in - 1].
inline AxisTaps axis_taps(std::size_t in, std::size_t out, UpsampleMode mode) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    if (mode == UpsampleMode::nearest) {
      const auto s = std::min(static_cast<std::size_t>(std::floor(static_cast<double>(i) * ratio)), in - 1);
      t.lo[i] = t.hi[i] = s;
      t.frac[i] = 0.0;
      continue;
    }
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - static_cast<double>(lo);
  }
  return t;
}
} // namespace detail

/// Spatial upscaling of [N, C, H, W] or [C, H, W] to the target extent.
template <class T>
Var<T> upsample(const Var<T> &input, std::size_t out_h, std::size_t out_w, UpsampleMode mode) {
  bool squeezed = false;
  Var<T> x = detail::as_batch(input, squeezed);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < h || out_w < w) {
    throw DimensionError("upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " is smaller than input " + std::to_string(h) + "x" + std::to_string(w));
  }
  auto ty = detail::axis_taps(h, out_h, mode);
  auto tx = detail::axis_taps(w, out_w, mode);
  Tensor<T> out({n, c, out_h, out_w});
  const T *xv = x.value().ptr();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T *src = xv + p * h * w;
    T *dst = out.ptr() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ty.frac[i]);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(tx.frac[j]);
        const T top = src[ty.lo[i] * w + tx.lo[j]] * (T(1) - fx) + src[ty.lo[i] * w + tx.hi[j]] * fx;
        const T bot = src[ty.hi[i] * w + tx.lo[j]] * (T(1) - fx) + src[ty.hi[i] * w + tx.hi[j]] * fx;
        dst[i * out_w + j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  auto y = make_result<T>("upsample", std::move(out), {x}, [=](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t p = 0; p < n * c; ++p) {
        const T *dy = self.grad.ptr() + p * out_h * out_w;
        T *dx = g.ptr() + p * h * w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const T fy = static_cast<T>(ty.frac[i]);
          for (std::size_t j = 0; j < out_w; ++j) {
            const T fx = static_cast<T>(tx.frac[j]);
            const T go = dy[i * out_w + j];
            dx[ty.lo[i] * w + tx.lo[j]] += go * (T(1) - fy) * (T(1) - fx);
            dx[ty.lo[i] * w + tx.hi[j]] += go * (T(1) - fy) * fx;
            dx[ty.hi[i] * w + tx.lo[j]] += go * fy * (T(1) - fx);
            dx[ty.hi[i] * w + tx.hi[j]] += go * fy * fx;
          }
        }
      }
    });
  });
  return detail::maybe_squeeze(y, squeezed);
}

/// [N, C, H, W] -> [N, C] spatial mean.
template <class T> Var<T> global_avg_pool(const Var<T> &x) {
  detail::require(x.shape().size() == 4, "global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T s = T(0);
    for (std::size_t i = 0; i < plane; ++i) s += x.value()[p * plane + i];
    out[p] = s / static_cast<T>(plane);
  }
  return make_result<T>("global_avg_pool", std::move(out), {x}, [n, c, plane](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t p = 0; p < n * c; ++p) {
        const T v = self.grad[p] / static_cast<T>(plane);
        for (std::size_t i = 0; i < plane; ++i) g[p * plane + i] += v;
      }
    });
  });
}

/// x [N, C, H, W] scaled per (sample, channel) by s [N, C].
template <class T> Var<T> channel_scale(const Var<T> &x, const Var<T> &s) {
  detail::require(x.shape().size() == 4 && s.shape() == Shape{x.dim(0), x.dim(1)},
                  "channel_scale: cannot scale " + detail::pair_str(x.shape(), s.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out = x.value();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] *= s.value()[p];
  return make_result<T>("channel_scale", std::move(out), {x, s}, [nc, plane](Node<T> &self) {
    const auto &xv = self.inputs[0]->value;
    const auto &sv = self.inputs[1]->value;
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < plane; ++i) g[p * plane + i] += self.grad[p * plane + i] * sv[p];
    });
    accumulate_into(self, 1, [&](Tensor<T> &g) {
      for (std::size_t p = 0; p < nc; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < plane; ++i) acc += self.grad[p * plane + i] * xv[p * plane + i];
        g[p] += acc;
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Token ops

/// [N, C, S, S] -> [N, (S/p)^2, C*p*p]; patches in row-major grid order,
/// features ordered (channel, row, col) to match a [D, C, p, p] kernel.
template <class T> Var<T> patchify(const Var<T> &x, std::size_t p) {
  detail::require(x.shape().size() == 4 && x.dim(2) == x.dim(3) && p >= 1 && x.dim(2) % p == 0,
                  "patchify: image " + shape_str(x.shape()) + " not divisible into " + std::to_string(p) +
                      "x" + std::to_string(p) + " patches");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2), g = s / p;
  const std::size_t feat = c * p * p, np = g * g;
  Tensor<T> out({n, np, feat});
  auto index = [=](std::size_t b, std::size_t patch, std::size_t f) {
    const std::size_t py = patch / g, px = patch % g;
    const std::size_t ch = f / (p * p), dy = (f / p) % p, dx = f % p;
    return ((b * c + ch) * s + py * p + dy) * s + px * p + dx;
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < np; ++q)
      for (std::size_t f = 0; f < feat; ++f) out[(b * np + q) * feat + f] = x.value()[index(b, q, f)];
  return make_result<T>("patchify", std::move(out), {x}, [=](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &gx) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t q = 0; q < np; ++q)
          for (std::size_t f = 0; f < feat; ++f) gx[index(b, q, f)] += self.grad[(b * np + q) * feat + f];
    });
  });
}

/// Prepends a shared token [D] to every sequence of x [N, P, D].
template <class T> Var<T> prepend_token(const Var<T> &x, const Var<T> &token) {
  detail::require(x.shape().size() == 3 && token.shape() == Shape{x.dim(2)},
                  "prepend_token: cannot prepend " + detail::pair_str(token.shape(), x.shape()));
  const std::size_t n = x.dim(0), p = x.dim(1), d = x.dim(2);
  Tensor<T> out({n, p + 1, d});
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(token.value().ptr(), d, out.ptr() + b * (p + 1) * d);
    std::copy_n(x.value().ptr() + b * p * d, p * d, out.ptr() + (b * (p + 1) + 1) * d);
  }
  return make_result<T>("prepend_token", std::move(out), {x, token}, [n, p, d](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < p * d; ++i) g[b * p * d + i] += self.grad[(b * (p + 1) + 1) * d + i];
    });
    accumulate_into(self, 1, [&](Tensor<T> &g) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[b * (p + 1) * d + j];
    });
  });
}

/// x [N, T, D] -> [N, D] at token position t.
template <class T> Var<T> select_token(const Var<T> &x, std::size_t t) {
  detail::require(x.shape().size() == 3 && t < x.dim(1), "select_token: bad position for " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
  Tensor<T> out({n, d});
  for (std::size_t b = 0; b < n; ++b) std::copy_n(x.value().ptr() + (b * len + t) * d, d, out.ptr() + b * d);
  return make_result<T>("select_token", std::move(out), {x}, [n, len, d, t](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < d; ++j) g[(b * len + t) * d + j] += self.grad[b * d + j];
    });
  });
}

namespace detail {
// [N, T, H, dk] <-> [N, H, T, dk] index maps.
template <class T> Var<T> permute_heads(const Var<T> &x, std::size_t n, std::size_t t, std::size_t heads,
                                        std::size_t dk, bool split) {
  Tensor<T> out(split ? Shape{n * heads, t, dk} : Shape{n, t, heads * dk});
  auto fused = [=](std::size_t b, std::size_t i, std::size_t h) { return ((b * t + i) * heads + h) * dk; };
  auto sep = [=](std::size_t b, std::size_t i, std::size_t h) { return ((b * heads + h) * t + i) * dk; };
  const T *src = x.value().ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t from = split ? fused(b, i, h) : sep(b, i, h);
        const std::size_t to = split ? sep(b, i, h) : fused(b, i, h);
        std::copy_n(src + from, dk, out.ptr() + to);
      }
  return make_result<T>(split ? "split_heads" : "merge_heads", std::move(out), {x}, [=](Node<T> &self) {
    accumulate_into(self, 0, [&](Tensor<T> &g) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t from = split ? fused(b, i, h) : sep(b, i, h);
            const std::size_t to = split ? sep(b, i, h) : fused(b, i, h);
            for (std::size_t j = 0; j < dk; ++j) g[from + j] += self.grad[to + j];
          }
    });
  });
}
} // namespace detail

/// [N, T, H*dk] -> [N*H, T, dk].
template <class T> Var<T> split_heads(const Var<T> &x, std::size_t heads) {
  detail::require(x.shape().size() == 3 && heads >= 1 && x.dim(2) % heads == 0,
                  "split_heads: width of " + shape_str(x.shape()) + " not divisible by " + std::to_string(heads));
  return detail::permute_heads(x, x.dim(0), x.dim(1), heads, x.dim(2) / heads, true);
}

/// [N*H, T, dk] -> [N, T, H*dk].
template <class T> Var<T> merge_heads(const Var<T> &x, std::size_t heads) {
  detail::require(x.shape().size() == 3 && heads >= 1 && x.dim(0) % heads == 0,
                  "merge_heads: batch of " + shape_str(x.shape()) + " not divisible by " + std::to_string(heads));
  return detail::permute_heads(x, x.dim(0) / heads, x.dim(1), heads, x.dim(2), false);
}

/// Concatenates along the last dimension; leading dims must agree.
template <class T> Var<T> concat_last(const std::vector<Var<T>> &parts) {
  detail::require(!parts.empty(), "concat_last: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto &p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    detail::require(pl == lead, "concat_last: leading dims differ " + detail::pair_str(parts[0].shape(), p.shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> out(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].value().ptr() + r * widths[k], widths[k], out.ptr() + r * total + off);
    off += widths[k];
  }
  return make_result<T>("concat_last", std::move(out), parts, [rows, total, widths](Node<T> &self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      accumulate_into(self, k, [&](Tensor<T> &g) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += self.grad[r * total + off + j];
      });
      off += widths[k];
    }
  });
}

} // namespace evl
