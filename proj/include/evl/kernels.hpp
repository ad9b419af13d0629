#pragma once

// Raw (non-differentiable) numeric kernels shared by the autodiff ops.

#include <cstddef>

#include <Eigen/Core>

namespace evl::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T> using MapMat = Eigen::Map<RowMat<T>>;
template <class T> using ConstMapMat = Eigen::Map<const RowMat<T>>;

/// C (m x n) = op(A) * op(B), or C += ... when accumulate is set.
/// op(A) is m x k, op(B) is k x n; storage is row-major.
template <class T>
void gemm(const T *a, const T *b, T *c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MapMat<T> C(c, M, N);
  auto run = [&](const auto &A, const auto &B) {
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  };
  if (!trans_a && !trans_b) {
    run(ConstMapMat<T>(a, M, K), ConstMapMat<T>(b, K, N));
  } else if (!trans_a && trans_b) {
    run(ConstMapMat<T>(a, M, K), ConstMapMat<T>(b, N, K).transpose());
  } else if (trans_a && !trans_b) {
    run(ConstMapMat<T>(a, K, M).transpose(), ConstMapMat<T>(b, K, N));
  } else {
    run(ConstMapMat<T>(a, K, M).transpose(), ConstMapMat<T>(b, N, K).transpose());
  }
}

/// Unfolds one image [C, H, W] into columns [C*k*k, Ho*Wo] for the
/// channel range [c0, c0 + nc).
template <class T>
void im2col(const T *img, std::size_t c0, std::size_t nc, std::size_t h,
            std::size_t w, std::size_t k, std::size_t stride, std::size_t pad,
            std::size_t ho, std::size_t wo, T *cols) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < nc; ++c) {
    const T *src = img + (c0 + c) * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T *dst = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[oy * wo + ox] =
                (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                    ? src[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)]
                    : T(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into the image gradient.
template <class T>
void col2im(const T *cols, std::size_t c0, std::size_t nc, std::size_t h,
            std::size_t w, std::size_t k, std::size_t stride, std::size_t pad,
            std::size_t ho, std::size_t wo, T *img) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < nc; ++c) {
    T *dst = img + (c0 + c) * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T *src = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dst[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] +=
                src[oy * wo + ox];
          }
        }
      }
    }
  }
}

} // namespace evl::kernels
