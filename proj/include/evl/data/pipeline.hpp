#pragma once

// Volume -> 2-d sample pipeline: pad to a cube, normalize, take the middle
// axial slices, replicate each into three channels. Plus rotation
// augmentation and minority-class balancing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evl/data/nifti.hpp"
#include "evl/tensor.hpp"

namespace evl {

inline constexpr std::size_t kNumClasses = 3;

/// Class indices: AD = 0, MCI = 1, CN = 2.
inline const char *class_name(std::size_t label) {
  static const char *names[] = {"AD", "MCI", "CN"};
  if (label >= kNumClasses) throw ValidationError("class index " + std::to_string(label) + " out of range");
  return names[label];
}

inline std::size_t parse_class(const std::string &s) {
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (s == class_name(c)) return c;
  throw ValidationError("unknown class label '" + s + "' (expected AD, MCI or CN)");
}

/// One 2-d training example. `image` is [3, H, W] with identical channels.
struct Sample {
  Tensor<double> image;
  std::size_t label = 0;
  std::string subject;
  std::size_t slice = 0;
};

struct PadResult {
  Volume volume;
  std::array<std::pair<std::size_t, std::size_t>, 3> pads; // (before, after) per axis
};

/// Zero-pads every axis to `target`, splitting an odd deficit with the extra
/// slice at the end.
inline PadResult pad_volume(const Volume &v, std::size_t target = 224) {
  PadResult r;
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] > target) {
      throw ValidationError("volume extent " + std::to_string(v.dims[a]) + " on axis " + std::to_string(a) +
                            " exceeds pad target " + std::to_string(target));
    }
    const std::size_t d = target - v.dims[a];
    r.pads[a] = {d / 2, d - d / 2};
    out[a] = target;
  }
  std::vector<double> data(out[0] * out[1] * out[2], 0.0);
  for (std::size_t z = 0; z < v.dims[2]; ++z)
    for (std::size_t y = 0; y < v.dims[1]; ++y)
      for (std::size_t x = 0; x < v.dims[0]; ++x) {
        const std::size_t ox = x + r.pads[0].first, oy = y + r.pads[1].first, oz = z + r.pads[2].first;
        data[ox + out[0] * (oy + out[1] * oz)] = v.at(x, y, z);
      }
  r.volume = Volume(out, std::move(data));
  return r;
}

/// (x - mean) / std over all voxels, population standard deviation.
inline Volume normalize_volume(const Volume &v) {
  const auto vals = v.values();
  const double n = static_cast<double>(vals.size());
  double mean = 0;
  for (double x : vals) mean += x;
  mean /= n;
  double var = 0;
  for (double x : vals) var += (x - mean) * (x - mean);
  var /= n;
  if (!(var > 1e-24 * std::max(1.0, mean * mean))) throw ValidationError("cannot normalize a zero-variance volume");
  const double sd = std::sqrt(var);
  std::vector<double> out(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) out[i] = (vals[i] - mean) / sd;
  return Volume(v.dims, std::move(out));
}

/// First axial index of the n middle slices: floor(Z/2) - n/2.
inline std::size_t middle_slice_start(std::size_t z, std::size_t n) {
  if (n == 0 || z < n) {
    throw ValidationError("cannot take " + std::to_string(n) + " middle slices from " + std::to_string(z) +
                          " axial slices");
  }
  return std::min(z / 2 - std::min(z / 2, n / 2), z - n);
}

/// Axial slice z as a [3, Y, X] image with three identical channels.
inline Tensor<double> axial_image(const Volume &v, std::size_t z) {
  const std::size_t nx = v.dims[0], ny = v.dims[1];
  Tensor<double> img({3, ny, nx});
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) {
      const double val = v.at(x, y, z);
      for (std::size_t c = 0; c < 3; ++c) img[(c * ny + y) * nx + x] = val;
    }
  return img;
}

/// The n consecutive middle axial slices; each becomes its own sample.
inline std::vector<Sample> extract_slices(const Volume &v, std::size_t n = 4, std::size_t label = 0,
                                          const std::string &subject = {}) {
  const std::size_t start = middle_slice_start(v.dims[2], n);
  std::vector<Sample> out;
  for (std::size_t z = start; z < start + n; ++z) out.push_back({axial_image(v, z), label, subject, z});
  return out;
}

/// Rotates [C, H, W] counter-clockwise (as displayed, rows downward) about
/// the image center with bilinear resampling; samples outside are 0.
inline Tensor<double> rotate(const Tensor<double> &img, double degrees) {
  if (img.rank() != 3) throw DimensionError("rotate: expected [C,H,W], got " + shape_str(img.shape()));
  if (!(std::abs(degrees) <= 180.0)) throw ValidationError("rotation angle must lie in [-180, 180]");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  double cs, sn;
  // Exact trigonometry on the axes keeps quarter turns bit-exact.
  if (degrees == 0.0) {
    return img;
  } else if (degrees == 90.0) {
    cs = 0, sn = 1;
  } else if (degrees == -90.0) {
    cs = 0, sn = -1;
  } else if (std::abs(degrees) == 180.0) {
    cs = -1, sn = 0;
  } else {
    const double rad = degrees * std::numbers::pi / 180.0;
    cs = std::cos(rad), sn = std::sin(rad);
  }
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  Tensor<double> out(img.shape());
  auto sample = [&](std::size_t ch, long y, long x) {
    if (y < 0 || x < 0 || y >= long(h) || x >= long(w)) return 0.0;
    return img[(ch * h + std::size_t(y)) * w + std::size_t(x)];
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double v = (1 - ay) * (1 - ax) * sample(ch, y0, x0);
        if (ax != 0) v += (1 - ay) * ax * sample(ch, y0, x0 + 1);
        if (ay != 0) v += ay * (1 - ax) * sample(ch, y0 + 1, x0);
        if (ax != 0 && ay != 0) v += ay * ax * sample(ch, y0 + 1, x0 + 1);
        out[(ch * h + y) * w + x] = v;
      }
    }
  return out;
}

inline std::array<std::size_t, kNumClasses> class_counts(const std::vector<Sample> &data) {
  std::array<std::size_t, kNumClasses> n{};
  for (const auto &s : data) {
    if (s.label >= kNumClasses) throw ValidationError("sample label out of range");
    ++n[s.label];
  }
  return n;
}

/// Appends rotated copies (angle uniform in [-5, 5] degrees) of the
/// `minority` class's original samples, cycling through them, until that
/// class reaches the largest class count. Originals are left untouched and
/// copies keep their subject id.
inline std::vector<Sample> balance_augment(const std::vector<Sample> &data, std::size_t minority, std::uint64_t seed) {
  const auto counts = class_counts(data);
  if (minority >= kNumClasses || counts[minority] == 0) {
    throw ValidationError("balance_augment: class " + std::to_string(minority) + " has no samples");
  }
  const std::size_t goal = *std::max_element(counts.begin(), counts.end());
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].label == minority) members.push_back(i);
  std::vector<Sample> out = data;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-5.0, 5.0);
  for (std::size_t k = 0; counts[minority] + k < goal; ++k) {
    Sample copy = data[members[k % members.size()]];
    copy.image = rotate(copy.image, angle(rng));
    out.push_back(std::move(copy));
  }
  return out;
}

} // namespace evl
