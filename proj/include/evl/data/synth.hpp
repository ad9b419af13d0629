#pragma once

// Procedural three-class "brain slice" images: a bright ellipse with a dark
// central cavity whose size grows from CN to MCI to AD, with per-image
// jitter and Gaussian noise.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "evl/data/pipeline.hpp"

namespace evl {

struct SynthOptions {
  /// Mean cavity radius per class as a fraction of the image size
  /// (AD, MCI, CN order).
  std::array<double, kNumClasses> cavity_radius{0.22, 0.14, 0.06};
  /// Uniform relative spread of the cavity radius within a class.
  double cavity_spread = 0.12;
  /// Brain semi-axes drawn uniformly from [lo, hi] * size.
  double axis_lo = 0.28, axis_hi = 0.40;
  /// Centre jitter, uniform in +-jitter * size per axis.
  double jitter = 0.11;
  double intensity_lo = 0.7, intensity_hi = 1.3;
  double noise = 0.15;
};

/// Generator parameters behind one image; used by tests as an oracle.
struct SynthParams {
  double cx = 0, cy = 0;           // brain centre (pixels)
  double ax = 0, ay = 0;           // brain semi-axes (pixels)
  double angle = 0;                // brain orientation (radians)
  double cavity_radius = 0;        // pixels
  double intensity = 1;
  double cavity_area() const { return std::numbers::pi * cavity_radius * cavity_radius; }
};

struct SynthDataset {
  std::vector<Sample> samples;
  std::vector<SynthParams> params;
};

/// n_per_class images per class, deterministic in (seed, options). Samples
/// are ordered class by class; each is its own subject.
inline SynthDataset synth_generate(std::size_t n_per_class, std::uint64_t seed, std::size_t size,
                                   const SynthOptions &opt = {}) {
  if (size < 16) throw ValidationError("synthetic image size must be at least 16");
  SynthDataset out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double s = static_cast<double>(size);
  const double mid = (s - 1) / 2;
  std::size_t serial = 0;
  for (std::size_t label = 0; label < kNumClasses; ++label) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      SynthParams p;
      p.cx = mid + (2 * unit(rng) - 1) * opt.jitter * s;
      p.cy = mid + (2 * unit(rng) - 1) * opt.jitter * s;
      p.ax = (opt.axis_lo + (opt.axis_hi - opt.axis_lo) * unit(rng)) * s;
      p.ay = (opt.axis_lo + (opt.axis_hi - opt.axis_lo) * unit(rng)) * s;
      p.angle = unit(rng) * std::numbers::pi;
      p.cavity_radius = opt.cavity_radius[label] * s * (1 + opt.cavity_spread * (2 * unit(rng) - 1));
      p.intensity = opt.intensity_lo + (opt.intensity_hi - opt.intensity_lo) * unit(rng);

      const double ca = std::cos(p.angle), sa = std::sin(p.angle);
      Tensor<double> img({3, size, size});
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) - p.cx, dy = static_cast<double>(y) - p.cy;
          const double u = (ca * dx + sa * dy) / p.ax, v = (-sa * dx + ca * dy) / p.ay;
          const double r2 = u * u + v * v;
          double val = 0.0;
          if (r2 <= 1.0) {
            val = p.intensity * (1.0 - 0.3 * r2); // brighter core, darker rim
            if (dx * dx + dy * dy <= p.cavity_radius * p.cavity_radius) val = 0.1 * p.intensity;
          }
          val += opt.noise * gauss(rng);
          for (std::size_t c = 0; c < 3; ++c) img[(c * size + y) * size + x] = val;
        }
      char id[32];
      std::snprintf(id, sizeof id, "synth-%05zu", serial++);
      out.samples.push_back({std::move(img), label, id, 0});
      out.params.push_back(p);
    }
  }
  return out;
}

} // namespace evl
