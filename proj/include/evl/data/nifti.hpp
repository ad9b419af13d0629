#pragma once

// Single-file NIfTI-1 (.nii), little-endian, 348-byte header.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "evl/error.hpp"

namespace evl {

enum class NiftiType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16, float64 = 64 };

inline std::size_t nifti_bytes(NiftiType t) {
  switch (t) {
  case NiftiType::uint8: return 1;
  case NiftiType::int16: return 2;
  case NiftiType::float32: return 4;
  case NiftiType::float64: return 8;
  }
  return 0;
}

inline bool nifti_supported(std::int16_t code) {
  return code == 2 || code == 4 || code == 16 || code == 64;
}

/// A 3-d scalar volume, x fastest. `raw` holds the stored values exactly;
/// value(i) applies the header scaling.
struct Volume {
  std::array<std::size_t, 3> dims{1, 1, 1};
  std::vector<double> raw;
  NiftiType datatype = NiftiType::float64;
  double slope = 1.0;
  double inter = 0.0;

  Volume() = default;
  Volume(std::array<std::size_t, 3> d, std::vector<double> values, NiftiType type = NiftiType::float64)
      : dims(d), raw(std::move(values)), datatype(type) {
    if (d[0] == 0 || d[1] == 0 || d[2] == 0) throw ValidationError("volume extents must be positive");
    if (raw.size() != d[0] * d[1] * d[2]) throw ValidationError("volume data length does not match extents");
  }

  std::size_t size() const { return raw.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims[0] * (y + dims[1] * z); }

  double value(std::size_t i) const { return slope != 0.0 ? raw[i] * slope + inter : raw[i]; }
  double at(std::size_t x, std::size_t y, std::size_t z) const { return value(index(x, y, z)); }

  /// Scaled voxel values.
  std::vector<double> values() const {
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = value(i);
    return out;
  }
};

namespace detail {

template <class V> V read_le(const unsigned char *p) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  return v;
}

template <class V> void write_le(unsigned char *p, V v) { std::memcpy(p, &v, sizeof(V)); }

} // namespace detail

inline constexpr std::size_t kNiftiHeaderSize = 348;

/// Decodes a complete .nii byte image. Throws ParseError (with the offending
/// offset) or LengthError; never returns a partial volume.
inline Volume read_nifti(const std::vector<unsigned char> &bytes) {
  using detail::read_le;
  static_assert(std::endian::native == std::endian::little, "NIfTI reader assumes a little-endian host");
  if (bytes.size() < kNiftiHeaderSize) throw LengthError("NIfTI header truncated", bytes.size());
  const unsigned char *h = bytes.data();
  const auto sizeof_hdr = read_le<std::int32_t>(h);
  if (sizeof_hdr != 348) {
    throw ParseError("sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348 (big-endian files are not supported)",
                     0);
  }
  if (std::memcmp(h + 344, "n+1\0", 4) != 0) throw ParseError("bad magic, expected \"n+1\"", 344);

  const auto ndim = read_le<std::int16_t>(h + 40);
  if (ndim < 1 || ndim > 7) throw ParseError("dim[0] = " + std::to_string(ndim) + " out of range", 40);
  std::array<std::size_t, 3> dims{1, 1, 1};
  for (int i = 1; i <= ndim; ++i) {
    const auto d = read_le<std::int16_t>(h + 40 + 2 * i);
    if (d < 1) throw ParseError("dim[" + std::to_string(i) + "] must be positive", 40 + 2 * i);
    if (i <= 3) {
      dims[i - 1] = static_cast<std::size_t>(d);
    } else if (d != 1) {
      throw ParseError("only 3-d volumes are supported", 40 + 2 * i);
    }
  }
  const auto code = read_le<std::int16_t>(h + 70);
  if (!nifti_supported(code)) throw ParseError("unsupported datatype " + std::to_string(code), 70);
  const auto type = static_cast<NiftiType>(code);
  const auto bitpix = read_le<std::int16_t>(h + 72);
  if (static_cast<std::size_t>(bitpix) != 8 * nifti_bytes(type)) {
    throw ParseError("bitpix " + std::to_string(bitpix) + " disagrees with datatype", 72);
  }
  const float vox_offset_f = read_le<float>(h + 108);
  if (!(vox_offset_f >= 348.0f) || vox_offset_f != std::floor(vox_offset_f)) {
    throw ParseError("invalid vox_offset", 108);
  }
  const auto vox_offset = static_cast<std::size_t>(vox_offset_f);
  const float slope = read_le<float>(h + 112);
  const float inter = read_le<float>(h + 116);
  if (!std::isfinite(slope) || !std::isfinite(inter)) throw ParseError("non-finite scl_slope/scl_inter", 112);

  const std::size_t n = dims[0] * dims[1] * dims[2];
  const std::size_t width = nifti_bytes(type);
  if (bytes.size() < vox_offset + n * width) {
    throw LengthError("voxel data truncated: need " + std::to_string(n * width) + " bytes, have " +
                          std::to_string(bytes.size() > vox_offset ? bytes.size() - vox_offset : 0),
                      bytes.size());
  }
  std::vector<double> raw(n);
  const unsigned char *p = h + vox_offset;
  for (std::size_t i = 0; i < n; ++i, p += width) {
    switch (type) {
    case NiftiType::uint8: raw[i] = *p; break;
    case NiftiType::int16: raw[i] = read_le<std::int16_t>(p); break;
    case NiftiType::float32: raw[i] = read_le<float>(p); break;
    case NiftiType::float64: raw[i] = read_le<double>(p); break;
    }
    if (!std::isfinite(raw[i])) throw ParseError("non-finite voxel " + std::to_string(i), vox_offset + i * width);
  }
  Volume v(dims, std::move(raw), type);
  v.slope = slope;
  v.inter = inter;
  return v;
}

/// Encodes `v.raw` in its datatype with the volume's scaling fields.
inline std::vector<unsigned char> write_nifti(const Volume &v) {
  using detail::write_le;
  for (auto d : v.dims) {
    if (d == 0 || d > 32767) throw ValidationError("volume extent " + std::to_string(d) + " not representable in NIfTI-1");
  }
  const std::size_t width = nifti_bytes(v.datatype);
  const std::size_t offset = 352;
  std::vector<unsigned char> out(offset + v.size() * width, 0);
  unsigned char *h = out.data();
  write_le<std::int32_t>(h, 348);
  write_le<std::int16_t>(h + 40, 3);
  for (int i = 0; i < 3; ++i) write_le<std::int16_t>(h + 42 + 2 * i, static_cast<std::int16_t>(v.dims[i]));
  for (int i = 4; i < 8; ++i) write_le<std::int16_t>(h + 40 + 2 * i, 1);
  write_le<std::int16_t>(h + 70, static_cast<std::int16_t>(v.datatype));
  write_le<std::int16_t>(h + 72, static_cast<std::int16_t>(8 * width));
  for (int i = 0; i < 4; ++i) write_le<float>(h + 76 + 4 * i, 1.0f);
  write_le<float>(h + 108, static_cast<float>(offset));
  write_le<float>(h + 112, static_cast<float>(v.slope));
  write_le<float>(h + 116, static_cast<float>(v.inter));
  std::memcpy(h + 344, "n+1\0", 4);

  unsigned char *p = h + offset;
  for (std::size_t i = 0; i < v.size(); ++i, p += width) {
    const double r = v.raw[i];
    switch (v.datatype) {
    case NiftiType::uint8:
      if (r < 0 || r > 255 || r != std::floor(r)) throw ValidationError("voxel not representable as uint8");
      *p = static_cast<unsigned char>(r);
      break;
    case NiftiType::int16:
      if (r < -32768 || r > 32767 || r != std::floor(r)) throw ValidationError("voxel not representable as int16");
      write_le<std::int16_t>(p, static_cast<std::int16_t>(r));
      break;
    case NiftiType::float32: write_le<float>(p, static_cast<float>(r)); break;
    case NiftiType::float64: write_le<double>(p, r); break;
    }
  }
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path &path, const std::vector<unsigned char> &bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Volume load_nifti(const std::filesystem::path &path) { return read_nifti(read_file_bytes(path)); }
inline void save_nifti(const std::filesystem::path &path, const Volume &v) { write_file_bytes(path, write_nifti(v)); }

} // namespace evl
