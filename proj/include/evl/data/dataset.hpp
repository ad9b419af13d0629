#pragma once

// On-disk sample sets: one NIfTI float32 file per sample (W x H x 3) plus a
// manifest CSV with columns subject_id,label,path.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evl/data/nifti.hpp"
#include "evl/data/pipeline.hpp"
#include "evl/data/split.hpp"

namespace evl {

struct ManifestRow {
  std::string subject;
  std::size_t label = 0;
  std::string path; // relative to the manifest directory, or absolute
};

inline const char *kManifestHeader = "subject_id,label,path";

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path &file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open manifest " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw ValidationError(file.string() + ": first line must be '" + std::string(kManifestHeader) + "'");
  }
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.back() == '\r') throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": CRLF line ending");
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 3 || f[0].empty() || f[2].empty()) {
      throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": expected subject_id,label,path");
    }
    try {
      rows.push_back({f[0], parse_class(f[1]), f[2]});
    } catch (const ValidationError &e) {
      throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_manifest(const std::filesystem::path &file, const std::vector<ManifestRow> &rows) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + file.string());
  out << kManifestHeader << '\n';
  for (const auto &r : rows) out << r.subject << ',' << class_name(r.label) << ',' << r.path << '\n';
  if (!out) throw IoError("write failed for " + file.string());
}

/// [3, H, W] image stored as a W x H x 3 float32 volume.
inline Volume image_to_volume(const Tensor<double> &img) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<double> raw(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        raw[x + w * (y + h * c)] = static_cast<double>(static_cast<float>(img[(c * h + y) * w + x]));
  return Volume({w, h, 3}, std::move(raw), NiftiType::float32);
}

inline Tensor<double> volume_to_image(const Volume &v) {
  if (v.dims[2] != 3) throw ValidationError("sample volume must have 3 channels along z");
  const std::size_t w = v.dims[0], h = v.dims[1];
  Tensor<double> img({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) img[(c * h + y) * w + x] = v.at(x, y, c);
  return img;
}

/// Streams samples to `dir/samples/NNNNNN.nii`; finish() writes the manifest.
class DatasetWriter {
public:
  explicit DatasetWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_ / "samples");
  }

  void add(const Sample &s) {
    char name[64];
    std::snprintf(name, sizeof name, "%06zu.nii", rows_.size());
    const std::string rel = std::string("samples/") + name;
    save_nifti(dir_ / rel, image_to_volume(s.image));
    rows_.push_back({s.subject, s.label, rel});
  }

  std::filesystem::path finish() const {
    const auto manifest = dir_ / "manifest.csv";
    write_manifest(manifest, rows_);
    return manifest;
  }

  std::size_t size() const { return rows_.size(); }

private:
  std::filesystem::path dir_;
  std::vector<ManifestRow> rows_;
};

inline std::filesystem::path write_dataset(const std::filesystem::path &dir, const std::vector<Sample> &samples) {
  DatasetWriter w(dir);
  for (const auto &s : samples) w.add(s);
  return w.finish();
}

inline std::vector<Sample> load_dataset(const std::filesystem::path &manifest) {
  const auto base = manifest.parent_path();
  std::vector<Sample> out;
  for (const auto &row : read_manifest(manifest)) {
    const std::filesystem::path p = row.path;
    const auto full = p.is_absolute() ? p : base / p;
    try {
      out.push_back({volume_to_image(load_nifti(full)), row.label, row.subject, 0});
    } catch (const Error &e) {
      throw IoError(full.string() + ": " + e.what());
    }
  }
  return out;
}

/// Distinct subjects with their label; a subject must carry one label.
inline std::vector<Subject> subjects_of(const std::vector<Sample> &samples) {
  std::vector<Subject> out;
  std::map<std::string, std::size_t> label_of;
  for (const auto &s : samples) {
    auto [it, fresh] = label_of.emplace(s.subject, s.label);
    if (fresh) {
      out.push_back({s.subject, s.label});
    } else if (it->second != s.label) {
      throw ValidationError("subject '" + s.subject + "' appears with two labels");
    }
  }
  return out;
}

/// Samples whose subject falls in any of `parts`.
inline std::vector<Sample> select_partitions(const std::vector<Sample> &samples, const SplitPlan &plan,
                                             const std::set<std::size_t> &parts) {
  std::vector<Sample> out;
  for (const auto &s : samples)
    if (parts.count(plan.partition_of(s.subject))) out.push_back(s);
  return out;
}

/// Stacks images into [N, 3, H, W] in scalar type T, plus labels.
template <class T> struct Batch {
  Tensor<T> images;
  std::vector<std::size_t> labels;
};

template <class T> Batch<T> stack(const std::vector<Sample> &samples) {
  if (samples.empty()) throw ValidationError("cannot stack an empty sample list");
  const Shape s0 = samples[0].image.shape();
  Shape shape{samples.size()};
  shape.insert(shape.end(), s0.begin(), s0.end());
  Batch<T> b{Tensor<T>(shape), {}};
  const std::size_t per = samples[0].image.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].image.shape() != s0) throw ValidationError("samples have differing image shapes");
    for (std::size_t j = 0; j < per; ++j) b.images[i * per + j] = static_cast<T>(samples[i].image[j]);
    b.labels.push_back(samples[i].label);
  }
  return b;
}

} // namespace evl
