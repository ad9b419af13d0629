#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "evl/data/dataset.hpp"
#include "evl/eval/metrics.hpp"
#include "evl/model.hpp"
#include "evl/train/trainer.hpp"

namespace evl {

/// Inference-mode report over a sample set: argmax per sample with ties
/// going to the lowest class index.
template <class T> EvalReport evaluate(Classifier<T> &model, const std::vector<Sample> &samples) {
  if (samples.empty()) throw ValidationError("cannot evaluate an empty sample set");
  const auto batch = stack<T>(samples);
  const Tensor<T> logits = predict_from_prefix(model, compute_prefix(model, batch.images));
  ConfusionMatrix cm(model.config().n_classes);
  for (std::size_t i = 0; i < batch.labels.size(); ++i) cm.add(batch.labels[i], argmax_row(logits, i));
  EvalReport r = compute_metrics(cm);
  r.loss = loss_and_accuracy(logits, batch.labels).first;
  return r;
}

template <class T> using ModelFactory = std::function<std::unique_ptr<Classifier<T>>(std::uint64_t seed)>;

struct KFoldResult {
  SplitPlan plan;
  std::vector<EvalReport> folds;
  std::vector<History> histories;
  EvalReport mean;
};

/// Subject-level k-fold: fold f trains a model seeded with seed + f on the
/// other folds and is scored on fold f with its final-epoch weights. The
/// held-out fold also serves as the per-epoch validation set, for the
/// history only.
template <class T>
KFoldResult kfold_evaluate(const ModelFactory<T> &factory, const std::vector<Sample> &samples, std::size_t k,
                           std::uint64_t seed, const TrainConfig &train_cfg) {
  if (k < 2) throw ValidationError("k-fold needs k >= 2");
  KFoldResult out;
  SplitPlan plan;
  plan.mode = SplitMode::kfold;
  plan.k = k;
  plan.seed = seed;
  out.plan = make_split(subjects_of(samples), plan);
  for (std::size_t f = 0; f < k; ++f) {
    std::set<std::size_t> rest;
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) rest.insert(g);
    const auto train = select_partitions(samples, out.plan, rest);
    const auto test = select_partitions(samples, out.plan, {f});
    auto model = factory(seed + f);
    TrainConfig cfg = train_cfg;
    cfg.seed = train_cfg.seed + f;
    Trainer<T> trainer(*model, cfg);
    out.histories.push_back(trainer.fit(train, test).history);
    out.folds.push_back(evaluate(*model, test));
  }
  out.mean = average_reports(out.folds);
  return out;
}

/// Report table with percentage columns; one row per (name, report).
inline std::string report_csv(const std::vector<std::pair<std::string, EvalReport>> &rows) {
  std::string out = "run,n,Accuracy,Precision,Recall,F1\n";
  char buf[160];
  for (const auto &[name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%.2f,%.2f,%.2f\n", name.c_str(), r.n, 100 * r.accuracy,
                  100 * r.macro_precision, 100 * r.macro_recall, 100 * r.macro_f1);
    out += buf;
  }
  return out;
}

inline std::string confusion_csv(const ConfusionMatrix &cm) {
  std::string out = "true\\predicted";
  for (std::size_t j = 0; j < cm.classes(); ++j) out += std::string(",") + class_name(j);
  out += '\n';
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    out += class_name(i);
    for (std::size_t j = 0; j < cm.classes(); ++j) out += ',' + std::to_string(cm(i, j));
    out += '\n';
  }
  return out;
}

/// One row per sample: class label, then the feature vector at round-trip
/// precision.
template <class T>
std::string export_features(Classifier<T> &model, const std::vector<Sample> &samples, FeatureLayer layer,
                            std::size_t chunk = 32) {
  if (samples.empty()) throw ValidationError("no samples to export");
  std::string out;
  for (std::size_t s = 0; s < samples.size(); s += chunk) {
    const std::vector<Sample> part(samples.begin() + static_cast<std::ptrdiff_t>(s),
                                   samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), s + chunk)));
    const auto batch = stack<T>(part);
    const Tensor<T> f = model.features(layer, batch.images);
    const std::size_t width = f.numel() / part.size();
    if (s == 0) {
      out = "label";
      for (std::size_t j = 0; j < width; ++j) out += ",f" + std::to_string(j);
      out += '\n';
    }
    for (std::size_t i = 0; i < part.size(); ++i) {
      out += class_name(part[i].label);
      for (std::size_t j = 0; j < width; ++j) out += ',' + format_double(static_cast<double>(f[i * width + j]));
      out += '\n';
    }
  }
  return out;
}

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

} // namespace evl
