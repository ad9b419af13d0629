#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evl/data/dataset.hpp"
#include "evl/model.hpp"
#include "evl/ops.hpp"
#include "evl/train/adam.hpp"
#include "evl/train/checkpoint.hpp"

namespace evl {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  AdamConfig adam; // lr 1e-4 unless overridden
  std::uint64_t seed = 0;

  /// 1e-3 for the ViTLoRA model, 1e-4 for the backbone and hybrid.
  static double default_lr(ModelKind kind) { return kind == ModelKind::vitlora ? 1e-3 : 1e-4; }

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw ConfigError("train.lr must be finite and non-negative");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0)) throw ConfigError("adam eps must be positive");
  }
};

struct EpochStats {
  std::size_t epoch = 0; // 1-based
  double train_loss = 0, val_loss = 0, train_acc = 0, val_acc = 0;
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct History {
  std::vector<EpochStats> rows;

  std::string csv() const {
    std::string out = "epoch,train_loss,val_loss,train_acc,val_acc\n";
    for (const auto &r : rows) {
      out += std::to_string(r.epoch) + ',' + format_double(r.train_loss) + ',' + format_double(r.val_loss) + ',' +
             format_double(r.train_acc) + ',' + format_double(r.val_acc) + '\n';
    }
    return out;
  }

  void write_csv(const std::filesystem::path &path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << csv();
    if (!out) throw IoError("write failed for " + path.string());
  }
};

/// Index of the largest entry; ties go to the lowest index.
template <class T> std::size_t argmax_row(const Tensor<T> &logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (logits[row * c + j] > logits[row * c + best]) best = j;
  return best;
}

/// Rows `idx` of a [N, ...] tensor, stacked.
template <class T> Tensor<T> gather_rows(const Tensor<T> &t, const std::vector<std::size_t> &idx) {
  Shape shape = t.shape();
  const std::size_t per = t.numel() / shape[0];
  shape[0] = idx.size();
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * per));
  return out;
}

/// Frozen-prefix activations for a whole sample set, computed in chunks.
template <class T> Tensor<T> compute_prefix(Classifier<T> &model, const Tensor<T> &images, std::size_t chunk = 64) {
  if (!model.has_frozen_prefix()) return images;
  const std::size_t n = images.dim(0);
  Tensor<T> out;
  std::size_t per = 0;
  for (std::size_t s = 0; s < n; s += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, n - s));
    std::iota(idx.begin(), idx.end(), s);
    Tensor<T> part = model.frozen_prefix(gather_rows(images, idx));
    if (s == 0) {
      Shape shape = part.shape();
      shape[0] = n;
      out = Tensor<T>(shape);
      per = part.numel() / idx.size();
    }
    std::copy(part.storage().begin(), part.storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(s * per));
  }
  return out;
}

/// Inference-mode logits for every row of a prefix tensor.
template <class T> Tensor<T> predict_from_prefix(Classifier<T> &model, const Tensor<T> &prefix, std::size_t chunk = 64) {
  NoGradGuard ng;
  const bool was = model.training();
  model.set_training(false);
  const std::size_t n = prefix.dim(0);
  Tensor<T> out({n, model.config().n_classes});
  for (std::size_t s = 0; s < n; s += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, n - s));
    std::iota(idx.begin(), idx.end(), s);
    const Var<T> logits = model.forward_from_prefix(constant(gather_rows(prefix, idx)));
    std::copy(logits.value().storage().begin(), logits.value().storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(s * out.dim(1)));
  }
  model.set_training(was);
  return out;
}

/// Mean cross-entropy and accuracy of logits against labels.
template <class T>
std::pair<double, double> loss_and_accuracy(const Tensor<T> &logits, const std::vector<std::size_t> &labels) {
  NoGradGuard ng;
  const double loss = static_cast<double>(cross_entropy(constant(logits), labels).value()[0]);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += argmax_row(logits, i) == labels[i];
  return {loss, static_cast<double>(hit) / static_cast<double>(labels.size())};
}

template <class T> struct TrainResult {
  History history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::map<std::string, Tensor<T>> best_params;
  std::map<std::string, Tensor<T>> best_buffers;
  bool stopped_by_callback = false;
};

/// Mini-batch Adam training with one validation pass per epoch. Frozen
/// prefixes are computed once up front. The model keeps its final-epoch
/// weights; the lowest-validation-loss weights are returned in the result.
template <class T> class Trainer {
public:
  /// Return false to end training after the reported epoch.
  using EpochCallback = std::function<bool(const EpochStats &)>;

  Trainer(Classifier<T> &model, TrainConfig cfg) : model_(model), cfg_(cfg), opt_(cfg.adam), rng_(cfg.seed) {
    cfg_.validate();
  }

  Adam<T> &optimizer() { return opt_; }
  std::mt19937_64 &rng() { return rng_; }

  std::string rng_state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
  }

  void set_rng_state(const std::string &s) {
    std::istringstream is(s);
    is >> rng_;
    if (!is) throw LoadError("invalid RNG state in checkpoint");
  }

  TrainResult<T> fit(const std::vector<Sample> &train, const std::vector<Sample> &val, EpochCallback on_epoch = {}) {
    if (train.empty()) throw ValidationError("training split is empty");
    if (val.empty()) throw ValidationError("validation split is empty");
    const auto tb = stack<T>(train), vb = stack<T>(val);
    const Tensor<T> train_prefix = compute_prefix(model_, tb.images);
    const Tensor<T> val_prefix = compute_prefix(model_, vb.images);
    return fit_prefix(train_prefix, tb.labels, val_prefix, vb.labels, on_epoch);
  }

  TrainResult<T> fit_prefix(const Tensor<T> &train_prefix, const std::vector<std::size_t> &train_labels,
                            const Tensor<T> &val_prefix, const std::vector<std::size_t> &val_labels,
                            EpochCallback on_epoch = {}) {
    TrainResult<T> res;
    const std::size_t n = train_labels.size();
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng_);
      model_.set_training(true);
      double loss_sum = 0;
      std::size_t hit = 0;
      for (std::size_t s = 0; s < n; s += cfg_.batch_size) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + cfg_.batch_size)));
        std::vector<std::size_t> labels;
        for (auto i : idx) labels.push_back(train_labels[i]);
        model_.params().zero_grad();
        const Var<T> logits = model_.forward_from_prefix(constant(gather_rows(train_prefix, idx)));
        const Var<T> loss = cross_entropy(logits, labels);
        backward(loss);
        opt_.step(model_.params());
        loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) hit += argmax_row(logits.value(), i) == labels[i];
      }
      model_.set_training(false);
      EpochStats st;
      st.epoch = epoch;
      st.train_loss = loss_sum / static_cast<double>(n);
      st.train_acc = static_cast<double>(hit) / static_cast<double>(n);
      std::tie(st.val_loss, st.val_acc) = loss_and_accuracy(predict_from_prefix(model_, val_prefix), val_labels);
      res.history.rows.push_back(st);
      if (res.best_epoch == 0 || st.val_loss < res.best_val_loss) {
        res.best_epoch = epoch;
        res.best_val_loss = st.val_loss;
        res.best_params = model_.params().snapshot();
        res.best_buffers.clear();
        for (const auto &[name, buf] : model_.params().buffers()) res.best_buffers.emplace(name, *buf);
      }
      epochs_done_ = epoch;
      if (on_epoch && !on_epoch(st)) {
        res.stopped_by_callback = true;
        break;
      }
    }
    return res;
  }

  std::size_t epochs_done() const { return epochs_done_; }

private:
  Classifier<T> &model_;
  TrainConfig cfg_;
  Adam<T> opt_;
  std::mt19937_64 rng_;
  std::size_t epochs_done_ = 0;
};

/// Loads a result's best weights into the model.
template <class T> void restore_best(Classifier<T> &model, const TrainResult<T> &res) {
  model.params().restore(res.best_params);
  for (const auto &[name, buf] : res.best_buffers) *model.params().buffers().at(name) = buf;
}

} // namespace evl
