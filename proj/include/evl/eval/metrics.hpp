#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "evl/error.hpp"

namespace evl {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(std::size_t classes = 3) : c_(classes), n_(classes * classes, 0) {
    if (classes == 0) throw ValidationError("confusion matrix needs at least one class");
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::size_t>> &rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ValidationError("confusion matrix must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) cm.n_[i * cm.c_ + j] = rows[i][j];
    }
    return cm;
  }

  std::size_t classes() const { return c_; }

  void add(std::size_t truth, std::size_t predicted, std::size_t count = 1) {
    if (truth >= c_ || predicted >= c_) throw ValidationError("class index outside the confusion matrix");
    n_[truth * c_ + predicted] += count;
  }

  std::size_t operator()(std::size_t truth, std::size_t predicted) const { return n_.at(truth * c_ + predicted); }

  std::size_t total() const {
    std::size_t t = 0;
    for (auto v : n_) t += v;
    return t;
  }

  std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < c_; ++i) t += n_[i * c_ + i];
    return t;
  }

  std::size_t row_sum(std::size_t i) const {
    std::size_t t = 0;
    for (std::size_t j = 0; j < c_; ++j) t += n_[i * c_ + j];
    return t;
  }

  std::size_t col_sum(std::size_t j) const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < c_; ++i) t += n_[i * c_ + j];
    return t;
  }

  ConfusionMatrix &operator+=(const ConfusionMatrix &o) {
    if (o.c_ != c_) throw ValidationError("cannot add confusion matrices of different sizes");
    for (std::size_t i = 0; i < n_.size(); ++i) n_[i] += o.n_[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix &) const = default;

private:
  std::size_t c_;
  std::vector<std::size_t> n_;
};

struct EvalReport {
  std::size_t n = 0;
  double accuracy = 0;
  std::vector<double> precision, recall, f1; // per class, one-vs-rest
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  /// Set when some per-class metric had a zero denominator and was reported as 0.
  bool zero_denominator = false;
  std::vector<std::string> notes;
  ConfusionMatrix cm;
  double loss = NAN; // mean cross-entropy when known
};

/// Accuracy = trace / total; per-class precision, recall and F1 from the
/// one-vs-rest counts TP, FP, FN; macro averages are plain means over classes.
/// A zero denominator yields 0 and raises the flag.
inline EvalReport compute_metrics(const ConfusionMatrix &cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw ValidationError("cannot compute metrics of an empty confusion matrix");
  EvalReport r;
  r.cm = cm;
  r.n = total;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  const std::size_t c = cm.classes();
  auto ratio = [&](double num, double den, const std::string &what) {
    if (den == 0) {
      r.zero_denominator = true;
      r.notes.push_back(what + " has a zero denominator; reported as 0");
      return 0.0;
    }
    return num / den;
  };
  for (std::size_t k = 0; k < c; ++k) {
    const double tp = static_cast<double>(cm(k, k));
    const double fp = static_cast<double>(cm.col_sum(k)) - tp;
    const double fn = static_cast<double>(cm.row_sum(k)) - tp;
    const double p = ratio(tp, tp + fp, "precision of class " + std::to_string(k));
    const double rc = ratio(tp, tp + fn, "recall of class " + std::to_string(k));
    const double f = ratio(2 * p * rc, p + rc, "F1 of class " + std::to_string(k));
    r.precision.push_back(p);
    r.recall.push_back(rc);
    r.f1.push_back(f);
  }
  for (std::size_t k = 0; k < c; ++k) {
    r.macro_precision += r.precision[k];
    r.macro_recall += r.recall[k];
    r.macro_f1 += r.f1[k];
  }
  r.macro_precision /= static_cast<double>(c);
  r.macro_recall /= static_cast<double>(c);
  r.macro_f1 /= static_cast<double>(c);
  return r;
}

/// Metrics as percentages with two decimals: "acc / precision / recall / F1".
inline std::string format_metrics_row(double accuracy, double precision, double recall, double f1) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f / %.2f / %.2f / %.2f", 100 * accuracy, 100 * precision, 100 * recall,
                100 * f1);
  return buf;
}

inline std::string format_metrics_row(const EvalReport &r) {
  return format_metrics_row(r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1);
}

/// Arithmetic mean of every metric over the reports; confusion matrices are summed.
inline EvalReport average_reports(const std::vector<EvalReport> &reports) {
  if (reports.empty()) throw ValidationError("no reports to average");
  EvalReport m;
  const std::size_t c = reports[0].precision.size();
  const double k = static_cast<double>(reports.size());
  m.cm = ConfusionMatrix(reports[0].cm.classes());
  m.precision.assign(c, 0);
  m.recall.assign(c, 0);
  m.f1.assign(c, 0);
  m.loss = 0;
  for (const auto &r : reports) {
    m.n += r.n;
    m.accuracy += r.accuracy / k;
    m.macro_precision += r.macro_precision / k;
    m.macro_recall += r.macro_recall / k;
    m.macro_f1 += r.macro_f1 / k;
    m.loss += r.loss / k;
    for (std::size_t i = 0; i < c; ++i) {
      m.precision[i] += r.precision[i] / k;
      m.recall[i] += r.recall[i] / k;
      m.f1[i] += r.f1[i] / k;
    }
    m.zero_denominator = m.zero_denominator || r.zero_denominator;
    m.cm += r.cm;
  }
  return m;
}

} // namespace evl
