#pragma once

// Subject-level, class-stratified holdout and k-fold partitions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "evl/error.hpp"

namespace evl {

struct Subject {
  std::string id;
  std::size_t label = 0;
};

enum class SplitMode { holdout, kfold };

/// Holdout uses partitions 0 (train) and 1 (validation); k-fold uses
/// partition f for fold f.
struct SplitPlan {
  SplitMode mode = SplitMode::holdout;
  double train_ratio = 0.8;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  bool stratified = true;
  std::map<std::string, std::size_t> assignment;

  std::size_t partitions() const { return mode == SplitMode::holdout ? 2 : k; }

  std::vector<std::string> members(std::size_t part) const {
    std::vector<std::string> out;
    for (const auto &[id, p] : assignment)
      if (p == part) out.push_back(id);
    return out;
  }

  std::size_t partition_of(const std::string &subject) const {
    auto it = assignment.find(subject);
    if (it == assignment.end()) throw ValidationError("subject '" + subject + "' is not in the split");
    return it->second;
  }
};

namespace detail {

/// Largest-remainder apportionment of `total` across groups in proportion
/// to `sizes`; ties go to the earlier group.
inline std::vector<std::size_t> apportion(const std::vector<std::size_t> &sizes, std::size_t total) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  std::vector<std::size_t> quota(sizes.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double exact = n ? static_cast<double>(sizes[i]) * static_cast<double>(total) / static_cast<double>(n) : 0;
    quota[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[i];
    rem.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto &a, const auto &b) { return a.first > b.first; });
  for (std::size_t j = 0; assigned < total && j < rem.size(); ++j) {
    if (quota[rem[j].second] < sizes[rem[j].second]) {
      ++quota[rem[j].second];
      ++assigned;
    }
  }
  return quota;
}

} // namespace detail

/// Assigns every subject to exactly one partition. Subjects are grouped by
/// class (or pooled when not stratified), shuffled with the plan's seed, and
/// dealt out: holdout by per-class quotas summing to round(ratio * N), k-fold
/// round-robin with the fold cursor carried across classes.
inline SplitPlan make_split(const std::vector<Subject> &subjects, SplitPlan plan) {
  plan.assignment.clear();
  std::set<std::string> seen;
  for (const auto &s : subjects) {
    if (!seen.insert(s.id).second) throw ValidationError("duplicate subject id '" + s.id + "'");
  }
  if (subjects.empty()) throw ValidationError("cannot split an empty subject list");

  std::map<std::size_t, std::vector<std::string>> groups;
  for (const auto &s : subjects) groups[plan.stratified ? s.label : 0].push_back(s.id);
  std::mt19937_64 rng(plan.seed);
  for (auto &[label, ids] : groups) {
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
  }

  if (plan.mode == SplitMode::kfold) {
    if (plan.k < 2) throw ValidationError("k-fold needs k >= 2");
    if (subjects.size() < plan.k) {
      throw ValidationError(std::to_string(subjects.size()) + " subjects cannot fill k = " + std::to_string(plan.k) +
                            " folds");
    }
    std::size_t cursor = 0;
    for (const auto &[label, ids] : groups)
      for (const auto &id : ids) plan.assignment[id] = cursor++ % plan.k;
    return plan;
  }

  if (!(plan.train_ratio > 0.0 && plan.train_ratio < 1.0)) throw ValidationError("holdout ratio must lie in (0, 1)");
  const auto n_train = static_cast<std::size_t>(std::llround(plan.train_ratio * static_cast<double>(subjects.size())));
  std::vector<std::size_t> sizes;
  for (const auto &[label, ids] : groups) sizes.push_back(ids.size());
  const auto quota = detail::apportion(sizes, n_train);
  std::size_t g = 0;
  for (const auto &[label, ids] : groups) {
    for (std::size_t i = 0; i < ids.size(); ++i) plan.assignment[ids[i]] = i < quota[g] ? 0 : 1;
    ++g;
  }
  return plan;
}

} // namespace evl
