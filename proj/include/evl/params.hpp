#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "evl/autodiff.hpp"

namespace evl {

/// Named model parameters with frozen/trainable flags. A parameter is
/// trainable exactly when its leaf node tracks gradients, so freezing also
/// removes it from every recorded graph.
template <class T> class ParamRegistry {
public:
  struct Entry {
    std::string name;
    Var<T> var;
    std::string group; // "lora", "head", "bridge", "backbone", "vit", ...
  };

  Var<T> add(const std::string &name, Tensor<T> value, bool trainable, std::string group) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Var<T>(std::move(value), trainable), std::move(group)});
    return entries_.back().var;
  }

  /// Non-trainable state saved with the model (batch-norm running stats).
  void add_buffer(const std::string &name, Tensor<T> *buffer) {
    if (buffers_.count(name)) throw ConfigError("duplicate buffer name '" + name + "'");
    buffers_.emplace(name, buffer);
  }

  const std::vector<Entry> &entries() const noexcept { return entries_; }
  std::vector<Entry> &entries() noexcept { return entries_; }
  const std::map<std::string, Tensor<T> *> &buffers() const noexcept { return buffers_; }

  bool contains(const std::string &name) const { return index_.count(name) > 0; }

  Var<T> &get(const std::string &name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].var;
  }
  const Entry &entry(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  void set_trainable(const std::string &name, bool on) {
    auto &v = get(name);
    v.set_requires_grad(on);
    if (!on) v.clear_grad();
  }

  /// Freezes or unfreezes every parameter of a group.
  void set_group_trainable(const std::string &group, bool on) {
    for (auto &e : entries_) {
      if (e.group == group) {
        e.var.set_requires_grad(on);
        if (!on) e.var.clear_grad();
      }
    }
  }

  std::size_t count(bool trainable) const {
    std::size_t total = 0;
    for (const auto &e : entries_)
      if (e.var.requires_grad() == trainable) total += e.var.numel();
    return total;
  }
  std::size_t count_trainable() const { return count(true); }
  std::size_t count_frozen() const { return count(false); }

  /// Trainable element count per group.
  std::map<std::string, std::size_t> trainable_by_group() const {
    std::map<std::string, std::size_t> out;
    for (const auto &e : entries_)
      if (e.var.requires_grad()) out[e.group] += e.var.numel();
    return out;
  }

  void zero_grad() {
    for (auto &e : entries_) e.var.zero_grad();
  }

  /// Deep copy of all parameter values, keyed by name.
  std::map<std::string, Tensor<T>> snapshot() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto &e : entries_) out.emplace(e.name, e.var.value());
    return out;
  }

  void restore(const std::map<std::string, Tensor<T>> &values) {
    for (const auto &[name, value] : values) {
      auto &v = get(name);
      v.value().require_same_shape(value, ("restore " + name).c_str());
      v.mutable_value() = value;
    }
  }

private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, Tensor<T> *> buffers_;
};

} // namespace evl
