#pragma once

// Flat key=value run configuration. One entry per line, '#' starts a
// comment. `preset` and `model` pick the base architecture; every other key
// overrides one field. Unknown keys and bad values are collected and
// reported together.

#include <algorithm>
#include <charconv>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evl/config.hpp"
#include "evl/data/pipeline.hpp"
#include "evl/train/trainer.hpp"

namespace evl {

enum class Precision { f64, f32 };

struct RunConfig {
  std::string preset = "toy";
  ModelConfig model = ModelConfig::toy(ModelKind::hybrid);
  TrainConfig train;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;
  std::string manifest;                  // data.manifest
  double holdout_ratio = 0.8;            // data.holdout_ratio
  std::size_t folds = 5;                 // data.folds
  std::optional<std::size_t> balance;    // data.balance: class to grow, or none
  std::size_t n_slices = 4;              // data.slices
};

namespace detail {

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N> N parse_number(const std::string &v) {
  N out{};
  const auto *end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("'" + v + "' is not a valid number");
  return out;
}

inline bool parse_bool(const std::string &v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + v + "' is not a boolean (true/false)");
}

inline std::string bool_str(bool b) { return b ? "true" : "false"; }

inline std::string list_str(const std::vector<std::size_t> &v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct KeySpec {
  std::string name;
  std::function<void(RunConfig &, const std::string &)> set;
  std::function<std::string(const RunConfig &)> get;
};

inline const std::vector<KeySpec> &run_keys() {
  using R = RunConfig;
  static const std::vector<KeySpec> keys = [] {
    std::vector<KeySpec> k;
    auto num = [&k](const std::string &name, auto getter) {
      k.push_back({name,
                   [getter](R &c, const std::string &v) {
                     auto &ref = getter(c);
                     ref = parse_number<std::remove_reference_t<decltype(ref)>>(v);
                   },
                   [getter](const R &c) {
                     auto &ref = getter(const_cast<R &>(c));
                     if constexpr (std::is_floating_point_v<std::remove_reference_t<decltype(ref)>>) {
                       return format_double(ref);
                     } else {
                       return std::to_string(ref);
                     }
                   }});
    };
    auto flag = [&k](const std::string &name, auto getter) {
      k.push_back({name, [getter](R &c, const std::string &v) { getter(c) = parse_bool(v); },
                   [getter](const R &c) { return bool_str(getter(const_cast<R &>(c))); }});
    };
    num("seed", [](R &c) -> std::uint64_t & { return c.seed; });
    num("image_size", [](R &c) -> std::size_t & { return c.model.image_size; });

    num("vit.image_size", [](R &c) -> std::size_t & { return c.model.vit.image_size; });
    num("vit.patch_size", [](R &c) -> std::size_t & { return c.model.vit.patch_size; });
    num("vit.d_model", [](R &c) -> std::size_t & { return c.model.vit.d_model; });
    num("vit.n_heads", [](R &c) -> std::size_t & { return c.model.vit.n_heads; });
    num("vit.depth", [](R &c) -> std::size_t & { return c.model.vit.depth; });
    num("vit.mlp_hidden", [](R &c) -> std::size_t & { return c.model.vit.mlp_hidden; });
    num("vit.head_hidden", [](R &c) -> std::size_t & { return c.model.vit.head_hidden; });
    num("vit.head_dropout", [](R &c) -> double & { return c.model.vit.head_dropout; });
    num("vit.ln_eps", [](R &c) -> double & { return c.model.vit.ln_eps; });
    flag("vit.frozen", [](R &c) -> bool & { return c.model.vit.frozen; });

    num("lora.rank", [](R &c) -> std::size_t & { return c.model.vit.lora.rank; });
    k.push_back({"lora.placement",
                 [](R &c, const std::string &v) {
                   auto &l = c.model.vit.lora;
                   if (v == "all") {
                     l.blocks = BlockPlacement::all;
                   } else if (v == "last2") {
                     l.blocks = BlockPlacement::last_two;
                   } else if (v == "list") {
                     l.blocks = BlockPlacement::list;
                   } else {
                     throw ConfigError("'" + v + "' is not a placement (all, last2, list)");
                   }
                 },
                 [](const R &c) -> std::string {
                   switch (c.model.vit.lora.blocks) {
                   case BlockPlacement::all: return "all";
                   case BlockPlacement::last_two: return "last2";
                   case BlockPlacement::list: return "list";
                   }
                   return "?";
                 }});
    k.push_back({"lora.blocks",
                 [](R &c, const std::string &v) {
                   std::vector<std::size_t> out;
                   std::stringstream ss(v);
                   for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<std::size_t>(trim(item)));
                   c.model.vit.lora.block_list = out;
                 },
                 [](const R &c) { return list_str(c.model.vit.lora.block_list); }});
    k.push_back({"lora.targets",
                 [](R &c, const std::string &v) {
                   LoraTargets t{false, false, false};
                   for (char ch : v) {
                     if (ch == 'q') {
                       t.query = true;
                     } else if (ch == 'k') {
                       t.key = true;
                     } else if (ch == 'v') {
                       t.value = true;
                     } else {
                       throw ConfigError("lora.targets takes letters from q, k, v");
                     }
                   }
                   c.model.vit.lora.targets = t;
                 },
                 [](const R &c) {
                   const auto &t = c.model.vit.lora.targets;
                   return std::string(t.query ? "q" : "") + (t.key ? "k" : "") + (t.value ? "v" : "");
                 }});
    k.push_back({"lora.mode",
                 [](R &c, const std::string &v) {
                   if (v == "fused") {
                     c.model.vit.lora.mode = LoraMode::fused;
                   } else if (v == "per_head") {
                     c.model.vit.lora.mode = LoraMode::per_head;
                   } else {
                     throw ConfigError("'" + v + "' is not a lora mode (fused, per_head)");
                   }
                 },
                 [](const R &c) { return std::string(c.model.vit.lora.mode == LoraMode::fused ? "fused" : "per_head"); }});
    num("lora.init_std", [](R &c) -> double & { return c.model.vit.lora.init_std; });

    num("backbone.input_size", [](R &c) -> std::size_t & { return c.model.backbone.input_size; });
    num("backbone.tap_stage", [](R &c) -> std::size_t & { return c.model.backbone.tap_stage; });
    num("backbone.tap_block", [](R &c) -> std::size_t & { return c.model.backbone.tap_block; });
    num("backbone.bn_momentum", [](R &c) -> double & { return c.model.backbone.bn_momentum; });
    num("backbone.bn_eps", [](R &c) -> double & { return c.model.backbone.bn_eps; });
    flag("backbone.frozen", [](R &c) -> bool & { return c.model.backbone.frozen; });

    k.push_back({"hybrid.upsample",
                 [](R &c, const std::string &v) {
                   if (v == "bilinear") {
                     c.model.bridge.upsample = UpsampleKind::bilinear;
                   } else if (v == "nearest") {
                     c.model.bridge.upsample = UpsampleKind::nearest;
                   } else {
                     throw ConfigError("'" + v + "' is not an upsample mode (bilinear, nearest)");
                   }
                 },
                 [](const R &c) {
                   return std::string(c.model.bridge.upsample == UpsampleKind::bilinear ? "bilinear" : "nearest");
                 }});
    flag("hybrid.bridge_bias", [](R &c) -> bool & { return c.model.bridge.bias; });

    num("train.epochs", [](R &c) -> std::size_t & { return c.train.epochs; });
    num("train.batch_size", [](R &c) -> std::size_t & { return c.train.batch_size; });
    num("train.lr", [](R &c) -> double & { return c.train.adam.lr; });
    num("train.beta1", [](R &c) -> double & { return c.train.adam.beta1; });
    num("train.beta2", [](R &c) -> double & { return c.train.adam.beta2; });
    num("train.eps", [](R &c) -> double & { return c.train.adam.eps; });
    k.push_back({"train.precision",
                 [](R &c, const std::string &v) {
                   if (v == "f64" || v == "double") {
                     c.precision = Precision::f64;
                   } else if (v == "f32" || v == "float") {
                     c.precision = Precision::f32;
                   } else {
                     throw ConfigError("'" + v + "' is not a precision (f32, f64)");
                   }
                 },
                 [](const R &c) { return std::string(c.precision == Precision::f64 ? "f64" : "f32"); }});

    k.push_back({"data.manifest", [](R &c, const std::string &v) { c.manifest = v; },
                 [](const R &c) { return c.manifest; }});
    num("data.holdout_ratio", [](R &c) -> double & { return c.holdout_ratio; });
    num("data.folds", [](R &c) -> std::size_t & { return c.folds; });
    num("data.slices", [](R &c) -> std::size_t & { return c.n_slices; });
    k.push_back({"data.balance",
                 [](R &c, const std::string &v) {
                   if (v == "none") {
                     c.balance.reset();
                   } else {
                     c.balance = parse_class(v);
                   }
                 },
                 [](const R &c) { return std::string(c.balance ? class_name(*c.balance) : "none"); }});
    return k;
  }();
  return keys;
}

} // namespace detail

/// Key/value pairs in input order; later duplicates win.
using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

/// Splits a config document into entries; syntax errors go to `errors`.
inline ConfigEntries parse_config_text(const std::string &text, std::vector<std::string> &errors,
                                       const std::string &origin = "config") {
  ConfigEntries out;
  std::stringstream ss(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(ss, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back(origin + ":" + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    out.push_back({detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1))});
  }
  return out;
}

/// Builds a run configuration from entries (file first, then overrides).
/// `train.lr` defaults per model kind when not given. Throws one ConfigError
/// listing every problem.
inline RunConfig build_run_config(const ConfigEntries &entries, std::vector<std::string> errors = {}) {
  std::map<std::string, std::string> kv;
  for (const auto &[k, v] : entries) kv[k] = v;

  RunConfig c;
  ModelKind kind = ModelKind::hybrid;
  if (auto it = kv.find("model"); it != kv.end()) {
    try {
      kind = parse_model_kind(it->second);
    } catch (const ConfigError &e) {
      errors.push_back(std::string("model: ") + e.what());
    }
  }
  if (auto it = kv.find("preset"); it != kv.end()) {
    if (it->second != "toy" && it->second != "full") {
      errors.push_back("preset: '" + it->second + "' is not a preset (toy, full)");
    } else {
      c.preset = it->second;
    }
  }
  c.model = c.preset == "full" ? ModelConfig::full(kind) : ModelConfig::toy(kind);
  c.train.adam.lr = TrainConfig::default_lr(kind);

  std::map<std::string, const detail::KeySpec *> specs;
  for (const auto &k : detail::run_keys()) specs[k.name] = &k;
  for (const auto &[key, value] : kv) {
    if (key == "model" || key == "preset") continue;
    auto it = specs.find(key);
    if (it == specs.end()) {
      errors.push_back("unknown key '" + key + "'");
      continue;
    }
    try {
      it->second->set(c, value);
    } catch (const Error &e) {
      errors.push_back(key + ": " + e.what());
    }
  }
  if (errors.empty()) {
    try {
      c.model.resolve();
    } catch (const ConfigError &e) {
      errors.push_back(e.what());
    }
    try {
      c.train.validate();
    } catch (const ConfigError &e) {
      errors.push_back(e.what());
    }
    if (!(c.holdout_ratio > 0 && c.holdout_ratio < 1)) errors.push_back("data.holdout_ratio must lie in (0, 1)");
    if (c.folds < 2) errors.push_back("data.folds must be at least 2");
    if (c.n_slices == 0) errors.push_back("data.slices must be at least 1");
  }
  c.train.seed = c.seed;
  if (!errors.empty()) {
    std::string msg = std::to_string(errors.size()) + " configuration error(s):";
    for (const auto &e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

inline RunConfig parse_run_config(const std::string &text, const ConfigEntries &overrides = {}) {
  std::vector<std::string> errors;
  auto entries = parse_config_text(text, errors);
  entries.insert(entries.end(), overrides.begin(), overrides.end());
  return build_run_config(entries, errors);
}

/// Every key with its resolved value; parsing this text reproduces the run.
inline std::string run_config_text(const RunConfig &c) {
  std::string out = "model = " + std::string(to_string(c.model.kind)) + "\npreset = " + c.preset + "\n";
  for (const auto &k : detail::run_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

} // namespace evl
