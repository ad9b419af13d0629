#pragma once

// Binary checkpoint container, little-endian throughout:
//   "EVLC" | u32 version | str config | u64 epoch | u64 adam_step | str rng
//   | u64 entry_count | entries
// where str is u64 length + bytes and each entry is
//   u32 name_len | name | u8 dtype (0 = f64, 1 = f32) | u8 rank | u64 dims[rank] | data
// Entry names carry a section prefix: param/, buffer/, adam.m/, adam.v/.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "evl/data/nifti.hpp"
#include "evl/params.hpp"
#include "evl/train/adam.hpp"

namespace evl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<double> values; // widened; f32 entries hold exact float values
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config;
  std::uint64_t epoch = 0;
  std::uint64_t adam_step = 0;
  std::string rng_state;
  std::map<std::string, CheckpointEntry> entries;

  bool has_section(const std::string &prefix) const {
    for (const auto &[name, e] : entries)
      if (name.starts_with(prefix)) return true;
    return false;
  }
};

template <class T> constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>, "checkpoints hold f64 or f32");
  return std::is_same_v<T, double> ? 0 : 1;
}

namespace detail {

class ByteWriter {
public:
  template <class V> void put(V v) {
    const auto *p = reinterpret_cast<const unsigned char *>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  void put_str(const std::string &s) {
    put<std::uint64_t>(s.size());
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<unsigned char> bytes;
};

class ByteReader {
public:
  explicit ByteReader(const std::vector<unsigned char> &b) : b_(b) {}
  template <class V> V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char *>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_str() { return get_str(static_cast<std::size_t>(get<std::uint64_t>())); }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) {
      throw LoadError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                      " more bytes)");
    }
  }
  const std::vector<unsigned char> &b_;
  std::size_t pos_ = 0;
};

template <class T>
void put_tensor(ByteWriter &w, const std::string &name, const Tensor<T> &t) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.bytes.insert(w.bytes.end(), name.begin(), name.end());
  w.put<std::uint8_t>(dtype_code<T>());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape().size()));
  for (auto d : t.shape()) w.put<std::uint64_t>(d);
  for (T v : t.storage()) w.put<T>(v);
}

} // namespace detail

inline void encode_checkpoint_header(const Checkpoint &c, std::size_t n_entries,
                                                           detail::ByteWriter &w) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  w.bytes.insert(w.bytes.end(), {'E', 'V', 'L', 'C'});
  w.put<std::uint32_t>(c.version);
  w.put_str(c.config);
  w.put<std::uint64_t>(c.epoch);
  w.put<std::uint64_t>(c.adam_step);
  w.put_str(c.rng_state);
  w.put<std::uint64_t>(n_entries);
}

/// Parses and fully validates a checkpoint image. Throws LoadError; never
/// returns a partial result.
inline Checkpoint decode_checkpoint(const std::vector<unsigned char> &bytes) {
  detail::ByteReader r(bytes);
  Checkpoint c;
  if (r.get_str(4) != "EVLC") throw LoadError("not a checkpoint (bad magic)");
  c.version = r.get<std::uint32_t>();
  if (c.version != kCheckpointVersion) {
    throw LoadError("checkpoint version " + std::to_string(c.version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  c.config = r.get_str();
  c.epoch = r.get<std::uint64_t>();
  c.adam_step = r.get<std::uint64_t>();
  c.rng_state = r.get_str();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = r.get_str(r.get<std::uint32_t>());
    CheckpointEntry e;
    e.dtype = r.get<std::uint8_t>();
    if (e.dtype > 1) throw LoadError("entry '" + name + "': unknown dtype " + std::to_string(e.dtype));
    const auto rank = r.get<std::uint8_t>();
    std::size_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (std::uint64_t{1} << 40)) throw LoadError("entry '" + name + "': bad extent");
      e.shape.push_back(static_cast<std::size_t>(d));
      numel *= static_cast<std::size_t>(d);
      if (numel > bytes.size()) throw LoadError("checkpoint truncated inside entry '" + name + "'");
    }
    e.values.resize(numel);
    for (auto &v : e.values) v = e.dtype == 0 ? r.get<double>() : static_cast<double>(r.get<float>());
    if (!c.entries.emplace(name, std::move(e)).second) throw LoadError("duplicate checkpoint entry '" + name + "'");
  }
  if (!r.done()) throw LoadError("trailing bytes after checkpoint entries");
  return c;
}

/// Which tensors a checkpoint carries.
enum class CheckpointScope {
  full,     // every parameter, every buffer, optimizer moments
  trainable // trainable parameters and their moments only (adapter checkpoint)
};

template <class T>
std::vector<unsigned char> encode_checkpoint(const ParamRegistry<T> &reg, const Adam<T> *opt, const std::string &config,
                                             std::uint64_t epoch, const std::string &rng_state,
                                             CheckpointScope scope = CheckpointScope::full) {
  std::vector<std::pair<std::string, const Tensor<T> *>> items;
  for (const auto &e : reg.entries()) {
    if (scope == CheckpointScope::full || e.var.requires_grad()) items.push_back({"param/" + e.name, &e.var.value()});
  }
  if (scope == CheckpointScope::full) {
    for (const auto &[name, buf] : reg.buffers()) items.push_back({"buffer/" + name, buf});
  }
  if (opt) {
    for (const auto &[name, m] : opt->moments()) {
      if (scope == CheckpointScope::trainable && !reg.entry(name).var.requires_grad()) continue;
      items.push_back({"adam.m/" + name, &m.m});
      items.push_back({"adam.v/" + name, &m.v});
    }
  }
  Checkpoint head;
  head.config = config;
  head.epoch = epoch;
  head.adam_step = opt ? opt->steps() : 0;
  head.rng_state = rng_state;
  detail::ByteWriter w;
  encode_checkpoint_header(head, items.size(), w);
  for (const auto &[name, t] : items) detail::put_tensor(w, name, *t);
  return std::move(w.bytes);
}

/// Applies a decoded checkpoint. Every entry is checked against the model
/// before anything is written, so a mismatch leaves the model unchanged.
/// Entries of the other float width are converted.
template <class T> void apply_checkpoint(const Checkpoint &c, ParamRegistry<T> &reg, Adam<T> *opt) {
  auto target = [&](const std::string &full) -> std::pair<std::string, std::string> {
    const auto slash = full.find('/');
    if (slash == std::string::npos) throw LoadError("checkpoint entry '" + full + "' has no section");
    return {full.substr(0, slash), full.substr(slash + 1)};
  };
  for (const auto &[full, e] : c.entries) {
    const auto [section, name] = target(full);
    const Tensor<T> *dst = nullptr;
    if (section == "param" || section == "adam.m" || section == "adam.v") {
      if (!reg.contains(name)) throw LoadError("checkpoint parameter '" + name + "' does not exist in the model");
      dst = &reg.entry(name).var.value();
    } else if (section == "buffer") {
      auto it = reg.buffers().find(name);
      if (it == reg.buffers().end()) throw LoadError("checkpoint buffer '" + name + "' does not exist in the model");
      dst = it->second;
    } else {
      throw LoadError("unknown checkpoint section '" + section + "'");
    }
    if (dst->shape() != e.shape) {
      throw LoadError("checkpoint entry '" + full + "' has shape " + shape_str(e.shape) + ", model expects " +
                      shape_str(dst->shape()));
    }
  }
  auto fill = [](Tensor<T> &dst, const CheckpointEntry &e) {
    for (std::size_t i = 0; i < e.values.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  };
  for (const auto &[full, e] : c.entries) {
    const auto [section, name] = target(full);
    if (section == "param") {
      fill(reg.get(name).mutable_value(), e);
    } else if (section == "buffer") {
      fill(*reg.buffers().at(name), e);
    } else if (opt) {
      auto &slot = opt->moments()[name];
      if (slot.m.shape() != e.shape) slot = {Tensor<T>(e.shape), Tensor<T>(e.shape)};
      fill(section == "adam.m" ? slot.m : slot.v, e);
    }
  }
  if (opt) opt->set_steps(static_cast<std::size_t>(c.adam_step));
}

template <class T>
void save_checkpoint(const std::filesystem::path &path, const ParamRegistry<T> &reg, const Adam<T> *opt,
                     const std::string &config, std::uint64_t epoch, const std::string &rng_state,
                     CheckpointScope scope = CheckpointScope::full) {
  write_file_bytes(path, encode_checkpoint(reg, opt, config, epoch, rng_state, scope));
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const IoError &e) {
    throw LoadError(e.what());
  }
}

} // namespace evl
