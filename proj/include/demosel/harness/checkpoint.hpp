#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "demosel/harness/config.hpp"

namespace demosel::harness {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'E', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  diff::Shape shape;
  std::vector<double> data;

  bool operator==(const NamedArray&) const = default;
};

/// Serialized training state: config snapshot, parameters, optimizer moments
/// (arrays named "adam.m.<param>" / "adam.v.<param>"), counters and RNG.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::uint64_t epoch = 0;
  std::uint64_t optimizer_step = 0;
  std::string rng_state;
  std::vector<NamedArray> arrays;

  bool operator==(const Checkpoint&) const = default;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(std::string_view s) {
    pod<std::uint64_t>(s.size());
    out_.append(s);
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Cursor {
 public:
  explicit Cursor(std::string_view in) : in_(in) {}

  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(const char* what) {
    const std::size_t at = pos_;
    const auto n = pod<std::uint64_t>(what);
    if (n > in_.size() - pos_) throw ParseError(std::string("truncated ") + what, at);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) throw ParseError(std::string("truncated ") + what, pos_);
  }
  std::size_t offset() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == in_.size(); }
  std::string_view rest(std::size_t n) const { return in_.substr(pos_, n); }
  void skip(std::size_t n) { pos_ += n; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Layout: magic[8] | u32 version | str config | u64 epoch | u64 step |
/// str rng | u64 count | count x (str name | u64 rank | u64 dims[rank] | f64 data[prod])
/// where str = u64 length + bytes. All integers little-endian.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod<std::uint32_t>(ck.version);
  w.bytes(ck.config_json);
  w.pod<std::uint64_t>(ck.epoch);
  w.pod<std::uint64_t>(ck.optimizer_step);
  w.bytes(ck.rng_state);
  w.pod<std::uint64_t>(ck.arrays.size());
  for (const auto& a : ck.arrays) {
    if (diff::numel(a.shape) != a.data.size()) throw ContractError("array '" + a.name + "' does not match its shape");
    w.bytes(a.name);
    w.pod<std::uint64_t>(a.shape.size());
    for (auto d : a.shape) w.pod<std::uint64_t>(d);
    for (double v : a.data) w.pod<double>(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::Cursor c(bytes);
  c.need(sizeof kCheckpointMagic, "magic");
  if (c.rest(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw ParseError("not a checkpoint file (bad magic)", 0);
  }
  c.skip(sizeof kCheckpointMagic);
  Checkpoint ck;
  const std::size_t version_at = c.offset();
  ck.version = c.pod<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(ck.version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")",
                     version_at);
  }
  ck.config_json = c.bytes("config");
  ck.epoch = c.pod<std::uint64_t>("epoch");
  ck.optimizer_step = c.pod<std::uint64_t>("optimizer step");
  ck.rng_state = c.bytes("rng state");
  const auto count = c.pod<std::uint64_t>("array count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = c.bytes("array name");
    const std::size_t rank_at = c.offset();
    const auto rank = c.pod<std::uint64_t>("array rank");
    if (rank > 8) throw ParseError("implausible rank " + std::to_string(rank) + " for '" + a.name + "'", rank_at);
    std::uint64_t total = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      const auto d = c.pod<std::uint64_t>("array shape");
      a.shape.push_back(static_cast<std::size_t>(d));
      total *= d;
    }
    c.need(total * sizeof(double), "array data");
    a.data.resize(total);
    for (auto& v : a.data) v = c.pod<double>("array data");
    ck.arrays.push_back(std::move(a));
  }
  if (!c.done()) throw ParseError("trailing bytes after checkpoint", c.offset());
  return ck;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

/// Snapshot of a model and its trainer.
inline Checkpoint capture(const ExperimentConfig& config, const PolicyModel& model, const Trainer& trainer) {
  Checkpoint ck;
  ck.config_json = config_to_json(config).dump();
  ck.epoch = trainer.epochs_completed();
  ck.optimizer_step = trainer.optimizer().step_count();
  std::ostringstream rng;
  rng << trainer.rng();
  ck.rng_state = rng.str();
  const auto& params = model.parameters().all();
  for (const auto& p : params) ck.arrays.push_back({p.name(), p.value().shape(), p.value().storage()});
  const auto& opt = trainer.optimizer();
  for (const char* kind : {"m", "v"}) {
    const auto& moments = kind[0] == 'm' ? opt.first_moments() : opt.second_moments();
    for (const auto& p : params) {
      auto it = moments.find(p.name());
      if (it == moments.end()) continue;
      ck.arrays.push_back({std::string("adam.") + kind + "." + p.name(), p.value().shape(), it->second});
    }
  }
  return ck;
}

inline ExperimentConfig checkpoint_config(const Checkpoint& ck) {
  try {
    return parse_config(json::parse(ck.config_json));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint config is not valid JSON: ") + e.what(), e.byte);
  }
}

/// Loads parameter values into `model`; shapes must match exactly.
inline void restore_parameters(const Checkpoint& ck, PolicyModel& model) {
  for (auto& p : model.parameters().all()) {
    const NamedArray* a = ck.find(p.name());
    if (!a) throw ConfigError("checkpoint lacks parameter '" + p.name() + "'");
    if (a->shape != p.value().shape()) {
      throw ConfigError("checkpoint parameter '" + p.name() + "' has shape " + diff::to_string(a->shape) +
                        ", model expects " + diff::to_string(p.value().shape()));
    }
    p.mutable_value().storage() = a->data;
  }
}

/// Restores parameters, optimizer moments, counters and RNG stream.
inline void restore(const Checkpoint& ck, PolicyModel& model, Trainer& trainer) {
  restore_parameters(ck, model);
  auto& opt = trainer.optimizer();
  opt.first_moments().clear();
  opt.second_moments().clear();
  for (const auto& p : model.parameters().all()) {
    if (const NamedArray* m = ck.find("adam.m." + p.name())) opt.first_moments()[p.name()] = m->data;
    if (const NamedArray* v = ck.find("adam.v." + p.name())) opt.second_moments()[p.name()] = v->data;
  }
  opt.set_step_count(ck.optimizer_step);
  trainer.set_epochs_completed(ck.epoch);
  std::istringstream rng(ck.rng_state);
  rng >> trainer.rng();
  if (rng.fail()) throw ParseError("checkpoint RNG state is malformed", 0);
}

}  // namespace demosel::harness
