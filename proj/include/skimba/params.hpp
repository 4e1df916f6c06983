#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "skimba/rng.hpp"
#include "skimba/tensor.hpp"

namespace skimba {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Named trainable tensors of one network, in creation order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> tensor) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, params_.size());
    params_.push_back({name, tensor});
    return tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].tensor;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : params_) out.push_back(p.name);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void set_trainable(bool flag) {
    for (auto& p : params_) p.tensor.set_requires_grad(flag);
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Prefix-scoped view used by blocks to create their parameters.
template <typename T>
class Scope {
 public:
  Scope(ParamStore<T>& store, Rng& rng, std::string prefix = "")
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  Scope sub(const std::string& name) const {
    return Scope(*store_, *rng_, prefix_.empty() ? name : prefix_ + "/" + name);
  }
  const std::string& prefix() const { return prefix_; }
  ParamStore<T>& store() const { return *store_; }
  Rng& rng() const { return *rng_; }

  /// Uniform(-b, b) with b = gain * sqrt(3 / fan_in).
  Tensor<T> weight(const std::string& name, const Shape& shape, std::size_t fan_in,
                   T gain = T(1)) const {
    const T bound = gain * static_cast<T>(std::sqrt(3.0 / static_cast<double>(fan_in)));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = uniform<T>(*rng_, -bound, bound);
    return store_->add(full_name(name), Tensor<T>(shape, std::move(v)));
  }
  Tensor<T> constant(const std::string& name, const Shape& shape, T value) const {
    return store_->add(full_name(name), Tensor<T>::full(shape, value));
  }
  Tensor<T> values(const std::string& name, const Shape& shape, std::vector<T> v) const {
    return store_->add(full_name(name), Tensor<T>(shape, std::move(v)));
  }

 private:
  std::string full_name(const std::string& name) const {
    return prefix_.empty() ? name : prefix_ + "/" + name;
  }

  ParamStore<T>* store_;
  Rng* rng_;
  std::string prefix_;
};

// ---------------------------------------------------------------------------
// SKBA checkpoint container.
//
//   "SKBA" | version u32 | entry count u64 |
//   per entry: name length u32, UTF-8 name, rank u32, extents u64 x rank,
//              values f32 x prod(extents)
//
// All integers and floats little-endian.

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename U>
void put(std::string& buf, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  buf.append(bytes, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw FormatError("truncated file");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}
}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string buf = "SKBA";
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  detail::put<std::uint64_t>(buf, entries.size());
  for (const auto& e : entries) {
    if (e.values.size() != numel(e.shape)) throw FormatError("entry size mismatch: " + e.name);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
    buf += e.name;
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.shape.size()));
    for (auto x : e.shape) detail::put<std::uint64_t>(buf, x);
    for (float v : e.values) detail::put<float>(buf, v);
  }
  return buf;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4) != "SKBA") throw FormatError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  std::vector<CheckpointEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
    e.values.resize(numel(e.shape));
    for (auto& v : e.values) v = r.get<float>();
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries");
  return entries;
}

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  detail::write_file(path, encode_checkpoint(entries));
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path));
}

template <typename T>
std::vector<CheckpointEntry> to_entries(const ParamStore<T>& store, const std::string& prefix = "") {
  std::vector<CheckpointEntry> out;
  for (const auto& p : store.params()) {
    CheckpointEntry e{prefix + p.name, p.tensor.shape(), {}};
    for (T v : p.tensor.data()) e.values.push_back(static_cast<float>(v));
    out.push_back(std::move(e));
  }
  return out;
}

/// Copies values by name; every parameter of the store must be present with
/// an identical shape.
template <typename T>
void assign_entries(ParamStore<T>& store, const std::vector<CheckpointEntry>& entries,
                    const std::string& prefix = "") {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : store.params()) {
    auto it = by_name.find(prefix + p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + prefix + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw FormatError("shape mismatch for " + p.name + ": " + shape_str(it->second->shape) +
                        " vs " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
}

}  // namespace skimba
