#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vpl/binary_io.hpp"
#include "vpl/errors.hpp"
#include "vpl/tensor.hpp"

namespace vpl {

/// Ordered collection of named parameter tensors. Insertion order is fixed
/// and determines initialization draws, update order, and checkpoint layout.
class ParamSet {
 public:
  void add(std::string name, Tensor t) {
    if (contains(name)) throw ContractError("duplicate parameter " + name);
    items_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return true;
    return false;
  }

  Tensor& at(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw ContractError("unknown parameter " + name);
  }

  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw ContractError("unknown parameter " + name);
  }

  std::size_t size() const { return items_.size(); }

  std::size_t coordinate_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(n);
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// ---- checkpoint format ------------------------------------------------------
// magic "VPLCK001", u32 entry count, then per tensor:
//   u32 name length, name bytes, u32 rank, u32 dims[rank], f64 payload.
// All little-endian.

inline constexpr char kCheckpointMagic[] = "VPLCK001";

inline void save_checkpoint(const ParamSet& params, const std::string& path) {
  std::string out;
  out.append(kCheckpointMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(out, v);
  }
  write_file_bytes(path, out);
}

inline ParamSet load_checkpoint(const std::string& path) {
  ByteReader rd(read_file_bytes(path), path);
  rd.expect_magic(kCheckpointMagic);
  const std::uint32_t count = rd.get_u32();
  ParamSet params;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = rd.get_u32();
    const std::string name = rd.get_bytes(name_len, "parameter name");
    const std::uint32_t rank = rd.get_u32();
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = rd.get_u32();
      numel *= shape[i];
    }
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) values[i] = rd.get_f64();
    params.add(name, Tensor(std::move(shape), std::move(values)));
  }
  rd.expect_exhausted();
  return params;
}

}  // namespace vpl
