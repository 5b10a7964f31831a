#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

static_assert(std::endian::native == std::endian::little,
              "weight archive I/O assumes a little-endian host");

enum class ParamKind { Learnable, Buffer };
enum class ParamInit { TruncNormal, Zero, One };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind = ParamKind::Learnable;
  ParamInit init = ParamInit::TruncNormal;
};

using ParameterPlan = std::vector<ParamSpec>;

inline std::size_t learnable_count(const ParameterPlan& plan) {
  std::size_t n = 0;
  for (const auto& p : plan)
    if (p.kind == ParamKind::Learnable) n += shape_numel(p.shape);
  return n;
}

inline std::size_t buffer_count(const ParameterPlan& plan) {
  std::size_t n = 0;
  for (const auto& p : plan)
    if (p.kind == ParamKind::Buffer) n += shape_numel(p.shape);
  return n;
}

// Named-tensor container with a fixed binary layout:
//   magic "DPTW", u64 record count, then per record
//   u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//   u32 rank, rank x u64 extents, raw little-endian IEEE-754 data.
// Records keep insertion order; names are unique; save/load/save is
// byte-exact.
class WeightArchive {
 public:
  struct Record {
    std::string name;
    std::uint8_t dtype = 0;
    Shape shape;
    std::vector<unsigned char> raw;

    std::size_t numel() const { return shape_numel(shape); }
  };

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    check_config(index_.find(name) == index_.end(),
                 "weight archive: duplicate record name '" + name + "'");
    Record r;
    r.name = name;
    r.dtype = dtype_code<T>();
    r.shape = t.shape();
    r.raw.resize(t.numel() * sizeof(T));
    std::memcpy(r.raw.data(), t.data(), r.raw.size());
    index_[name] = records_.size();
    records_.push_back(std::move(r));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    check_config(it != index_.end(), "weight archive: missing record '" + name + "'");
    const Record& r = records_[it->second];
    check_config(r.dtype == dtype_code<T>(),
                 "weight archive: dtype mismatch for record '" + name + "'");
    std::vector<T> data(r.numel());
    std::memcpy(data.data(), r.raw.data(), r.raw.size());
    return Tensor<T>(r.shape, std::move(data));
  }

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& r : records_) n += r.numel();
    return n;
  }

  std::vector<unsigned char> serialize() const {
    std::vector<unsigned char> out;
    auto put_bytes = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      out.insert(out.end(), b, b + n);
    };
    put_bytes("DPTW", 4);
    std::uint64_t count = records_.size();
    put_bytes(&count, 8);
    for (const auto& r : records_) {
      std::uint32_t len = static_cast<std::uint32_t>(r.name.size());
      put_bytes(&len, 4);
      put_bytes(r.name.data(), r.name.size());
      put_bytes(&r.dtype, 1);
      std::uint32_t rank = static_cast<std::uint32_t>(r.shape.size());
      put_bytes(&rank, 4);
      for (std::size_t d : r.shape) {
        std::uint64_t e = d;
        put_bytes(&e, 8);
      }
      put_bytes(r.raw.data(), r.raw.size());
    }
    return out;
  }

  static WeightArchive deserialize(const std::vector<unsigned char>& bytes) {
    WeightArchive a;
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > bytes.size()) throw IoError("weight archive: truncated file");
    };
    need(12);
    if (std::memcmp(bytes.data(), "DPTW", 4) != 0)
      throw IoError("weight archive: bad magic, expected DPTW");
    pos = 4;
    std::uint64_t count;
    std::memcpy(&count, bytes.data() + pos, 8);
    pos += 8;
    for (std::uint64_t i = 0; i < count; ++i) {
      Record r;
      need(4);
      std::uint32_t len;
      std::memcpy(&len, bytes.data() + pos, 4);
      pos += 4;
      need(len);
      r.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
      pos += len;
      need(5);
      r.dtype = bytes[pos];
      pos += 1;
      if (r.dtype > 1) throw IoError("weight archive: unknown dtype code in '" + r.name + "'");
      std::uint32_t rank;
      std::memcpy(&rank, bytes.data() + pos, 4);
      pos += 4;
      need(static_cast<std::size_t>(rank) * 8);
      r.shape.resize(rank);
      for (std::uint32_t d = 0; d < rank; ++d) {
        std::uint64_t e;
        std::memcpy(&e, bytes.data() + pos, 8);
        pos += 8;
        r.shape[d] = static_cast<std::size_t>(e);
      }
      std::size_t width = r.dtype == 0 ? 4 : 8;
      need(r.numel() * width);
      r.raw.assign(bytes.data() + pos, bytes.data() + pos + r.numel() * width);
      pos += r.numel() * width;
      if (a.index_.count(r.name)) throw IoError("weight archive: duplicate record '" + r.name + "'");
      a.index_[r.name] = a.records_.size();
      a.records_.push_back(std::move(r));
    }
    return a;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("weight archive: cannot open '" + path + "' for writing");
    auto bytes = serialize();
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("weight archive: write failed for '" + path + "'");
  }

  static WeightArchive load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("weight archive: cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  template <typename T>
  static constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "archive supports f32 and f64 tensors");
    return std::is_same_v<T, float> ? 0 : 1;
  }

  std::vector<Record> records_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace dpt
