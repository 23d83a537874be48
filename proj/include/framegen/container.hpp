#pragma once

// Named-tensor container used for checkpoints ("FRCKPT1") and corpora
// ("FRDATA1"). Layout, little-endian:
//   magic[8], u32 count, then per entry
//   u16 name length, name bytes, u8 dtype (0 = f32, 1 = u8), u8 rank,
//   u64 dims[rank], payload.

#include "framegen/autodiff.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

struct TensorEntry {
  std::string name;
  DType dtype = DType::u8;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;
};

inline constexpr char kCheckpointMagic[8] = {'F', 'R', 'C', 'K', 'P', 'T', '1', '\0'};
inline constexpr char kDataMagic[8] = {'F', 'R', 'D', 'A', 'T', 'A', '1', '\0'};

class Container {
 public:
  explicit Container(const char (&magic)[8]) { std::memcpy(magic_, magic, 8); }

  const std::vector<TensorEntry>& entries() const { return entries_; }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  void add_f32(const std::string& name, const Mat<float>& m) {
    TensorEntry e;
    e.name = name;
    e.dtype = DType::f32;
    e.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    e.bytes.resize(static_cast<size_t>(m.size()) * 4);
    std::memcpy(e.bytes.data(), m.data(), e.bytes.size());
    add(std::move(e));
  }

  void add_bytes(const std::string& name, std::vector<std::uint8_t> b) {
    TensorEntry e;
    e.name = name;
    e.dtype = DType::u8;
    e.dims = {static_cast<std::uint64_t>(b.size())};
    e.bytes = std::move(b);
    add(std::move(e));
  }

  void add_string(const std::string& name, const std::string& s) { add_bytes(name, {s.begin(), s.end()}); }

  // Doubles stored bit-exactly as raw bytes.
  void add_f64_raw(const std::string& name, const double* p, size_t n) {
    std::vector<std::uint8_t> b(n * 8);
    std::memcpy(b.data(), p, b.size());
    add_bytes(name, std::move(b));
  }

  const TensorEntry& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("container: missing entry '" + name + "'");
    return entries_[it->second];
  }

  Mat<float> get_f32(const std::string& name) const {
    const TensorEntry& e = get(name);
    if (e.dtype != DType::f32 || e.dims.size() != 2) throw FormatError("container: '" + name + "' is not a f32 matrix");
    Mat<float> m(static_cast<Index>(e.dims[0]), static_cast<Index>(e.dims[1]));
    std::memcpy(m.data(), e.bytes.data(), e.bytes.size());
    return m;
  }

  const std::vector<std::uint8_t>& get_bytes(const std::string& name) const {
    const TensorEntry& e = get(name);
    if (e.dtype != DType::u8) throw FormatError("container: '" + name + "' is not a byte entry");
    return e.bytes;
  }

  std::string get_string(const std::string& name) const {
    const auto& b = get_bytes(name);
    return {b.begin(), b.end()};
  }

  std::vector<double> get_f64_raw(const std::string& name) const {
    const auto& b = get_bytes(name);
    if (b.size() % 8) throw FormatError("container: '" + name + "' is not a f64 array");
    std::vector<double> v(b.size() / 8);
    std::memcpy(v.data(), b.data(), b.size());
    return v;
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(magic_, magic_ + 8);
    put(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      put(out, static_cast<std::uint16_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      out.push_back(static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) put(out, d);
      out.insert(out.end(), e.bytes.begin(), e.bytes.end());
    }
    return out;
  }

  static Container deserialize(const std::vector<std::uint8_t>& b, const char (&magic)[8]) {
    Container c(magic);
    size_t p = 0;
    auto need = [&](size_t n) {
      if (p + n > b.size()) throw FormatError("container: truncated file");
    };
    need(8);
    if (std::memcmp(b.data(), magic, 8) != 0) throw FormatError("container: bad magic");
    p = 8;
    const auto count = take<std::uint32_t>(b, p, need);
    for (std::uint32_t i = 0; i < count; ++i) {
      TensorEntry e;
      const auto len = take<std::uint16_t>(b, p, need);
      need(len);
      e.name.assign(reinterpret_cast<const char*>(b.data() + p), len);
      p += len;
      need(2);
      const std::uint8_t dt = b[p++], rank = b[p++];
      if (dt > 1) throw FormatError("container: unknown dtype in '" + e.name + "'");
      e.dtype = static_cast<DType>(dt);
      std::uint64_t n = 1;
      for (std::uint8_t r = 0; r < rank; ++r) {
        e.dims.push_back(take<std::uint64_t>(b, p, need));
        n *= e.dims.back();
      }
      const std::uint64_t size = n * (e.dtype == DType::f32 ? 4 : 1);
      need(static_cast<size_t>(size));
      e.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(p), b.begin() + static_cast<std::ptrdiff_t>(p + size));
      p += static_cast<size_t>(size);
      c.add(std::move(e));
    }
    if (p != b.size()) throw FormatError("container: trailing bytes");
    return c;
  }

  void write(const std::string& path) const {
    const auto b = serialize();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
  }

  static Container read(const std::string& path, const char (&magic)[8]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(b, magic);
  }

 private:
  void add(TensorEntry e) {
    if (e.name.size() > 0xFFFF) throw FormatError("container: name too long");
    if (!index_.emplace(e.name, entries_.size()).second) throw FormatError("container: duplicate entry '" + e.name + "'");
    entries_.push_back(std::move(e));
  }

  template <class U>
  static void put(std::vector<std::uint8_t>& out, U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }

  template <class U, class Need>
  static U take(const std::vector<std::uint8_t>& b, size_t& p, Need& need) {
    need(sizeof(U));
    U v;
    std::memcpy(&v, b.data() + p, sizeof(U));
    p += sizeof(U);
    return v;
  }

  char magic_[8];
  std::vector<TensorEntry> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace framegen
