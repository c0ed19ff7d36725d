#pragma once

#include <optional>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/tensor.hpp"

namespace djfk::ckpt {

inline constexpr char kMagic[4] = {'D', 'J', 'F', 'K'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u64 = 2, u8 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype tag " + std::to_string(static_cast<int>(d)));
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::uint64_t>) return DType::u64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported checkpoint element type");
    return DType::u8;
  }
}

/// Raw little-endian payload of one named tensor.
struct Entry {
  DType dtype = DType::u8;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  bool operator==(const Entry&) const = default;
};

namespace detail {

template <class U>
void to_le(U v, std::uint8_t* out) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
  Bits b;
  std::memcpy(&b, &v, sizeof b);
  for (std::size_t i = 0; i < sizeof b; ++i) out[i] = static_cast<std::uint8_t>(b >> (8 * i));
}

template <class U>
U from_le(const std::uint8_t* in) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
  Bits b = 0;
  for (std::size_t i = 0; i < sizeof b; ++i) b |= static_cast<Bits>(static_cast<Bits>(in[i]) << (8 * i));
  U v;
  std::memcpy(&v, &b, sizeof v);
  return v;
}

template <class U>
void put(std::ostream& os, U v) {
  std::uint8_t buf[sizeof(U)];
  to_le(v, buf);
  os.write(reinterpret_cast<const char*>(buf), sizeof buf);
}

template <class U>
U get(std::istream& is, const char* what) {
  std::uint8_t buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof buf)) throw FormatError(std::string("checkpoint truncated reading ") + what);
  return from_le<U>(buf);
}

}  // namespace detail

struct Checkpoint {
  std::uint32_t version = kVersion;
  std::uint64_t digest = 0;
  std::map<std::string, Entry> table;

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    Entry e{dtype_of<T>(), t.shape(), std::vector<std::uint8_t>(t.numel() * sizeof(T))};
    for (std::size_t i = 0; i < t.numel(); ++i) detail::to_le(t[i], e.bytes.data() + i * sizeof(T));
    table[name] = std::move(e);
  }

  void put_u64(const std::string& name, std::uint64_t v) { put(name, Tensor<std::uint64_t>(Shape{1}, std::vector<std::uint64_t>{v})); }

  void put_text(const std::string& name, const std::string& text) {
    table[name] = Entry{DType::u8, Shape{text.size()}, std::vector<std::uint8_t>(text.begin(), text.end())};
  }

  bool has(const std::string& name) const { return table.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("checkpoint has no entry '" + name + "'");
    return it->second;
  }

  template <class T>
  Tensor<T> get(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != dtype_of<T>()) throw FormatError("checkpoint entry '" + name + "' has a different dtype");
    Tensor<T> t(e.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::from_le<T>(e.bytes.data() + i * sizeof(T));
    return t;
  }

  std::uint64_t get_u64(const std::string& name) const {
    const auto t = get<std::uint64_t>(name);
    if (t.numel() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
    return t[0];
  }

  std::string get_text(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != DType::u8) throw FormatError("checkpoint entry '" + name + "' is not text");
    return std::string(e.bytes.begin(), e.bytes.end());
  }

  bool operator==(const Checkpoint&) const = default;
};

/// magic, u32 version, u64 digest, u32 count, then per entry: u32 name
/// length, name, u8 dtype, u32 rank, u64 dims, raw data.
inline void write(std::ostream& os, const Checkpoint& c) {
  os.write(kMagic, 4);
  detail::put<std::uint32_t>(os, c.version);
  detail::put<std::uint64_t>(os, c.digest);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.table.size()));
  for (const auto& [name, e] : c.table) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
  }
  if (!os) throw FormatError("checkpoint write failed");
}

inline Checkpoint read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = detail::get<std::uint32_t>(is, "version");
  if (c.version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(c.version));
  c.digest = detail::get<std::uint64_t>(is, "digest");
  const auto n = detail::get<std::uint32_t>(is, "entry count");
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = detail::get<std::uint32_t>(is, "name length");
    if (len > 4096) throw FormatError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint truncated reading entry name");
    Entry e;
    e.dtype = static_cast<DType>(detail::get<std::uint8_t>(is, "dtype"));
    const std::size_t width = dtype_size(e.dtype);
    const auto rank = detail::get<std::uint32_t>(is, "rank");
    if (rank > 8) throw FormatError("checkpoint entry '" + name + "' has rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.shape.push_back(static_cast<std::size_t>(detail::get<std::uint64_t>(is, "shape")));
      count *= e.shape.back();
    }
    if (count > (std::size_t{1} << 34) / width) throw FormatError("checkpoint entry '" + name + "' is implausibly large");
    e.bytes.resize(count * width);
    if (!is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()))) {
      throw FormatError("checkpoint truncated in entry '" + name + "'");
    }
    if (!c.table.emplace(std::move(name), std::move(e)).second) throw FormatError("checkpoint has a duplicate entry");
  }
  return c;
}

inline void save(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write(os, c);
}

/// Reads a checkpoint and refuses a digest mismatch unless `force`.
inline Checkpoint load(const std::string& path, std::optional<std::uint64_t> expected_digest = std::nullopt, bool force = false) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  auto c = read(is);
  if (expected_digest && *expected_digest != c.digest && !force) {
    throw ConfigError("checkpoint '" + path + "' was written with a different config (digest mismatch); pass --force to load anyway");
  }
  return c;
}

}  // namespace djfk::ckpt
