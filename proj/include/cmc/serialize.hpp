// CMCT tensor container, used for checkpoints and datasets.
//
// Layout (all little-endian):
//   magic "CMCT" (4 bytes)
//   u32 version = 1
//   u32 entry count
//   per entry: u16 name length, UTF-8 name bytes, u32 rank, u32 dims[rank],
//              f32 payload (row-major)
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cmc/tensor.hpp"

namespace cmc {

inline constexpr char kContainerMagic[4] = {'C', 'M', 'C', 'T'};
inline constexpr uint32_t kContainerVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw DataError("container: truncated file");
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

inline void write_f32_le(std::ostream& os, const float* p, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits;
    std::memcpy(&bits, &p[i], 4);
    write_le<uint32_t>(os, bits);
  }
}

inline void read_f32_le(std::istream& is, float* p, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits = read_le<uint32_t>(is);
    std::memcpy(&p[i], &bits, 4);
  }
}

}  // namespace detail

// std::map keeps entries name-ordered, so files are byte-stable.
inline void save_container(const std::string& path, const std::map<std::string, Tensor>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("container: cannot open for write: " + path);
  os.write(kContainerMagic, 4);
  detail::write_le<uint32_t>(os, kContainerVersion);
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xffff) throw DataError("container: entry name too long");
    detail::write_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) detail::write_le<uint32_t>(os, static_cast<uint32_t>(d));
    detail::write_f32_le(os, t.data().data(), t.data().size());
  }
  if (!os) throw DataError("container: write failed: " + path);
}

inline std::map<std::string, Tensor> load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("container: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kContainerMagic, 4) != 0)
    throw DataError("container: bad magic in " + path);
  uint32_t version = detail::read_le<uint32_t>(is);
  if (version != kContainerVersion)
    throw DataError("container: unsupported version " + std::to_string(version));
  uint32_t count = detail::read_le<uint32_t>(is);
  std::map<std::string, Tensor> entries;
  for (uint32_t e = 0; e < count; ++e) {
    uint16_t len = detail::read_le<uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw DataError("container: truncated name");
    uint32_t rank = detail::read_le<uint32_t>(is);
    if (rank > 8) throw DataError("container: implausible rank " + std::to_string(rank));
    std::vector<int> shape;
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = detail::read_le<uint32_t>(is);
      if (d == 0) throw DataError("container: zero extent");
      shape.push_back(static_cast<int>(d));
      n *= d;
    }
    std::vector<float> data(n);
    detail::read_f32_le(is, data.data(), n);
    entries.emplace(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return entries;
}

}  // namespace cmc
