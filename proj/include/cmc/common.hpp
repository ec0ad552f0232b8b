// Error taxonomy, finiteness checks and small utilities shared by every module.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatches between operands.
struct ShapeError : Error {
  using Error::Error;
};

// Mathematically invalid input (log of non-positive, zero-norm embedding,
// degenerate batch, empty reduction, ...).
struct DomainError : Error {
  using Error::Error;
};

// Invalid raster/patch/conv geometry.
struct GeometryError : Error {
  using Error::Error;
};

// NaN/Inf produced by an op, or training divergence.
struct NumericError : Error {
  using Error::Error;
};

// Invalid experiment configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Dataset or checkpoint I/O problems.
struct DataError : Error {
  using Error::Error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Every op surfaces non-finite values instead of propagating them.
inline void check_finite(const std::vector<float>& v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

// FNV-1a, used for config and weight content hashes in reports.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// Shortest float formatting that round-trips, for deterministic CSV output.
inline std::string fmt_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

}  // namespace cmc
