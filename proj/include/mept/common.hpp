#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mept {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatches between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad argument values: labels out of range, invalid configs, malformed files.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (e.g. NaN loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// FNV-1a over a byte stream; used for dataset/content hashes in manifests.
class Fnv1a64 {
 public:
  void update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update_i64(int64_t v) {
    char buf[32];
    int n = std::snprintf(buf, sizeof(buf), "%lld;", static_cast<long long>(v));
    update(buf, static_cast<size_t>(n));
  }
  uint64_t digest() const { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return std::string(buf);
  }

 private:
  uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace mept
