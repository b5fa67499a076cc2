#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "mept/common.hpp"

namespace mept {

// Deterministic RNG. The engine (mt19937_64) has a standard-mandated output
// sequence and the distribution math below is explicit, so streams are
// reproducible across compilers and standard libraries. Do not swap in
// std::*_distribution here: their algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw ValueError("uniform_int: n must be positive");
    uint64_t bound = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<int>(x % bound);
  }

  // Standard normal via Box-Muller (spare value cached between calls).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Gumbel(0, 1): -log(-log(U)), U in (0, 1).
  double gumbel() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return -std::log(-std::log(u));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Child stream with a tag-derived seed; keeps substreams (eval, per-task
  // generation, ...) independent of the parent's consumption order.
  Rng derive(const std::string& tag, int64_t index = 0) const {
    Fnv1a64 h;
    h.update_i64(static_cast<int64_t>(seed_));
    h.update(tag);
    h.update_i64(index);
    return Rng(h.digest());
  }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mept
