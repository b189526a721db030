#pragma once

// Shared plumbing: error types, deterministic RNG with named substreams,
// FNV-1a content hashing, finiteness checks.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace umlb {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value reached a place where the pipeline must stop.
struct NumericError : Error {
  using Error::Error;
};

// Bad user input: config values, corpus files, CLI arguments.
struct InvalidInput : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

// Every random draw in the project flows from one root seed through a named
// substream, so that e.g. the mask batch draw is reproducible independently
// of how many init draws happened before it.
inline uint64_t substream_seed(uint64_t root, std::string_view name) {
  uint64_t h = fnv1a64(name);
  h = fnv1a64(&root, sizeof(root), h);
  return h ? h : 0x9e3779b97f4a7c15ull;
}

inline uint64_t substream_seed(uint64_t root, std::string_view name, uint64_t index) {
  uint64_t h = substream_seed(root, name);
  return fnv1a64(&index, sizeof(index), h);
}

// mt19937_64 is bit-stable across platforms; the distributions in <random>
// are not, so uniform/normal transforms are done by hand.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53 random bits
  double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // n must be > 0; modulo bias is irrelevant at our n
  int next_below(int n) { return static_cast<int>(gen_() % static_cast<uint64_t>(n)); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Fisher-Yates, fixed algorithm (std::shuffle is implementation-defined).
template <typename V>
void deterministic_shuffle(V& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.next_below(static_cast<int>(i)));
    std::swap(v[i - 1], v[j]);
  }
}

template <typename T>
bool all_finite(const T* p, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  }
  return true;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  return all_finite(v.data(), v.size());
}

}  // namespace umlb
