#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mwpgen {

// Seeded random source whose derived draws (uniform reals, bounded ints,
// shuffles, normals) are computed here rather than by <random>
// distributions, so sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent named sub-stream ("data", "keywords", "gumbel", "init", ...).
  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  // [0, 1)
  double uniform();
  // (0, 1), endpoints excluded
  double uniform_open();
  // [0, n)
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

}  // namespace mwpgen
