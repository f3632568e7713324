#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "pmlab/matrix.hpp"

namespace pmlab {

// Seeded RNG with hand-rolled transforms so that results depend only on the
// mt19937_64 stream, never on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller.
  double normal();

  // Uniform index in [0, n).
  std::size_t index(std::size_t n);

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample an index from an (already normalized) probability vector.
  std::size_t categorical(const Vector& probs);

 private:
  std::mt19937_64 gen_;
};

std::uint64_t fnv1a64(std::string_view bytes);

// Named sub-seed: hash of the base seed bytes followed by the stage name.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stage);

}  // namespace pmlab
