#include "pmlab/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace pmlab {

double Rng::normal() {
  // One normal per pair of uniforms; the sine branch is discarded to keep
  // the state stream simple.
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: n must be positive");
  return static_cast<std::size_t>(gen_() % n);
}

std::size_t Rng::categorical(const Vector& probs) {
  if (probs.empty()) throw std::invalid_argument("Rng::categorical: empty distribution");
  double u = uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return probs.size() - 1;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view stage) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((base >> (8 * i)) & 0xff);
  std::uint64_t h = 14695981039346656037ull;
  for (char c : buf) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  for (unsigned char c : stage) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace pmlab
