#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace wqe {

// Stateless counter-based generator: every draw is a pure function of a key
// path, so results never depend on evaluation order or thread scheduling.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed) noexcept : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

  // Derives an independent child stream.
  constexpr CounterRng split(std::uint64_t id) const noexcept { return CounterRng(key_, id); }
  constexpr CounterRng split(std::initializer_list<std::uint64_t> ids) const noexcept {
    CounterRng r = *this;
    for (auto id : ids) r = r.split(id);
    return r;
  }

  constexpr std::uint64_t bits(std::uint64_t counter) const noexcept { return mix(key_ + mix(counter + 1)); }

  // Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform(std::uint64_t counter) const noexcept {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller over counters (2c, 2c+1).
  double normal(std::uint64_t counter) const noexcept {
    const double u1 = 1.0 - uniform(2 * counter);  // (0, 1]
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t counter, std::uint64_t bound) const noexcept {
    return bound == 0 ? 0 : static_cast<std::uint64_t>(uniform(counter) * static_cast<double>(bound)) % bound;
  }

  constexpr std::uint64_t key() const noexcept { return key_; }

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  constexpr CounterRng(std::uint64_t parent, std::uint64_t id) noexcept : key_(mix(parent ^ mix(id ^ 0x243f6a8885a308d3ULL))) {}

  std::uint64_t key_;
};

// FNV-1a, for turning segment ids into stream keys.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace wqe
