#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace metal {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// splitmix64 finalizer
constexpr std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Seed of a named substream. Every random draw in the library flows from
/// the experiment seed through one of these, so runs are reproducible and
/// independent of the order in which unrelated streams are consumed.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view stream,
                                    std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t h = detail::mix(seed ^ detail::fnv1a(stream));
  for (std::uint64_t i : indices) h = detail::mix(h ^ detail::mix(i + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, std::string_view stream,
                    std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(substream_seed(seed, stream, indices));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace metal
