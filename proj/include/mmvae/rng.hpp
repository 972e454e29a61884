#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mmvae {

// Counter-based stream: draw i is a pure function of (key, i), so any draw is
// reproducible without generating its predecessors. split() derives an
// independent child stream from a label; child draws never overlap the parent's.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(mix(seed ^ kSeedTag)) {}

  RngStream split(std::uint64_t label) const {
    RngStream child(0);
    child.key_ = mix(mix(key_ + kGolden) ^ mix(label + kSplitTag));
    child.counter_ = 0;
    return child;
  }

  RngStream split(std::string_view label) const { return split(fnv1a(label)); }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  // Uniform on the open interval (0, 1); never returns an endpoint.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
  }

  // Box-Muller; each draw consumes exactly two uniforms.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  std::vector<double> normal_vec(std::size_t n) {
    std::vector<double> out(n);
    for (auto& x : out) x = normal();
    return out;
  }

  // Fisher-Yates over [0, n); depends only on this stream's key.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = next_u64() % i;
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void restore(std::uint64_t key, std::uint64_t counter) {
    key_ = key;
    counter_ = counter;
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;
  static constexpr std::uint64_t kSeedTag = 0x5eed5eed5eed5eedull;
  static constexpr std::uint64_t kSplitTag = 0x51b7a5e12253e1a7ull;
  static constexpr double kPi = 3.14159265358979323846;

  // splitmix64 finalizer; bijective on 64-bit words.
  static std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mmvae
