#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace ldep {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for (base seed, purpose, index). Every random draw in
// a run goes through one of these so that any step can be replayed in isolation.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose, std::uint64_t index = 0) {
  std::uint64_t h = mix64(base);
  for (char c : purpose) h = mix64(h ^ static_cast<unsigned char>(c));
  return mix64(h ^ mix64(index));
}

template <typename Derived>
void fill_normal(Eigen::DenseBase<Derived>& out, typename Derived::Scalar stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out.derived().data()[i] = static_cast<typename Derived::Scalar>(dist(rng)) * stddev;
  }
}

}  // namespace ldep
