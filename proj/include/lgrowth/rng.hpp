#pragma once

#include <cstdint>
#include <random>

namespace lgrowth {

// Finalizer step of the splitmix64 generator.  Bijective on uint64, so
// deriving child seeds through it never collapses two distinct keys.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Packs a (condition, replication, stage, method) address into a single
// 56-bit-wide key: cond:16 | rep:24 | stage:8 | method:8.  The packing is
// injective over the admissible ranges, so every stream in a run is distinct.
std::uint64_t stream_key(std::uint32_t condition, std::uint32_t replication,
                         std::uint32_t stage, std::uint32_t method);

// Deterministic random stream.  Engine state is mt19937_64 seeded through
// mix64; all variate transforms are implemented here rather than with
// std::*_distribution so that sequences are identical across platforms and
// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

  // Child stream addressed by `key`.  key -> seed_ ^ mix64(key) is injective
  // for a fixed parent, and the outer mix64 decorrelates nearby keys.
  Rng derive(std::uint64_t key) const { return Rng(mix64(seed_ ^ mix64(key))); }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t raw() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n), unbiased (rejection on the top residue).
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal();

  // Standard lognormal exp(Z), Z ~ N(0,1).
  double lognormal() { return std::exp(normal()); }

  // Student t with `dof` degrees of freedom: Z / sqrt(chi2_dof / dof).
  double student_t(int dof);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace lgrowth
