#include "lgrowth/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lgrowth {

std::uint64_t stream_key(std::uint32_t condition, std::uint32_t replication,
                         std::uint32_t stage, std::uint32_t method) {
  if (condition >= (1u << 16)) throw std::invalid_argument("stream_key: condition exceeds 16 bits");
  if (replication >= (1u << 24)) throw std::invalid_argument("stream_key: replication exceeds 24 bits");
  if (stage >= (1u << 8)) throw std::invalid_argument("stream_key: stage exceeds 8 bits");
  if (method >= (1u << 8)) throw std::invalid_argument("stream_key: method exceeds 8 bits");
  return (static_cast<std::uint64_t>(condition) << 40) |
         (static_cast<std::uint64_t>(replication) << 16) |
         (static_cast<std::uint64_t>(stage) << 8) |
         static_cast<std::uint64_t>(method);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
  const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    const std::uint64_t r = engine_();
    if (r >= threshold) return r % n;
  }
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // log(1 - u) is safe: u in [0, 1) keeps the argument in (0, 1].
  const double u1 = uniform01();
  const double u2 = uniform01();
  const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double Rng::student_t(int dof) {
  if (dof < 1) throw std::invalid_argument("student_t: dof must be >= 1");
  const double z = normal();
  double chi2 = 0.0;
  for (int i = 0; i < dof; ++i) {
    const double g = normal();
    chi2 += g * g;
  }
  return z / std::sqrt(chi2 / static_cast<double>(dof));
}

}  // namespace lgrowth
