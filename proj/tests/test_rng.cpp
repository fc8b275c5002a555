#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <unordered_set>
#include <vector>

#include "lgrowth/rng.hpp"

using namespace lgrowth;

TEST_CASE("same seed reproduces the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.raw() == b.raw());
  }
  Rng c(42), d(43);
  bool all_equal = true;
  for (int i = 0; i < 16; ++i) all_equal = all_equal && (c.raw() == d.raw());
  CHECK_FALSE(all_equal);
}

TEST_CASE("derive is deterministic and key-sensitive") {
  Rng root(7);
  Rng a = root.derive(11);
  Rng b = root.derive(11);
  Rng c = root.derive(12);
  CHECK(a.raw() == b.raw());
  CHECK(a.seed() == b.seed());
  CHECK(a.seed() != c.seed());
  // Deriving does not advance the parent.
  Rng root2(7);
  (void)root2.derive(99);
  Rng root3(7);
  CHECK(root2.raw() == root3.raw());
}

TEST_CASE("stream keys and derived seeds are collision-free at the million scale") {
  // 10^6 distinct (condition, replication, stage, method) addresses.
  std::unordered_set<std::uint64_t> keys;
  std::unordered_set<std::uint64_t> seeds;
  keys.reserve(1 << 21);
  seeds.reserve(1 << 21);
  Rng root(123456789);
  for (std::uint32_t cond = 0; cond < 50; ++cond)
    for (std::uint32_t rep = 0; rep < 1250; ++rep)
      for (std::uint32_t stage = 0; stage < 2; ++stage)
        for (std::uint32_t method = 0; method < 8; ++method) {
          const std::uint64_t key = stream_key(cond, rep, stage, method);
          CHECK(keys.insert(key).second);
          CHECK(seeds.insert(root.derive(key).seed()).second);
        }
  CHECK(keys.size() == 1000000);
  CHECK(seeds.size() == 1000000);
}

TEST_CASE("stream_key rejects out-of-range fields") {
  CHECK_THROWS(stream_key(1u << 16, 0, 0, 0));
  CHECK_THROWS(stream_key(0, 1u << 24, 0, 0));
  CHECK_THROWS(stream_key(0, 0, 256, 0));
  CHECK_THROWS(stream_key(0, 0, 0, 256));
}

TEST_CASE("uniform01 lies in [0,1) with roughly uniform mass") {
  Rng rng(1);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(std::fabs(sum / n - 0.5) < 0.005);
}

TEST_CASE("uniform_int is bounded and near-uniform") {
  Rng rng(2);
  std::vector<int> counts(7, 0);
  const int n = 700000;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t v = rng.uniform_int(7);
    REQUIRE(v < 7);
    ++counts[static_cast<int>(v)];
  }
  for (int c : counts) CHECK(std::fabs(c / 100000.0 - 1.0) < 0.02);
  CHECK_THROWS(rng.uniform_int(0));
}

TEST_CASE("normal draws have the right first four moments") {
  Rng rng(3);
  const int n = 1000000;
  double m1 = 0, m2 = 0, m3 = 0, m4 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    m1 += z;
    m2 += z * z;
    m3 += z * z * z;
    m4 += z * z * z * z;
  }
  m1 /= n; m2 /= n; m3 /= n; m4 /= n;
  CHECK(std::fabs(m1) < 0.01);        // SE ~ 0.001
  CHECK(std::fabs(m2 - 1.0) < 0.01);  // SE ~ 0.0014
  CHECK(std::fabs(m3) < 0.02);        // skewness ~ 0
  CHECK(std::fabs(m4 - 3.0) < 0.06);  // kurtosis 3
}

TEST_CASE("student_t(5) is symmetric with variance 5/3") {
  Rng rng(4);
  const int n = 1000000;
  double m1 = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.student_t(5);
    m1 += x;
    m2 += x * x;
  }
  m1 /= n; m2 /= n;
  CHECK(std::fabs(m1) < 0.01);
  CHECK(std::fabs(m2 - 5.0 / 3.0) < 0.04);
}

TEST_CASE("lognormal draws match LN(0,1) mean and variance") {
  Rng rng(5);
  const int n = 1000000;
  double m1 = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.lognormal();
    m1 += x;
    m2 += x * x;
  }
  m1 /= n; m2 /= n;
  const double mean = std::exp(0.5);
  const double var = (std::exp(1.0) - 1.0) * std::exp(1.0);
  CHECK(std::fabs(m1 - mean) < 0.02);
  CHECK(std::fabs((m2 - m1 * m1) / var - 1.0) < 0.05);
}
