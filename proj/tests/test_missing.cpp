#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lgrowth/errors.hpp"
#include "lgrowth/missing.hpp"
#include "lgrowth/model.hpp"

using namespace lgrowth;

namespace {

LongitudinalDataset make_cohort(int n, std::uint64_t seed,
                                ErrorDistribution dist = ErrorDistribution::normal()) {
  return generate_cohort(GcmSpec{}, dist, n, seed);
}

}  // namespace

TEST_CASE("missing-rate validation bounds") {
  validate_missing_rate(0.0);
  validate_missing_rate(0.30);
  validate_missing_rate(0.449);
  CHECK_THROWS_AS(validate_missing_rate(0.45), ConfigError);
  CHECK_THROWS_AS(validate_missing_rate(0.6), ConfigError);
  CHECK_THROWS_AS(validate_missing_rate(-0.05), ConfigError);
}

TEST_CASE("MAR with zero rate returns the data unchanged") {
  const LongitudinalDataset data = make_cohort(200, 1);
  const LongitudinalDataset out = apply_mar(data, 0.0);
  CHECK(out.mask.all());
  CHECK((out.y.array() == data.y.array()).all());
}

TEST_CASE("MAR produces monotone dropout with exact per-occasion retention") {
  const int n = 5000;
  const LongitudinalDataset data = make_cohort(n, 2);
  const double mr = 0.15;
  const LongitudinalDataset out = apply_mar(data, mr);

  // Occasion 1 fully observed; monotone patterns.
  CHECK(out.mask.col(0).all());
  for (int i = 0; i < n; ++i)
    for (int t = 0; t + 1 < 4; ++t)
      if (!out.mask(i, t)) CHECK_FALSE(out.mask(i, t + 1));

  // Retained shares at occasions 2..4 equal the design levels exactly
  // (ranks are taken against the original N).
  const Eigen::VectorXd rates = occasion_missing_rates(out);
  CHECK(rates(0) == 0.0);
  for (int t = 1; t < 4; ++t) {
    const double level = 1.0 - (2.0 * t / 3.0) * mr;
    const double expected_kept = std::llround(level * n) / static_cast<double>(n);
    CHECK(rates(t) == doctest::Approx(1.0 - expected_kept).epsilon(1e-12));
  }
  CHECK(realized_missing_rate(out) == doctest::Approx(mr).epsilon(0.01));

  // Dropout is driven by high current scores: the dropped-at-2 group has
  // larger y1 than every retained subject's y1 cutoff region.
  double min_dropped = 1e300, max_kept = -1e300;
  for (int i = 0; i < n; ++i) {
    if (!out.mask(i, 1))
      min_dropped = std::min(min_dropped, data.y(i, 0));
    else
      max_kept = std::max(max_kept, data.y(i, 0));
  }
  CHECK(min_dropped > max_kept - 1e-12);
}

TEST_CASE("MAR overall rate telescopes to mr across the grid levels") {
  const int n = 5000;
  const LongitudinalDataset data = make_cohort(n, 3);
  for (double mr : {0.05, 0.15, 0.30}) {
    const LongitudinalDataset out = apply_mar(data, mr);
    CHECK(realized_missing_rate(out) == doctest::Approx(mr).epsilon(0.01));
  }
}

TEST_CASE("MAR depends only on observed values") {
  const int n = 400;
  const LongitudinalDataset data = make_cohort(n, 4);
  const LongitudinalDataset masked = apply_mar(data, 0.30);

  // Perturb exactly the cells the first pass masked, then re-run: the mask
  // must be identical because cutoffs never touch unobserved values.
  LongitudinalDataset perturbed = data;
  Rng rng(99);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < 4; ++t)
      if (!masked.mask(i, t)) perturbed.y(i, t) += 10.0 * rng.normal();
  const LongitudinalDataset masked2 = apply_mar(perturbed, 0.30);
  CHECK((masked2.mask == masked.mask).all());
}

TEST_CASE("MAR rejects partially observed input") {
  LongitudinalDataset data = make_cohort(50, 5);
  data.mask(0, 3) = false;
  CHECK_THROWS_AS(apply_mar(data, 0.15), DataError);
}

TEST_CASE("MNAR loading solves the target correlation") {
  CHECK(mnar_loading(0.8, 1.0) == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(mnar_loading(0.5, 1.0) == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-12));
  CHECK_THROWS_AS(mnar_loading(1.0, 1.0), ConfigError);
  CHECK_THROWS_AS(mnar_loading(0.8, 0.0), ConfigError);
}

TEST_CASE("MNAR calibration at scale: rates, correlation, auxiliary moments") {
  const int n = 100000;
  const LongitudinalDataset data = make_cohort(n, 6);
  const double mr = 0.15;
  Rng rng(7);
  const LongitudinalDataset out = apply_mnar(data, mr, 0.8, rng);

  CHECK(out.mask.col(0).all());
  // Expected per-occasion rates at t = 2,3,4 (1-based): [2(t-1)/(T-1)] mr.
  const Eigen::VectorXd rates = occasion_missing_rates(out);
  for (int t = 1; t < 4; ++t)
    CHECK(std::fabs(rates(t) - 2.0 * t / 3.0 * mr) < 0.01);
  CHECK(std::fabs(realized_missing_rate(out) - mr) < 0.01);

  // Auxiliary variable: stored, correlated 0.8 with the latent slope.
  REQUIRE(out.covariates.count("aux") == 1);
  const Eigen::VectorXd& aux = out.covariates.at("aux");
  const Eigen::VectorXd slope = data.truth->random_effects.col(1);
  const double ca = aux.mean();
  const double cs = slope.mean();
  double sa = 0, ss = 0, sas = 0;
  for (int i = 0; i < n; ++i) {
    sa += (aux(i) - ca) * (aux(i) - ca);
    ss += (slope(i) - cs) * (slope(i) - cs);
    sas += (aux(i) - ca) * (slope(i) - cs);
  }
  const double corr = sas / std::sqrt(sa * ss);
  CHECK(corr == doctest::Approx(0.8).epsilon(0.0125));  // +-0.01 absolute
  const double r = mnar_loading(0.8, 1.0);
  CHECK(sa / n == doctest::Approx(r * r + 1.0).epsilon(0.02));
}

TEST_CASE("MNAR patterns nest across occasions and are slope-driven") {
  const int n = 20000;
  const LongitudinalDataset data = make_cohort(n, 8);
  Rng rng(9);
  const LongitudinalDataset out = apply_mnar(data, 0.30, 0.8, rng);
  // Occasions are thresholded independently, but against one Aux value with
  // thresholds that decrease in t — so missing-at-t implies missing-at-t+1.
  for (int i = 0; i < n; ++i)
    for (int t = 1; t + 1 < 4; ++t)
      if (!out.mask(i, t)) CHECK_FALSE(out.mask(i, t + 1));

  // Missingness concentrates on large slopes.
  double slope_missing = 0, slope_observed = 0;
  int n_missing = 0, n_observed = 0;
  for (int i = 0; i < n; ++i) {
    if (!out.mask(i, 3)) {
      slope_missing += data.truth->random_effects(i, 1);
      ++n_missing;
    } else {
      slope_observed += data.truth->random_effects(i, 1);
      ++n_observed;
    }
  }
  CHECK(slope_missing / n_missing > slope_observed / n_observed + 0.5);
}

TEST_CASE("MNAR contract edges") {
  LongitudinalDataset data = make_cohort(100, 10);
  Rng rng(11);
  const LongitudinalDataset unchanged = apply_mnar(data, 0.0, 0.8, rng);
  CHECK(unchanged.mask.all());
  CHECK(unchanged.covariates.count("aux") == 0);

  LongitudinalDataset no_truth = data;
  no_truth.truth.reset();
  CHECK_THROWS_AS(apply_mnar(no_truth, 0.15, 0.8, rng), DataError);
}

TEST_CASE("apply_missingness dispatch honors the mechanism/rate pairing") {
  const LongitudinalDataset data = make_cohort(300, 12);
  Rng rng(13);
  const LongitudinalDataset none = apply_missingness(data, Mechanism::kNone, 0.0, 0.8, rng);
  CHECK(none.mask.all());
  CHECK_THROWS_AS(apply_missingness(data, Mechanism::kNone, 0.05, 0.8, rng), ConfigError);
  const LongitudinalDataset mar = apply_missingness(data, Mechanism::kMar, 0.15, 0.8, rng);
  CHECK(realized_missing_rate(mar) > 0.1);
  const LongitudinalDataset mnar = apply_missingness(data, Mechanism::kMnar, 0.15, 0.8, rng);
  CHECK(mnar.covariates.count("aux") == 1);
}

TEST_CASE("mechanism labels round-trip") {
  CHECK(to_string(Mechanism::kNone) == "none");
  CHECK(to_string(Mechanism::kMar) == "MAR");
  CHECK(to_string(Mechanism::kMnar) == "MNAR");
  CHECK(mechanism_from_string("MAR") == Mechanism::kMar);
  CHECK_THROWS_AS(mechanism_from_string("mar"), ConfigError);
}

TEST_CASE("realized_missing_rate examples") {
  LongitudinalDataset data = make_cohort(4, 14);
  CHECK(realized_missing_rate(data) == 0.0);
  data.mask(0, 1) = data.mask(0, 2) = data.mask(0, 3) = false;
  CHECK(realized_missing_rate(data) == doctest::Approx(3.0 / 16.0));
}

TEST_CASE("mcar utility masks uniformly but keeps rows alive") {
  const LongitudinalDataset data = make_cohort(5000, 15);
  Rng rng(16);
  const LongitudinalDataset out = mcar_uniform(data, 0.35, rng);
  CHECK(realized_missing_rate(out) == doctest::Approx(0.35).epsilon(0.05));
  for (int i = 0; i < 5000; ++i) CHECK(out.mask.row(i).any());
  const Eigen::VectorXd rates = occasion_missing_rates(out);
  for (int t = 0; t < 4; ++t) CHECK(rates(t) == doctest::Approx(0.35).epsilon(0.1));
}
