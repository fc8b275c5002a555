#pragma once

#include <string>

#include "lgrowth/model.hpp"
#include "lgrowth/rng.hpp"

namespace lgrowth {

enum class Mechanism { kNone, kMar, kMnar };

// Canonical labels: none, MAR, MNAR.
std::string to_string(Mechanism mechanism);
Mechanism mechanism_from_string(const std::string& label);

struct MissingnessConfig {
  Mechanism mechanism = Mechanism::kNone;
  double mr = 0.0;          // target overall missing rate
  double target_corr = 0.8; // corr(Aux, latent slope), MNAR only
  std::uint64_t seed = 0;   // MNAR auxiliary noise stream
};

// The deepest per-occasion level is 1 - 2*mr; rates are restricted to
// [0, 0.45) so every cutoff level stays strictly inside (0, 1).  Throws
// ConfigError otherwise.
void validate_missing_rate(double mr);

// Sequential dropout that depends only on observed scores.  At each occasion
// t = 1..T-1 the subjects still under observation are ranked on y_t and only
// the lround((1 - [2t/(T-1)] mr) * N) lowest-ranked remain; the rest have
// y_{t+1}..y_T masked.  Ranks are counted against the original N, which makes
// the occasion-(t+1) missing share exactly 1 minus that level and the overall
// missing share telescope to mr.  Output patterns are monotone and y1 is
// always observed.  Deterministic: no randomness beyond the data themselves.
LongitudinalDataset apply_mar(const LongitudinalDataset& data, double mr);

// Slope of the auxiliary variable Aux = r * b_S + eps, eps ~ N(0,1), chosen
// so corr(Aux, b_S) equals target_corr when Var(b_S) = sigma2_s.
double mnar_loading(double target_corr, double sigma2_s);

// Missingness driven by the unobserved slope through Aux.  Occasion t (2..T)
// is masked when Aux exceeds the analytic (1 - [2(t-1)/(T-1)] mr) quantile of
// its marginal N(r beta_S, r^2 sigma2_S + 1); occasions are thresholded
// independently, so non-monotone patterns can occur.  Aux is stored as a
// covariate on the output (and excluded from analysis models downstream).
// Requires generating truth; mr = 0 returns the input unchanged.
LongitudinalDataset apply_mnar(const LongitudinalDataset& data, double mr, double target_corr,
                               Rng& rng);

// Dispatch on mechanism; kNone requires mr == 0 and returns a copy.
LongitudinalDataset apply_missingness(const LongitudinalDataset& data, Mechanism mechanism,
                                      double mr, double target_corr, Rng& rng);

// Fraction of masked cells, and the per-occasion breakdown.
double realized_missing_rate(const LongitudinalDataset& data);
Eigen::VectorXd occasion_missing_rates(const LongitudinalDataset& data);

// Test utility only (the study design has no MCAR arm): masks each cell
// independently at `rate`, then re-opens y1 on any row left fully masked.
LongitudinalDataset mcar_uniform(const LongitudinalDataset& data, double rate, Rng& rng);

}  // namespace lgrowth
