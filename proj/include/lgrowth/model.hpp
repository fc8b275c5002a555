#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "lgrowth/rng.hpp"

namespace lgrowth {

// Loading matrix of the linear growth model: column 1 all ones (intercept),
// column 2 the time codes 0, 1, ..., T-1 (slope).
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, 2> growth_loadings(int n_occasions) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 2> lambda(n_occasions, 2);
  for (int t = 0; t < n_occasions; ++t) {
    lambda(t, 0) = Scalar(1);
    lambda(t, 1) = Scalar(t);
  }
  return lambda;
}

// Linear growth curve model y_i = Lambda b_i + e_i with random coefficients
// b_i = beta + u_i, u_i ~ N(0, Psi), e_i ~ iid errors with variance sigma2_e.
struct GcmSpec {
  int n_occasions = 4;
  Eigen::Matrix<double, Eigen::Dynamic, 2> lambda = growth_loadings(4);
  Eigen::Vector2d beta{6.0, 2.0};
  Eigen::Matrix2d psi = Eigen::Matrix2d::Identity();
  double sigma2_e = 1.0;

  // Throws ConfigError when Psi is asymmetric or not PSD, sigma2_e <= 0,
  // T < 2, or lambda is rank-deficient.
  void validate() const;
};

struct ErrorDistribution {
  enum class Kind { kNormal, kLognormal, kStudentT5, kContaminatedNormal };
  Kind kind = Kind::kNormal;
  double contamination_rate = 0.05;  // used by kContaminatedNormal only
  double shift = 5.0;                // mean of the contaminating component

  static ErrorDistribution normal() { return {Kind::kNormal}; }
  static ErrorDistribution lognormal() { return {Kind::kLognormal}; }
  static ErrorDistribution student_t5() { return {Kind::kStudentT5}; }
  static ErrorDistribution contaminated() { return {Kind::kContaminatedNormal}; }
};

// Canonical labels: normal, lognormal, t5, contaminated.
std::string to_string(ErrorDistribution::Kind kind);
ErrorDistribution error_distribution_from_string(const std::string& label);

template <typename Scalar>
struct MomentsT {
  Eigen::VectorX<Scalar> mu;
  Eigen::MatrixX<Scalar> sigma;
};
using Moments = MomentsT<double>;

// mu = Lambda beta, Sigma = Lambda Psi Lambda' + sigma2_e I.  Generic over
// scalar and Eigen expression arguments so the structural pieces compose
// without temporaries at the call site.
template <typename DerivedL, typename DerivedB, typename DerivedP>
MomentsT<typename DerivedL::Scalar> implied_moments(
    const Eigen::MatrixBase<DerivedL>& lambda, const Eigen::MatrixBase<DerivedB>& beta,
    const Eigen::MatrixBase<DerivedP>& psi, typename DerivedL::Scalar sigma2_e) {
  using Scalar = typename DerivedL::Scalar;
  MomentsT<Scalar> m;
  m.mu = lambda * beta;
  m.sigma = lambda * psi * lambda.transpose();
  m.sigma.diagonal().array() += sigma2_e;
  return m;
}

// Validating convenience wrapper for a full spec.
Moments implied_moments(const GcmSpec& spec);

// Repeated-measures data: N x T scores with an observation mask (true =
// observed).  A masked-out cell's stored value is retained but never read by
// estimators or imputers.  Covariates are named fully-observed N-vectors.
struct LongitudinalDataset {
  Eigen::MatrixXd y;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask;
  std::map<std::string, Eigen::VectorXd> covariates;

  // Generating information, populated by generate_cohort and required by the
  // MNAR mechanism (which conditions on the latent slopes).
  struct Truth {
    Eigen::MatrixXd random_effects;  // N x 2 realized (intercept, slope)
    GcmSpec spec;
  };
  std::optional<Truth> truth;

  Eigen::Index n() const { return y.rows(); }
  Eigen::Index t() const { return y.cols(); }
  bool fully_observed() const { return mask.all(); }

  // Shape agreement, N >= 1, and at least one observed cell per row.
  void validate() const;
};

// Single draw from the centered error distribution with nominal variance
// sigma2_e.  Normal, lognormal, and t5 are standardized to mean 0 and
// variance exactly sigma2_e; the contaminated kind mixes N(0, sigma2_e) with
// N(shift, sigma2_e) at the contamination rate and is not recentered.
double draw_error(const ErrorDistribution& dist, double sigma2_e, Rng& rng);

// N subjects from the model.  Per subject the stream is consumed in a fixed
// order: two standard normals for the random effects, then the T error
// draws.  The returned dataset is fully observed and carries truth.
LongitudinalDataset generate_cohort(const GcmSpec& spec, const ErrorDistribution& dist,
                                    int n_subjects, Rng& rng);
LongitudinalDataset generate_cohort(const GcmSpec& spec, const ErrorDistribution& dist,
                                    int n_subjects, std::uint64_t seed);

// Reporting order of the six model parameters.
inline constexpr int kNumParams = 6;
const std::array<std::string, kNumParams>& parameter_names();

// (beta_L, beta_S, sigma2_L, sigma2_S, sigma_LS, sigma2_e) <-> spec.
Eigen::Matrix<double, kNumParams, 1> theta_from_spec(const GcmSpec& spec);
GcmSpec spec_from_theta(const Eigen::Matrix<double, kNumParams, 1>& theta, int n_occasions);

}  // namespace lgrowth
