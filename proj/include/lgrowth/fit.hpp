#pragma once

#include <Eigen/Dense>
#include <string>

#include "lgrowth/model.hpp"

namespace lgrowth {

using ThetaVector = Eigen::Matrix<double, kNumParams, 1>;

struct FitResult {
  std::string method;
  ThetaVector theta = ThetaVector::Zero();
  ThetaVector se = ThetaVector::Zero();
  double loglik = std::numeric_limits<double>::quiet_NaN();  // observed-data ML only
  bool converged = false;
  bool boundary = false;  // a variance finished on its lower floor
  int iterations = 0;
};

// Unconstrained working scales for the covariance parameters.  Both floors
// variances at 1e-10; the log-variance scale keeps sigma_LS raw and rejects
// non-PSD Psi through an infinite barrier instead.
enum class VarianceParameterization { kLogCholesky, kLogVariance };

struct FitOptions {
  VarianceParameterization parameterization = VarianceParameterization::kLogCholesky;
  int max_iterations = 500;
  double grad_tol = 1e-6;  // working-objective gradient infinity-norm
  double f_tol = 1e-9;     // relative objective change
};

// Negative log-likelihood of the observed data: each subject contributes the
// MVN log-density of its observed sub-vector under the corresponding
// sub-moments of (mu(theta), Sigma(theta)).  Returns +inf when some observed
// sub-covariance is not PD (optimizer barrier).
double negloglik_fiml(const ThetaVector& theta, const LongitudinalDataset& data);

// Same value plus its analytic gradient on the natural parameter scale.
double negloglik_fiml_grad(const ThetaVector& theta, const LongitudinalDataset& data,
                           Eigen::Ref<ThetaVector> grad);

// Direct ML on (possibly incomplete) data.  Multi-start (sample-moment
// initializer and the default-spec point), quasi-Newton on the chosen
// unconstrained scale; converged results satisfy max |d negloglik / du| <
// 1e-5.  SEs come from the inverse observed information, with the Hessian
// obtained by central differences of the analytic gradient.  Non-convergence
// yields a flagged result, never a throw.
FitResult fit_fiml(const LongitudinalDataset& data, const GcmSpec& spec_shape,
                   const FitOptions& options = {});

struct RobustTuning {
  // Chi-square coverage rho of the Mahalanobis radius beyond which
  // Huber-type weights decay; >= 1 disables downweighting entirely.
  double downweight_quantile = 0.95;
};

struct RobustMoments {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  Eigen::VectorXd weights;  // final location weights w1, one per row, in (0,1]
  bool degenerate = false;  // data had no dispersion; sigma is the zero matrix
  bool converged = false;
  int iterations = 0;
};

// Iteratively reweighted EM for the saturated mean/covariance of incomplete
// data.  Rows are weighted by w1 = min(1, d0/d) with d the Mahalanobis
// distance of the observed sub-vector and d0 the chi-square quantile radius
// for the pattern's dimension; covariance terms use w1^2 divided by the
// normality consistency constant.  With downweighting disabled the fixed
// point is the ordinary saturated ML (N-denominator) estimate.  Throws
// NonConvergenceError if the working covariance turns singular mid-stream.
RobustMoments robust_moments(const LongitudinalDataset& data, const RobustTuning& tuning);

// Minimizes the normal-theory discrepancy
//   F(theta) = tr(S Sigma^-1) - log|S Sigma^-1| - T + (m - mu)' Sigma^-1 (m - mu)
// for given target moments (m, S).  No standard errors (they depend on how
// the moments were estimated).  Tight default tolerances: feeding exact
// model-implied moments recovers the generating theta to ~1e-8.
FitResult fit_moment_discrepancy(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                                 const GcmSpec& spec_shape, const FitOptions& options = {
                                     VarianceParameterization::kLogCholesky, 1000, 1e-9, 1e-13});

// Two-stage robust estimation: robust_moments, then the moment discrepancy
// fit, with standard errors propagated from the stage-1 estimating equations
// through the implicit stage-2 mapping (sandwich form).
FitResult fit_tsre(const LongitudinalDataset& data, const GcmSpec& spec_shape,
                   const RobustTuning& tuning = {}, const FitOptions& options = {});

}  // namespace lgrowth
