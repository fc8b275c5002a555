#include "lgrowth/model.hpp"

#include <cmath>

#include "lgrowth/errors.hpp"

namespace lgrowth {

void GcmSpec::validate() const {
  if (n_occasions < 2) throw ConfigError("model spec: need at least 2 measurement occasions");
  if (lambda.rows() != n_occasions || lambda.cols() != 2)
    throw ConfigError("model spec: loading matrix must be T x 2");
  if (!(sigma2_e > 0.0)) throw ConfigError("model spec: sigma2_e must be positive");
  if ((psi - psi.transpose()).norm() > 1e-12 * (1.0 + psi.norm()))
    throw ConfigError("model spec: Psi must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(psi);
  if (es.eigenvalues().minCoeff() < -1e-12 * (1.0 + psi.norm()))
    throw ConfigError("model spec: Psi must be positive semi-definite");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(lambda);
  if (qr.rank() < 2) throw ConfigError("model spec: loading matrix must have full column rank");
}

std::string to_string(ErrorDistribution::Kind kind) {
  switch (kind) {
    case ErrorDistribution::Kind::kNormal: return "normal";
    case ErrorDistribution::Kind::kLognormal: return "lognormal";
    case ErrorDistribution::Kind::kStudentT5: return "t5";
    case ErrorDistribution::Kind::kContaminatedNormal: return "contaminated";
  }
  throw ConfigError("unknown error-distribution kind");
}

ErrorDistribution error_distribution_from_string(const std::string& label) {
  if (label == "normal") return ErrorDistribution::normal();
  if (label == "lognormal") return ErrorDistribution::lognormal();
  if (label == "t5") return ErrorDistribution::student_t5();
  if (label == "contaminated") return ErrorDistribution::contaminated();
  throw ConfigError("unknown error distribution '" + label +
                    "' (expected normal, lognormal, t5, or contaminated)");
}

Moments implied_moments(const GcmSpec& spec) {
  spec.validate();
  return implied_moments(spec.lambda, spec.beta, spec.psi, spec.sigma2_e);
}

void LongitudinalDataset::validate() const {
  if (y.rows() != mask.rows() || y.cols() != mask.cols())
    throw DataError("dataset: score matrix and mask shapes differ");
  if (y.rows() < 1) throw DataError("dataset: need at least one subject");
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    if (!mask.row(i).any())
      throw DataError("dataset: row " + std::to_string(i + 1) + " has no observed cells");
  for (const auto& [name, column] : covariates)
    if (column.size() != y.rows())
      throw DataError("dataset: covariate '" + name + "' length differs from subject count");
}

double draw_error(const ErrorDistribution& dist, double sigma2_e, Rng& rng) {
  const double sigma_e = std::sqrt(sigma2_e);
  switch (dist.kind) {
    case ErrorDistribution::Kind::kNormal:
      return sigma_e * rng.normal();
    case ErrorDistribution::Kind::kLognormal: {
      // X ~ LN(0,1) shifted/scaled to mean 0 and variance sigma2_e:
      // E[X] = e^{1/2}, Var[X] = (e - 1) e.
      const double x = rng.lognormal();
      return sigma_e * (x - std::exp(0.5)) / std::sqrt((std::numbers::e - 1.0) * std::numbers::e);
    }
    case ErrorDistribution::Kind::kStudentT5:
      // Var[t_5] = 5/3, so scale by sqrt(3/5).
      return sigma_e * rng.student_t(5) * std::sqrt(0.6);
    case ErrorDistribution::Kind::kContaminatedNormal: {
      // Mixture is not recentered; its mean is contamination_rate * shift.
      const bool outlier = rng.uniform01() < dist.contamination_rate;
      const double z = rng.normal();
      return outlier ? dist.shift + sigma_e * z : sigma_e * z;
    }
  }
  throw ConfigError("unknown error-distribution kind");
}

namespace {

// Lower Cholesky of a 2x2 PSD matrix, tolerating zero variances (semi-definite
// cases like Psi = 0 must still generate deterministically).
Eigen::Matrix2d psd_chol2(const Eigen::Matrix2d& psi) {
  Eigen::Matrix2d l = Eigen::Matrix2d::Zero();
  l(0, 0) = std::sqrt(std::max(0.0, psi(0, 0)));
  l(1, 0) = l(0, 0) > 0.0 ? psi(1, 0) / l(0, 0) : 0.0;
  l(1, 1) = std::sqrt(std::max(0.0, psi(1, 1) - l(1, 0) * l(1, 0)));
  return l;
}

}  // namespace

LongitudinalDataset generate_cohort(const GcmSpec& spec, const ErrorDistribution& dist,
                                    int n_subjects, Rng& rng) {
  spec.validate();
  if (n_subjects < 1) throw ConfigError("generate_cohort: need at least one subject");
  const int t_count = spec.n_occasions;
  const Eigen::Matrix2d l_psi = psd_chol2(spec.psi);

  LongitudinalDataset data;
  data.y.resize(n_subjects, t_count);
  data.mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n_subjects, t_count, true);
  Eigen::MatrixXd effects(n_subjects, 2);
  for (int i = 0; i < n_subjects; ++i) {
    const Eigen::Vector2d z{rng.normal(), rng.normal()};
    const Eigen::Vector2d b = spec.beta + l_psi * z;
    effects.row(i) = b.transpose();
    for (int t = 0; t < t_count; ++t)
      data.y(i, t) = spec.lambda.row(t).dot(b) + draw_error(dist, spec.sigma2_e, rng);
  }
  data.truth = LongitudinalDataset::Truth{std::move(effects), spec};
  return data;
}

LongitudinalDataset generate_cohort(const GcmSpec& spec, const ErrorDistribution& dist,
                                    int n_subjects, std::uint64_t seed) {
  Rng rng(seed);
  return generate_cohort(spec, dist, n_subjects, rng);
}

const std::array<std::string, kNumParams>& parameter_names() {
  static const std::array<std::string, kNumParams> names = {
      "beta_L", "beta_S", "sigma2_L", "sigma2_S", "sigma_LS", "sigma2_e"};
  return names;
}

Eigen::Matrix<double, kNumParams, 1> theta_from_spec(const GcmSpec& spec) {
  Eigen::Matrix<double, kNumParams, 1> theta;
  theta << spec.beta(0), spec.beta(1), spec.psi(0, 0), spec.psi(1, 1), spec.psi(0, 1), spec.sigma2_e;
  return theta;
}

GcmSpec spec_from_theta(const Eigen::Matrix<double, kNumParams, 1>& theta, int n_occasions) {
  GcmSpec spec;
  spec.n_occasions = n_occasions;
  spec.lambda = growth_loadings(n_occasions);
  spec.beta << theta(0), theta(1);
  spec.psi << theta(2), theta(4), theta(4), theta(3);
  spec.sigma2_e = theta(5);
  return spec;
}

}  // namespace lgrowth
