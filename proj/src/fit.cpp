#include "lgrowth/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <vector>

#include "lgrowth/errors.hpp"
#include "lgrowth/optimizer.hpp"
#include "lgrowth/stats.hpp"

namespace lgrowth {

namespace {

constexpr double kVarianceFloor = 1e-10;
constexpr double kVarianceCap = 1e12;
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// ---------- missingness patterns and per-pattern sufficient statistics ----------

struct Pattern {
  std::vector<int> coords;  // observed column indices, ascending
  std::vector<int> rows;
};

std::vector<Pattern> group_patterns(const LongitudinalDataset& data) {
  const int t_count = static_cast<int>(data.t());
  std::map<std::uint32_t, Pattern> groups;  // ordered key -> deterministic layout
  for (int i = 0; i < static_cast<int>(data.n()); ++i) {
    std::uint32_t key = 0;
    for (int t = 0; t < t_count; ++t)
      if (data.mask(i, t)) key |= (1u << t);
    Pattern& p = groups[key];
    if (p.rows.empty()) {
      for (int t = 0; t < t_count; ++t)
        if (key & (1u << t)) p.coords.push_back(t);
    }
    p.rows.push_back(i);
  }
  std::vector<Pattern> out;
  out.reserve(groups.size());
  for (auto& [key, p] : groups) out.push_back(std::move(p));
  return out;
}

struct PatternStats {
  std::vector<int> coords;
  double n = 0.0;
  Eigen::VectorXd sum_y;
  Eigen::MatrixXd sum_yy;
};

struct LikStats {
  int t_count = 0;
  double n = 0.0;
  std::vector<PatternStats> patterns;
};

LikStats build_lik_stats(const LongitudinalDataset& data) {
  LikStats stats;
  stats.t_count = static_cast<int>(data.t());
  stats.n = static_cast<double>(data.n());
  for (const Pattern& pat : group_patterns(data)) {
    PatternStats ps;
    ps.coords = pat.coords;
    const int p = static_cast<int>(pat.coords.size());
    ps.n = static_cast<double>(pat.rows.size());
    ps.sum_y = Eigen::VectorXd::Zero(p);
    ps.sum_yy = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd row(p);
    for (int i : pat.rows) {
      for (int j = 0; j < p; ++j) row(j) = data.y(i, pat.coords[j]);
      ps.sum_y += row;
      ps.sum_yy.noalias() += row * row.transpose();
    }
    stats.patterns.push_back(std::move(ps));
  }
  return stats;
}

// Negative log-likelihood of the observed sub-vectors under saturated
// (mu, sigma).  Derivatives (when requested) use the full-entry convention:
// d nll = sum_ij dsigma_ij dSigma_ij for a symmetric perturbation.
double saturated_negloglik(const LikStats& stats, const Eigen::VectorXd& mu,
                           const Eigen::MatrixXd& sigma, Eigen::VectorXd* dmu,
                           Eigen::MatrixXd* dsigma) {
  if (dmu) {
    dmu->setZero(stats.t_count);
    dsigma->setZero(stats.t_count, stats.t_count);
  }
  double nll = 0.0;
  for (const PatternStats& ps : stats.patterns) {
    const int p = static_cast<int>(ps.coords.size());
    Eigen::MatrixXd sig_o(p, p);
    Eigen::VectorXd mu_o(p);
    for (int a = 0; a < p; ++a) {
      mu_o(a) = mu(ps.coords[a]);
      for (int b = 0; b < p; ++b) sig_o(a, b) = sigma(ps.coords[a], ps.coords[b]);
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(sig_o);
    if (llt.info() != Eigen::Success) return kInf;
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::MatrixXd sstar = ps.sum_yy - ps.sum_y * mu_o.transpose() -
                                  mu_o * ps.sum_y.transpose() + ps.n * mu_o * mu_o.transpose();
    const Eigen::MatrixXd sig_inv = llt.solve(Eigen::MatrixXd::Identity(p, p));
    const double quad = sig_inv.cwiseProduct(sstar).sum();
    nll += 0.5 * (ps.n * (p * kLog2Pi + logdet) + quad);
    if (dmu) {
      const Eigen::VectorXd v = sig_inv * (ps.n * mu_o - ps.sum_y);
      const Eigen::MatrixXd a_mat = 0.5 * (ps.n * sig_inv - sig_inv * sstar * sig_inv);
      for (int a = 0; a < p; ++a) {
        (*dmu)(ps.coords[a]) += v(a);
        for (int b = 0; b < p; ++b) (*dsigma)(ps.coords[a], ps.coords[b]) += a_mat(a, b);
      }
    }
  }
  return nll;
}

// Chain full-entry (dmu, dsigma) derivatives to the six natural parameters.
ThetaVector chain_to_natural(const Eigen::MatrixXd& lambda, const Eigen::VectorXd& dmu,
                             const Eigen::MatrixXd& dsigma) {
  ThetaVector g;
  const Eigen::Vector2d g_beta = lambda.transpose() * dmu;
  const Eigen::Matrix2d g_psi = lambda.transpose() * dsigma * lambda;
  g(0) = g_beta(0);
  g(1) = g_beta(1);
  g(2) = g_psi(0, 0);
  g(3) = g_psi(1, 1);
  g(4) = g_psi(0, 1) + g_psi(1, 0);
  g(5) = dsigma.trace();
  return g;
}

// ---------- unconstrained working scales ----------

struct WorkingScale {
  VarianceParameterization kind = VarianceParameterization::kLogCholesky;

  static double clamp(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

  // Working vector -> natural theta.  Returns false when the point is outside
  // the feasible region (log-variance scale with an indefinite Psi).
  bool unpack(const Eigen::VectorXd& u, ThetaVector& theta) const {
    const double half_lo = 0.5 * std::log(kVarianceFloor);
    const double half_hi = 0.5 * std::log(kVarianceCap);
    const double lo = std::log(kVarianceFloor);
    const double hi = std::log(kVarianceCap);
    theta(0) = u(0);
    theta(1) = u(1);
    if (kind == VarianceParameterization::kLogCholesky) {
      const double a = clamp(u(2), half_lo, half_hi);
      const double c = clamp(u(3), -1e6, 1e6);
      const double b = clamp(u(4), half_lo, half_hi);
      const double s = clamp(u(5), lo, hi);
      const double l11 = std::exp(a);
      const double l22 = std::exp(b);
      theta(2) = l11 * l11;
      theta(3) = c * c + l22 * l22;
      theta(4) = c * l11;
      theta(5) = std::exp(s);
      return true;
    }
    theta(2) = std::exp(clamp(u(2), lo, hi));
    theta(3) = std::exp(clamp(u(3), lo, hi));
    theta(4) = u(4);
    theta(5) = std::exp(clamp(u(5), lo, hi));
    // Barrier: Psi must stay PSD on this scale.
    return theta(4) * theta(4) <= theta(2) * theta(3);
  }

  Eigen::VectorXd pack(const ThetaVector& theta) const {
    Eigen::VectorXd u(kNumParams);
    u(0) = theta(0);
    u(1) = theta(1);
    const double v_l = std::max(theta(2), kVarianceFloor);
    const double v_s = std::max(theta(3), kVarianceFloor);
    const double v_e = std::max(theta(5), kVarianceFloor);
    if (kind == VarianceParameterization::kLogCholesky) {
      const double l11 = std::sqrt(v_l);
      const double c = theta(4) / l11;
      u(2) = std::log(l11);
      u(3) = c;
      u(4) = 0.5 * std::log(std::max(v_s - c * c, kVarianceFloor));
      u(5) = std::log(v_e);
    } else {
      u(2) = std::log(v_l);
      u(3) = std::log(v_s);
      u(4) = theta(4);
      u(5) = std::log(v_e);
    }
    return u;
  }

  // Natural-scale gradient -> working-scale gradient at u.  Coordinates
  // pinned by their clamps get a zero derivative.
  Eigen::VectorXd chain(const Eigen::VectorXd& u, const ThetaVector& g_nat) const {
    const double half_lo = 0.5 * std::log(kVarianceFloor);
    const double half_hi = 0.5 * std::log(kVarianceCap);
    const double lo = std::log(kVarianceFloor);
    const double hi = std::log(kVarianceCap);
    Eigen::VectorXd g(kNumParams);
    g(0) = g_nat(0);
    g(1) = g_nat(1);
    const auto active = [](double x, double a, double b) { return x > a && x < b; };
    if (kind == VarianceParameterization::kLogCholesky) {
      const double a = clamp(u(2), half_lo, half_hi);
      const double c = clamp(u(3), -1e6, 1e6);
      const double b = clamp(u(4), half_lo, half_hi);
      const double s = clamp(u(5), lo, hi);
      const double l11 = std::exp(a);
      const double l22 = std::exp(b);
      g(2) = active(u(2), half_lo, half_hi) ? g_nat(2) * 2.0 * l11 * l11 + g_nat(4) * c * l11 : 0.0;
      g(3) = active(u(3), -1e6, 1e6) ? g_nat(3) * 2.0 * c + g_nat(4) * l11 : 0.0;
      g(4) = active(u(4), half_lo, half_hi) ? g_nat(3) * 2.0 * l22 * l22 : 0.0;
      g(5) = active(u(5), lo, hi) ? g_nat(5) * std::exp(s) : 0.0;
    } else {
      g(2) = active(u(2), lo, hi) ? g_nat(2) * std::exp(clamp(u(2), lo, hi)) : 0.0;
      g(3) = active(u(3), lo, hi) ? g_nat(3) * std::exp(clamp(u(3), lo, hi)) : 0.0;
      g(4) = g_nat(4);
      g(5) = active(u(5), lo, hi) ? g_nat(5) * std::exp(clamp(u(5), lo, hi)) : 0.0;
    }
    return g;
  }
};

// ---------- moment-based starting values ----------

ThetaVector theta_init_from_moments(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                                    const Eigen::MatrixXd& lambda) {
  const int t_count = static_cast<int>(mu.size());
  ThetaVector theta = ThetaVector::Zero();
  const Eigen::Vector2d beta =
      (lambda.transpose() * lambda).ldlt().solve(lambda.transpose() * mu);
  theta(0) = beta(0);
  theta(1) = beta(1);

  // Least squares on the unique covariance entries: Sigma_ts =
  // psi11 a_t a_s + psi22 b_t b_s + psi12 (a_t b_s + a_s b_t) + delta_ts
  // sigma2_e, with (a, b) the loading columns — linear in the 4 unknowns.
  const int n_rows = t_count * (t_count + 1) / 2;
  Eigen::MatrixXd x(n_rows, 4);
  Eigen::VectorXd z(n_rows);
  int r = 0;
  for (int s = 0; s < t_count; ++s)
    for (int t = 0; t <= s; ++t) {
      const double at = lambda(t, 0), bt = lambda(t, 1);
      const double as = lambda(s, 0), bs = lambda(s, 1);
      x(r, 0) = at * as;
      x(r, 1) = bt * bs;
      x(r, 2) = at * bs + as * bt;
      x(r, 3) = (t == s) ? 1.0 : 0.0;
      z(r) = sigma(t, s);
      ++r;
    }
  Eigen::Vector4d w = x.colPivHouseholderQr().solve(z);
  double v_l = std::max(w(0), 0.05);
  double v_s = std::max(w(1), 0.05);
  double v_e = std::max(w(3), 0.05);
  double c_ls = w(2);
  const double cap = 0.95 * std::sqrt(v_l * v_s);
  c_ls = std::min(std::max(c_ls, -cap), cap);
  theta(2) = v_l;
  theta(3) = v_s;
  theta(4) = c_ls;
  theta(5) = v_e;
  return theta;
}

// Available-case means and pairwise covariances (N-denominator), good enough
// to seed the optimizers.
void available_case_moments(const LongitudinalDataset& data, Eigen::VectorXd& mu,
                            Eigen::MatrixXd& sigma) {
  const int t_count = static_cast<int>(data.t());
  const int n = static_cast<int>(data.n());
  mu.setZero(t_count);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(t_count);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_count; ++t)
      if (data.mask(i, t)) {
        mu(t) += data.y(i, t);
        counts(t) += 1.0;
      }
  for (int t = 0; t < t_count; ++t) {
    if (counts(t) == 0.0)
      throw DataError("column y" + std::to_string(t + 1) + " has no observed values");
    mu(t) /= counts(t);
  }
  sigma.setZero(t_count, t_count);
  for (int s = 0; s < t_count; ++s)
    for (int t = 0; t <= s; ++t) {
      double acc = 0.0, cnt = 0.0;
      for (int i = 0; i < n; ++i)
        if (data.mask(i, t) && data.mask(i, s)) {
          acc += (data.y(i, t) - mu(t)) * (data.y(i, s) - mu(s));
          cnt += 1.0;
        }
      const double value = cnt > 0.0 ? acc / cnt : 0.0;
      sigma(t, s) = value;
      sigma(s, t) = value;
    }
}

// ---------- FIML ----------

double fiml_eval(const LikStats& stats, const Eigen::MatrixXd& lambda, const ThetaVector& theta,
                 ThetaVector* grad) {
  const GcmSpec tmp;  // moments assembled directly; spec validation not needed here
  (void)tmp;
  Eigen::Matrix2d psi;
  psi << theta(2), theta(4), theta(4), theta(3);
  const Eigen::Vector2d beta(theta(0), theta(1));
  const auto moments = implied_moments(lambda, beta, psi, theta(5));
  if (!grad) return saturated_negloglik(stats, moments.mu, moments.sigma, nullptr, nullptr);
  Eigen::VectorXd dmu;
  Eigen::MatrixXd dsigma;
  const double nll = saturated_negloglik(stats, moments.mu, moments.sigma, &dmu, &dsigma);
  if (std::isfinite(nll)) *grad = chain_to_natural(lambda, dmu, dsigma);
  return nll;
}

ThetaVector spec_shape_theta(const GcmSpec& spec) { return theta_from_spec(spec); }

struct BestRun {
  MinimizeResult run;
  bool valid = false;
};

BestRun multistart_minimize(const ObjectiveFn& objective, const std::vector<Eigen::VectorXd>& starts,
                            const MinimizeOptions& mopts) {
  BestRun best;
  for (const Eigen::VectorXd& u0 : starts) {
    const MinimizeResult run = minimize_bfgs(objective, u0, mopts);
    if (!std::isfinite(run.f)) continue;
    if (!best.valid || run.f < best.run.f) {
      best.run = run;
      best.valid = true;
    }
  }
  return best;
}

bool near_floor(double v) { return v <= kVarianceFloor * 1.5; }

// Observed-information SEs: central differences of the analytic natural-scale
// gradient give the Hessian; its inverse (pseudo-inverse on boundary cases)
// gives the covariance.
ThetaVector observed_info_se(const std::function<double(const ThetaVector&, ThetaVector*)>& eval,
                             const ThetaVector& theta) {
  Eigen::Matrix<double, kNumParams, kNumParams> hessian;
  for (int j = 0; j < kNumParams; ++j) {
    double h = 6e-6 * std::max(std::fabs(theta(j)), 1.0);
    ThetaVector g_plus, g_minus;
    bool ok = false;
    for (int attempt = 0; attempt < 4 && !ok; ++attempt, h *= 0.1) {
      ThetaVector tp = theta, tm = theta;
      tp(j) += h;
      tm(j) -= h;
      const double fp = eval(tp, &g_plus);
      const double fm = eval(tm, &g_minus);
      if (std::isfinite(fp) && std::isfinite(fm)) {
        hessian.col(j) = (g_plus - g_minus) / (2.0 * h);
        ok = true;
      }
    }
    if (!ok) return ThetaVector::Constant(kNan);
  }
  hessian = 0.5 * (hessian + hessian.transpose()).eval();

  Eigen::Matrix<double, kNumParams, kNumParams> cov;
  const Eigen::LLT<Eigen::Matrix<double, kNumParams, kNumParams>> llt(hessian);
  if (llt.info() == Eigen::Success) {
    cov = llt.solve(Eigen::Matrix<double, kNumParams, kNumParams>::Identity());
  } else {
    // Boundary or flat directions: invert on the well-determined subspace.
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, kNumParams, kNumParams>> es(hessian);
    const double floor = 1e-12 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    Eigen::Matrix<double, kNumParams, 1> inv_eval;
    for (int i = 0; i < kNumParams; ++i)
      inv_eval(i) = es.eigenvalues()(i) > floor ? 1.0 / es.eigenvalues()(i) : 0.0;
    cov = es.eigenvectors() * inv_eval.asDiagonal() * es.eigenvectors().transpose();
  }
  ThetaVector se;
  for (int i = 0; i < kNumParams; ++i) se(i) = std::sqrt(std::max(cov(i, i), 0.0));
  return se;
}

}  // namespace

double negloglik_fiml(const ThetaVector& theta, const LongitudinalDataset& data) {
  data.validate();
  const LikStats stats = build_lik_stats(data);
  const Eigen::MatrixXd lambda = growth_loadings(static_cast<int>(data.t()));
  return fiml_eval(stats, lambda, theta, nullptr);
}

double negloglik_fiml_grad(const ThetaVector& theta, const LongitudinalDataset& data,
                           Eigen::Ref<ThetaVector> grad) {
  data.validate();
  const LikStats stats = build_lik_stats(data);
  const Eigen::MatrixXd lambda = growth_loadings(static_cast<int>(data.t()));
  ThetaVector g;
  const double nll = fiml_eval(stats, lambda, theta, &g);
  grad = g;
  return nll;
}

FitResult fit_fiml(const LongitudinalDataset& data, const GcmSpec& spec_shape,
                   const FitOptions& options) {
  data.validate();
  spec_shape.validate();
  if (static_cast<int>(data.t()) != spec_shape.n_occasions)
    throw ConfigError("fit: dataset has " + std::to_string(data.t()) +
                      " occasions but the model expects " + std::to_string(spec_shape.n_occasions));
  if (data.n() <= 3) throw ConfigError("fit: need more subjects than parameters per curve");

  const LikStats stats = build_lik_stats(data);
  const Eigen::MatrixXd lambda = spec_shape.lambda;
  const double inv_n = 1.0 / stats.n;
  const WorkingScale scale{options.parameterization};

  const ObjectiveFn objective = [&](const Eigen::VectorXd& u, Eigen::VectorXd& grad) -> double {
    grad.setZero(kNumParams);
    ThetaVector theta;
    if (!scale.unpack(u, theta)) return kInf;
    ThetaVector g_nat;
    const double nll = fiml_eval(stats, lambda, theta, &g_nat);
    if (!std::isfinite(nll)) return kInf;
    grad = scale.chain(u, g_nat) * inv_n;
    return nll * inv_n;
  };

  Eigen::VectorXd mu_ac;
  Eigen::MatrixXd sigma_ac;
  available_case_moments(data, mu_ac, sigma_ac);
  const std::vector<Eigen::VectorXd> starts = {
      scale.pack(theta_init_from_moments(mu_ac, sigma_ac, lambda)),
      scale.pack(spec_shape_theta(GcmSpec{}))};

  // The converged contract is on the summed likelihood: max |d nll/du| < 1e-5,
  // i.e. 1e-5 / N on the mean-scale objective actually optimized.
  MinimizeOptions mopts;
  mopts.max_iterations = options.max_iterations;
  mopts.grad_tol = std::min(options.grad_tol, 0.3e-5 * inv_n);
  mopts.grad_tol_loose = 1e-5 * inv_n;
  mopts.f_tol = options.f_tol;

  const BestRun best = multistart_minimize(objective, starts, mopts);

  FitResult result;
  result.method = "fiml";
  if (!best.valid) {
    result.theta = ThetaVector::Constant(kNan);
    result.se = ThetaVector::Constant(kNan);
    return result;
  }
  ThetaVector theta;
  scale.unpack(best.run.x, theta);
  result.theta = theta;
  result.loglik = -best.run.f * stats.n;
  result.iterations = best.run.iterations;
  result.converged = best.run.converged;
  result.boundary = near_floor(theta(2)) || near_floor(theta(3)) || near_floor(theta(5));
  result.se = observed_info_se(
      [&](const ThetaVector& th, ThetaVector* g) { return fiml_eval(stats, lambda, th, g); },
      theta);
  return result;
}

// ---------- robust saturated moments ----------

RobustMoments robust_moments(const LongitudinalDataset& data, const RobustTuning& tuning) {
  data.validate();
  const int t_count = static_cast<int>(data.t());
  const int n = static_cast<int>(data.n());
  const double rho = tuning.downweight_quantile;
  const bool weighting = rho < 1.0;
  if (weighting && !(rho > 0.0))
    throw ConfigError("robust moments: downweight quantile must be in (0,1) or >= 1 to disable");

  RobustMoments out;
  available_case_moments(data, out.mu, out.sigma);
  out.weights = Eigen::VectorXd::Ones(n);

  // No dispersion at all (e.g. one row repeated): flag and return Sigma = 0.
  if (out.sigma.diagonal().maxCoeff() <= 1e-14 * (1.0 + out.mu.cwiseAbs().maxCoeff())) {
    out.sigma.setZero();
    out.degenerate = true;
    out.converged = true;
    return out;
  }

  // The pairwise-complete start can be indefinite; pull it toward its
  // diagonal until it factors.
  {
    double blend = 0.0;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::MatrixXd candidate =
          (1.0 - blend) * out.sigma + blend * out.sigma.diagonal().asDiagonal().toDenseMatrix();
      candidate.diagonal().array() += blend * 1e-6 * out.sigma.diagonal().maxCoeff();
      if (Eigen::LLT<Eigen::MatrixXd>(candidate).info() == Eigen::Success) {
        out.sigma = candidate;
        break;
      }
      blend = blend == 0.0 ? 0.1 : std::min(1.0, blend * 2.0);
      if (attempt == 7) throw NonConvergenceError("robust moments: cannot form a PD starting covariance");
    }
  }

  const std::vector<Pattern> patterns = group_patterns(data);
  std::map<int, std::pair<double, double>> radius_kappa;  // p -> (d0, kappa)
  for (const Pattern& pat : patterns) {
    const int p = static_cast<int>(pat.coords.size());
    if (!radius_kappa.count(p) && weighting)
      radius_kappa[p] = {std::sqrt(chi2_quantile(rho, p)), huber_weight_consistency(p, rho)};
  }

  Eigen::MatrixXd yhat(n, t_count);
  Eigen::VectorXd w1(n), w2(n);
  const int max_iterations = 500;
  for (out.iterations = 1; out.iterations <= max_iterations; ++out.iterations) {
    Eigen::MatrixXd cond_cov_sum = Eigen::MatrixXd::Zero(t_count, t_count);
    for (const Pattern& pat : patterns) {
      const int p = static_cast<int>(pat.coords.size());
      std::vector<int> miss;
      for (int t = 0; t < t_count; ++t)
        if (std::find(pat.coords.begin(), pat.coords.end(), t) == pat.coords.end())
          miss.push_back(t);
      Eigen::MatrixXd sig_oo(p, p);
      Eigen::VectorXd mu_o(p);
      for (int a = 0; a < p; ++a) {
        mu_o(a) = out.mu(pat.coords[a]);
        for (int b = 0; b < p; ++b) sig_oo(a, b) = out.sigma(pat.coords[a], pat.coords[b]);
      }
      const Eigen::LLT<Eigen::MatrixXd> llt(sig_oo);
      if (llt.info() != Eigen::Success)
        throw NonConvergenceError("robust moments: working covariance became singular");
      const Eigen::MatrixXd sig_inv = llt.solve(Eigen::MatrixXd::Identity(p, p));

      const int m = static_cast<int>(miss.size());
      Eigen::MatrixXd regress;       // m x p, Sigma_mo Sigma_oo^-1
      Eigen::MatrixXd cond_cov_mm;   // m x m residual covariance
      Eigen::VectorXd mu_m(m);
      if (m > 0) {
        Eigen::MatrixXd sig_mo(m, p), sig_mm(m, m);
        for (int a = 0; a < m; ++a) {
          mu_m(a) = out.mu(miss[a]);
          for (int b = 0; b < p; ++b) sig_mo(a, b) = out.sigma(miss[a], pat.coords[b]);
          for (int b = 0; b < m; ++b) sig_mm(a, b) = out.sigma(miss[a], miss[b]);
        }
        regress = sig_mo * sig_inv;
        cond_cov_mm = sig_mm - regress * sig_mo.transpose();
        for (int a = 0; a < m; ++a)
          for (int b = 0; b < m; ++b)
            cond_cov_sum(miss[a], miss[b]) += cond_cov_mm(a, b) * static_cast<double>(pat.rows.size());
      }

      double d0 = 0.0, kappa = 1.0;
      if (weighting) {
        d0 = radius_kappa[p].first;
        kappa = radius_kappa[p].second;
      }
      Eigen::VectorXd r(p);
      for (int i : pat.rows) {
        for (int a = 0; a < p; ++a) r(a) = data.y(i, pat.coords[a]) - mu_o(a);
        double weight1 = 1.0, weight2 = 1.0;
        if (weighting) {
          const double d = std::sqrt(std::max(0.0, r.dot(sig_inv * r)));
          if (d > d0) weight1 = d0 / d;
          weight2 = weight1 * weight1 / kappa;
        }
        w1(i) = weight1;
        w2(i) = weight2;
        for (int a = 0; a < p; ++a) yhat(i, pat.coords[a]) = data.y(i, pat.coords[a]);
        if (m > 0) {
          const Eigen::VectorXd fill = mu_m + regress * r;
          for (int a = 0; a < m; ++a) yhat(i, miss[a]) = fill(a);
        }
      }
    }

    const double w1_sum = w1.sum();
    const Eigen::VectorXd mu_new = (yhat.transpose() * w1) / w1_sum;
    Eigen::MatrixXd sigma_new = cond_cov_sum;
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd centered = yhat.row(i).transpose() - mu_new;
      sigma_new.noalias() += w2(i) * centered * centered.transpose();
    }
    sigma_new /= static_cast<double>(n);

    const double shift = std::max((mu_new - out.mu).lpNorm<Eigen::Infinity>(),
                                  (sigma_new - out.sigma).lpNorm<Eigen::Infinity>());
    out.mu = mu_new;
    out.sigma = sigma_new;
    if (shift < 1e-10 * (1.0 + out.sigma.cwiseAbs().maxCoeff())) {
      out.converged = true;
      break;
    }
  }
  out.weights = w1;
  return out;
}

// ---------- moment-discrepancy (stage 2) fit ----------

namespace {

// F and its natural-scale gradient for target moments (mu_hat, sigma_hat).
double discrepancy_eval(const Eigen::VectorXd& mu_hat, const Eigen::MatrixXd& sigma_hat,
                        double logdet_hat, const Eigen::MatrixXd& lambda, const ThetaVector& theta,
                        ThetaVector* grad) {
  Eigen::Matrix2d psi;
  psi << theta(2), theta(4), theta(4), theta(3);
  const Eigen::Vector2d beta(theta(0), theta(1));
  const auto moments = implied_moments(lambda, beta, psi, theta(5));
  const int t_count = static_cast<int>(mu_hat.size());
  const Eigen::LLT<Eigen::MatrixXd> llt(moments.sigma);
  if (llt.info() != Eigen::Success) return kInf;
  const double logdet_model = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const Eigen::MatrixXd sig_inv = llt.solve(Eigen::MatrixXd::Identity(t_count, t_count));
  const Eigen::VectorXd delta = mu_hat - moments.mu;
  const double value = sig_inv.cwiseProduct(sigma_hat).sum() - (logdet_hat - logdet_model) -
                       t_count + delta.dot(sig_inv * delta);
  if (grad) {
    const Eigen::MatrixXd dsigma =
        sig_inv * (moments.sigma - sigma_hat - delta * delta.transpose()) * sig_inv;
    const Eigen::VectorXd dmu = -2.0 * (sig_inv * delta);
    *grad = chain_to_natural(lambda, dmu, dsigma);
  }
  return value;
}

}  // namespace

FitResult fit_moment_discrepancy(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                                 const GcmSpec& spec_shape, const FitOptions& options) {
  spec_shape.validate();
  if (mu.size() != spec_shape.n_occasions || sigma.rows() != mu.size() || sigma.cols() != mu.size())
    throw ConfigError("moment fit: moment dimensions disagree with the model shape");
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw NonConvergenceError("moment fit: target covariance is not positive definite");
  const double logdet_hat = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const Eigen::MatrixXd lambda = spec_shape.lambda;
  const WorkingScale scale{options.parameterization};

  const ObjectiveFn objective = [&](const Eigen::VectorXd& u, Eigen::VectorXd& grad) -> double {
    grad.setZero(kNumParams);
    ThetaVector theta;
    if (!scale.unpack(u, theta)) return kInf;
    ThetaVector g_nat;
    const double value = discrepancy_eval(mu, sigma, logdet_hat, lambda, theta, &g_nat);
    if (!std::isfinite(value)) return kInf;
    grad = scale.chain(u, g_nat);
    return value;
  };

  const std::vector<Eigen::VectorXd> starts = {
      scale.pack(theta_init_from_moments(mu, sigma, lambda)),
      scale.pack(spec_shape_theta(GcmSpec{}))};
  MinimizeOptions mopts;
  mopts.max_iterations = options.max_iterations;
  mopts.grad_tol = options.grad_tol;
  mopts.grad_tol_loose = std::max(options.grad_tol * 10.0, 1e-6);
  mopts.f_tol = options.f_tol;
  const BestRun best = multistart_minimize(objective, starts, mopts);

  FitResult result;
  result.method = "moments";
  if (!best.valid) {
    result.theta = ThetaVector::Constant(kNan);
    result.se = ThetaVector::Constant(kNan);
    return result;
  }
  ThetaVector theta;
  scale.unpack(best.run.x, theta);
  result.theta = theta;
  result.iterations = best.run.iterations;
  result.converged = best.run.converged;
  result.boundary = near_floor(theta(2)) || near_floor(theta(3)) || near_floor(theta(5));
  result.se = ThetaVector::Zero();
  return result;
}

// ---------- two-stage robust estimation ----------

namespace {

// Estimating-equation stack for one (mu, vech Sigma) point: location part
// w1 (yhat - mu), dispersion part vech(w2 (yhat-mu)(yhat-mu)' + C_i - Sigma).
struct EstimatingEquations {
  const LongitudinalDataset& data;
  const std::vector<Pattern>& patterns;
  bool weighting;
  std::map<int, std::pair<double, double>> radius_kappa;
  std::vector<std::pair<int, int>> vech_pairs;

  int dim() const {
    const int t_count = static_cast<int>(data.t());
    return t_count + t_count * (t_count + 1) / 2;
  }

  // Mean over rows of h_i; optionally accumulates (1/N) sum h_i h_i'.
  Eigen::VectorXd mean(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                       Eigen::MatrixXd* outer) const {
    const int t_count = static_cast<int>(data.t());
    const int k = dim();
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(k);
    if (outer) outer->setZero(k, k);
    Eigen::VectorXd h(k);
    const double n = static_cast<double>(data.n());
    for (const Pattern& pat : patterns) {
      const int p = static_cast<int>(pat.coords.size());
      std::vector<int> miss;
      for (int t = 0; t < t_count; ++t)
        if (std::find(pat.coords.begin(), pat.coords.end(), t) == pat.coords.end())
          miss.push_back(t);
      Eigen::MatrixXd sig_oo(p, p);
      Eigen::VectorXd mu_o(p);
      for (int a = 0; a < p; ++a) {
        mu_o(a) = mu(pat.coords[a]);
        for (int b = 0; b < p; ++b) sig_oo(a, b) = sigma(pat.coords[a], pat.coords[b]);
      }
      const Eigen::LLT<Eigen::MatrixXd> llt(sig_oo);
      if (llt.info() != Eigen::Success)
        throw NonConvergenceError("sandwich: perturbed covariance not PD");
      const Eigen::MatrixXd sig_inv = llt.solve(Eigen::MatrixXd::Identity(p, p));
      const int m = static_cast<int>(miss.size());
      Eigen::MatrixXd regress, cond_cov;
      Eigen::VectorXd mu_m(m);
      Eigen::MatrixXd c_full = Eigen::MatrixXd::Zero(t_count, t_count);
      if (m > 0) {
        Eigen::MatrixXd sig_mo(m, p), sig_mm(m, m);
        for (int a = 0; a < m; ++a) {
          mu_m(a) = mu(miss[a]);
          for (int b = 0; b < p; ++b) sig_mo(a, b) = sigma(miss[a], pat.coords[b]);
          for (int b = 0; b < m; ++b) sig_mm(a, b) = sigma(miss[a], miss[b]);
        }
        regress = sig_mo * sig_inv;
        cond_cov = sig_mm - regress * sig_mo.transpose();
        for (int a = 0; a < m; ++a)
          for (int b = 0; b < m; ++b) c_full(miss[a], miss[b]) = cond_cov(a, b);
      }
      double d0 = 0.0, kappa = 1.0;
      if (weighting) {
        const auto it = radius_kappa.find(p);
        d0 = it->second.first;
        kappa = it->second.second;
      }
      Eigen::VectorXd r(p), yhat(t_count);
      for (int i : pat.rows) {
        for (int a = 0; a < p; ++a) r(a) = data.y(i, pat.coords[a]) - mu_o(a);
        double weight1 = 1.0, weight2 = 1.0;
        if (weighting) {
          const double d = std::sqrt(std::max(0.0, r.dot(sig_inv * r)));
          if (d > d0) weight1 = d0 / d;
          weight2 = weight1 * weight1 / kappa;
        }
        for (int a = 0; a < p; ++a) yhat(pat.coords[a]) = data.y(i, pat.coords[a]);
        if (m > 0) {
          const Eigen::VectorXd fill = mu_m + regress * r;
          for (int a = 0; a < m; ++a) yhat(miss[a]) = fill(a);
        }
        const Eigen::VectorXd centered = yhat - mu;
        for (int t = 0; t < t_count; ++t) h(t) = weight1 * centered(t);
        for (std::size_t v = 0; v < vech_pairs.size(); ++v) {
          const auto [row, col] = vech_pairs[v];
          h(t_count + static_cast<int>(v)) =
              weight2 * centered(row) * centered(col) + c_full(row, col) - sigma(row, col);
        }
        acc += h;
        if (outer) outer->noalias() += h * h.transpose() / n;
      }
    }
    return acc / n;
  }
};

}  // namespace

FitResult fit_tsre(const LongitudinalDataset& data, const GcmSpec& spec_shape,
                   const RobustTuning& tuning, const FitOptions& options) {
  data.validate();
  spec_shape.validate();
  if (static_cast<int>(data.t()) != spec_shape.n_occasions)
    throw ConfigError("fit: dataset has " + std::to_string(data.t()) +
                      " occasions but the model expects " + std::to_string(spec_shape.n_occasions));
  if (data.n() <= 3) throw ConfigError("fit: need more subjects than parameters per curve");

  FitResult result;
  result.method = "tsre";
  RobustMoments stage1;
  try {
    stage1 = robust_moments(data, tuning);
  } catch (const NonConvergenceError&) {
    result.theta = ThetaVector::Constant(kNan);
    result.se = ThetaVector::Constant(kNan);
    return result;
  }
  if (stage1.degenerate) {
    result.theta = ThetaVector::Constant(kNan);
    result.se = ThetaVector::Constant(kNan);
    return result;
  }

  FitOptions stage2 = options;
  stage2.grad_tol = std::min(options.grad_tol, 1e-7);
  stage2.f_tol = std::min(options.f_tol, 1e-12);
  FitResult fit2;
  try {
    fit2 = fit_moment_discrepancy(stage1.mu, stage1.sigma, spec_shape, stage2);
  } catch (const NonConvergenceError&) {
    result.theta = ThetaVector::Constant(kNan);
    result.se = ThetaVector::Constant(kNan);
    return result;
  }
  result.theta = fit2.theta;
  result.iterations = fit2.iterations;
  result.converged = fit2.converged && stage1.converged;
  result.boundary = fit2.boundary;

  // Sandwich SEs: Gamma_1 for the stage-1 moments from the estimating
  // equations, then the delta method through the implicit stage-2 mapping.
  try {
    const int t_count = static_cast<int>(data.t());
    const double n = static_cast<double>(data.n());
    const std::vector<Pattern> patterns = group_patterns(data);
    EstimatingEquations eq{data, patterns, tuning.downweight_quantile < 1.0, {}, {}};
    for (const Pattern& pat : patterns) {
      const int p = static_cast<int>(pat.coords.size());
      if (eq.weighting && !eq.radius_kappa.count(p))
        eq.radius_kappa[p] = {std::sqrt(chi2_quantile(tuning.downweight_quantile, p)),
                              huber_weight_consistency(p, tuning.downweight_quantile)};
    }
    for (int col = 0; col < t_count; ++col)
      for (int row = col; row < t_count; ++row) eq.vech_pairs.emplace_back(row, col);

    const int k = eq.dim();
    Eigen::MatrixXd b_hat(k, k);
    (void)eq.mean(stage1.mu, stage1.sigma, &b_hat);

    // m = (mu, vech Sigma); A = d mean(h) / d m by central differences.
    const auto moments_at = [&](const Eigen::VectorXd& m_vec) {
      Eigen::VectorXd mu = m_vec.head(t_count);
      Eigen::MatrixXd sigma(t_count, t_count);
      for (std::size_t v = 0; v < eq.vech_pairs.size(); ++v) {
        const auto [row, col] = eq.vech_pairs[v];
        sigma(row, col) = m_vec(t_count + static_cast<int>(v));
        sigma(col, row) = sigma(row, col);
      }
      return std::make_pair(mu, sigma);
    };
    Eigen::VectorXd m_hat(k);
    m_hat.head(t_count) = stage1.mu;
    for (std::size_t v = 0; v < eq.vech_pairs.size(); ++v)
      m_hat(t_count + static_cast<int>(v)) = stage1.sigma(eq.vech_pairs[v].first, eq.vech_pairs[v].second);

    Eigen::MatrixXd a_hat(k, k);
    for (int j = 0; j < k; ++j) {
      const double h = 1e-5 * std::max(1.0, std::fabs(m_hat(j)));
      Eigen::VectorXd mp = m_hat, mm = m_hat;
      mp(j) += h;
      mm(j) -= h;
      const auto [mu_p, sig_p] = moments_at(mp);
      const auto [mu_m, sig_m] = moments_at(mm);
      a_hat.col(j) = (eq.mean(mu_p, sig_p, nullptr) - eq.mean(mu_m, sig_m, nullptr)) / (2.0 * h);
    }

    const Eigen::FullPivLU<Eigen::MatrixXd> lu_a(a_hat);
    if (!lu_a.isInvertible()) throw NonConvergenceError("sandwich: singular bread matrix");
    const Eigen::MatrixXd a_inv_b = lu_a.solve(b_hat);
    const Eigen::MatrixXd gamma = lu_a.solve(a_inv_b.transpose()).transpose();

    // Implicit stage-2 mapping: g(theta, m) = dF/dtheta = 0 at the solution.
    const Eigen::MatrixXd lambda = spec_shape.lambda;
    const auto stage2_grad = [&](const ThetaVector& th, const Eigen::VectorXd& mu,
                                 const Eigen::MatrixXd& sigma) {
      const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
      if (llt.info() != Eigen::Success) throw NonConvergenceError("sandwich: moments not PD");
      const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      ThetaVector g;
      if (!std::isfinite(discrepancy_eval(mu, sigma, logdet, lambda, th, &g)))
        throw NonConvergenceError("sandwich: infeasible theta");
      return g;
    };

    Eigen::Matrix<double, kNumParams, kNumParams> dg_dtheta;
    for (int j = 0; j < kNumParams; ++j) {
      const double h = 6e-6 * std::max(1.0, std::fabs(result.theta(j)));
      ThetaVector tp = result.theta, tm = result.theta;
      tp(j) += h;
      tm(j) -= h;
      dg_dtheta.col(j) = (stage2_grad(tp, stage1.mu, stage1.sigma) -
                          stage2_grad(tm, stage1.mu, stage1.sigma)) /
                         (2.0 * h);
    }
    Eigen::MatrixXd dg_dm(kNumParams, k);
    for (int j = 0; j < k; ++j) {
      const double h = 1e-5 * std::max(1.0, std::fabs(m_hat(j)));
      Eigen::VectorXd mp = m_hat, mm = m_hat;
      mp(j) += h;
      mm(j) -= h;
      const auto [mu_p, sig_p] = moments_at(mp);
      const auto [mu_m, sig_m] = moments_at(mm);
      dg_dm.col(j) =
          (stage2_grad(result.theta, mu_p, sig_p) - stage2_grad(result.theta, mu_m, sig_m)) /
          (2.0 * h);
    }
    const Eigen::MatrixXd jac = -dg_dtheta.fullPivLu().solve(dg_dm);  // d theta / d m
    const Eigen::MatrixXd acov = jac * gamma * jac.transpose() / n;
    for (int i = 0; i < kNumParams; ++i) result.se(i) = std::sqrt(std::max(acov(i, i), 0.0));
  } catch (const NonConvergenceError&) {
    result.se = ThetaVector::Zero();
  }
  return result;
}

}  // namespace lgrowth
