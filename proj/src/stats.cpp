#include "lgrowth/stats.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace lgrowth {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace {

double horner8(const double (&coef)[8], double r) {
  double v = coef[7];
  for (int i = 6; i >= 0; --i) v = v * r + coef[i];
  return v;
}

}  // namespace

double norm_quantile(double p) {
  if (p < 0.0 || p > 1.0 || std::isnan(p))
    throw std::domain_error("norm_quantile: p outside [0,1]");
  if (p == 0.0) return -std::numeric_limits<double>::infinity();
  if (p == 1.0) return std::numeric_limits<double>::infinity();

  static const double a[8] = {
      3.3871328727963666080e0,  1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4,  4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4,  2.5090809287301226727e3};
  static const double b[8] = {
      1.0,                      4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3,  2.1213794301586595867e4, 3.9307895800092710610e4,
      2.8729085735721942674e4,  5.2264952788528545610e3};
  static const double c[8] = {
      1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4};
  static const double d[8] = {
      1.0,                      2.05319162663775882187e0, 1.67638483018380384940e0,
      6.89767334985100004550e-1, 1.48103976427480074590e-1, 1.51986665636164571966e-2,
      5.47593808499534494600e-4, 1.05075007164441684324e-9};
  static const double e[8] = {
      6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7};
  static const double f[8] = {
      1.0,                      5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
      1.42151175831644588870e-7, 2.04426310338993978564e-15};

  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q * horner8(a, r) / horner8(b, r);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    value = horner8(c, r) / horner8(d, r);
  } else {
    r -= 5.0;
    value = horner8(e, r) / horner8(f, r);
  }
  return q < 0.0 ? -value : value;
}

double gamma_p(double a, double x) {
  if (a <= 0.0 || x < 0.0) throw std::domain_error("gamma_p: requires a > 0, x >= 0");
  if (x == 0.0) return 0.0;
  const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    // Power series sum_{n>=0} x^n / (a (a+1) ... (a+n)).
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 1000; ++n) {
      term *= x / (a + static_cast<double>(n));
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
    }
    return std::exp(log_prefactor) * sum;
  }
  // Modified Lentz continued fraction for the upper tail Q(a, x).
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  return 1.0 - std::exp(log_prefactor) * h;
}

double chi2_cdf(double x, double k) {
  if (k <= 0.0) throw std::domain_error("chi2_cdf: dof must be positive");
  if (x <= 0.0) return 0.0;
  return gamma_p(0.5 * k, 0.5 * x);
}

double chi2_quantile(double p, double k) {
  if (k <= 0.0) throw std::domain_error("chi2_quantile: dof must be positive");
  if (p < 0.0 || p >= 1.0) throw std::domain_error("chi2_quantile: p outside [0,1)");
  if (p == 0.0) return 0.0;
  double lo = 0.0;
  double hi = std::max(1.0, k);
  while (chi2_cdf(hi, k) < p) {
    hi *= 2.0;
    if (hi > 1e306) throw std::runtime_error("chi2_quantile: bracket overflow");
  }
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (chi2_cdf(mid, k) < p)
      lo = mid;
    else
      hi = mid;
    if (hi - lo <= 1e-15 * hi) break;
  }
  return 0.5 * (lo + hi);
}

double huber_weight_consistency(int p, double rho) {
  if (p < 1) throw std::domain_error("huber_weight_consistency: dimension must be >= 1");
  if (rho >= 1.0) return 1.0;
  if (rho <= 0.0) throw std::domain_error("huber_weight_consistency: rho must be in (0,1]");
  const double dim = static_cast<double>(p);
  const double c = chi2_quantile(rho, dim);
  return (dim * chi2_cdf(c, dim + 2.0) + c * (1.0 - chi2_cdf(c, dim))) / dim;
}

}  // namespace lgrowth
