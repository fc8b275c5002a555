#pragma once

namespace lgrowth {

// Standard normal CDF.
double norm_cdf(double x);

// Standard normal quantile (Wichura's rational approximations, accurate to
// ~1e-15 over (0,1)).  p == 0 or 1 returns -/+ infinity.
double norm_quantile(double p);

// Regularized lower incomplete gamma P(a, x) via power series / continued
// fraction, whichever converges faster.
double gamma_p(double a, double x);

// Chi-square CDF and quantile with (possibly fractional) dof k > 0.  The
// quantile is solved by bracketed bisection on the CDF.
double chi2_cdf(double x, double k);
double chi2_quantile(double p, double k);

// Consistency constant for squared Huber-type distance weights under
// p-variate normality.  With c the chi2_p quantile at coverage rho,
//   kappa = [ p F_{p+2}(c) + c (1 - F_p(c)) ] / p,
// so that E[ w2 * chi2_p ] = p when w2 = min(1, sqrt(c)/d)^2 / kappa.
// rho >= 1 disables downweighting and returns 1.
double huber_weight_consistency(int p, double rho);

}  // namespace lgrowth
