#include "lgrowth/analysis.hpp"

#include "lgrowth/errors.hpp"

namespace lgrowth {

PooledFit pool_rubin(const std::vector<FitResult>& fits) {
  if (fits.empty()) throw ConfigError("pooling: no fits supplied");
  std::vector<const FitResult*> survivors;
  for (const FitResult& fit : fits)
    if (fit.converged) survivors.push_back(&fit);

  PooledFit pooled;
  pooled.m = static_cast<int>(survivors.size());
  pooled.dropped = static_cast<int>(fits.size()) - pooled.m;
  if (pooled.m == 0) throw NonConvergenceError("pooling: no chain converged");
  if (2 * pooled.m < static_cast<int>(fits.size()))
    throw NonConvergenceError("pooling: only " + std::to_string(pooled.m) + " of " +
                              std::to_string(fits.size()) + " chains converged");

  for (const FitResult* fit : survivors) {
    pooled.theta_bar += fit->theta;
    pooled.within += fit->se.cwiseProduct(fit->se);
  }
  pooled.theta_bar /= pooled.m;
  pooled.within /= pooled.m;

  if (pooled.m == 1) {
    pooled.single_chain = true;  // between-imputation variance unobservable
  } else {
    for (const FitResult* fit : survivors) {
      const ThetaVector dev = fit->theta - pooled.theta_bar;
      pooled.between += dev.cwiseProduct(dev);
    }
    pooled.between /= pooled.m - 1;
  }
  const ThetaVector total =
      pooled.within + (1.0 + 1.0 / pooled.m) * pooled.between;
  pooled.se_pooled = total.cwiseSqrt();
  return pooled;
}

double relative_bias(const std::vector<double>& estimates, double truth) {
  if (estimates.empty()) throw ConfigError("relative bias: no estimates");
  double mean = 0.0;
  for (double e : estimates) mean += e;
  mean /= static_cast<double>(estimates.size());
  if (truth == 0.0) return mean - truth;
  return 100.0 * (mean - truth) / truth;
}

double mse(const std::vector<double>& estimates, double truth) {
  if (estimates.empty()) throw ConfigError("mse: no estimates");
  double acc = 0.0;
  for (double e : estimates) acc += (e - truth) * (e - truth);
  return acc / static_cast<double>(estimates.size());
}

}  // namespace lgrowth
