#pragma once

#include <string>
#include <vector>

#include "lgrowth/fit.hpp"

namespace lgrowth {

struct PooledFit {
  ThetaVector theta_bar = ThetaVector::Zero();
  ThetaVector se_pooled = ThetaVector::Zero();
  ThetaVector within = ThetaVector::Zero();   // W: mean squared SE
  ThetaVector between = ThetaVector::Zero();  // B: sample variance of estimates
  int m = 0;                                  // chains pooled after dropping
  int dropped = 0;                            // non-converged chains removed
  bool single_chain = false;                  // m = 1: B is 0 by convention
};

// Rubin's rules: theta_bar = mean estimate, W = mean squared SE, B = sample
// variance of the estimates, pooled variance = W + (1 + 1/m) B.  Chains that
// did not converge are dropped and counted; fewer survivors than half the
// input is a pooling failure.
PooledFit pool_rubin(const std::vector<FitResult>& fits);

// 100 (mean - truth) / truth, or the raw bias (mean - truth) when truth = 0.
double relative_bias(const std::vector<double>& estimates, double truth);

// Mean of (estimate - truth)^2.
double mse(const std::vector<double>& estimates, double truth);

struct MetricRecord {
  std::string parameter;
  double rb = 0.0;   // percent (raw bias when truth = 0)
  double mse = 0.0;  // squared units
  int n_reps = 0;
};

}  // namespace lgrowth
