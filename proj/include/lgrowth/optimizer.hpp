#pragma once

#include <Eigen/Dense>
#include <functional>

namespace lgrowth {

// Objective callback: fills the gradient and returns f(x).  May return +inf
// (or NaN) outside the feasible region; the line search backtracks off such
// points, which lets callers express barriers without exceptions.
using ObjectiveFn = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct MinimizeOptions {
  int max_iterations = 500;
  // Stop when the gradient infinity-norm falls below grad_tol, or when the
  // relative objective change falls below f_tol while the gradient is already
  // below grad_tol_loose (so a stall far from stationarity never reads as
  // success).
  double grad_tol = 1e-6;
  double grad_tol_loose = 1e-5;
  double f_tol = 1e-9;
};

struct MinimizeResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  bool converged = false;  // final gradient infinity-norm < grad_tol_loose
};

// Dense BFGS with a strong-Wolfe line search (c1 = 1e-4, c2 = 0.9).
MinimizeResult minimize_bfgs(const ObjectiveFn& objective, const Eigen::VectorXd& x0,
                             const MinimizeOptions& options = {});

}  // namespace lgrowth
