#pragma once

#include <functional>

#include <Eigen/Dense>

namespace tomolab {

/// Integrand returning several components at once; writes into `out`.
using VectorIntegrand = std::function<void(double x, Eigen::Ref<Eigen::VectorXd> out)>;

struct QuadratureResult {
  Eigen::VectorXd value;
  Eigen::VectorXd error;
  int intervals = 0;
  bool converged = false;
};

/// Globally adaptive 21-point Gauss-Kronrod quadrature of a vector-valued
/// integrand over [lo, hi]. Subdivides the interval with the largest error
/// until every component satisfies err_i <= rel_tol * max(|I_i|, |I_0|).
/// Component 0 is expected to be the normalizing integral. The integrand is
/// never evaluated at the endpoints, so integrable endpoint singularities
/// are allowed.
QuadratureResult integrate_adaptive(const VectorIntegrand& f, int components, double lo, double hi,
                                    double rel_tol = 1e-12, int max_intervals = 2000);

}  // namespace tomolab
