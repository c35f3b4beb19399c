#pragma once

#include <array>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "tomolab/fit_result.hpp"
#include "tomolab/loss_em.hpp"

namespace tomolab {

// Maximum likelihood for continuous link delays on the two-layer bicast
// tree: link 1 is shared, links 2 and 3 lead to the two receivers. All
// delays are in seconds and strictly positive.

struct ExpParams {
  double rate1 = 1.0;
  double rate2 = 1.0;
  double rate3 = 1.0;

  [[nodiscard]] double d() const { return rate1 - rate2 - rate3; }
};

struct GammaParams {
  std::array<double, 3> shape{1.0, 1.0, 1.0};
  std::array<double, 3> scale{1.0, 1.0, 1.0};
};

struct BicastDelaySample {
  std::vector<double> y2;
  std::vector<double> y3;

  [[nodiscard]] std::size_t size() const { return y2.size(); }
  void validate() const;
  /// Takes a two-column delay matrix; throws unless every entry is > 0.
  static BicastDelaySample from_matrix(const Eigen::MatrixXd& m);
};

/// log[(1 - exp(-d m)) / d], continuous through d = 0.
double log_exp_kernel(double d, double m);

double exp_loglik(const BicastDelaySample& sample, const ExpParams& params);

/// E[X1 | Y2 = a, Y3 = b] under exponential links, m = min(a, b):
/// 1/d - m / (exp(d m) - 1), with the d -> 0 limit m/2.
double exp_conditional_mean(double d, double m);

/// Closed-form moment inversion used as a warm start: the shared link from
/// Cov(Y2, Y3), the branches from the means. Falls back to a symmetric split
/// when the covariance is not positive.
ExpParams exp_moment_init(const BicastDelaySample& sample);

struct ExpFit {
  ExpParams params;
  FitResult fit;
};

ExpFit exp_em_fit(const BicastDelaySample& sample, const ExpParams& init,
                  const EmOptions& options = {});

/// Standard errors of the rates from the numerically differentiated
/// observed information of exp_loglik.
Eigen::MatrixXd exp_covariance(const BicastDelaySample& sample, const ExpParams& params);

/// Integrals against the conditional density of X1 given (a, b):
/// w(x) = x^(s1-1) (a-x)^(s2-1) (b-x)^(s3-1) exp(kappa x) on (0, min(a,b)).
struct ConditionalIntegrals {
  double log_constant;  // log of the integral of w
  double mean_x;        // E[X1]
  double mean_log_x;    // E[log X1]
  double mean_log_a;    // E[log(a - X1)]
  double mean_log_b;    // E[log(b - X1)]
};

ConditionalIntegrals gamma_conditional_integrals(double a, double b,
                                                 const std::array<double, 3>& shapes,
                                                 double kappa);

/// C(a, b; shapes, scale) with common scale: kappa = 1/scale.
double gamma_conditional_constant(double a, double b, const std::array<double, 3>& shapes,
                                  double scale);
double gamma_conditional_log_constant(double a, double b, const std::array<double, 3>& shapes,
                                      double scale);

double gamma_loglik(const BicastDelaySample& sample, const GammaParams& params);

struct GammaEmOptions {
  EmOptions em{1e-8, 5000, false};
  /// Common scale for the three links (closed under convolution). When false
  /// each link gets its own scale.
  bool common_scale = true;
  /// Hold the shapes at their initial values.
  bool fix_shapes = false;
};

struct GammaFit {
  GammaParams params;
  FitResult fit;
};

GammaParams gamma_moment_init(const BicastDelaySample& sample, bool common_scale = true);

GammaFit gamma_em_fit(const BicastDelaySample& sample, const GammaParams& init,
                      const GammaEmOptions& options = {});

/// Solves psi(x) = y.
double inverse_digamma(double y);

struct ConditionalSubsets {
  std::vector<double> right_given_left_zero;  // y3 with y2 = 0, y3 > 0
  std::vector<double> left_given_right_zero;  // y2 with y3 = 0, y2 > 0
  std::vector<std::string> flags;
};

/// With zero-inflated links, Y2 = 0 forces X1 = X2 = 0, so Y3 on that subset
/// is a clean sample of link 3 (and symmetrically for link 2).
ConditionalSubsets conditional_subset(const Eigen::MatrixXd& bicast_delays);

}  // namespace tomolab
