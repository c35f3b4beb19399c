#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tomolab/fit_result.hpp"
#include "tomolab/probe_sim.hpp"
#include "tomolab/topology.hpp"

namespace tomolab {

enum class Family { Exponential, Gamma, Uniform };

Family parse_family(const std::string& name);  // "exp", "gamma", "uniform"
std::string family_name(Family family);

/// Flat parameter layout: links ascending, per link
/// Exponential (rate), Gamma (shape, scale), Uniform (upper).
struct FamilySpec {
  Family family = Family::Exponential;
  std::vector<NodeId> links;

  /// Every link reached by some scheme of the experiment.
  static FamilySpec for_experiment(Family family, const Topology& topology,
                                   const FlexicastExperiment& experiment);

  [[nodiscard]] int per_link() const { return family == Family::Gamma ? 2 : 1; }
  [[nodiscard]] Eigen::Index size() const {
    return static_cast<Eigen::Index>(links.size()) * per_link();
  }
  /// Slot of the first parameter of `link`; throws InputError if absent.
  [[nodiscard]] Eigen::Index slot(NodeId link) const;
  [[nodiscard]] std::vector<std::string> names() const;

  [[nodiscard]] Eigen::VectorXd pack(const DelayModel& model) const;
  /// Continuous laws only, no zero inflation.
  [[nodiscard]] DelayModel unpack(const Eigen::VectorXd& theta) const;
};

enum class MomentKind { Mean, Var, Cov, ThirdCross };

/// third_cross(r, s) is E(Y_r - nu_r)^2 (Y_s - nu_s).
struct MomentDescriptor {
  std::size_t scheme = 0;
  MomentKind kind = MomentKind::Mean;
  NodeId r = 0;
  NodeId s = 0;  // unused for Mean and Var

  bool operator==(const MomentDescriptor&) const = default;
  [[nodiscard]] std::string label() const;
};

MomentKind parse_moment_kind(const std::string& name);
std::string moment_kind_name(MomentKind kind);

struct MomentVector {
  std::vector<MomentDescriptor> descriptors;
  Eigen::VectorXd values;

  /// Throws InputError if the descriptor is missing.
  [[nodiscard]] double at(const MomentDescriptor& d) const;
};

void validate_descriptors(const std::vector<MomentDescriptor>& descriptors,
                          const FlexicastExperiment& experiment);

/// Means and variances of every receiver of every scheme, covariances of
/// every receiver pair with a non-empty shared path, plus third_cross for
/// those pairs under Gamma.
std::vector<MomentDescriptor> default_descriptors(const Topology& topology,
                                                  const FlexicastExperiment& experiment,
                                                  Family family);

/// 1/n central moments.
MomentVector sample_moments(const DelayObservations& observations,
                            const FlexicastExperiment& experiment,
                            const std::vector<MomentDescriptor>& descriptors);

/// Model moments and their Jacobian with respect to theta.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> theoretical_moments(
    const Topology& topology, const FlexicastExperiment& experiment, const FamilySpec& spec,
    const Eigen::VectorXd& theta, const std::vector<MomentDescriptor>& descriptors);

struct MomentCovariance {
  Eigen::MatrixXd sigma;
  bool regularized = false;
};

/// Covariance of the sample-moment vector from per-probe influence kernels;
/// zero across schemes. Ridge-regularized when singular.
MomentCovariance moment_covariance(const DelayObservations& observations,
                                   const FlexicastExperiment& experiment,
                                   const std::vector<MomentDescriptor>& descriptors);

/// Inverse of moment_covariance.
Eigen::MatrixXd gls_weight(const DelayObservations& observations,
                           const FlexicastExperiment& experiment,
                           const std::vector<MomentDescriptor>& descriptors,
                           bool* regularized = nullptr);

enum class Weighting { OLS, GLS };

struct GaussNewtonOptions {
  double tol = 1e-10;
  int max_iter = 500;
  /// Weight matrix; identity when empty.
  std::optional<Eigen::MatrixXd> weight;
  /// Covariance of the observed moments, for sandwich standard errors.
  std::optional<Eigen::MatrixXd> moment_cov;
};

struct MomFit {
  FamilySpec spec;
  Eigen::VectorXd theta;
  FitResult fit;
};

/// Minimizes Q = (M - m(theta))' W (M - m(theta)) by Gauss-Newton in
/// log-parameters with step halving. Throws EstimationError when the
/// Jacobian is rank deficient at the start.
MomFit gauss_newton_fit(const MomentVector& observed, const FamilySpec& spec,
                        const Topology& topology, const FlexicastExperiment& experiment,
                        const Eigen::VectorXd& init, const GaussNewtonOptions& options = {});

/// Start point from linear least squares on per-link means and variances.
Eigen::VectorXd moment_start(const MomentVector& observed, const FamilySpec& spec,
                             const Topology& topology, const FlexicastExperiment& experiment);

/// Descriptors, sample moments, weighting and fit in one call.
MomFit fit_mom(const DelayObservations& observations, const Topology& topology,
               const FlexicastExperiment& experiment, Family family, Weighting weighting,
               const std::optional<Eigen::VectorXd>& init = std::nullopt,
               double tol = 1e-10, int max_iter = 500,
               std::optional<std::vector<MomentDescriptor>> descriptors = std::nullopt);

/// Direct moment inversion on a three-layer binary tree probed with bicast
/// schemes <a,b>, <b,c>, <c,d>, where a, b share one parent and c, d the
/// other. Returns theta in the Gamma layout of `spec`.
Eigen::VectorXd solve_gamma_three_layer(const MomentVector& moments, const Topology& topology,
                                        const FlexicastExperiment& experiment);

}  // namespace tomolab
