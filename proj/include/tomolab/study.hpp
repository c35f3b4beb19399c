#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tomolab/probe_sim.hpp"
#include "tomolab/topology.hpp"

namespace tomolab {

enum class Estimator { MLE, OLS, GLS };

Estimator parse_estimator(const std::string& name);  // "mle", "ols", "gls"
std::string estimator_name(Estimator e);

/// Replication study on the two-layer bicast tree with exponential links.
struct StudyConfig {
  Topology topology;
  FlexicastExperiment experiment;
  DelayModel model;
  std::vector<Estimator> estimators{Estimator::MLE, Estimator::OLS, Estimator::GLS};
  int replications = 1000;
  std::uint64_t probes = 3000;
  std::uint64_t seed = 1;
  /// Worker threads; 0 means hardware concurrency. Results do not depend on it.
  unsigned threads = 0;
  double tol = 1e-9;

  void validate() const;
};

/// Equal or unequal link means on the two-layer tree, rates given per link.
StudyConfig two_layer_exponential_study(double rate1, double rate2, double rate3);

struct EstimatorSummary {
  Estimator estimator;
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  Eigen::VectorXd bias;
  Eigen::VectorXd mean_se;  // Monte Carlo SE of the mean
  /// Var(estimator) / Var(MLE) over replications where both succeeded.
  Eigen::VectorXd relative_efficiency;
  Eigen::VectorXd relative_efficiency_se;  // jackknife over replications
  Eigen::MatrixXd quartiles;               // rows: parameters; cols: Q1, median, Q3
  int failures = 0;
};

struct StudyResult {
  std::vector<std::string> parameters;
  Eigen::VectorXd truth;
  std::vector<Estimator> estimators;
  int replications = 0;
  std::uint64_t probes = 0;
  std::uint64_t seed = 0;
  /// estimates[e][r] is empty when estimator e failed on replication r.
  std::vector<std::vector<std::optional<Eigen::VectorXd>>> estimates;
  std::vector<EstimatorSummary> summaries;
  std::vector<std::string> failure_messages;
};

/// Throws EstimationError when an estimator fails on more than 1% of the
/// replications.
StudyResult run_efficiency_study(const StudyConfig& config);

/// Linear-interpolation quantile of an unsorted sample.
double quantile(std::vector<double> values, double p);

nlohmann::json summary_json(const StudyResult& result);

/// Writes estimates.csv (one row per replication, estimator and parameter)
/// and summary.json into `dir`. Throws InputError when unwritable.
void emit_report(const StudyResult& result, const std::filesystem::path& dir);

}  // namespace tomolab
