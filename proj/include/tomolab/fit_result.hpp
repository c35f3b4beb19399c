#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace tomolab {

/// Outcome of any iterative estimator in the library.
///
/// `objective_trace` holds the log-likelihood (EM fits) or the least-squares
/// loss Q (moment fits) after each iteration, starting with the value at the
/// initial point. `iterates` is only filled when the caller asks for it.
struct FitResult {
  std::vector<std::string> names;
  Eigen::VectorXd estimates;
  Eigen::VectorXd std_errors;
  Eigen::MatrixXd covariance;
  double objective = 0.0;
  std::vector<double> objective_trace;
  std::vector<Eigen::VectorXd> iterates;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;
  nlohmann::json diagnostics = nlohmann::json::object();

  [[nodiscard]] std::size_t index_of(const std::string& name) const;
  [[nodiscard]] double value(const std::string& name) const { return estimates[index_of(name)]; }
  [[nodiscard]] double std_error(const std::string& name) const { return std_errors[index_of(name)]; }
};

nlohmann::json to_json(const FitResult& fit);

}  // namespace tomolab
