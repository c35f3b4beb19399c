#pragma once

#include <stdexcept>
#include <string>

namespace tomolab {

/// Malformed input: bad topology, inconsistent counts, unparsable files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An estimator could not produce a result (budget exceeded, rank deficiency,
/// quadrature or root-solve failure, divergence).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tomolab
