#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "tomolab/fit_result.hpp"
#include "tomolab/loss_em.hpp"
#include "tomolab/probe_sim.hpp"
#include "tomolab/topology.hpp"

namespace tomolab {

/// Per-link delay pmfs on the common grid {0, q, ..., bq}.
struct DiscreteDelayParams {
  double q = 1.0;
  int b = 0;
  std::map<NodeId, std::vector<double>> pmf;

  void validate() const;
};

/// Counts of receiver bin tuples for one scheme; tuple entries are bin
/// indices (multiples of q) in scheme receiver order.
using OutcomeTable = std::map<std::vector<int>, std::uint64_t>;

/// Dense joint pmf over receiver bin tuples. Coordinate r ranges over
/// 0..extents[r]-1; the flat index is row-major with the last receiver
/// varying fastest.
struct JointPmf {
  std::vector<int> extents;
  std::vector<double> probs;

  [[nodiscard]] double at(const std::vector<int>& tuple) const;
  [[nodiscard]] std::size_t flat_index(const std::vector<int>& tuple) const;
  [[nodiscard]] std::vector<int> tuple_of(std::size_t flat) const;
};

inline constexpr double kDiscreteStateBudget = 1e8;

/// Exact joint pmf of the receiver delays of a scheme, computed by
/// convolving link pmfs up the scheme's subtree.
JointPmf path_delay_pmf(const Topology& topology, const Scheme& scheme,
                        const DiscreteDelayParams& params);

/// Multinomial log-likelihood of the outcome tables. Throws InputError on
/// tuples outside the per-receiver support; -infinity on an observed
/// zero-probability tuple.
double discrete_loglik(const Topology& topology, const FlexicastExperiment& experiment,
                       const std::vector<OutcomeTable>& tables, const DiscreteDelayParams& params);

/// Uniform pmf on every link touched by the experiment.
DiscreteDelayParams uniform_discrete_init(const Topology& topology,
                                          const FlexicastExperiment& experiment, double q, int b);

struct DiscreteFit {
  DiscreteDelayParams params;
  FitResult fit;
};

/// EM with an exact E-step: per observed tuple, the posterior of every
/// link's bin is obtained by sum-product over the scheme subtree.
DiscreteFit em_fit_discrete(const Topology& topology, const FlexicastExperiment& experiment,
                            const std::vector<OutcomeTable>& tables,
                            const DiscreteDelayParams& init, const EmOptions& options = {});

struct BinnedDelays {
  std::vector<OutcomeTable> tables;
  std::uint64_t clamped = 0;
};

/// Rounds each delay half-up to the nearest bin and clamps it to the
/// receiver's path maximum (path length * b).
BinnedDelays bin_delays(const Topology& topology, const FlexicastExperiment& experiment,
                        const DelayObservations& delays, double q, int b);

}  // namespace tomolab
