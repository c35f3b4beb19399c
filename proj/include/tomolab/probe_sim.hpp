#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "tomolab/topology.hpp"

namespace tomolab {

/// Per-link success probabilities alpha_k in (0, 1].
struct LossModel {
  std::map<NodeId, double> alpha;
};

struct ExponentialLaw {
  double rate = 1.0;
};
struct GammaLaw {
  double shape = 1.0;
  double scale = 1.0;
};
struct UniformLaw {
  double upper = 1.0;
};
using ContinuousFamily = std::variant<ExponentialLaw, GammaLaw, UniformLaw>;

/// Delay on a grid {0, q, ..., bq}; pmf.size() == b + 1.
struct DiscreteLaw {
  double q = 1.0;
  std::vector<double> pmf;
};

/// Zero-inflated law: exactly zero with probability p, otherwise a draw from
/// the positive continuous family.
struct ZeroInflatedLaw {
  double p_zero = 0.0;
  ContinuousFamily family;
};

using LinkDelayLaw = std::variant<DiscreteLaw, ZeroInflatedLaw>;

struct DelayModel {
  std::map<NodeId, LinkDelayLaw> links;
};

/// Outcome counts of one k-cast scheme. counts[mask] is the number of probes
/// whose receiver set is `mask`, where bit j means receiver j of the scheme
/// got the probe. counts.size() == 2^k.
struct SchemeCounts {
  std::vector<std::uint64_t> counts;

  [[nodiscard]] std::uint64_t total() const;
  [[nodiscard]] std::size_t scheme_size() const;
};

struct LossObservations {
  std::vector<SchemeCounts> schemes;
};

/// Bitstring for an outcome mask: character j is '1' iff bit j is set.
std::string outcome_bits(std::uint32_t mask, std::size_t k);
std::uint32_t parse_outcome_bits(const std::string& bits);

/// End-to-end delays per scheme: rows are probes, columns follow the
/// scheme's receiver order. Lost probes never appear.
struct DelayObservations {
  std::vector<Eigen::MatrixXd> schemes;
};

void validate(const LossModel& model, const Topology& topology);
void validate(const DelayModel& model, const Topology& topology);

/// `stream` separates replications drawn from the same seed.
LossObservations simulate_loss(const Topology& topology, const LossModel& model,
                               const FlexicastExperiment& experiment, std::uint64_t n_per_scheme,
                               std::uint64_t seed, std::uint64_t stream = 0);

DelayObservations simulate_delay(const Topology& topology, const DelayModel& model,
                                 const FlexicastExperiment& experiment,
                                 std::uint64_t n_per_scheme, std::uint64_t seed,
                                 std::uint64_t stream = 0);

/// Mean, variance and third central moment of a continuous family.
struct FamilyMoments {
  double mean;
  double variance;
  double third_central;
};
FamilyMoments moments_of(const ContinuousFamily& family);

}  // namespace tomolab
