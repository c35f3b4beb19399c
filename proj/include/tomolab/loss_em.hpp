#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "tomolab/fit_result.hpp"
#include "tomolab/probe_sim.hpp"
#include "tomolab/topology.hpp"

namespace tomolab {

/// Link success probabilities being estimated; same shape as the model.
using LossParams = LossModel;

/// Path probabilities of a bicast pair <i, j> splitting at s.
struct PathProbs {
  double shared = 1.0;  // pi(0, s)
  double left = 1.0;    // pi(s, i)
  double right = 1.0;   // pi(s, j)
  double gamma00 = 0.0; // P(neither receiver gets the probe)
};

PathProbs bicast_path_probs(const Topology& topology, const Scheme& scheme,
                            const LossParams& params);

/// Maximum number of links in a scheme's path union for exact enumeration.
inline constexpr std::size_t kLossEnumerationBudget = 20;

/// Outcome probabilities indexed by outcome mask (see SchemeCounts). Uses
/// the path-product factorization for k <= 2 and exact latent enumeration
/// otherwise.
std::vector<double> outcome_probs(const Topology& topology, const Scheme& scheme,
                                  const LossParams& params);

/// Multinomial log-likelihood sum_schemes sum_y N_y log gamma_y. Returns
/// -infinity when an observed outcome has probability zero.
double loss_loglik(const Topology& topology, const FlexicastExperiment& experiment,
                   const LossObservations& counts, const LossParams& params);

struct EmOptions {
  double tol = 1e-8;
  int max_iter = 100000;
  bool record_iterates = false;
};

struct LossFit {
  LossParams params;
  FitResult fit;
};

/// alpha = value on every link touched by the experiment.
LossParams default_loss_init(const Topology& topology, const FlexicastExperiment& experiment,
                             double value = 0.9);

/// EM with the closed-form bicast/unicast E-step. Throws InputError if any
/// scheme has more than two receivers.
LossFit em_fit_bicast_unicast(const Topology& topology, const FlexicastExperiment& experiment,
                              const LossObservations& counts, const LossParams& init,
                              const EmOptions& options = {});

/// EM whose E-step enumerates the latent link states of each scheme.
LossFit em_fit_general(const Topology& topology, const FlexicastExperiment& experiment,
                       const LossObservations& counts, const LossParams& init,
                       const EmOptions& options = {});

/// Closed-form EM when every scheme is a unicast or bicast, general EM
/// otherwise.
LossFit em_fit(const Topology& topology, const FlexicastExperiment& experiment,
               const LossObservations& counts, const LossParams& init,
               const EmOptions& options = {});

/// Expected (Fisher) information of the multinomial likelihood at `params`,
/// rows/columns ordered by ascending link id.
Eigen::MatrixXd loss_fisher_information(const Topology& topology,
                                        const FlexicastExperiment& experiment,
                                        const LossObservations& counts, const LossParams& params);

/// Zero end-to-end delay plays the role of a received probe: bit r is set
/// when receiver r saw delay exactly 0.
LossObservations zero_delay_indicator_counts(const DelayObservations& delays);

/// Estimates p_k = P(X_k = 0) by running em_fit on the zero-delay
/// indicator counts. Result parameters are named "p[k]".
LossFit estimate_zero_delay_probs(const Topology& topology, const FlexicastExperiment& experiment,
                                  const DelayObservations& delays, const LossParams& init,
                                  const EmOptions& options = {});

}  // namespace tomolab
