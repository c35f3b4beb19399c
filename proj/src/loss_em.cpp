#include "tomolab/loss_em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tomolab/error.hpp"

namespace tomolab {

namespace {

constexpr double kAlphaFloor = 1e-12;

double path_product(const LossParams& params, const std::vector<NodeId>& links) {
  double p = 1.0;
  for (NodeId k : links) {
    auto it = params.alpha.find(k);
    if (it == params.alpha.end()) {
      throw InputError(fmt::format("no success probability for link {}", k));
    }
    p *= it->second;
  }
  return p;
}

// Latent-state layout of one scheme: its links and, per receiver, the bit
// mask (over link positions) of the receiver's root path.
struct SchemeLayout {
  std::vector<NodeId> links;
  std::vector<std::uint32_t> receiver_masks;
};

SchemeLayout layout_of(const Topology& topology, const Scheme& scheme) {
  SchemeLayout out;
  out.links = scheme_links(topology, scheme);
  if (out.links.size() > kLossEnumerationBudget) {
    throw EstimationError(fmt::format(
        "scheme with {} links exceeds the enumeration budget of {} links", out.links.size(),
        kLossEnumerationBudget));
  }
  for (NodeId r : scheme.receivers) {
    std::uint32_t m = 0;
    for (NodeId k : topology.path_from_root(r)) {
      m |= 1u << (std::ranges::lower_bound(out.links, k) - out.links.begin());
    }
    out.receiver_masks.push_back(m);
  }
  return out;
}

std::uint32_t outcome_of(std::uint32_t state, const std::vector<std::uint32_t>& receiver_masks) {
  std::uint32_t y = 0;
  for (std::size_t r = 0; r < receiver_masks.size(); ++r) {
    if ((state & receiver_masks[r]) == receiver_masks[r]) y |= 1u << r;
  }
  return y;
}

// Enumerates all latent link states. joint[y] = P(Y = y) and, when
// `link_up` is given, link_up[y * L + l] = P(Y = y, X_l = 1).
void enumerate_states(const SchemeLayout& layout, const std::vector<double>& alpha,
                      std::vector<double>& joint, std::vector<double>* link_up) {
  const std::size_t L = layout.links.size();
  const std::size_t k = layout.receiver_masks.size();
  joint.assign(std::size_t{1} << k, 0.0);
  if (link_up) link_up->assign((std::size_t{1} << k) * L, 0.0);
  const std::uint32_t n_states = 1u << L;
  for (std::uint32_t state = 0; state < n_states; ++state) {
    double p = 1.0;
    for (std::size_t l = 0; l < L; ++l) p *= (state >> l & 1u) ? alpha[l] : 1.0 - alpha[l];
    if (p == 0.0) continue;
    const std::uint32_t y = outcome_of(state, layout.receiver_masks);
    joint[y] += p;
    if (link_up) {
      double* row = link_up->data() + y * L;
      for (std::size_t l = 0; l < L; ++l) {
        if (state >> l & 1u) row[l] += p;
      }
    }
  }
}

std::vector<double> alpha_on(const LossParams& params, const std::vector<NodeId>& links) {
  std::vector<double> a;
  a.reserve(links.size());
  for (NodeId k : links) {
    auto it = params.alpha.find(k);
    if (it == params.alpha.end()) {
      throw InputError(fmt::format("no success probability for link {}", k));
    }
    a.push_back(it->second);
  }
  return a;
}

void check_counts(const FlexicastExperiment& experiment, const LossObservations& counts) {
  if (counts.schemes.size() != experiment.schemes.size()) {
    throw InputError(fmt::format("counts cover {} schemes but the experiment has {}",
                                 counts.schemes.size(), experiment.schemes.size()));
  }
  for (std::size_t j = 0; j < counts.schemes.size(); ++j) {
    const std::size_t expected = std::size_t{1} << experiment.schemes[j].size();
    if (counts.schemes[j].counts.size() != expected) {
      throw InputError(fmt::format("scheme {}: expected {} outcome cells, got {}", j, expected,
                                   counts.schemes[j].counts.size()));
    }
  }
}

std::vector<NodeId> experiment_links(const Topology& topology,
                                     const FlexicastExperiment& experiment) {
  std::set<NodeId> all;
  for (const auto& s : experiment.schemes) {
    for (NodeId k : scheme_links(topology, s)) all.insert(k);
  }
  return {all.begin(), all.end()};
}

std::size_t position(const std::vector<NodeId>& links, NodeId k) {
  return static_cast<std::size_t>(std::ranges::lower_bound(links, k) - links.begin());
}

// Accumulated expected link-success counts V and probe totals per link.
struct Estep {
  std::vector<double> v;
  std::vector<double> n;
  double loglik = 0.0;
};

using EstepFn = Estep (*)(const Topology&, const FlexicastExperiment&, const LossObservations&,
                          const std::vector<NodeId>&, const LossParams&);

Estep bicast_unicast_estep(const Topology& topology, const FlexicastExperiment& experiment,
                           const LossObservations& counts, const std::vector<NodeId>& links,
                           const LossParams& params) {
  Estep e{std::vector<double>(links.size(), 0.0), std::vector<double>(links.size(), 0.0), 0.0};
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto& s = experiment.schemes[j];
    const auto& c = counts.schemes[j].counts;
    const double n_total = static_cast<double>(counts.schemes[j].total());
    if (s.size() == 1) {
      const NodeId u = s.receivers[0];
      const auto path = topology.path_from_root(u);
      const double pi = path_product(params, path);
      const double n0 = static_cast<double>(c[0]);
      for (NodeId l : path) {
        const double a = params.alpha.at(l);
        const std::size_t p = position(links, l);
        e.v[p] += n_total - (n0 > 0 ? n0 * (1.0 - a) / (1.0 - pi) : 0.0);
        e.n[p] += n_total;
      }
      e.loglik += (c[1] > 0 ? static_cast<double>(c[1]) * std::log(pi) : 0.0) +
                  (n0 > 0 ? n0 * std::log1p(-pi) : 0.0);
      continue;
    }
    const NodeId i = s.receivers[0];
    const NodeId jr = s.receivers[1];
    const NodeId split = topology.lowest_common_ancestor(i, jr);
    const auto shared = topology.path(topology.root(), split);
    const auto left = topology.path(split, i);
    const auto right = topology.path(split, jr);
    const PathProbs pp = bicast_path_probs(topology, s, params);
    // Bit 0 is receiver i, bit 1 receiver j: N10 = c[1], N01 = c[2].
    const double n00 = static_cast<double>(c[0]);
    const double n10 = static_cast<double>(c[1]);
    const double n01 = static_cast<double>(c[2]);
    const double n11 = static_cast<double>(c[3]);
    const double pi_0i = pp.shared * pp.left;
    const double pi_0j = pp.shared * pp.right;
    auto ratio = [](double n, double num, double den) { return n > 0 ? n * num / den : 0.0; };

    for (NodeId l : shared) {
      const double a = params.alpha.at(l);
      const std::size_t p = position(links, l);
      e.v[p] += n_total - ratio(n00, 1.0 - a, pp.gamma00);
      e.n[p] += n_total;
    }
    for (NodeId l : left) {
      const double a = params.alpha.at(l);
      const std::size_t p = position(links, l);
      e.v[p] += n_total - ratio(n01, 1.0 - a, 1.0 - pp.left) -
                ratio(n00, (1.0 - a) * (1.0 - pi_0j), pp.gamma00);
      e.n[p] += n_total;
    }
    for (NodeId l : right) {
      const double a = params.alpha.at(l);
      const std::size_t p = position(links, l);
      e.v[p] += n_total - ratio(n10, 1.0 - a, 1.0 - pp.right) -
                ratio(n00, (1.0 - a) * (1.0 - pi_0i), pp.gamma00);
      e.n[p] += n_total;
    }
    const double g11 = pp.shared * pp.left * pp.right;
    const double g10 = pp.shared * pp.left * (1.0 - pp.right);
    const double g01 = pp.shared * (1.0 - pp.left) * pp.right;
    auto term = [](double n, double g) { return n > 0 ? n * std::log(g) : 0.0; };
    e.loglik += term(n11, g11) + term(n10, g10) + term(n01, g01) + term(n00, pp.gamma00);
  }
  return e;
}

Estep enumeration_estep(const Topology& topology, const FlexicastExperiment& experiment,
                        const LossObservations& counts, const std::vector<NodeId>& links,
                        const LossParams& params) {
  Estep e{std::vector<double>(links.size(), 0.0), std::vector<double>(links.size(), 0.0), 0.0};
  std::vector<double> joint;
  std::vector<double> up;
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto layout = layout_of(topology, experiment.schemes[j]);
    const auto alpha = alpha_on(params, layout.links);
    enumerate_states(layout, alpha, joint, &up);
    const auto& c = counts.schemes[j].counts;
    const std::size_t L = layout.links.size();
    const double n_total = static_cast<double>(counts.schemes[j].total());
    std::vector<double> v(L, 0.0);
    for (std::size_t y = 0; y < c.size(); ++y) {
      if (c[y] == 0) continue;
      const double n = static_cast<double>(c[y]);
      if (joint[y] <= 0.0) {
        e.loglik = -std::numeric_limits<double>::infinity();
        continue;
      }
      e.loglik += n * std::log(joint[y]);
      for (std::size_t l = 0; l < L; ++l) v[l] += n * up[y * L + l] / joint[y];
    }
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t p = position(links, layout.links[l]);
      e.v[p] += v[l];
      e.n[p] += n_total;
    }
  }
  return e;
}

LossParams to_params(const std::vector<NodeId>& links, const Eigen::VectorXd& a) {
  LossParams p;
  for (std::size_t i = 0; i < links.size(); ++i) p.alpha[links[i]] = a[static_cast<Eigen::Index>(i)];
  return p;
}

LossFit run_em(EstepFn estep, const Topology& topology, const FlexicastExperiment& experiment,
               const LossObservations& counts, const LossParams& init, const EmOptions& options) {
  experiment.validate(topology);
  check_counts(experiment, counts);
  const auto links = experiment_links(topology, experiment);
  Eigen::VectorXd alpha(static_cast<Eigen::Index>(links.size()));
  for (std::size_t i = 0; i < links.size(); ++i) {
    auto it = init.alpha.find(links[i]);
    if (it == init.alpha.end()) {
      throw InputError(fmt::format("initial value missing for link {}", links[i]));
    }
    if (!(it->second > 0.0 && it->second <= 1.0)) {
      throw InputError(fmt::format("initial value for link {} outside (0, 1]", links[i]));
    }
    alpha[static_cast<Eigen::Index>(i)] = it->second;
  }

  LossFit out;
  FitResult& fit = out.fit;
  for (NodeId k : links) fit.names.push_back(fmt::format("alpha[{}]", k));
  if (options.record_iterates) fit.iterates.push_back(alpha);

  int iter = 0;
  bool converged = false;
  Estep e = estep(topology, experiment, counts, links, to_params(links, alpha));
  fit.objective_trace.push_back(e.loglik);
  while (iter < options.max_iter) {
    Eigen::VectorXd next(alpha.size());
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
      const auto u = static_cast<std::size_t>(i);
      next[i] = std::clamp(e.n[u] > 0 ? e.v[u] / e.n[u] : alpha[i], kAlphaFloor, 1.0);
    }
    ++iter;
    const double change = (next - alpha).cwiseAbs().maxCoeff();
    alpha = next;
    if (options.record_iterates) fit.iterates.push_back(alpha);
    e = estep(topology, experiment, counts, links, to_params(links, alpha));
    fit.objective_trace.push_back(e.loglik);
    if (change < options.tol) {
      converged = true;
      break;
    }
  }

  out.params = to_params(links, alpha);
  fit.estimates = alpha;
  fit.objective = e.loglik;
  fit.iterations = iter;
  fit.converged = converged;

  std::vector<NodeId> at_boundary;
  for (std::size_t i = 0; i < links.size(); ++i) {
    const double a = alpha[static_cast<Eigen::Index>(i)];
    if (a >= 1.0 || a <= kAlphaFloor) at_boundary.push_back(links[i]);
  }
  fit.diagnostics["boundary_links"] = at_boundary;
  if (!converged) {
    fit.warnings.push_back(fmt::format("EM stopped after {} iterations without reaching tol {}",
                                       iter, options.tol));
  }

  const auto report = check_identifiability(topology, experiment);
  if (!report.non_splitting_internals.empty()) {
    fit.diagnostics["confounded_nodes"] = report.non_splitting_internals;
    for (NodeId v : report.non_splitting_internals) {
      fit.warnings.push_back(fmt::format(
          "experiment does not split at node {}: alpha[{}] is only identified jointly with the "
          "links below it (product along the path)",
          v, v));
    }
  }
  if (!report.uncovered_receivers.empty()) {
    fit.diagnostics["uncovered_receivers"] = report.uncovered_receivers;
    fit.warnings.push_back(fmt::format("receivers not covered by any scheme: {}",
                                       fmt::join(report.uncovered_receivers, ",")));
  }

  // Asymptotic standard errors from the expected information; undefined on
  // the boundary of the parameter space.
  fit.std_errors = Eigen::VectorXd::Constant(alpha.size(), std::numeric_limits<double>::quiet_NaN());
  if (at_boundary.empty()) {
    const Eigen::MatrixXd info = loss_fisher_information(topology, experiment, counts, out.params);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
    if (lu.isInvertible()) {
      fit.covariance = lu.inverse();
      fit.std_errors = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    } else {
      fit.warnings.push_back("information matrix is singular; standard errors unavailable");
    }
  }
  return out;
}

}  // namespace

PathProbs bicast_path_probs(const Topology& topology, const Scheme& scheme,
                            const LossParams& params) {
  if (scheme.size() != 2) throw InputError("bicast path probabilities need a two-receiver scheme");
  const NodeId i = scheme.receivers[0];
  const NodeId j = scheme.receivers[1];
  const NodeId s = topology.lowest_common_ancestor(i, j);
  PathProbs pp;
  pp.shared = path_product(params, topology.path(topology.root(), s));
  pp.left = path_product(params, topology.path(s, i));
  pp.right = path_product(params, topology.path(s, j));
  pp.gamma00 = 1.0 - pp.shared * (pp.left + pp.right - pp.left * pp.right);
  return pp;
}

std::vector<double> outcome_probs(const Topology& topology, const Scheme& scheme,
                                  const LossParams& params) {
  if (scheme.size() == 1) {
    const double pi = path_product(params, topology.path_from_root(scheme.receivers[0]));
    return {1.0 - pi, pi};
  }
  if (scheme.size() == 2) {
    const PathProbs pp = bicast_path_probs(topology, scheme, params);
    return {pp.gamma00, pp.shared * pp.left * (1.0 - pp.right),
            pp.shared * (1.0 - pp.left) * pp.right, pp.shared * pp.left * pp.right};
  }
  const auto layout = layout_of(topology, scheme);
  std::vector<double> joint;
  enumerate_states(layout, alpha_on(params, layout.links), joint, nullptr);
  return joint;
}

double loss_loglik(const Topology& topology, const FlexicastExperiment& experiment,
                   const LossObservations& counts, const LossParams& params) {
  check_counts(experiment, counts);
  double ll = 0.0;
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto probs = outcome_probs(topology, experiment.schemes[j], params);
    const auto& c = counts.schemes[j].counts;
    for (std::size_t y = 0; y < c.size(); ++y) {
      if (c[y] == 0) continue;
      if (probs[y] <= 0.0) return -std::numeric_limits<double>::infinity();
      ll += static_cast<double>(c[y]) * std::log(probs[y]);
    }
  }
  return ll;
}

LossParams default_loss_init(const Topology& topology, const FlexicastExperiment& experiment,
                             double value) {
  LossParams p;
  for (NodeId k : experiment_links(topology, experiment)) p.alpha[k] = value;
  return p;
}

LossFit em_fit_bicast_unicast(const Topology& topology, const FlexicastExperiment& experiment,
                              const LossObservations& counts, const LossParams& init,
                              const EmOptions& options) {
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    if (experiment.schemes[j].size() > 2) {
      throw InputError(fmt::format("scheme {} has {} receivers; the closed-form E-step handles "
                                   "unicast and bicast only",
                                   j, experiment.schemes[j].size()));
    }
  }
  return run_em(&bicast_unicast_estep, topology, experiment, counts, init, options);
}

LossFit em_fit_general(const Topology& topology, const FlexicastExperiment& experiment,
                       const LossObservations& counts, const LossParams& init,
                       const EmOptions& options) {
  return run_em(&enumeration_estep, topology, experiment, counts, init, options);
}

LossFit em_fit(const Topology& topology, const FlexicastExperiment& experiment,
               const LossObservations& counts, const LossParams& init, const EmOptions& options) {
  const bool small = std::ranges::all_of(experiment.schemes,
                                         [](const Scheme& s) { return s.size() <= 2; });
  return small ? em_fit_bicast_unicast(topology, experiment, counts, init, options)
               : em_fit_general(topology, experiment, counts, init, options);
}

Eigen::MatrixXd loss_fisher_information(const Topology& topology,
                                        const FlexicastExperiment& experiment,
                                        const LossObservations& counts,
                                        const LossParams& params) {
  check_counts(experiment, counts);
  const auto links = experiment_links(topology, experiment);
  const auto P = static_cast<Eigen::Index>(links.size());
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(P, P);
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto& s = experiment.schemes[j];
    const double n = static_cast<double>(counts.schemes[j].total());
    const auto gamma = outcome_probs(topology, s, params);
    const auto slinks = scheme_links(topology, s);
    // gamma is affine in each alpha_l, so the derivative is the difference
    // between the probabilities with the link forced up and forced down.
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(gamma.size()), P);
    for (NodeId l : slinks) {
      LossParams up = params;
      LossParams down = params;
      up.alpha[l] = 1.0;
      down.alpha[l] = 0.0;
      const auto g1 = outcome_probs(topology, s, up);
      const auto g0 = outcome_probs(topology, s, down);
      const auto col = static_cast<Eigen::Index>(position(links, l));
      for (std::size_t y = 0; y < gamma.size(); ++y) {
        grad(static_cast<Eigen::Index>(y), col) = g1[y] - g0[y];
      }
    }
    for (std::size_t y = 0; y < gamma.size(); ++y) {
      if (gamma[y] <= 0.0) continue;
      const auto row = grad.row(static_cast<Eigen::Index>(y));
      info.noalias() += (n / gamma[y]) * row.transpose() * row;
    }
  }
  return info;
}

LossObservations zero_delay_indicator_counts(const DelayObservations& delays) {
  LossObservations out;
  for (const auto& m : delays.schemes) {
    if (m.cols() > 31) throw InputError("scheme too wide for outcome masks");
    SchemeCounts sc;
    sc.counts.assign(std::size_t{1} << m.cols(), 0);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::uint32_t mask = 0;
      for (Eigen::Index r = 0; r < m.cols(); ++r) {
        if (m(i, r) == 0.0) mask |= 1u << r;
      }
      ++sc.counts[mask];
    }
    out.schemes.push_back(std::move(sc));
  }
  return out;
}

LossFit estimate_zero_delay_probs(const Topology& topology, const FlexicastExperiment& experiment,
                                  const DelayObservations& delays, const LossParams& init,
                                  const EmOptions& options) {
  if (delays.schemes.empty()) throw InputError("no delay observations");
  for (std::size_t j = 0; j < delays.schemes.size(); ++j) {
    if (delays.schemes[j].rows() == 0) throw InputError(fmt::format("scheme {} has no probes", j));
  }
  LossFit fit = em_fit(topology, experiment, zero_delay_indicator_counts(delays), init, options);
  for (auto& name : fit.fit.names) name.replace(0, 5, "p");
  return fit;
}

}  // namespace tomolab
