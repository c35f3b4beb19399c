#include "tomolab/delay_discrete.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tomolab/error.hpp"

namespace tomolab {

void DiscreteDelayParams::validate() const {
  if (!(q > 0.0)) throw InputError("bin width q must be positive");
  if (b < 0) throw InputError("maximum bin index b must be non-negative");
  for (const auto& [k, p] : pmf) {
    if (p.size() != static_cast<std::size_t>(b) + 1) {
      throw InputError(fmt::format("link {}: pmf has {} entries, expected b+1 = {}", k, p.size(),
                                   b + 1));
    }
    double sum = 0.0;
    for (double x : p) {
      if (!(x >= 0.0)) throw InputError(fmt::format("link {}: negative pmf entry", k));
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw InputError(fmt::format("link {}: pmf sums to {:.17g}", k, sum));
    }
  }
}

std::size_t JointPmf::flat_index(const std::vector<int>& tuple) const {
  if (tuple.size() != extents.size()) throw InputError("tuple arity does not match the scheme");
  std::size_t idx = 0;
  for (std::size_t r = 0; r < extents.size(); ++r) {
    if (tuple[r] < 0 || tuple[r] >= extents[r]) {
      throw InputError(fmt::format("bin {} outside the support 0..{} of receiver position {}",
                                   tuple[r], extents[r] - 1, r));
    }
    idx = idx * static_cast<std::size_t>(extents[r]) + static_cast<std::size_t>(tuple[r]);
  }
  return idx;
}

double JointPmf::at(const std::vector<int>& tuple) const { return probs[flat_index(tuple)]; }

std::vector<int> JointPmf::tuple_of(std::size_t flat) const {
  std::vector<int> t(extents.size());
  for (std::size_t r = extents.size(); r-- > 0;) {
    t[r] = static_cast<int>(flat % static_cast<std::size_t>(extents[r]));
    flat /= static_cast<std::size_t>(extents[r]);
  }
  return t;
}

namespace {

const std::vector<double>& pmf_of(const DiscreteDelayParams& params, NodeId k) {
  auto it = params.pmf.find(k);
  if (it == params.pmf.end()) throw InputError(fmt::format("no delay pmf for link {}", k));
  return it->second;
}

// Joint pmf over the scheme receivers below some node, receivers listed in
// `recv` and stored row-major.
struct Tensor {
  std::vector<NodeId> recv;
  std::vector<int> ext;
  std::vector<double> p;
};

double tensor_size(const std::vector<int>& ext) {
  double s = 1.0;
  for (int e : ext) s *= e;
  return s;
}

Tensor outer(const Tensor& a, const Tensor& b) {
  Tensor t;
  t.recv = a.recv;
  t.recv.insert(t.recv.end(), b.recv.begin(), b.recv.end());
  t.ext = a.ext;
  t.ext.insert(t.ext.end(), b.ext.begin(), b.ext.end());
  if (tensor_size(t.ext) > kDiscreteStateBudget) {
    throw EstimationError("joint delay pmf exceeds the enumeration budget");
  }
  t.p.assign(a.p.size() * b.p.size(), 0.0);
  for (std::size_t i = 0; i < a.p.size(); ++i) {
    if (a.p[i] == 0.0) continue;
    for (std::size_t j = 0; j < b.p.size(); ++j) t.p[i * b.p.size() + j] = a.p[i] * b.p[j];
  }
  return t;
}

// Adds an independent link delay (pmf `link`) to every coordinate.
Tensor shift_convolve(const Tensor& in, const std::vector<double>& link) {
  const int b = static_cast<int>(link.size()) - 1;
  Tensor t;
  t.recv = in.recv;
  t.ext = in.ext;
  for (int& e : t.ext) e += b;
  if (tensor_size(t.ext) > kDiscreteStateBudget) {
    throw EstimationError("joint delay pmf exceeds the enumeration budget");
  }
  const std::size_t dims = t.ext.size();
  std::vector<std::size_t> stride(dims, 1);
  for (std::size_t r = dims - 1; r-- > 0;) stride[r] = stride[r + 1] * static_cast<std::size_t>(t.ext[r + 1]);
  const std::size_t diag = std::accumulate(stride.begin(), stride.end(), std::size_t{0});
  t.p.assign(static_cast<std::size_t>(tensor_size(t.ext)), 0.0);
  std::vector<int> tuple(dims, 0);
  for (std::size_t flat = 0; flat < in.p.size(); ++flat) {
    // Decode `flat` under the input extents.
    std::size_t rem = flat;
    std::size_t base = 0;
    for (std::size_t r = dims; r-- > 0;) {
      tuple[r] = static_cast<int>(rem % static_cast<std::size_t>(in.ext[r]));
      rem /= static_cast<std::size_t>(in.ext[r]);
    }
    for (std::size_t r = 0; r < dims; ++r) base += static_cast<std::size_t>(tuple[r]) * stride[r];
    const double pv = in.p[flat];
    if (pv == 0.0) continue;
    for (int i = 0; i <= b; ++i) t.p[base + static_cast<std::size_t>(i) * diag] += pv * link[static_cast<std::size_t>(i)];
  }
  return t;
}

// Scheme subtree in parent-before-child order; index 0 is the root.
struct Subtree {
  struct Node {
    NodeId id;
    int parent = -1;
    std::vector<int> kids;
    int column = -1;  // receiver position in the scheme, -1 for non-receivers
    int cap = 0;      // maximum bin of the cumulative delay at this node
  };
  std::vector<Node> nodes;
};

Subtree subtree_of(const Topology& topology, const Scheme& scheme, int b) {
  const auto links = scheme_links(topology, scheme);
  Subtree st;
  std::map<NodeId, int> index;
  st.nodes.push_back({topology.root(), -1, {}, -1, 0});
  index[topology.root()] = 0;
  // Root paths sorted by depth put parents first.
  std::vector<NodeId> order(links.begin(), links.end());
  std::ranges::stable_sort(order, {}, [&](NodeId v) { return topology.depth(v); });
  for (NodeId v : order) {
    const int p = index.at(*topology.parent(v));
    const int me = static_cast<int>(st.nodes.size());
    st.nodes.push_back({v, p, {}, -1, topology.depth(v) * b});
    st.nodes[static_cast<std::size_t>(p)].kids.push_back(me);
    index[v] = me;
  }
  for (std::size_t r = 0; r < scheme.receivers.size(); ++r) {
    st.nodes[static_cast<std::size_t>(index.at(scheme.receivers[r]))].column = static_cast<int>(r);
  }
  return st;
}

// Sum-product over the subtree for one observed tuple. Adds
// weight * P(X_l = i | y) into expected[node][i] and returns P(y).
double posterior_bins(const Subtree& st, const std::vector<const std::vector<double>*>& pmfs,
                      const std::vector<int>& y, double weight,
                      std::vector<std::vector<double>>* expected) {
  const std::size_t n = st.nodes.size();
  const int b = static_cast<int>(pmfs[1]->size()) - 1;
  // cap[v]: largest feasible cumulative delay at v given the observation.
  std::vector<int> cap(n);
  for (std::size_t v = n; v-- > 0;) {
    const auto& node = st.nodes[v];
    if (node.column >= 0) {
      cap[v] = y[static_cast<std::size_t>(node.column)];
    } else if (v == 0) {
      cap[v] = 0;
    } else {
      int c = node.cap;
      for (int k : node.kids) c = std::min(c, cap[static_cast<std::size_t>(k)]);
      cap[v] = c;
    }
  }
  // inner[v][d]: P(evidence below v | D_v = d); msg[v][d]: the same seen
  // from the parent, P(evidence below v incl. link v | D_parent = d).
  std::vector<std::vector<double>> inner(n);
  std::vector<std::vector<double>> msg(n);
  for (std::size_t v = n; v-- > 0;) {
    const auto& node = st.nodes[v];
    if (node.column < 0) {
      inner[v].assign(static_cast<std::size_t>(cap[v]) + 1, 1.0);
      for (int k : node.kids) {
        for (int d = 0; d <= cap[v]; ++d) inner[v][static_cast<std::size_t>(d)] *= msg[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)];
      }
    }
    if (v == 0) break;
    const int pcap = cap[static_cast<std::size_t>(node.parent)];
    const auto& a = *pmfs[v];
    msg[v].assign(static_cast<std::size_t>(std::max(pcap, 0)) + 1, 0.0);
    for (int dp = 0; dp <= pcap; ++dp) {
      double s = 0.0;
      if (node.column >= 0) {
        const int i = cap[v] - dp;
        if (i >= 0 && i <= b) s = a[static_cast<std::size_t>(i)];
      } else {
        for (int i = 0; i <= b && dp + i <= cap[v]; ++i) s += a[static_cast<std::size_t>(i)] * inner[v][static_cast<std::size_t>(dp + i)];
      }
      msg[v][static_cast<std::size_t>(dp)] = s;
    }
  }
  const double py = inner[0][0];
  if (!expected || py <= 0.0) return py;

  std::vector<std::vector<double>> outer_msg(n);
  outer_msg[0] = {1.0};
  for (std::size_t v = 0; v < n; ++v) {
    const auto& node = st.nodes[v];
    if (node.column >= 0) continue;
    for (int c : node.kids) {
      const auto cu = static_cast<std::size_t>(c);
      const auto& child = st.nodes[cu];
      const auto& a = *pmfs[cu];
      // Evidence at v from everything except the subtree of c.
      std::vector<double> ctx(static_cast<std::size_t>(cap[v]) + 1);
      for (int d = 0; d <= cap[v]; ++d) {
        double e = outer_msg[v][static_cast<std::size_t>(d)];
        for (int k : node.kids) {
          if (k != c) e *= msg[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)];
        }
        ctx[static_cast<std::size_t>(d)] = e;
      }
      auto& acc = (*expected)[cu];
      if (child.column >= 0) {
        for (int d = 0; d <= cap[v]; ++d) {
          const int i = cap[cu] - d;
          if (i < 0 || i > b) continue;
          acc[static_cast<std::size_t>(i)] += weight * ctx[static_cast<std::size_t>(d)] * a[static_cast<std::size_t>(i)] / py;
        }
        continue;
      }
      outer_msg[cu].assign(static_cast<std::size_t>(cap[cu]) + 1, 0.0);
      for (int d = 0; d <= cap[v]; ++d) {
        const double e = ctx[static_cast<std::size_t>(d)];
        if (e == 0.0) continue;
        for (int i = 0; i <= b && d + i <= cap[cu]; ++i) {
          const double w = e * a[static_cast<std::size_t>(i)];
          outer_msg[cu][static_cast<std::size_t>(d + i)] += w;
          acc[static_cast<std::size_t>(i)] += weight * w * inner[cu][static_cast<std::size_t>(d + i)] / py;
        }
      }
    }
  }
  return py;
}

void check_tables(const Topology& topology, const FlexicastExperiment& experiment,
                  const std::vector<OutcomeTable>& tables, int b) {
  if (tables.size() != experiment.schemes.size()) {
    throw InputError(fmt::format("{} outcome tables for {} schemes", tables.size(),
                                 experiment.schemes.size()));
  }
  for (std::size_t j = 0; j < tables.size(); ++j) {
    const auto& s = experiment.schemes[j];
    for (const auto& [y, n] : tables[j]) {
      if (y.size() != s.size()) {
        throw InputError(fmt::format("scheme {}: tuple arity {} != scheme size {}", j, y.size(),
                                     s.size()));
      }
      for (std::size_t r = 0; r < y.size(); ++r) {
        const int top = topology.depth(s.receivers[r]) * b;
        if (y[r] < 0 || y[r] > top) {
          throw InputError(fmt::format("scheme {}: bin {} outside support 0..{} for receiver {}",
                                       j, y[r], top, s.receivers[r]));
        }
      }
    }
  }
}

std::vector<NodeId> experiment_links_of(const Topology& topology,
                                        const FlexicastExperiment& experiment) {
  std::set<NodeId> all;
  for (const auto& s : experiment.schemes) {
    for (NodeId k : scheme_links(topology, s)) all.insert(k);
  }
  return {all.begin(), all.end()};
}

}  // namespace

JointPmf path_delay_pmf(const Topology& topology, const Scheme& scheme,
                        const DiscreteDelayParams& params) {
  params.validate();
  const auto st = subtree_of(topology, scheme, params.b);
  std::vector<Tensor> below(st.nodes.size());
  for (std::size_t v = st.nodes.size(); v-- > 0;) {
    const auto& node = st.nodes[v];
    Tensor t;
    if (node.column >= 0) {
      t.recv = {node.id};
      t.ext = {1};
      t.p = {1.0};
    } else {
      t.ext = {};
      t.p = {1.0};
      for (int k : node.kids) t = outer(t, below[static_cast<std::size_t>(k)]);
    }
    below[v] = v == 0 ? std::move(t) : shift_convolve(t, pmf_of(params, node.id));
  }
  const Tensor& all = below[0];

  JointPmf out;
  for (NodeId r : scheme.receivers) out.extents.push_back(topology.depth(r) * params.b + 1);
  out.probs.assign(all.p.size(), 0.0);
  // Permute from subtree order to scheme order.
  std::vector<std::size_t> where(scheme.receivers.size());
  for (std::size_t r = 0; r < scheme.receivers.size(); ++r) {
    where[r] = static_cast<std::size_t>(std::ranges::find(all.recv, scheme.receivers[r]) - all.recv.begin());
  }
  std::vector<int> src(all.ext.size());
  std::vector<int> dst(scheme.receivers.size());
  for (std::size_t flat = 0; flat < all.p.size(); ++flat) {
    std::size_t rem = flat;
    for (std::size_t r = all.ext.size(); r-- > 0;) {
      src[r] = static_cast<int>(rem % static_cast<std::size_t>(all.ext[r]));
      rem /= static_cast<std::size_t>(all.ext[r]);
    }
    for (std::size_t r = 0; r < dst.size(); ++r) dst[r] = src[where[r]];
    out.probs[out.flat_index(dst)] = all.p[flat];
  }
  return out;
}

double discrete_loglik(const Topology& topology, const FlexicastExperiment& experiment,
                       const std::vector<OutcomeTable>& tables, const DiscreteDelayParams& params) {
  params.validate();
  check_tables(topology, experiment, tables, params.b);
  double ll = 0.0;
  for (std::size_t j = 0; j < tables.size(); ++j) {
    const auto pmf = path_delay_pmf(topology, experiment.schemes[j], params);
    for (const auto& [y, n] : tables[j]) {
      if (n == 0) continue;
      const double g = pmf.at(y);
      if (g <= 0.0) return -std::numeric_limits<double>::infinity();
      ll += static_cast<double>(n) * std::log(g);
    }
  }
  return ll;
}

DiscreteDelayParams uniform_discrete_init(const Topology& topology,
                                          const FlexicastExperiment& experiment, double q, int b) {
  DiscreteDelayParams p;
  p.q = q;
  p.b = b;
  for (NodeId k : experiment_links_of(topology, experiment)) {
    p.pmf[k].assign(static_cast<std::size_t>(b) + 1, 1.0 / (b + 1));
  }
  return p;
}

DiscreteFit em_fit_discrete(const Topology& topology, const FlexicastExperiment& experiment,
                            const std::vector<OutcomeTable>& tables,
                            const DiscreteDelayParams& init, const EmOptions& options) {
  experiment.validate(topology);
  init.validate();
  check_tables(topology, experiment, tables, init.b);
  const auto links = experiment_links_of(topology, experiment);
  for (NodeId k : links) pmf_of(init, k);
  std::uint64_t total = 0;
  for (const auto& t : tables) {
    for (const auto& [y, n] : t) total += n;
  }
  if (total == 0) throw InputError("outcome tables are empty");

  std::vector<Subtree> trees;
  for (const auto& s : experiment.schemes) trees.push_back(subtree_of(topology, s, init.b));
  const std::size_t nb = static_cast<std::size_t>(init.b) + 1;

  DiscreteFit out;
  out.params = init;
  out.params.pmf.clear();
  for (NodeId k : links) out.params.pmf[k] = init.pmf.at(k);
  FitResult& fit = out.fit;
  for (NodeId k : links) {
    for (std::size_t i = 0; i < nb; ++i) fit.names.push_back(fmt::format("alpha[{}][{}]", k, i));
  }
  auto flatten = [&](const DiscreteDelayParams& p) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(links.size() * nb));
    Eigen::Index at = 0;
    for (NodeId k : links) {
      for (double x : p.pmf.at(k)) v[at++] = x;
    }
    return v;
  };

  // One E-step: expected bin counts per link and the log-likelihood at p.
  auto estep = [&](const DiscreteDelayParams& p, std::map<NodeId, std::vector<double>>& counts) {
    counts.clear();
    for (NodeId k : links) counts[k].assign(nb, 0.0);
    double ll = 0.0;
    for (std::size_t j = 0; j < tables.size(); ++j) {
      const auto& st = trees[j];
      std::vector<const std::vector<double>*> pmfs(st.nodes.size(), nullptr);
      for (std::size_t v = 1; v < st.nodes.size(); ++v) pmfs[v] = &p.pmf.at(st.nodes[v].id);
      std::vector<std::vector<double>> expected(st.nodes.size(), std::vector<double>(nb, 0.0));
      for (const auto& [y, n] : tables[j]) {
        if (n == 0) continue;
        const double py = posterior_bins(st, pmfs, y, static_cast<double>(n), &expected);
        if (py <= 0.0) {
          ll = -std::numeric_limits<double>::infinity();
          continue;
        }
        ll += static_cast<double>(n) * std::log(py);
      }
      for (std::size_t v = 1; v < st.nodes.size(); ++v) {
        auto& dst = counts[st.nodes[v].id];
        for (std::size_t i = 0; i < nb; ++i) dst[i] += expected[v][i];
      }
    }
    return ll;
  };

  std::map<NodeId, std::vector<double>> counts;
  double ll = estep(out.params, counts);
  fit.objective_trace.push_back(ll);
  if (options.record_iterates) fit.iterates.push_back(flatten(out.params));
  int iter = 0;
  bool converged = false;
  while (iter < options.max_iter) {
    double change = 0.0;
    for (NodeId k : links) {
      auto& cur = out.params.pmf[k];
      const auto& c = counts[k];
      const double sum = std::accumulate(c.begin(), c.end(), 0.0);
      if (sum <= 0.0) continue;
      for (std::size_t i = 0; i < nb; ++i) {
        const double next = c[i] / sum;
        change = std::max(change, std::abs(next - cur[i]));
        cur[i] = next;
      }
    }
    ++iter;
    ll = estep(out.params, counts);
    fit.objective_trace.push_back(ll);
    if (options.record_iterates) fit.iterates.push_back(flatten(out.params));
    if (change < options.tol) {
      converged = true;
      break;
    }
  }
  fit.estimates = flatten(out.params);
  fit.objective = ll;
  fit.iterations = iter;
  fit.converged = converged;
  if (!converged) {
    fit.warnings.push_back(fmt::format("EM stopped after {} iterations without reaching tol {}",
                                       iter, options.tol));
  }
  const auto report = check_identifiability(topology, experiment);
  if (!report.identifiable()) {
    fit.diagnostics["confounded_nodes"] = report.non_splitting_internals;
    fit.diagnostics["uncovered_receivers"] = report.uncovered_receivers;
    for (NodeId v : report.non_splitting_internals) {
      fit.warnings.push_back(fmt::format(
          "experiment does not split at node {}: only the convolution of the pmfs along the "
          "unsplit path is identifiable",
          v));
    }
  }
  return out;
}

BinnedDelays bin_delays(const Topology& topology, const FlexicastExperiment& experiment,
                        const DelayObservations& delays, double q, int b) {
  if (!(q > 0.0)) throw InputError("bin width q must be positive");
  if (b < 0) throw InputError("maximum bin index b must be non-negative");
  if (delays.schemes.size() != experiment.schemes.size()) {
    throw InputError("delay observations and experiment disagree on the number of schemes");
  }
  BinnedDelays out;
  out.tables.resize(delays.schemes.size());
  for (std::size_t j = 0; j < delays.schemes.size(); ++j) {
    const auto& m = delays.schemes[j];
    const auto& s = experiment.schemes[j];
    if (static_cast<std::size_t>(m.cols()) != s.size()) {
      throw InputError(fmt::format("scheme {}: {} delay columns for {} receivers", j, m.cols(),
                                   s.size()));
    }
    std::vector<int> top;
    for (NodeId r : s.receivers) top.push_back(topology.depth(r) * b);
    std::vector<int> y(s.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index r = 0; r < m.cols(); ++r) {
        const double d = m(i, r);
        if (!(d >= 0.0) || !std::isfinite(d)) {
          throw InputError(fmt::format("scheme {}: invalid delay {} at probe {}", j, d, i));
        }
        // Half-up rounding; the tiny offset absorbs representation error in
        // d / q for delays that sit exactly on a half bin.
        const double scaled = std::floor(d / q + 0.5 + 1e-9);
        const auto ru = static_cast<std::size_t>(r);
        if (scaled > top[ru]) {
          y[ru] = top[ru];
          ++out.clamped;
        } else {
          y[ru] = static_cast<int>(scaled);
        }
      }
      ++out.tables[j][y];
    }
  }
  return out;
}

}  // namespace tomolab
