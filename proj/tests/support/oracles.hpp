#pragma once

// Independent reference computations for the test suites. Nothing here
// calls into the estimators it is used to check.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tomolab/topology.hpp"

namespace oracle {

using tomolab::NodeId;
using tomolab::Scheme;
using tomolab::Topology;

inline Topology tree(std::vector<std::pair<NodeId, NodeId>> edges) {
  return Topology::from_edges(edges, 0);
}

inline Topology two_layer() { return tree({{0, 1}, {1, 2}, {1, 3}}); }

inline Topology wide_tree() {
  return tree({{0, 1}, {1, 2}, {1, 3}, {1, 4}, {1, 5}, {4, 6}, {4, 7}, {5, 8}, {5, 9}, {5, 10},
               {5, 11}, {7, 12}, {7, 13}, {7, 14}, {7, 15}});
}

inline Topology binary_three_layer() { return tree({{0, 1}, {1, 2}, {1, 3}, {2, 4}, {2, 5}, {3, 6}, {3, 7}}); }

inline Topology four_receiver() { return tree({{0, 1}, {1, 2}, {1, 3}, {3, 4}, {3, 5}, {3, 6}}); }

// Root path by walking parent links upwards.
inline std::vector<NodeId> root_path(const Topology& t, NodeId v) {
  std::vector<NodeId> p;
  while (v != t.root()) {
    p.push_back(v);
    v = *t.parent(v);
  }
  std::reverse(p.begin(), p.end());
  return p;
}

inline std::vector<NodeId> union_links(const Topology& t, const Scheme& s) {
  std::set<NodeId> u;
  for (NodeId r : s.receivers) {
    for (NodeId l : root_path(t, r)) u.insert(l);
  }
  return {u.begin(), u.end()};
}

// Outcome probabilities by summing over every up/down assignment of the
// links; index is the mask with bit j set when receiver j got the probe.
inline std::vector<double> loss_outcome_probs(const Topology& t, const Scheme& s,
                                              const std::map<NodeId, double>& alpha) {
  const auto links = union_links(t, s);
  std::vector<double> out(std::size_t{1} << s.size(), 0.0);
  for (std::uint64_t state = 0; state < (std::uint64_t{1} << links.size()); ++state) {
    double p = 1.0;
    std::map<NodeId, bool> up;
    for (std::size_t i = 0; i < links.size(); ++i) {
      up[links[i]] = (state >> i) & 1;
      p *= up[links[i]] ? alpha.at(links[i]) : 1.0 - alpha.at(links[i]);
    }
    std::size_t mask = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      bool ok = true;
      for (NodeId l : root_path(t, s.receivers[j])) ok = ok && up[l];
      if (ok) mask |= std::size_t{1} << j;
    }
    out[mask] += p;
  }
  return out;
}

// Two-layer bicast MLE in closed form from the outcome counts.
inline std::array<double, 3> bicast_loss_mle(double n11, double n10, double n01, double n00) {
  const double n = n11 + n10 + n01 + n00;
  const double p11 = n11 / n, p1_ = (n11 + n10) / n, p_1 = (n11 + n01) / n;
  return {p1_ * p_1 / p11, p11 / p_1, p11 / p1_};
}

// Joint pmf of receiver bin tuples by enumerating every link bin assignment.
inline std::map<std::vector<int>, double> discrete_joint_pmf(
    const Topology& t, const Scheme& s, const std::map<NodeId, std::vector<double>>& pmf) {
  const auto links = union_links(t, s);
  std::map<std::vector<int>, double> out;
  std::vector<int> bins(links.size(), 0);
  while (true) {
    double p = 1.0;
    std::map<NodeId, int> x;
    for (std::size_t i = 0; i < links.size(); ++i) {
      x[links[i]] = bins[i];
      p *= pmf.at(links[i])[static_cast<std::size_t>(bins[i])];
    }
    std::vector<int> y;
    for (NodeId r : s.receivers) {
      int sum = 0;
      for (NodeId l : root_path(t, r)) sum += x[l];
      y.push_back(sum);
    }
    out[y] += p;
    std::size_t i = 0;
    for (; i < links.size(); ++i) {
      if (++bins[i] < static_cast<int>(pmf.at(links[i]).size())) break;
      bins[i] = 0;
    }
    if (i == links.size()) break;
  }
  return out;
}

// Nelder-Mead simplex minimizer.
inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                   Eigen::VectorXd x0, double step, double tol, int max_eval) {
  const Eigen::Index n = x0.size();
  std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> val(static_cast<std::size_t>(n + 1));
  for (Eigen::Index i = 0; i < n; ++i) pts[static_cast<std::size_t>(i + 1)][i] += step;
  for (std::size_t i = 0; i < pts.size(); ++i) val[i] = f(pts[i]);
  int evals = static_cast<int>(pts.size());
  std::vector<std::size_t> idx(pts.size());
  while (evals < max_eval) {
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return val[a] < val[b]; });
    const std::size_t best = idx.front(), worst = idx.back(), second = idx[idx.size() - 2];
    double spread = 0.0;
    for (const auto& p : pts) spread = std::max(spread, (p - pts[best]).cwiseAbs().maxCoeff());
    if (spread < tol) break;
    Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
    for (std::size_t i : idx) {
      if (i != worst) c += pts[i];
    }
    c /= static_cast<double>(n);
    const Eigen::VectorXd xr = c + (c - pts[worst]);
    const double fr = f(xr);
    ++evals;
    if (fr < val[best]) {
      const Eigen::VectorXd xe = c + 2.0 * (c - pts[worst]);
      const double fe = f(xe);
      ++evals;
      if (fe < fr) {
        pts[worst] = xe;
        val[worst] = fe;
      } else {
        pts[worst] = xr;
        val[worst] = fr;
      }
    } else if (fr < val[second]) {
      pts[worst] = xr;
      val[worst] = fr;
    } else {
      const Eigen::VectorXd xc = c + 0.5 * (pts[worst] - c);
      const double fc = f(xc);
      ++evals;
      if (fc < val[worst]) {
        pts[worst] = xc;
        val[worst] = fc;
      } else {
        for (std::size_t i = 0; i < pts.size(); ++i) {
          if (i == best) continue;
          pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
          val[i] = f(pts[i]);
          ++evals;
        }
      }
    }
  }
  const auto it = std::min_element(val.begin(), val.end());
  return pts[static_cast<std::size_t>(it - val.begin())];
}

// Central-difference Jacobian of a vector function.
inline Eigen::MatrixXd jacobian_fd(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h) {
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd J(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    J.col(j) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

}  // namespace oracle
