#include "tomolab/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace tomolab {

namespace {

// G10/K21 rule on [-1, 1]. Kronrod nodes with odd index are the Gauss nodes.
struct Rule {
  std::vector<double> x;
  std::vector<double> wk;
  std::vector<double> wg;  // Gauss weight per Kronrod index, 0 if not a Gauss node
};

const Rule& rule() {
  static const Rule r = [] {
    using K = boost::math::quadrature::gauss_kronrod<double, 21>;
    using G = boost::math::quadrature::gauss<double, 10>;
    Rule out;
    out.x.assign(K::abscissa().begin(), K::abscissa().end());
    out.wk.assign(K::weights().begin(), K::weights().end());
    out.wg.assign(out.x.size(), 0.0);
    for (std::size_t i = 1; i < out.x.size(); i += 2) out.wg[i] = G::weights()[i / 2];
    return out;
  }();
  return r;
}

struct Piece {
  double lo;
  double hi;
  Eigen::VectorXd value;
  Eigen::VectorXd error;
  double priority;  // largest relative error contribution
  bool operator<(const Piece& o) const { return priority < o.priority; }
};

void apply_rule(const VectorIntegrand& f, int m, Piece& p, Eigen::VectorXd& buf) {
  const Rule& r = rule();
  const double c = 0.5 * (p.lo + p.hi);
  const double h = 0.5 * (p.hi - p.lo);
  Eigen::VectorXd k = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(m);
  f(c, buf);
  k += r.wk[0] * buf;
  for (std::size_t i = 1; i < r.x.size(); ++i) {
    for (double s : {-1.0, 1.0}) {
      f(c + s * h * r.x[i], buf);
      k += r.wk[i] * buf;
      if (r.wg[i] != 0.0) g += r.wg[i] * buf;
    }
  }
  p.value = h * k;
  p.error = (h * (k - g)).cwiseAbs();
  const double eps_floor = 50 * std::numeric_limits<double>::epsilon();
  p.error = p.error.cwiseMax(eps_floor * p.value.cwiseAbs());
}

}  // namespace

QuadratureResult integrate_adaptive(const VectorIntegrand& f, int components, double lo, double hi,
                                    double rel_tol, int max_intervals) {
  QuadratureResult res;
  res.value = Eigen::VectorXd::Zero(components);
  res.error = Eigen::VectorXd::Zero(components);
  if (!(hi > lo)) {
    res.converged = true;
    return res;
  }
  Eigen::VectorXd buf(components);
  std::priority_queue<Piece> heap;
  Piece first{lo, hi, {}, {}, 0.0};
  apply_rule(f, components, first, buf);
  heap.push(first);
  res.value = first.value;
  res.error = first.error;

  auto scale_of = [&](int i) { return std::max(std::abs(res.value[i]), std::abs(res.value[0])); };
  auto done = [&] {
    for (int i = 0; i < components; ++i) {
      if (!(res.error[i] <= rel_tol * scale_of(i))) return false;
    }
    return true;
  };
  auto priority_of = [&](const Piece& p) {
    double worst = 0.0;
    for (int i = 0; i < components; ++i) {
      const double s = scale_of(i);
      worst = std::max(worst, s > 0 ? p.error[i] / s : p.error[i]);
    }
    return worst;
  };

  int intervals = 1;
  while (!done() && intervals < max_intervals) {
    Piece worst = heap.top();
    heap.pop();
    const double mid = 0.5 * (worst.lo + worst.hi);
    if (!(mid > worst.lo && mid < worst.hi)) {
      heap.push(worst);
      break;  // interval cannot be split further
    }
    Piece left{worst.lo, mid, {}, {}, 0.0};
    Piece right{mid, worst.hi, {}, {}, 0.0};
    apply_rule(f, components, left, buf);
    apply_rule(f, components, right, buf);
    res.value += left.value + right.value - worst.value;
    res.error += left.error + right.error - worst.error;
    left.priority = priority_of(left);
    right.priority = priority_of(right);
    heap.push(left);
    heap.push(right);
    ++intervals;
  }
  // Re-sum from the pieces to drop accumulated cancellation in the running
  // totals.
  res.value.setZero();
  res.error.setZero();
  while (!heap.empty()) {
    res.value += heap.top().value;
    res.error += heap.top().error;
    heap.pop();
  }
  res.intervals = intervals;
  res.converged = done();
  return res;
}

}  // namespace tomolab
