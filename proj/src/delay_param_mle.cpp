#include "tomolab/delay_param_mle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <fmt/format.h>

#include "tomolab/error.hpp"
#include "tomolab/quadrature.hpp"

namespace tomolab {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Central-difference Hessian of f around x with per-coordinate steps h.
template <class F>
Eigen::MatrixXd numerical_hessian(F&& f, const Eigen::VectorXd& x, const Eigen::VectorXd& h) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd H(n, n);
  const double f0 = f(x);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h[i];
    xm[i] -= h[i];
    H(i, i) = (f(xp) - 2.0 * f0 + f(xm)) / (h[i] * h[i]);
    for (Eigen::Index j = 0; j < i; ++j) {
      Eigen::VectorXd pp = x, pm = x, mp = x, mm = x;
      pp[i] += h[i]; pp[j] += h[j];
      pm[i] += h[i]; pm[j] -= h[j];
      mp[i] -= h[i]; mp[j] += h[j];
      mm[i] -= h[i]; mm[j] -= h[j];
      H(i, j) = H(j, i) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h[i] * h[j]);
    }
  }
  return H;
}

// Covariance from a log-likelihood Hessian; NaN-filled if not negative
// definite.
Eigen::MatrixXd covariance_from_hessian(const Eigen::MatrixXd& H) {
  Eigen::LLT<Eigen::MatrixXd> llt(-H);
  if (llt.info() != Eigen::Success) {
    return Eigen::MatrixXd::Constant(H.rows(), H.cols(), kNaN);
  }
  return llt.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
}

struct SampleSummary {
  double mean2, mean3, var2, var3, cov, third;
};

SampleSummary summarize(const BicastDelaySample& s) {
  const double n = static_cast<double>(s.size());
  SampleSummary out{};
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.mean2 += s.y2[i];
    out.mean3 += s.y3[i];
  }
  out.mean2 /= n;
  out.mean3 /= n;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double e2 = s.y2[i] - out.mean2;
    const double e3 = s.y3[i] - out.mean3;
    out.var2 += e2 * e2;
    out.var3 += e3 * e3;
    out.cov += e2 * e3;
    out.third += e2 * e2 * e3;
  }
  out.var2 /= n;
  out.var3 /= n;
  out.cov /= n;
  out.third /= n;
  return out;
}

}  // namespace

void BicastDelaySample::validate() const {
  if (y2.empty()) throw InputError("bicast delay sample is empty");
  if (y2.size() != y3.size()) throw InputError("bicast delay columns differ in length");
  for (std::size_t i = 0; i < y2.size(); ++i) {
    if (!(y2[i] > 0.0 && y3[i] > 0.0) || !std::isfinite(y2[i]) || !std::isfinite(y3[i])) {
      throw InputError(fmt::format("probe {}: delays must be finite and > 0", i));
    }
  }
}

BicastDelaySample BicastDelaySample::from_matrix(const Eigen::MatrixXd& m) {
  if (m.cols() != 2) throw InputError("bicast sample needs exactly two receiver columns");
  BicastDelaySample s;
  s.y2.assign(m.col(0).data(), m.col(0).data() + m.rows());
  s.y3.assign(m.col(1).data(), m.col(1).data() + m.rows());
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Exponential links

double log_exp_kernel(double d, double m) {
  if (std::abs(d) < 1e-10) {
    const double t = d * m;
    return std::log(m) + std::log(1.0 - t / 2.0 + t * t / 6.0);
  }
  if (d > 0.0) return std::log(-std::expm1(-d * m)) - std::log(d);
  const double t = -d * m;  // > 0
  const double log_expm1 = t > 30.0 ? t + std::log1p(-std::exp(-t)) : std::log(std::expm1(t));
  return log_expm1 - std::log(-d);
}

double exp_loglik(const BicastDelaySample& sample, const ExpParams& p) {
  sample.validate();
  if (!(p.rate1 > 0.0 && p.rate2 > 0.0 && p.rate3 > 0.0)) {
    throw InputError("exponential rates must be positive");
  }
  const double n = static_cast<double>(sample.size());
  const double d = p.d();
  double ll = n * (std::log(p.rate1) + std::log(p.rate2) + std::log(p.rate3));
  for (std::size_t i = 0; i < sample.size(); ++i) {
    ll -= p.rate2 * sample.y2[i] + p.rate3 * sample.y3[i];
    ll += log_exp_kernel(d, std::min(sample.y2[i], sample.y3[i]));
  }
  return ll;
}

double exp_conditional_mean(double d, double m) {
  const double t = d * m;
  if (std::abs(t) < 1e-5) return m * (0.5 - t / 12.0 + t * t * t / 720.0);
  return 1.0 / d - m / std::expm1(t);
}

ExpParams exp_moment_init(const BicastDelaySample& sample) {
  sample.validate();
  const auto s = summarize(sample);
  double shared = s.cov > 0.0 ? std::sqrt(s.cov) : 0.0;
  const double cap = 0.9 * std::min(s.mean2, s.mean3);
  if (!(shared > 0.0) || shared >= cap) shared = 0.5 * std::min(s.mean2, s.mean3);
  return {1.0 / shared, 1.0 / (s.mean2 - shared), 1.0 / (s.mean3 - shared)};
}

ExpFit exp_em_fit(const BicastDelaySample& sample, const ExpParams& init,
                  const EmOptions& options) {
  sample.validate();
  if (!(init.rate1 > 0.0 && init.rate2 > 0.0 && init.rate3 > 0.0)) {
    throw InputError("initial exponential rates must be positive");
  }
  const std::size_t n = sample.size();
  const double nn = static_cast<double>(n);
  std::vector<double> mins(n);
  double sum2 = 0.0, sum3 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mins[i] = std::min(sample.y2[i], sample.y3[i]);
    sum2 += sample.y2[i];
    sum3 += sample.y3[i];
  }

  ExpFit out;
  FitResult& fit = out.fit;
  fit.names = {"rate[1]", "rate[2]", "rate[3]"};
  ExpParams p = init;

  // Fused E-step: conditional mean of the shared delay and the log-likelihood.
  auto estep = [&](const ExpParams& q, double& loglik) {
    const double d = q.d();
    double s1 = 0.0;
    double kernel = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s1 += exp_conditional_mean(d, mins[i]);
      kernel += log_exp_kernel(d, mins[i]);
    }
    loglik = nn * (std::log(q.rate1) + std::log(q.rate2) + std::log(q.rate3)) - q.rate2 * sum2 -
             q.rate3 * sum3 + kernel;
    return s1;
  };

  double ll = 0.0;
  double s1 = estep(p, ll);
  fit.objective_trace.push_back(ll);
  auto as_vec = [](const ExpParams& q) { return Eigen::Vector3d(q.rate1, q.rate2, q.rate3); };
  if (options.record_iterates) fit.iterates.emplace_back(as_vec(p));
  int iter = 0;
  bool converged = false;
  while (iter < options.max_iter) {
    const ExpParams next{nn / s1, nn / (sum2 - s1), nn / (sum3 - s1)};
    ++iter;
    if (!std::isfinite(next.rate1) || !std::isfinite(next.rate2) || !std::isfinite(next.rate3) ||
        next.rate1 <= 0.0 || next.rate2 <= 0.0 || next.rate3 <= 0.0) {
      throw EstimationError(fmt::format("exponential EM diverged at iteration {} (rates {}, {}, {})",
                                        iter, next.rate1, next.rate2, next.rate3));
    }
    const double change = std::max({std::abs(next.rate1 - p.rate1) / p.rate1,
                                     std::abs(next.rate2 - p.rate2) / p.rate2,
                                     std::abs(next.rate3 - p.rate3) / p.rate3});
    p = next;
    s1 = estep(p, ll);
    fit.objective_trace.push_back(ll);
    if (options.record_iterates) fit.iterates.emplace_back(as_vec(p));
    if (change < options.tol) {
      converged = true;
      break;
    }
  }
  out.params = p;
  fit.estimates = as_vec(p);
  fit.objective = ll;
  fit.iterations = iter;
  fit.converged = converged;
  fit.diagnostics["d"] = p.d();
  if (!converged) {
    fit.warnings.push_back(fmt::format("EM stopped after {} iterations", iter));
  }
  fit.covariance = exp_covariance(sample, p);
  fit.std_errors = fit.covariance.diagonal().cwiseSqrt();
  if (!fit.covariance.allFinite()) fit.warnings.push_back("observed information is not positive definite");
  return out;
}

Eigen::MatrixXd exp_covariance(const BicastDelaySample& sample, const ExpParams& params) {
  const Eigen::Vector3d x(params.rate1, params.rate2, params.rate3);
  auto f = [&](const Eigen::VectorXd& v) { return exp_loglik(sample, {v[0], v[1], v[2]}); };
  const Eigen::MatrixXd H = numerical_hessian(f, x, 1e-4 * x);
  return covariance_from_hessian(H);
}

// ---------------------------------------------------------------------------
// Gamma links

ConditionalIntegrals gamma_conditional_integrals(double a, double b,
                                                 const std::array<double, 3>& shapes,
                                                 double kappa) {
  if (!(a > 0.0 && b > 0.0)) throw InputError("conditional integrals need a, b > 0");
  for (double s : shapes) {
    if (!(s > 0.0)) throw InputError("gamma shapes must be positive");
  }
  const double m = std::min(a, b);
  const double half = 0.5 * m;
  const double s1 = shapes[0], s2 = shapes[1], s3 = shapes[2];
  const bool tie = a == b;
  const bool a_is_min = a <= b;

  // Lower piece: x = u^p turns x^(s1-1) dx into p u^(p s1 - 1) du. The power
  // is at least 2 so that the log x moment is smooth enough for Kronrod.
  const double p = std::max(1.0, 3.0 / s1);
  const double u_hi = p == 1.0 ? half : std::pow(half, 1.0 / p);
  const double log_p = std::log(p);
  const double u_coef = p * s1 - 1.0;
  // Upper piece: m - x = v^q removes the singularity of whichever factor
  // vanishes at m.
  const double e_hi = tie ? s2 + s3 - 2.0 : (a_is_min ? s2 - 1.0 : s3 - 1.0);
  const double q = std::max(1.0, 3.0 / (e_hi + 1.0));
  const double v_hi = q == 1.0 ? m - half : std::pow(m - half, 1.0 / q);
  const double log_q = std::log(q);
  const double v_coef = q * (e_hi + 1.0) - 1.0;
  const double gap = std::abs(b - a);  // distance of the regular factor from zero at m

  struct Point {
    double logw, x, log_x, log_am, log_bm;
  };
  auto lower_point = [&](double u) {
    const double log_u = std::log(u);
    const double x = p == 1.0 ? u : std::pow(u, p);
    const double log_x = p * log_u;
    const double log_am = std::log(a - x);
    const double log_bm = std::log(b - x);
    const double logw = u_coef * log_u + (s2 - 1.0) * log_am + (s3 - 1.0) * log_bm + kappa * x +
                        log_p;
    return Point{logw, x, log_x, log_am, log_bm};
  };
  auto upper_point = [&](double v) {
    const double log_v = std::log(v);
    const double r = q == 1.0 ? v : std::pow(v, q);  // m - x
    const double log_r = q * log_v;
    const double x = m - r;
    const double log_x = std::log(x);
    double log_am, log_bm, logw;
    if (tie) {
      log_am = log_bm = log_r;
      logw = (s1 - 1.0) * log_x + v_coef * log_v + kappa * x + log_q;
    } else if (a_is_min) {
      log_am = log_r;
      log_bm = std::log(gap + r);
      logw = (s1 - 1.0) * log_x + (s3 - 1.0) * log_bm + v_coef * log_v + kappa * x + log_q;
    } else {
      log_bm = log_r;
      log_am = std::log(gap + r);
      logw = (s1 - 1.0) * log_x + (s2 - 1.0) * log_am + v_coef * log_v + kappa * x + log_q;
    }
    return Point{logw, x, log_x, log_am, log_bm};
  };

  // Scale offset so that the integrand stays representable.
  double offset = -std::numeric_limits<double>::infinity();
  for (int i = 1; i < 16; ++i) {
    const double t = i / 16.0;
    offset = std::max({offset, lower_point(t * u_hi).logw, upper_point(t * v_hi).logw});
  }
  if (!std::isfinite(offset)) throw EstimationError("conditional density is not representable");

  auto fill = [&](const Point& pt, Eigen::Ref<Eigen::VectorXd> out) {
    const double w = std::exp(pt.logw - offset);
    out << w, w * pt.x, w * pt.log_x, w * pt.log_am, w * pt.log_bm;
  };
  const auto lo = integrate_adaptive([&](double u, Eigen::Ref<Eigen::VectorXd> o) { fill(lower_point(u), o); },
                                     5, 0.0, u_hi);
  const auto hi = integrate_adaptive([&](double v, Eigen::Ref<Eigen::VectorXd> o) { fill(upper_point(v), o); },
                                     5, 0.0, v_hi);
  if (!lo.converged || !hi.converged) {
    throw EstimationError(fmt::format(
        "quadrature did not converge for a={}, b={}, shapes=({}, {}, {}), kappa={}", a, b, s1, s2,
        s3, kappa));
  }
  const Eigen::VectorXd total = lo.value + hi.value;
  if (!(total[0] > 0.0)) throw EstimationError("conditional normalizing integral vanished");
  return {offset + std::log(total[0]), total[1] / total[0], total[2] / total[0],
          total[3] / total[0], total[4] / total[0]};
}

double gamma_conditional_log_constant(double a, double b, const std::array<double, 3>& shapes,
                                      double scale) {
  if (!(scale > 0.0)) throw InputError("gamma scale must be positive");
  return gamma_conditional_integrals(a, b, shapes, 1.0 / scale).log_constant;
}

double gamma_conditional_constant(double a, double b, const std::array<double, 3>& shapes,
                                  double scale) {
  return std::exp(gamma_conditional_log_constant(a, b, shapes, scale));
}

namespace {

double kappa_of(const GammaParams& p) {
  return 1.0 / p.scale[1] + 1.0 / p.scale[2] - 1.0 / p.scale[0];
}

double gamma_normalizer(const GammaParams& p) {
  double c = 0.0;
  for (int k = 0; k < 3; ++k) c -= std::lgamma(p.shape[k]) + p.shape[k] * std::log(p.scale[k]);
  return c;
}

void check_gamma(const GammaParams& p) {
  for (int k = 0; k < 3; ++k) {
    if (!(p.shape[k] > 0.0 && p.scale[k] > 0.0)) {
      throw InputError("gamma shapes and scales must be positive");
    }
  }
}

}  // namespace

double gamma_loglik(const BicastDelaySample& sample, const GammaParams& params) {
  sample.validate();
  check_gamma(params);
  const double kappa = kappa_of(params);
  const double norm = gamma_normalizer(params);
  double ll = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double a = sample.y2[i], b = sample.y3[i];
    ll += norm - a / params.scale[1] - b / params.scale[2] +
          gamma_conditional_integrals(a, b, params.shape, kappa).log_constant;
  }
  return ll;
}

double inverse_digamma(double y) {
  // Starting point and Newton iteration after Minka (2000).
  double x = y >= -2.22 ? std::exp(y) + 0.5 : -1.0 / (y + 0.5772156649015329);
  for (int i = 0; i < 50; ++i) {
    const double step = (boost::math::digamma(x) - y) / boost::math::trigamma(x);
    double next = x - step;
    if (next <= 0.0) next = 0.5 * x;
    if (std::abs(next - x) <= 1e-15 * x) return next;
    x = next;
  }
  return x;
}

namespace {

// Shape solving log(a) - psi(a) = c (c > 0), the single-link gamma MLE.
double gamma_shape_from_gap(double c) {
  if (!(c > 0.0)) throw EstimationError("gamma M-step: mean-log gap must be positive");
  double a = (3.0 - c + std::sqrt((c - 3.0) * (c - 3.0) + 24.0 * c)) / (12.0 * c);
  for (int i = 0; i < 100; ++i) {
    const double f = std::log(a) - boost::math::digamma(a) - c;
    const double df = 1.0 / a - boost::math::trigamma(a);
    double next = a - f / df;
    if (next <= 0.0) next = 0.5 * a;
    if (std::abs(next - a) <= 1e-14 * a) return next;
    a = next;
  }
  return a;
}

// Common-scale M-step: find t = log(scale) with
// exp(t) * sum_k psi^{-1}(L_k - t) = sum_k S_k by bracketed Newton.
double common_log_scale(const std::array<double, 3>& S, const std::array<double, 3>& L,
                        double t0) {
  const double total = S[0] + S[1] + S[2];
  auto F = [&](double t, double* dF) {
    double sum_a = 0.0, sum_da = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double a = inverse_digamma(L[k] - t);
      sum_a += a;
      sum_da += -1.0 / boost::math::trigamma(a);
    }
    if (dF) *dF = std::exp(t) * (sum_a + sum_da);
    return std::exp(t) * sum_a - total;
  };
  double lo = t0, hi = t0;
  double step = 0.5;
  while (F(lo, nullptr) > 0.0) {
    lo -= step;
    step *= 2.0;
    if (step > 1e6) throw EstimationError("gamma M-step: cannot bracket the scale");
  }
  step = 0.5;
  while (F(hi, nullptr) < 0.0) {
    hi += step;
    step *= 2.0;
    if (step > 1e6) throw EstimationError("gamma M-step: cannot bracket the scale");
  }
  double t = 0.5 * (lo + hi);
  for (int i = 0; i < 200; ++i) {
    double dF = 0.0;
    const double f = F(t, &dF);
    if (f < 0.0) lo = t; else hi = t;
    double next = t - f / dF;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - t) < 1e-10 || hi - lo < 1e-10) return next;
    t = next;
  }
  throw EstimationError("gamma M-step: scale root solve did not converge");
}

}  // namespace

GammaParams gamma_moment_init(const BicastDelaySample& sample, bool common_scale) {
  sample.validate();
  const auto s = summarize(sample);
  std::array<double, 3> mu{}, var{};
  if (s.cov > 0.0 && s.third > 0.0) {
    const double beta1 = s.third / (2.0 * s.cov);
    mu[0] = s.cov / beta1;
    var[0] = s.cov;
  } else {
    mu[0] = 0.3 * std::min(s.mean2, s.mean3);
    var[0] = std::max(s.cov, 0.3 * mu[0] * mu[0]);
  }
  mu[0] = std::min(mu[0], 0.9 * std::min(s.mean2, s.mean3));
  mu[1] = s.mean2 - mu[0];
  mu[2] = s.mean3 - mu[0];
  var[1] = s.var2 - var[0];
  var[2] = s.var3 - var[0];
  for (int k = 1; k < 3; ++k) {
    if (!(var[k] > 0.0)) var[k] = mu[k] * mu[k];
  }
  GammaParams p;
  if (common_scale) {
    const double beta = (var[0] + var[1] + var[2]) / (mu[0] + mu[1] + mu[2]);
    for (int k = 0; k < 3; ++k) {
      p.scale[static_cast<std::size_t>(k)] = beta;
      p.shape[static_cast<std::size_t>(k)] = mu[static_cast<std::size_t>(k)] / beta;
    }
  } else {
    for (std::size_t k = 0; k < 3; ++k) {
      p.scale[k] = var[k] / mu[k];
      p.shape[k] = mu[k] / p.scale[k];
    }
  }
  return p;
}

GammaFit gamma_em_fit(const BicastDelaySample& sample, const GammaParams& init,
                      const GammaEmOptions& options) {
  sample.validate();
  check_gamma(init);
  if (options.common_scale &&
      !(init.scale[0] == init.scale[1] && init.scale[1] == init.scale[2])) {
    throw InputError("common-scale gamma fit needs equal initial scales");
  }
  const std::size_t n = sample.size();
  const double nn = static_cast<double>(n);

  GammaFit out;
  FitResult& fit = out.fit;
  GammaParams p = init;

  struct Stats {
    std::array<double, 3> S{};  // mean E[X_k]
    std::array<double, 3> L{};  // mean E[log X_k]
    double loglik = 0.0;
  };
  auto estep = [&](const GammaParams& q) {
    Stats st;
    const double kappa = kappa_of(q);
    const double norm = gamma_normalizer(q);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = sample.y2[i], b = sample.y3[i];
      const auto ci = gamma_conditional_integrals(a, b, q.shape, kappa);
      st.S[0] += ci.mean_x;
      st.S[1] += a - ci.mean_x;
      st.S[2] += b - ci.mean_x;
      st.L[0] += ci.mean_log_x;
      st.L[1] += ci.mean_log_a;
      st.L[2] += ci.mean_log_b;
      st.loglik += norm - a / q.scale[1] - b / q.scale[2] + ci.log_constant;
    }
    for (int k = 0; k < 3; ++k) {
      st.S[static_cast<std::size_t>(k)] /= nn;
      st.L[static_cast<std::size_t>(k)] /= nn;
    }
    return st;
  };
  auto flat = [&](const GammaParams& q) {
    Eigen::VectorXd v(6);
    v << q.shape[0], q.shape[1], q.shape[2], q.scale[0], q.scale[1], q.scale[2];
    return v;
  };

  Stats st = estep(p);
  fit.objective_trace.push_back(st.loglik);
  if (options.em.record_iterates) fit.iterates.push_back(flat(p));
  int iter = 0;
  bool converged = false;
  while (iter < options.em.max_iter) {
    GammaParams next = p;
    if (options.common_scale) {
      double beta;
      if (options.fix_shapes) {
        beta = (st.S[0] + st.S[1] + st.S[2]) / (p.shape[0] + p.shape[1] + p.shape[2]);
      } else {
        beta = std::exp(common_log_scale(st.S, st.L, std::log(p.scale[0])));
        for (std::size_t k = 0; k < 3; ++k) next.shape[k] = inverse_digamma(st.L[k] - std::log(beta));
      }
      next.scale = {beta, beta, beta};
    } else {
      for (std::size_t k = 0; k < 3; ++k) {
        if (!options.fix_shapes) next.shape[k] = gamma_shape_from_gap(std::log(st.S[k]) - st.L[k]);
        next.scale[k] = st.S[k] / next.shape[k];
      }
    }
    ++iter;
    const Eigen::VectorXd a = flat(p), b = flat(next);
    const double change = ((b - a).array().abs() / a.array()).maxCoeff();
    if (!b.allFinite() || (b.array() <= 0.0).any()) {
      throw EstimationError(fmt::format("gamma EM left the parameter space at iteration {}", iter));
    }
    p = next;
    st = estep(p);
    fit.objective_trace.push_back(st.loglik);
    if (options.em.record_iterates) fit.iterates.push_back(flat(p));
    if (change < options.em.tol) {
      converged = true;
      break;
    }
  }

  out.params = p;
  fit.objective = st.loglik;
  fit.iterations = iter;
  fit.converged = converged;
  if (!converged) fit.warnings.push_back(fmt::format("EM stopped after {} iterations", iter));

  // Free parameters, their values and how to rebuild GammaParams from them.
  std::vector<std::string> names;
  Eigen::VectorXd theta;
  if (options.common_scale) {
    if (options.fix_shapes) {
      names = {"scale"};
      theta = Eigen::VectorXd::Constant(1, p.scale[0]);
    } else {
      names = {"shape[1]", "shape[2]", "shape[3]", "scale"};
      theta = Eigen::Vector4d(p.shape[0], p.shape[1], p.shape[2], p.scale[0]);
    }
  } else if (options.fix_shapes) {
    names = {"scale[1]", "scale[2]", "scale[3]"};
    theta = Eigen::Vector3d(p.scale[0], p.scale[1], p.scale[2]);
  } else {
    names = {"shape[1]", "shape[2]", "shape[3]", "scale[1]", "scale[2]", "scale[3]"};
    theta = flat(p);
  }
  auto rebuild = [&](const Eigen::VectorXd& t) {
    GammaParams q = p;
    if (options.common_scale) {
      if (options.fix_shapes) {
        q.scale = {t[0], t[0], t[0]};
      } else {
        q.shape = {t[0], t[1], t[2]};
        q.scale = {t[3], t[3], t[3]};
      }
    } else if (options.fix_shapes) {
      q.scale = {t[0], t[1], t[2]};
    } else {
      q.shape = {t[0], t[1], t[2]};
      q.scale = {t[3], t[4], t[5]};
    }
    return q;
  };
  fit.names = names;
  fit.estimates = theta;
  fit.std_errors = Eigen::VectorXd::Constant(theta.size(), kNaN);
  // Observed information in log-parameters, mapped back by the delta method.
  const Eigen::VectorXd eta = theta.array().log();
  auto f = [&](const Eigen::VectorXd& e) {
    return gamma_loglik(sample, rebuild(e.array().exp().matrix()));
  };
  const Eigen::MatrixXd cov_eta =
      covariance_from_hessian(numerical_hessian(f, eta, Eigen::VectorXd::Constant(eta.size(), 1e-4)));
  if (cov_eta.allFinite()) {
    const Eigen::MatrixXd J = theta.asDiagonal();
    fit.covariance = J * cov_eta * J;
    fit.std_errors = fit.covariance.diagonal().cwiseSqrt();
  } else {
    fit.warnings.push_back("observed information is not positive definite");
  }
  return out;
}

ConditionalSubsets conditional_subset(const Eigen::MatrixXd& m) {
  if (m.cols() != 2) throw InputError("conditional subsets need a two-receiver scheme");
  ConditionalSubsets out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double y2 = m(i, 0), y3 = m(i, 1);
    if (y2 == 0.0 && y3 > 0.0) out.right_given_left_zero.push_back(y3);
    if (y3 == 0.0 && y2 > 0.0) out.left_given_right_zero.push_back(y2);
  }
  if (out.right_given_left_zero.empty()) out.flags.push_back("empty subset: y3 given y2 = 0");
  if (out.left_given_right_zero.empty()) out.flags.push_back("empty subset: y2 given y3 = 0");
  return out;
}

}  // namespace tomolab
