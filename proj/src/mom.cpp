#include "tomolab/mom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include <fmt/format.h>

#include "tomolab/error.hpp"

namespace tomolab {

Family parse_family(const std::string& name) {
  if (name == "exp" || name == "exponential") return Family::Exponential;
  if (name == "gamma") return Family::Gamma;
  if (name == "uniform") return Family::Uniform;
  throw InputError(fmt::format("unknown delay family '{}'", name));
}

std::string family_name(Family family) {
  switch (family) {
    case Family::Exponential: return "exp";
    case Family::Gamma: return "gamma";
    case Family::Uniform: return "uniform";
  }
  return "?";
}

FamilySpec FamilySpec::for_experiment(Family family, const Topology& topology,
                                      const FlexicastExperiment& experiment) {
  experiment.validate(topology);
  std::set<NodeId> links;
  for (const auto& s : experiment.schemes) {
    for (NodeId l : scheme_links(topology, s)) links.insert(l);
  }
  return {family, {links.begin(), links.end()}};
}

Eigen::Index FamilySpec::slot(NodeId link) const {
  auto it = std::ranges::lower_bound(links, link);
  if (it == links.end() || *it != link) {
    throw InputError(fmt::format("link {} is not in the parameter layout", link));
  }
  return static_cast<Eigen::Index>(it - links.begin()) * per_link();
}

std::vector<std::string> FamilySpec::names() const {
  std::vector<std::string> out;
  for (NodeId l : links) {
    switch (family) {
      case Family::Exponential: out.push_back(fmt::format("rate[{}]", l)); break;
      case Family::Gamma:
        out.push_back(fmt::format("shape[{}]", l));
        out.push_back(fmt::format("scale[{}]", l));
        break;
      case Family::Uniform: out.push_back(fmt::format("upper[{}]", l)); break;
    }
  }
  return out;
}

Eigen::VectorXd FamilySpec::pack(const DelayModel& model) const {
  Eigen::VectorXd theta(size());
  for (NodeId l : links) {
    auto it = model.links.find(l);
    if (it == model.links.end()) throw InputError(fmt::format("model has no law for link {}", l));
    const auto* zi = std::get_if<ZeroInflatedLaw>(&it->second);
    if (!zi) throw InputError(fmt::format("link {}: moment fits need a continuous law", l));
    const Eigen::Index k = slot(l);
    switch (family) {
      case Family::Exponential: {
        const auto* e = std::get_if<ExponentialLaw>(&zi->family);
        if (!e) throw InputError(fmt::format("link {} is not exponential", l));
        theta[k] = e->rate;
        break;
      }
      case Family::Gamma: {
        const auto* g = std::get_if<GammaLaw>(&zi->family);
        if (!g) throw InputError(fmt::format("link {} is not gamma", l));
        theta[k] = g->shape;
        theta[k + 1] = g->scale;
        break;
      }
      case Family::Uniform: {
        const auto* u = std::get_if<UniformLaw>(&zi->family);
        if (!u) throw InputError(fmt::format("link {} is not uniform", l));
        theta[k] = u->upper;
        break;
      }
    }
  }
  return theta;
}

DelayModel FamilySpec::unpack(const Eigen::VectorXd& theta) const {
  if (theta.size() != size()) throw InputError("parameter vector has the wrong length");
  DelayModel m;
  for (NodeId l : links) {
    const Eigen::Index k = slot(l);
    ContinuousFamily f;
    switch (family) {
      case Family::Exponential: f = ExponentialLaw{theta[k]}; break;
      case Family::Gamma: f = GammaLaw{theta[k], theta[k + 1]}; break;
      case Family::Uniform: f = UniformLaw{theta[k]}; break;
    }
    m.links[l] = ZeroInflatedLaw{0.0, f};
  }
  return m;
}

MomentKind parse_moment_kind(const std::string& name) {
  if (name == "mean") return MomentKind::Mean;
  if (name == "var") return MomentKind::Var;
  if (name == "cov") return MomentKind::Cov;
  if (name == "third_cross") return MomentKind::ThirdCross;
  throw InputError(fmt::format("unknown moment kind '{}'", name));
}

std::string moment_kind_name(MomentKind kind) {
  switch (kind) {
    case MomentKind::Mean: return "mean";
    case MomentKind::Var: return "var";
    case MomentKind::Cov: return "cov";
    case MomentKind::ThirdCross: return "third_cross";
  }
  return "?";
}

std::string MomentDescriptor::label() const {
  if (kind == MomentKind::Mean || kind == MomentKind::Var) {
    return fmt::format("{}:{}({})", scheme, moment_kind_name(kind), r);
  }
  return fmt::format("{}:{}({},{})", scheme, moment_kind_name(kind), r, s);
}

double MomentVector::at(const MomentDescriptor& d) const {
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    if (descriptors[i] == d) return values[static_cast<Eigen::Index>(i)];
  }
  throw InputError(fmt::format("moment {} is not available", d.label()));
}

namespace {

bool is_pair(MomentKind k) { return k == MomentKind::Cov || k == MomentKind::ThirdCross; }

Eigen::Index column_of(const Scheme& scheme, NodeId r) {
  auto it = std::ranges::find(scheme.receivers, r);
  if (it == scheme.receivers.end()) throw InputError(fmt::format("receiver {} not in scheme", r));
  return static_cast<Eigen::Index>(it - scheme.receivers.begin());
}

// Links shared by the root paths of r and s.
std::vector<NodeId> shared_links(const Topology& topo, NodeId r, NodeId s) {
  return topo.path_from_root(topo.lowest_common_ancestor(r, s));
}

}  // namespace

void validate_descriptors(const std::vector<MomentDescriptor>& descriptors,
                          const FlexicastExperiment& experiment) {
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    const auto& d = descriptors[i];
    if (d.scheme >= experiment.schemes.size()) {
      throw InputError(fmt::format("moment {}: no such scheme", d.label()));
    }
    const auto& sch = experiment.schemes[d.scheme];
    column_of(sch, d.r);
    if (is_pair(d.kind)) {
      column_of(sch, d.s);
      if (d.r == d.s) throw InputError(fmt::format("moment {}: receivers must differ", d.label()));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (descriptors[j] == d) throw InputError(fmt::format("duplicate moment {}", d.label()));
    }
  }
}

std::vector<MomentDescriptor> default_descriptors(const Topology& topology,
                                                  const FlexicastExperiment& experiment,
                                                  Family family) {
  experiment.validate(topology);
  std::vector<MomentDescriptor> out;
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto& rs = experiment.schemes[j].receivers;
    for (NodeId r : rs) out.push_back({j, MomentKind::Mean, r, r});
    for (NodeId r : rs) out.push_back({j, MomentKind::Var, r, r});
    for (std::size_t a = 0; a < rs.size(); ++a) {
      for (std::size_t b = a + 1; b < rs.size(); ++b) {
        if (!shared_links(topology, rs[a], rs[b]).empty()) {
          out.push_back({j, MomentKind::Cov, rs[a], rs[b]});
        }
      }
    }
    if (family == Family::Gamma) {
      for (std::size_t a = 0; a < rs.size(); ++a) {
        for (std::size_t b = a + 1; b < rs.size(); ++b) {
          if (!shared_links(topology, rs[a], rs[b]).empty()) {
            out.push_back({j, MomentKind::ThirdCross, rs[a], rs[b]});
          }
        }
      }
    }
  }
  return out;
}

MomentVector sample_moments(const DelayObservations& observations,
                            const FlexicastExperiment& experiment,
                            const std::vector<MomentDescriptor>& descriptors) {
  validate_descriptors(descriptors, experiment);
  if (observations.schemes.size() != experiment.schemes.size()) {
    throw InputError("delay observations do not match the experiment's schemes");
  }
  MomentVector out;
  out.descriptors = descriptors;
  out.values.resize(static_cast<Eigen::Index>(descriptors.size()));
  std::map<std::size_t, Eigen::RowVectorXd> means;
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    const auto& d = descriptors[i];
    const Eigen::MatrixXd& Y = observations.schemes[d.scheme];
    if (Y.rows() < 2) {
      throw InputError(fmt::format("moment {}: scheme has fewer than 2 probes", d.label()));
    }
    const auto& sch = experiment.schemes[d.scheme];
    if (Y.cols() != static_cast<Eigen::Index>(sch.size())) {
      throw InputError(fmt::format("scheme {} has {} columns, expected {}", d.scheme, Y.cols(),
                                   sch.size()));
    }
    auto [it, fresh] = means.try_emplace(d.scheme);
    if (fresh) it->second = Y.colwise().mean();
    const Eigen::RowVectorXd& nu = it->second;
    const double n = static_cast<double>(Y.rows());
    const Eigen::Index cr = column_of(sch, d.r);
    const Eigen::ArrayXd er = Y.col(cr).array() - nu[cr];
    double v = 0.0;
    switch (d.kind) {
      case MomentKind::Mean: v = nu[cr]; break;
      case MomentKind::Var: v = er.square().sum() / n; break;
      case MomentKind::Cov: {
        const Eigen::Index cs = column_of(sch, d.s);
        v = (er * (Y.col(cs).array() - nu[cs])).sum() / n;
        break;
      }
      case MomentKind::ThirdCross: {
        const Eigen::Index cs = column_of(sch, d.s);
        v = (er.square() * (Y.col(cs).array() - nu[cs])).sum() / n;
        break;
      }
    }
    out.values[static_cast<Eigen::Index>(i)] = v;
  }
  return out;
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> theoretical_moments(
    const Topology& topology, const FlexicastExperiment& experiment, const FamilySpec& spec,
    const Eigen::VectorXd& theta, const std::vector<MomentDescriptor>& descriptors) {
  if (theta.size() != spec.size()) throw InputError("parameter vector has the wrong length");
  if (!(theta.array() > 0.0).all()) throw InputError("moment parameters must be positive");
  validate_descriptors(descriptors, experiment);

  // Per-link (mean, variance, third cumulant) and their derivatives.
  const Eigen::Index L = static_cast<Eigen::Index>(spec.links.size());
  const int per = spec.per_link();
  Eigen::MatrixXd cum(L, 3);
  Eigen::MatrixXd dcum = Eigen::MatrixXd::Zero(L * per, 3);
  for (Eigen::Index l = 0; l < L; ++l) {
    const Eigen::Index k = l * per;
    switch (spec.family) {
      case Family::Exponential: {
        const double lam = theta[k];
        cum.row(l) << 1.0 / lam, 1.0 / (lam * lam), 2.0 / (lam * lam * lam);
        dcum.row(k) << -1.0 / (lam * lam), -2.0 / (lam * lam * lam), -6.0 / std::pow(lam, 4);
        break;
      }
      case Family::Gamma: {
        const double a = theta[k], b = theta[k + 1];
        cum.row(l) << a * b, a * b * b, 2.0 * a * b * b * b;
        dcum.row(k) << b, b * b, 2.0 * b * b * b;
        dcum.row(k + 1) << a, 2.0 * a * b, 6.0 * a * b * b;
        break;
      }
      case Family::Uniform: {
        const double u = theta[k];
        cum.row(l) << u / 2.0, u * u / 12.0, 0.0;
        dcum.row(k) << 0.5, u / 6.0, 0.0;
        break;
      }
    }
  }

  const Eigen::Index m = static_cast<Eigen::Index>(descriptors.size());
  Eigen::VectorXd value = Eigen::VectorXd::Zero(m);
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(m, spec.size());
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& d = descriptors[static_cast<std::size_t>(i)];
    std::vector<NodeId> links;
    int c = 0;
    switch (d.kind) {
      case MomentKind::Mean: links = topology.path_from_root(d.r); c = 0; break;
      case MomentKind::Var: links = topology.path_from_root(d.r); c = 1; break;
      case MomentKind::Cov: links = shared_links(topology, d.r, d.s); c = 1; break;
      case MomentKind::ThirdCross: links = shared_links(topology, d.r, d.s); c = 2; break;
    }
    for (NodeId link : links) {
      const Eigen::Index k = spec.slot(link);
      value[i] += cum(k / per, c);
      for (int p = 0; p < per; ++p) D(i, k + p) += dcum(k + p, c);
    }
  }
  return {value, D};
}

MomentCovariance moment_covariance(const DelayObservations& observations,
                                   const FlexicastExperiment& experiment,
                                   const std::vector<MomentDescriptor>& descriptors) {
  const MomentVector mv = sample_moments(observations, experiment, descriptors);
  const Eigen::Index m = static_cast<Eigen::Index>(descriptors.size());
  MomentCovariance out;
  out.sigma = Eigen::MatrixXd::Zero(m, m);

  std::map<std::size_t, std::vector<Eigen::Index>> by_scheme;
  for (Eigen::Index i = 0; i < m; ++i) by_scheme[descriptors[static_cast<std::size_t>(i)].scheme].push_back(i);
  for (const auto& [j, idx] : by_scheme) {
    const auto& sch = experiment.schemes[j];
    const Eigen::MatrixXd& Y = observations.schemes[j];
    const Eigen::Index n = Y.rows();
    const double nn = static_cast<double>(n);
    const Eigen::Index need = std::max<Eigen::Index>(10, 2 * static_cast<Eigen::Index>(idx.size()));
    if (n < need) {
      throw InputError(fmt::format("scheme {}: GLS weighting needs at least {} probes, got {}", j,
                                   need, n));
    }
    const Eigen::RowVectorXd nu = Y.colwise().mean();
    const Eigen::MatrixXd E = Y.rowwise() - nu;
    auto var_of = [&](Eigen::Index c) { return E.col(c).squaredNorm() / nn; };
    auto cov_of = [&](Eigen::Index a, Eigen::Index b) { return E.col(a).dot(E.col(b)) / nn; };
    Eigen::MatrixXd K(n, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t t = 0; t < idx.size(); ++t) {
      const auto& d = descriptors[static_cast<std::size_t>(idx[t])];
      const double mval = mv.values[idx[t]];
      const Eigen::Index cr = column_of(sch, d.r);
      auto col = K.col(static_cast<Eigen::Index>(t));
      switch (d.kind) {
        case MomentKind::Mean: col = E.col(cr); break;
        case MomentKind::Var: col = (E.col(cr).array().square() - mval).matrix(); break;
        case MomentKind::Cov: {
          const Eigen::Index cs = column_of(sch, d.s);
          col = (E.col(cr).array() * E.col(cs).array() - mval).matrix();
          break;
        }
        case MomentKind::ThirdCross: {
          const Eigen::Index cs = column_of(sch, d.s);
          col = (E.col(cr).array().square() * E.col(cs).array() - mval -
                 2.0 * cov_of(cr, cs) * E.col(cr).array() - var_of(cr) * E.col(cs).array())
                    .matrix();
          break;
        }
      }
    }
    const Eigen::MatrixXd block = K.transpose() * K / (nn * nn);
    for (std::size_t a = 0; a < idx.size(); ++a) {
      for (std::size_t b = 0; b < idx.size(); ++b) {
        out.sigma(idx[a], idx[b]) = block(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
    }
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.sigma, Eigen::EigenvaluesOnly);
  const double top = eig.eigenvalues().maxCoeff();
  if (!(eig.eigenvalues().minCoeff() > 1e-12 * top)) {
    const double trace = out.sigma.trace();
    const double ridge = trace > 0.0 ? 1e-8 * trace / static_cast<double>(m) : 1e-8;
    out.sigma.diagonal().array() += ridge;
    out.regularized = true;
  }
  return out;
}

Eigen::MatrixXd gls_weight(const DelayObservations& observations,
                           const FlexicastExperiment& experiment,
                           const std::vector<MomentDescriptor>& descriptors, bool* regularized) {
  const auto mc = moment_covariance(observations, experiment, descriptors);
  if (regularized) *regularized = mc.regularized;
  const Eigen::Index m = mc.sigma.rows();
  Eigen::MatrixXd W = mc.sigma.ldlt().solve(Eigen::MatrixXd::Identity(m, m));
  return 0.5 * (W + W.transpose());
}

MomFit gauss_newton_fit(const MomentVector& observed, const FamilySpec& spec,
                        const Topology& topology, const FlexicastExperiment& experiment,
                        const Eigen::VectorXd& init, const GaussNewtonOptions& options) {
  const Eigen::Index m = observed.values.size();
  const Eigen::Index p = spec.size();
  if (m < p) {
    throw InputError(fmt::format("{} moments cannot determine {} parameters", m, p));
  }
  if (init.size() != p || !(init.array() > 0.0).all()) {
    throw InputError("initial parameters must be positive and match the layout");
  }
  Eigen::MatrixXd W = options.weight.value_or(Eigen::MatrixXd::Identity(m, m));
  if (W.rows() != m || W.cols() != m) throw InputError("weight matrix has the wrong size");
  Eigen::LLT<Eigen::MatrixXd> wllt(W);
  if (wllt.info() != Eigen::Success) throw InputError("weight matrix is not positive definite");
  const Eigen::MatrixXd Lt = wllt.matrixU();  // W = Lt' Lt

  const auto names = spec.names();
  auto eval = [&](const Eigen::VectorXd& eta, Eigen::VectorXd& b, Eigen::MatrixXd* A) {
    const Eigen::VectorXd theta = eta.array().exp();
    if (!theta.allFinite() || !(theta.array() > 0.0).all()) {
      return std::numeric_limits<double>::infinity();
    }
    auto [mod, D] = theoretical_moments(topology, experiment, spec, theta, observed.descriptors);
    b = Lt * (observed.values - mod);
    if (A) *A = Lt * (D * theta.asDiagonal());
    const double q = b.squaredNorm();
    return std::isfinite(q) ? q : std::numeric_limits<double>::infinity();
  };

  MomFit out;
  out.spec = spec;
  FitResult& fit = out.fit;
  fit.names = names;
  Eigen::VectorXd eta = init.array().log();
  Eigen::VectorXd b;
  Eigen::MatrixXd A;
  double Q = eval(eta, b, &A);
  fit.objective_trace.push_back(Q);

  {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv.size() < p || !(sv[p - 1] > 1e-10 * sv[0])) {
      const Eigen::VectorXd null = svd.matrixV().col(p - 1);
      std::string dir;
      for (Eigen::Index k = 0; k < p; ++k) {
        if (std::abs(null[k]) > 1e-6) {
          dir += fmt::format("{}{}: {:.3g}", dir.empty() ? "" : ", ", names[static_cast<std::size_t>(k)], null[k]);
        }
      }
      throw EstimationError(fmt::format(
          "moment Jacobian is rank deficient at the start; unidentified direction {{{}}}", dir));
    }
  }

  std::vector<int> halvings;
  bool converged = false;
  double gnorm = (A.transpose() * b).norm();
  int iter = 0;
  while (iter < options.max_iter) {
    if (Q == 0.0 || gnorm < options.tol) {
      converged = true;
      break;
    }
    const Eigen::VectorXd delta = A.colPivHouseholderQr().solve(b);
    double r = 1.0;
    int h = 0;
    bool accepted = false;
    Eigen::VectorXd eta_new, b_new;
    double Q_new = Q;
    while (r >= std::ldexp(1.0, -20)) {
      eta_new = eta + r * delta;
      Q_new = eval(eta_new, b_new, nullptr);
      if (Q_new < Q) {
        accepted = true;
        break;
      }
      r *= 0.5;
      ++h;
    }
    ++iter;
    halvings.push_back(h);
    if (!accepted) {
      fit.warnings.push_back(fmt::format(
          "step halving reached 2^-20 without decrease; stationary point with gradient norm {:.3g}",
          gnorm));
      converged = gnorm < options.tol * (1.0 + Q) || Q < 1e-300;
      break;
    }
    const double dQ = Q - Q_new;
    eta = eta_new;
    Q = eval(eta, b, &A);
    gnorm = (A.transpose() * b).norm();
    fit.objective_trace.push_back(Q);
    if (dQ < options.tol * (1.0 + Q)) {
      converged = true;
      break;
    }
  }
  if (!converged && iter >= options.max_iter) {
    fit.warnings.push_back(fmt::format("Gauss-Newton stopped after {} iterations", iter));
  }

  out.theta = eta.array().exp();
  fit.estimates = out.theta;
  fit.objective = Q;
  fit.iterations = iter;
  fit.converged = converged;

  // Asymptotic covariance in theta.
  auto [mod, D] = theoretical_moments(topology, experiment, spec, out.theta, observed.descriptors);
  const Eigen::MatrixXd N = D.transpose() * W * D;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> neig(N, Eigen::EigenvaluesOnly);
  const bool psd = neig.eigenvalues().minCoeff() > 0.0;
  fit.std_errors = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
  if (psd) {
    const Eigen::MatrixXd bread = N.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
    if (options.moment_cov) {
      const Eigen::MatrixXd meat = D.transpose() * W * (*options.moment_cov) * W * D;
      fit.covariance = bread * meat * bread;
    } else {
      fit.covariance = bread;
    }
    fit.std_errors = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  } else {
    fit.warnings.push_back("Gauss-Newton normal matrix is not positive definite at the estimate");
  }
  fit.diagnostics["gradient_norm"] = gnorm;
  fit.diagnostics["step_halvings"] = halvings;
  fit.diagnostics["normal_matrix_min_eigenvalue"] = neig.eigenvalues().minCoeff();
  fit.diagnostics["family"] = family_name(spec.family);
  fit.diagnostics["moments"] = static_cast<int>(m);
  return out;
}

Eigen::VectorXd moment_start(const MomentVector& observed, const FamilySpec& spec,
                             const Topology& topology, const FlexicastExperiment& experiment) {
  validate_descriptors(observed.descriptors, experiment);
  const Eigen::Index L = static_cast<Eigen::Index>(spec.links.size());
  std::vector<Eigen::RowVectorXd> mean_rows, var_rows;
  std::vector<double> mean_vals, var_vals;
  for (std::size_t i = 0; i < observed.descriptors.size(); ++i) {
    const auto& d = observed.descriptors[i];
    std::vector<NodeId> links;
    if (d.kind == MomentKind::ThirdCross) continue;
    links = is_pair(d.kind) ? shared_links(topology, d.r, d.s) : topology.path_from_root(d.r);
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(L);
    for (NodeId l : links) row[spec.slot(l) / spec.per_link()] = 1.0;
    const double v = observed.values[static_cast<Eigen::Index>(i)];
    if (d.kind == MomentKind::Mean) {
      mean_rows.push_back(row);
      mean_vals.push_back(v);
    } else {
      var_rows.push_back(row);
      var_vals.push_back(v);
    }
  }
  auto solve = [&](const std::vector<Eigen::RowVectorXd>& rows, const std::vector<double>& vals) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(L);
    if (rows.empty()) return x;
    Eigen::MatrixXd M(static_cast<Eigen::Index>(rows.size()), L);
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      M.row(static_cast<Eigen::Index>(i)) = rows[i];
      y[static_cast<Eigen::Index>(i)] = vals[i];
    }
    return Eigen::VectorXd(M.completeOrthogonalDecomposition().solve(y));
  };
  Eigen::VectorXd mu = solve(mean_rows, mean_vals);
  Eigen::VectorXd s2 = solve(var_rows, var_vals);
  const double mu_ref = std::max(mu.cwiseAbs().maxCoeff(), 1e-6);
  Eigen::VectorXd theta(spec.size());
  for (Eigen::Index l = 0; l < L; ++l) {
    const double m = std::max(mu[l], 0.05 * mu_ref);
    double v = s2[l];
    if (!(v > 1e-3 * m * m)) v = m * m;
    const Eigen::Index k = l * spec.per_link();
    switch (spec.family) {
      case Family::Exponential: theta[k] = 1.0 / m; break;
      case Family::Gamma:
        theta[k] = m * m / v;
        theta[k + 1] = v / m;
        break;
      case Family::Uniform: theta[k] = 2.0 * m; break;
    }
  }
  return theta;
}

MomFit fit_mom(const DelayObservations& observations, const Topology& topology,
               const FlexicastExperiment& experiment, Family family, Weighting weighting,
               const std::optional<Eigen::VectorXd>& init, double tol, int max_iter,
               std::optional<std::vector<MomentDescriptor>> descriptors) {
  const FamilySpec spec = FamilySpec::for_experiment(family, topology, experiment);
  const auto desc = descriptors ? *descriptors : default_descriptors(topology, experiment, family);
  const MomentVector mv = sample_moments(observations, experiment, desc);
  const MomentCovariance mc = moment_covariance(observations, experiment, desc);
  GaussNewtonOptions opt;
  opt.tol = tol;
  opt.max_iter = max_iter;
  opt.moment_cov = mc.sigma;
  if (weighting == Weighting::GLS) {
    const Eigen::Index m = mc.sigma.rows();
    Eigen::MatrixXd W = mc.sigma.ldlt().solve(Eigen::MatrixXd::Identity(m, m));
    opt.weight = 0.5 * (W + W.transpose());
  }
  const Eigen::VectorXd start = init ? *init : moment_start(mv, spec, topology, experiment);
  MomFit out = gauss_newton_fit(mv, spec, topology, experiment, start, opt);
  out.fit.diagnostics["weighting"] = weighting == Weighting::GLS ? "gls" : "ols";
  if (mc.regularized) {
    out.fit.warnings.push_back("moment covariance was singular and has been ridge-regularized");
  }
  return out;
}

Eigen::VectorXd solve_gamma_three_layer(const MomentVector& moments, const Topology& topology,
                                        const FlexicastExperiment& experiment) {
  experiment.validate(topology);
  const auto& S = experiment.schemes;
  if (S.size() != 3 || S[0].size() != 2 || S[1].size() != 2 || S[2].size() != 2 ||
      S[0].receivers[1] != S[1].receivers[0] || S[1].receivers[1] != S[2].receivers[0]) {
    throw InputError("three-layer inversion needs schemes <a,b>, <b,c>, <c,d>");
  }
  const NodeId a = S[0].receivers[0], b = S[0].receivers[1];
  const NodeId c = S[2].receivers[0], d = S[2].receivers[1];
  const NodeId left = *topology.parent(a), right = *topology.parent(c);
  const NodeId top = *topology.parent(left);
  if (*topology.parent(b) != left || *topology.parent(d) != right ||
      topology.parent(right) != top || topology.parent(top) != topology.root()) {
    throw InputError("three-layer inversion needs a three-layer binary tree");
  }
  auto get = [&](std::size_t j, MomentKind k, NodeId r, NodeId s) {
    return moments.at({j, k, r, s});
  };
  std::map<NodeId, std::pair<double, double>> mv;  // link -> (mean, variance)
  std::map<NodeId, std::pair<double, double>> vk;  // link -> (variance, third cumulant)
  vk[top] = {get(1, MomentKind::Cov, b, c), get(1, MomentKind::ThirdCross, b, c)};
  vk[left] = {get(0, MomentKind::Cov, a, b) - vk[top].first,
              get(0, MomentKind::ThirdCross, a, b) - vk[top].second};
  vk[right] = {get(2, MomentKind::Cov, c, d) - vk[top].first,
               get(2, MomentKind::ThirdCross, c, d) - vk[top].second};
  std::map<NodeId, std::pair<double, double>> shape_scale;
  for (NodeId l : {top, left, right}) {
    const auto [v, k3] = vk[l];
    const double beta = k3 / (2.0 * v);
    const double alpha = v / (beta * beta);
    if (!(beta > 0.0 && alpha > 0.0 && std::isfinite(alpha))) {
      throw EstimationError(fmt::format("implied gamma parameters of link {} are not positive "
                                        "(variance {:.6g}, third cumulant {:.6g})", l, v, k3));
    }
    shape_scale[l] = {alpha, beta};
  }
  auto mean_of = [&](NodeId l) { return shape_scale[l].first * shape_scale[l].second; };
  auto var_of = [&](NodeId l) { return vk[l].first; };
  const std::pair<NodeId, std::size_t> receivers[] = {{a, 0}, {b, 0}, {c, 1}, {d, 2}};
  for (auto [r, j] : receivers) {
    const NodeId mid = *topology.parent(r);
    const double mu = get(j, MomentKind::Mean, r, r) - mean_of(top) - mean_of(mid);
    const double v = get(j, MomentKind::Var, r, r) - var_of(top) - var_of(mid);
    if (!(mu > 0.0 && v > 0.0)) {
      throw EstimationError(fmt::format(
          "implied gamma parameters of link {} are not positive (mean {:.6g}, variance {:.6g})", r,
          mu, v));
    }
    shape_scale[r] = {mu * mu / v, v / mu};
  }
  const FamilySpec spec = FamilySpec::for_experiment(Family::Gamma, topology, experiment);
  Eigen::VectorXd theta(spec.size());
  for (NodeId l : spec.links) {
    const Eigen::Index k = spec.slot(l);
    theta[k] = shape_scale.at(l).first;
    theta[k + 1] = shape_scale.at(l).second;
  }
  return theta;
}

}  // namespace tomolab
