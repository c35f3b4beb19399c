#include "tomolab/study.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include <fmt/format.h>

#include "tomolab/delay_param_mle.hpp"
#include "tomolab/error.hpp"
#include "tomolab/mom.hpp"

namespace tomolab {

Estimator parse_estimator(const std::string& name) {
  if (name == "mle") return Estimator::MLE;
  if (name == "ols") return Estimator::OLS;
  if (name == "gls") return Estimator::GLS;
  throw InputError(fmt::format("unknown estimator '{}'", name));
}

std::string estimator_name(Estimator e) {
  switch (e) {
    case Estimator::MLE: return "mle";
    case Estimator::OLS: return "ols";
    case Estimator::GLS: return "gls";
  }
  return "?";
}

namespace {

// The two-layer bicast layout every estimator here supports.
struct TwoLayer {
  NodeId shared, left, right;
};

TwoLayer two_layer_shape(const Topology& topo, const FlexicastExperiment& exp) {
  exp.validate(topo);
  if (exp.schemes.size() != 1 || exp.schemes[0].size() != 2) {
    throw InputError("efficiency study needs a single bicast scheme");
  }
  const NodeId l = exp.schemes[0].receivers[0], r = exp.schemes[0].receivers[1];
  const auto pl = topo.parent(l), pr = topo.parent(r);
  if (!pl || pl != pr || topo.parent(*pl) != topo.root() || topo.links().size() != 3) {
    throw InputError("efficiency study needs the two-layer binary tree");
  }
  return {*pl, l, r};
}

}  // namespace

void StudyConfig::validate() const {
  if (replications < 2) throw InputError("a study needs at least 2 replications");
  if (probes < 2) throw InputError("a study needs at least 2 probes per replication");
  if (estimators.empty()) throw InputError("a study needs at least one estimator");
  if (std::ranges::find(estimators, Estimator::MLE) == estimators.end()) {
    throw InputError("relative efficiencies need the MLE among the estimators");
  }
  two_layer_shape(topology, experiment);
  tomolab::validate(model, topology);
  const FamilySpec spec = FamilySpec::for_experiment(Family::Exponential, topology, experiment);
  for (NodeId l : spec.links) {
    const auto* zi = std::get_if<ZeroInflatedLaw>(&model.links.at(l));
    if (!zi || zi->p_zero != 0.0 || !std::holds_alternative<ExponentialLaw>(zi->family)) {
      throw InputError(fmt::format("link {}: efficiency study needs plain exponential links", l));
    }
  }
}

StudyConfig two_layer_exponential_study(double rate1, double rate2, double rate3) {
  const std::pair<NodeId, NodeId> edges[] = {{0, 1}, {1, 2}, {1, 3}};
  StudyConfig c{Topology::from_edges(edges, 0), {{Scheme{{2, 3}}}}, {}};
  c.model.links[1] = ZeroInflatedLaw{0.0, ExponentialLaw{rate1}};
  c.model.links[2] = ZeroInflatedLaw{0.0, ExponentialLaw{rate2}};
  c.model.links[3] = ZeroInflatedLaw{0.0, ExponentialLaw{rate3}};
  return c;
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw InputError("quantile of an empty sample");
  std::ranges::sort(values);
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

// Unbiased variance from centred data.
double variance(const std::vector<double>& x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / (static_cast<double>(x.size()) - 1.0);
}

// Leave-one-out variances of x via the centred update formula.
std::vector<double> loo_variances(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - m;
    const double ss_i = ss - n / (n - 1.0) * d * d;
    out[i] = ss_i / (n - 2.0);
  }
  return out;
}

}  // namespace

StudyResult run_efficiency_study(const StudyConfig& config) {
  config.validate();
  const TwoLayer shape = two_layer_shape(config.topology, config.experiment);
  const FamilySpec spec =
      FamilySpec::for_experiment(Family::Exponential, config.topology, config.experiment);
  const std::size_t E = config.estimators.size();
  const auto R = static_cast<std::size_t>(config.replications);

  StudyResult res;
  res.parameters = spec.names();
  res.truth = spec.pack(config.model);
  res.estimators = config.estimators;
  res.replications = config.replications;
  res.probes = config.probes;
  res.seed = config.seed;
  res.estimates.assign(E, std::vector<std::optional<Eigen::VectorXd>>(R));
  std::vector<std::vector<std::string>> errors(R);

  auto run_one = [&](std::size_t r) {
    const DelayObservations obs = simulate_delay(config.topology, config.model, config.experiment,
                                                 config.probes, config.seed, r);
    std::optional<Eigen::VectorXd> ols;
    auto mom = [&](Weighting w) -> std::optional<Eigen::VectorXd> {
      try {
        MomFit f = fit_mom(obs, config.topology, config.experiment, Family::Exponential, w,
                           std::nullopt, config.tol);
        if (!f.fit.converged) throw EstimationError("Gauss-Newton did not converge");
        return f.theta;
      } catch (const std::exception& ex) {
        errors[r].push_back(fmt::format("replication {} {}: {}", r,
                                        w == Weighting::GLS ? "gls" : "ols", ex.what()));
        return std::nullopt;
      }
    };
    // Ordered so that the MLE can start from the OLS estimate.
    for (std::size_t e = 0; e < E; ++e) {
      if (config.estimators[e] == Estimator::OLS) ols = res.estimates[e][r] = mom(Weighting::OLS);
      if (config.estimators[e] == Estimator::GLS) res.estimates[e][r] = mom(Weighting::GLS);
    }
    for (std::size_t e = 0; e < E; ++e) {
      if (config.estimators[e] != Estimator::MLE) continue;
      try {
        const auto sample = BicastDelaySample::from_matrix(obs.schemes[0]);
        ExpParams init = exp_moment_init(sample);
        if (ols) {
          init = {(*ols)[spec.slot(shape.shared)], (*ols)[spec.slot(shape.left)],
                  (*ols)[spec.slot(shape.right)]};
        }
        const ExpFit f = exp_em_fit(sample, init, {config.tol, 100000, false});
        if (!f.fit.converged) throw EstimationError("EM did not converge");
        Eigen::VectorXd theta(spec.size());
        theta[spec.slot(shape.shared)] = f.params.rate1;
        theta[spec.slot(shape.left)] = f.params.rate2;
        theta[spec.slot(shape.right)] = f.params.rate3;
        res.estimates[e][r] = theta;
      } catch (const std::exception& ex) {
        errors[r].push_back(fmt::format("replication {} mle: {}", r, ex.what()));
      }
    }
  };

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned workers =
      std::min<unsigned>(config.threads == 0 ? hw : config.threads, static_cast<unsigned>(R));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t r = next++; r < R; r = next++) run_one(r);
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
  }
  for (const auto& errs : errors) {
    res.failure_messages.insert(res.failure_messages.end(), errs.begin(), errs.end());
  }

  const std::size_t mle_idx =
      static_cast<std::size_t>(std::ranges::find(config.estimators, Estimator::MLE) -
                               config.estimators.begin());
  const Eigen::Index P = spec.size();
  for (std::size_t e = 0; e < E; ++e) {
    EstimatorSummary s;
    s.estimator = config.estimators[e];
    s.mean = s.variance = s.bias = s.mean_se = Eigen::VectorXd::Zero(P);
    s.relative_efficiency = s.relative_efficiency_se = Eigen::VectorXd::Zero(P);
    s.quartiles = Eigen::MatrixXd::Zero(P, 3);
    for (std::size_t r = 0; r < R; ++r) s.failures += res.estimates[e][r] ? 0 : 1;
    if (static_cast<double>(s.failures) > 0.01 * static_cast<double>(R)) {
      std::string detail;
      for (std::size_t i = 0; i < std::min<std::size_t>(5, res.failure_messages.size()); ++i) {
        detail += "\n  " + res.failure_messages[i];
      }
      throw EstimationError(fmt::format("estimator {} failed on {} of {} replications{}",
                                        estimator_name(s.estimator), s.failures, R, detail));
    }
    for (Eigen::Index k = 0; k < P; ++k) {
      std::vector<double> x;
      std::vector<double> paired_est, paired_mle;
      for (std::size_t r = 0; r < R; ++r) {
        if (res.estimates[e][r]) x.push_back((*res.estimates[e][r])[k]);
        if (res.estimates[e][r] && res.estimates[mle_idx][r]) {
          paired_est.push_back((*res.estimates[e][r])[k]);
          paired_mle.push_back((*res.estimates[mle_idx][r])[k]);
        }
      }
      double m = 0.0;
      for (double v : x) m += v;
      m /= static_cast<double>(x.size());
      s.mean[k] = m;
      s.variance[k] = variance(x);
      s.bias[k] = m - res.truth[k];
      s.mean_se[k] = std::sqrt(s.variance[k] / static_cast<double>(x.size()));
      s.quartiles.row(k) << quantile(x, 0.25), quantile(x, 0.5), quantile(x, 0.75);
      if (e == mle_idx) {
        s.relative_efficiency[k] = 1.0;
        s.relative_efficiency_se[k] = 0.0;
        continue;
      }
      const double ratio = variance(paired_est) / variance(paired_mle);
      s.relative_efficiency[k] = ratio;
      const auto ve = loo_variances(paired_est), vm = loo_variances(paired_mle);
      const double n = static_cast<double>(ve.size());
      double jm = 0.0;
      std::vector<double> loo(ve.size());
      for (std::size_t i = 0; i < ve.size(); ++i) {
        loo[i] = ve[i] / vm[i];
        jm += loo[i];
      }
      jm /= n;
      double acc = 0.0;
      for (double v : loo) acc += (v - jm) * (v - jm);
      s.relative_efficiency_se[k] = std::sqrt((n - 1.0) / n * acc);
    }
    res.summaries.push_back(std::move(s));
  }
  return res;
}

namespace {
std::vector<double> as_list(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }
}  // namespace

nlohmann::json summary_json(const StudyResult& result) {
  nlohmann::json j;
  j["replications"] = result.replications;
  j["probes"] = result.probes;
  j["seed"] = result.seed;
  j["parameters"] = result.parameters;
  j["truth"] = as_list(result.truth);
  j["failures"] = result.failure_messages;
  nlohmann::json ests = nlohmann::json::object();
  for (const auto& s : result.summaries) {
    nlohmann::json e;
    e["mean"] = as_list(s.mean);
    e["variance"] = as_list(s.variance);
    e["bias"] = as_list(s.bias);
    e["mean_se"] = as_list(s.mean_se);
    e["relative_efficiency"] = as_list(s.relative_efficiency);
    e["relative_efficiency_se"] = as_list(s.relative_efficiency_se);
    e["q1"] = as_list(s.quartiles.col(0));
    e["median"] = as_list(s.quartiles.col(1));
    e["q3"] = as_list(s.quartiles.col(2));
    e["failed_replications"] = s.failures;
    ests[estimator_name(s.estimator)] = e;
  }
  j["estimators"] = ests;
  return j;
}

void emit_report(const StudyResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  {
    std::ofstream csv(dir / "estimates.csv");
    if (!csv) throw InputError(fmt::format("cannot write {}", (dir / "estimates.csv").string()));
    csv << "replication,estimator,parameter,estimate\n";
    for (int r = 0; r < result.replications; ++r) {
      for (std::size_t e = 0; e < result.estimators.size(); ++e) {
        const auto& est = result.estimates[e][static_cast<std::size_t>(r)];
        for (std::size_t k = 0; k < result.parameters.size(); ++k) {
          const std::string v =
              est ? fmt::format("{:.17g}", (*est)[static_cast<Eigen::Index>(k)]) : "nan";
          csv << fmt::format("{},{},{},{}\n", r, estimator_name(result.estimators[e]),
                             result.parameters[k], v);
        }
      }
    }
    if (!csv) throw InputError("failed writing estimates.csv");
  }
  std::ofstream js(dir / "summary.json");
  if (!js) throw InputError(fmt::format("cannot write {}", (dir / "summary.json").string()));
  js << summary_json(result).dump(2) << "\n";
  if (!js) throw InputError("failed writing summary.json");
}

}  // namespace tomolab
