#include "tomolab/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <openssl/evp.h>

#include "tomolab/delay_discrete.hpp"
#include "tomolab/delay_param_mle.hpp"
#include "tomolab/error.hpp"
#include "tomolab/io.hpp"
#include "tomolab/loss_em.hpp"
#include "tomolab/mom.hpp"
#include "tomolab/study.hpp"

namespace tomolab {

using nlohmann::json;

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

namespace {

enum class LogLevel { Quiet, Warn, Info, Debug };

LogLevel log_level() {
  const char* v = std::getenv("TOMOLAB_LOG");
  if (!v) return LogLevel::Warn;
  const std::string s = v;
  if (s == "quiet" || s == "off" || s == "0") return LogLevel::Quiet;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  return LogLevel::Warn;
}

struct Options {
  std::string topology, experiment, model, counts, delays, table, descriptors, config, out;
  std::string family = "exp", weighting = "ols", mode = "loss", scale = "common";
  double q = 0.0;
  int b = 0;
  std::optional<double> tol;
  int max_iter = 100000;
  std::uint64_t seed = 1;
  std::uint64_t n = 1000;
  unsigned threads = 0;
};

class Run {
 public:
  Run(std::string command, const Options& o, std::ostream& out, std::ostream& err)
      : command_(std::move(command)), o_(o), out_(out), err_(err), level_(log_level()) {}

  InputFile load(const std::string& path, const char* flag) {
    if (path.empty()) throw InputError(fmt::format("{} is required", flag));
    InputFile f = read_file(path);
    inputs_.push_back({{"flag", flag}, {"path", path}, {"sha256", sha256_hex(f.bytes)}});
    log(LogLevel::Debug, fmt::format("read {} ({} bytes)", path, f.bytes.size()));
    return f;
  }

  void warn(const std::string& msg) { log(LogLevel::Warn, "warning: " + msg); }
  void info(const std::string& msg) { log(LogLevel::Info, msg); }

  /// Writes `bytes` to --out (with a manifest beside it) or to stdout.
  void emit(const std::string& bytes, json config, std::optional<std::uint64_t> seed = {}) {
    if (o_.out.empty()) {
      out_ << bytes;
      return;
    }
    write_file(o_.out, bytes);
    write_manifest(o_.out + ".manifest.json", std::move(config), seed, {o_.out});
    info(fmt::format("wrote {}", o_.out));
  }

  void write_manifest(const std::filesystem::path& path, json config,
                      std::optional<std::uint64_t> seed, const std::vector<std::string>& outputs) {
    json m;
    m["command"] = command_;
    m["config"] = std::move(config);
    m["inputs"] = inputs_;
    m["seed"] = seed ? json(*seed) : json(nullptr);
    m["tool_version"] = kToolVersion;
    m["outputs"] = outputs;
    write_file(path, m.dump(2) + "\n");
  }

 private:
  void log(LogLevel l, const std::string& msg) {
    if (l <= level_) err_ << msg << "\n";
  }

  std::string command_;
  const Options& o_;
  std::ostream& out_;
  std::ostream& err_;
  LogLevel level_;
  json inputs_ = json::array();
};

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json identifiability_json(const IdentifiabilityReport& rep) {
  return {{"identifiable", rep.identifiable()},
          {"uncovered_receivers", rep.uncovered_receivers},
          {"non_splitting_internals", rep.non_splitting_internals}};
}

// Surfaces a non-fatal identifiability warning; returns its text if any.
std::optional<std::string> identifiability_warning(Run& run, const Topology& topo,
                                                   const FlexicastExperiment& exp) {
  const auto rep = check_identifiability(topo, exp);
  if (rep.identifiable()) return std::nullopt;
  std::string msg = "experiment is not identifiable:";
  if (!rep.uncovered_receivers.empty()) {
    msg += fmt::format(" uncovered receivers {{{}}}", fmt::join(rep.uncovered_receivers, ", "));
  }
  if (!rep.non_splitting_internals.empty()) {
    msg += fmt::format(" internal nodes never split {{{}}}",
                       fmt::join(rep.non_splitting_internals, ", "));
  }
  run.warn(msg);
  return msg;
}

int finish_fit(Run& run, json result, const FitResult& fit, json config) {
  result["fit"] = to_json(fit);
  for (const auto& w : fit.warnings) run.warn(w);
  run.emit(dump(result), std::move(config));
  if (!fit.converged) {
    run.warn(fmt::format("estimator did not converge after {} iterations", fit.iterations));
    return kExitNoConvergence;
  }
  return kExitOk;
}

int cmd_check(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("check", o, out, err);
  const Topology topo = parse_topology(run.load(o.topology, "--topology"));
  const FlexicastExperiment exp = parse_experiment(run.load(o.experiment, "--experiment"));
  exp.validate(topo);
  const auto rep = check_identifiability(topo, exp);
  run.emit(dump(identifiability_json(rep)), {{"topology", o.topology}, {"experiment", o.experiment}});
  if (!rep.identifiable()) {
    identifiability_warning(run, topo, exp);
    return kExitUnidentifiable;
  }
  return kExitOk;
}

int cmd_simulate(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("simulate", o, out, err);
  const Topology topo = parse_topology(run.load(o.topology, "--topology"));
  const FlexicastExperiment exp = parse_experiment(run.load(o.experiment, "--experiment"));
  const Model model = parse_model(run.load(o.model, "--model"));
  const json config = {{"mode", o.mode}, {"n", o.n}, {"seed", o.seed}};
  std::string csv;
  if (o.mode == "loss") {
    const auto* m = std::get_if<LossModel>(&model);
    if (!m) throw InputError("--mode loss needs a loss model, got a delay model");
    csv = loss_csv(simulate_loss(topo, *m, exp, o.n, o.seed), exp);
  } else if (o.mode == "delay") {
    const auto* m = std::get_if<DelayModel>(&model);
    if (!m) throw InputError("--mode delay needs a delay model, got a loss model");
    csv = delay_csv(simulate_delay(topo, *m, exp, o.n, o.seed), exp);
  } else {
    throw InputError(fmt::format("--mode must be loss or delay, got '{}'", o.mode));
  }
  run.emit(csv, config, o.seed);
  return kExitOk;
}

int cmd_fit_loss(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("fit-loss", o, out, err);
  const Topology topo = parse_topology(run.load(o.topology, "--topology"));
  const FlexicastExperiment exp = parse_experiment(run.load(o.experiment, "--experiment"));
  const LossObservations counts = parse_loss_csv(run.load(o.counts, "--counts"), exp);
  identifiability_warning(run, topo, exp);
  const LossFit f = em_fit(topo, exp, counts, default_loss_init(topo, exp), {o.tol.value_or(1e-8), o.max_iter, false});
  json alpha = json::object();
  for (auto [k, a] : f.params.alpha) alpha[std::to_string(k)] = a;
  json result = {{"alpha", alpha},
                 {"loglik", f.fit.objective},
                 {"iterations", f.fit.iterations},
                 {"converged", f.fit.converged},
                 {"warnings", f.fit.warnings}};
  return finish_fit(run, result, f.fit, {{"tol", o.tol.value_or(1e-8)}, {"max_iter", o.max_iter}});
}

int cmd_fit_delay_discrete(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("fit-delay-discrete", o, out, err);
  const Topology topo = parse_topology(run.load(o.topology, "--topology"));
  const FlexicastExperiment exp = parse_experiment(run.load(o.experiment, "--experiment"));
  if (!(o.q > 0.0) || o.b < 0) throw InputError("--q > 0 and --b >= 0 are required");
  identifiability_warning(run, topo, exp);
  std::vector<OutcomeTable> tables;
  json config = {{"q", o.q}, {"b", o.b}, {"tol", o.tol.value_or(1e-8)}, {"max_iter", o.max_iter}};
  if (!o.table.empty()) {
    tables = parse_outcome_table_csv(run.load(o.table, "--table"), exp);
  } else {
    const DelayObservations d = parse_delay_csv(run.load(o.delays, "--delays"), exp);
    BinnedDelays bd = bin_delays(topo, exp, d, o.q, o.b);
    if (bd.clamped > 0) run.warn(fmt::format("{} delays clamped to the top bin", bd.clamped));
    config["clamped"] = bd.clamped;
    tables = std::move(bd.tables);
  }
  const DiscreteFit f = em_fit_discrete(topo, exp, tables, uniform_discrete_init(topo, exp, o.q, o.b),
                                        {o.tol.value_or(1e-8), o.max_iter, false});
  json pmf = json::object();
  for (const auto& [k, p] : f.params.pmf) pmf[std::to_string(k)] = p;
  json result = {{"q", f.params.q}, {"b", f.params.b}, {"pmf", pmf},
                 {"loglik", f.fit.objective}, {"iterations", f.fit.iterations},
                 {"converged", f.fit.converged}};
  return finish_fit(run, result, f.fit, config);
}

int cmd_fit_delay_mle(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("fit-delay-mle", o, out, err);
  const Topology topo = parse_topology(run.load(o.topology, "--topology"));
  const FlexicastExperiment exp = parse_experiment(run.load(o.experiment, "--experiment"));
  exp.validate(topo);
  if (exp.schemes.size() != 1 || exp.schemes[0].size() != 2 || topo.links().size() != 3) {
    throw InputError("fit-delay-mle needs the two-layer tree with one bicast scheme");
  }
  const DelayObservations d = parse_delay_csv(run.load(o.delays, "--delays"), exp);
  if (d.schemes[0].rows() == 0) throw InputError("delay file holds no probes");
  const auto sample = BicastDelaySample::from_matrix(d.schemes[0]);
  const NodeId shared = *topo.parent(exp.schemes[0].receivers[0]);
  const NodeId left = exp.schemes[0].receivers[0], right = exp.schemes[0].receivers[1];
  const Family fam = parse_family(o.family);
  json config = {{"family", o.family}, {"tol", o.tol.value_or(1e-8)}, {"max_iter", o.max_iter}};
  json params = json::object();
  if (fam == Family::Exponential) {
    ExpFit f = exp_em_fit(sample, exp_moment_init(sample), {o.tol.value_or(1e-8), o.max_iter, false});
    f.fit.names = {fmt::format("rate[{}]", shared), fmt::format("rate[{}]", left),
                   fmt::format("rate[{}]", right)};
    return finish_fit(run, {{"family", "exp"}, {"loglik", f.fit.objective}}, f.fit, config);
  }
  if (fam != Family::Gamma) throw InputError("fit-delay-mle supports --family exp or gamma");
  GammaEmOptions go;
  go.em = {o.tol.value_or(1e-8), o.max_iter, false};
  if (o.scale != "common" && o.scale != "per-link") {
    throw InputError("--scale must be common or per-link");
  }
  go.common_scale = o.scale == "common";
  config["scale"] = o.scale;
  GammaFit f = gamma_em_fit(sample, gamma_moment_init(sample, go.common_scale), go);
  const NodeId ids[] = {shared, left, right};
  for (auto& name : f.fit.names) {
    // shape[1..3] / scale[1..3] refer to shared, left, right.
    const auto open = name.find('[');
    if (open == std::string::npos) continue;
    const int pos = name[open + 1] - '1';
    name = fmt::format("{}[{}]", name.substr(0, open), ids[pos]);
  }
  return finish_fit(run, {{"family", "gamma"}, {"loglik", f.fit.objective}}, f.fit, config);
}

int cmd_fit_delay_mom(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("fit-delay-mom", o, out, err);
  const Topology topo = parse_topology(run.load(o.topology, "--topology"));
  const FlexicastExperiment exp = parse_experiment(run.load(o.experiment, "--experiment"));
  const DelayObservations d = parse_delay_csv(run.load(o.delays, "--delays"), exp);
  identifiability_warning(run, topo, exp);
  std::optional<std::vector<MomentDescriptor>> desc;
  if (!o.descriptors.empty()) desc = parse_descriptors(run.load(o.descriptors, "--descriptors"));
  Weighting w;
  if (o.weighting == "ols") {
    w = Weighting::OLS;
  } else if (o.weighting == "gls") {
    w = Weighting::GLS;
  } else {
    throw InputError(fmt::format("--weighting must be ols or gls, got '{}'", o.weighting));
  }
  const Family fam = parse_family(o.family);
  const double tol = o.tol.value_or(1e-10);
  const MomFit f = fit_mom(d, topo, exp, fam, w, std::nullopt, tol,
                           std::min(o.max_iter, 100000), desc);
  json config = {{"family", o.family}, {"weighting", o.weighting}, {"tol", tol},
                 {"max_iter", o.max_iter}};
  return finish_fit(run, {{"family", family_name(fam)}, {"Q", f.fit.objective}}, f.fit, config);
}

int cmd_study(const Options& o, std::ostream& out, std::ostream& err) {
  Run run("study-efficiency", o, out, err);
  StudyConfig c = parse_study_config(run.load(o.config, "--config"));
  c.threads = o.threads;
  if (o.out.empty()) throw InputError("--out directory is required");
  run.info(fmt::format("running {} replications of {} probes", c.replications, c.probes));
  const StudyResult res = run_efficiency_study(c);
  emit_report(res, o.out);
  const std::filesystem::path dir = o.out;
  run.write_manifest(dir / "manifest.json", {{"config", o.config}}, c.seed,
                     {(dir / "estimates.csv").string(), (dir / "summary.json").string()});
  for (const auto& s : res.summaries) {
    run.info(fmt::format("{}: relative efficiency {:.3f}", estimator_name(s.estimator),
                         fmt::join(s.relative_efficiency, ", ")));
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Network tomography from end-to-end probe measurements", "tomolab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--topology", o.topology, "topology JSON");
    sub->add_option("--experiment", o.experiment, "experiment JSON");
    sub->add_option("--out", o.out, "output path");
    sub->add_option("--threads", o.threads, "worker thread cap");
  };
  auto iterative = [&](CLI::App* sub) {
    sub->add_option("--tol", o.tol, "convergence tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--max-iter", o.max_iter, "iteration cap")->check(CLI::PositiveNumber);
  };

  auto* check = app.add_subcommand("check", "check identifiability of an experiment");
  common(check);
  auto* sim = app.add_subcommand("simulate", "simulate probe observations");
  common(sim);
  sim->add_option("--model", o.model, "model JSON");
  sim->add_option("--mode", o.mode, "loss or delay");
  sim->add_option("--n", o.n, "probes per scheme");
  sim->add_option("--seed", o.seed, "random seed");
  auto* floss = app.add_subcommand("fit-loss", "EM estimate of link loss rates");
  common(floss);
  iterative(floss);
  floss->add_option("--counts", o.counts, "loss counts CSV");
  auto* fdisc = app.add_subcommand("fit-delay-discrete", "EM estimate of discrete delay pmfs");
  common(fdisc);
  iterative(fdisc);
  fdisc->add_option("--delays", o.delays, "delay CSV");
  fdisc->add_option("--table", o.table, "binned outcome table CSV");
  fdisc->add_option("--q", o.q, "bin width in seconds");
  fdisc->add_option("--b", o.b, "largest per-link bin");
  auto* fmle = app.add_subcommand("fit-delay-mle", "maximum likelihood on the two-layer tree");
  common(fmle);
  iterative(fmle);
  fmle->add_option("--delays", o.delays, "delay CSV");
  fmle->add_option("--family", o.family, "exp or gamma");
  fmle->add_option("--scale", o.scale, "gamma scale: common or per-link");
  auto* fmom = app.add_subcommand("fit-delay-mom", "method-of-moments delay estimates");
  common(fmom);
  iterative(fmom);
  fmom->add_option("--delays", o.delays, "delay CSV");
  fmom->add_option("--family", o.family, "exp, gamma or uniform");
  fmom->add_option("--weighting", o.weighting, "ols or gls");
  fmom->add_option("--descriptors", o.descriptors, "moment descriptor JSON");
  auto* study = app.add_subcommand("study-efficiency", "MLE versus moment efficiency study");
  common(study);
  study->add_option("--config", o.config, "study config JSON");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (*check) return cmd_check(o, out, err);
    if (*sim) return cmd_simulate(o, out, err);
    if (*floss) return cmd_fit_loss(o, out, err);
    if (*fdisc) return cmd_fit_delay_discrete(o, out, err);
    if (*fmle) return cmd_fit_delay_mle(o, out, err);
    if (*fmom) return cmd_fit_delay_mom(o, out, err);
    if (*study) return cmd_study(o, out, err);
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const EstimationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNoConvergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace tomolab
