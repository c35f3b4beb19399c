#include "tomolab/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "tomolab/error.hpp"
#include "tomolab/fit_result.hpp"

namespace tomolab {

using nlohmann::json;

std::size_t FitResult::index_of(const std::string& name) const {
  auto it = std::ranges::find(names, name);
  if (it == names.end()) throw InputError(fmt::format("no parameter named '{}'", name));
  return static_cast<std::size_t>(it - names.begin());
}

namespace {

json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json vector_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number_or_null(v[i]));
  return out;
}

}  // namespace

json to_json(const FitResult& fit) {
  json j;
  json est = json::object(), se = json::object();
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    est[fit.names[i]] = number_or_null(fit.estimates[k]);
    se[fit.names[i]] = k < fit.std_errors.size() ? number_or_null(fit.std_errors[k]) : json(nullptr);
  }
  j["estimates"] = est;
  j["std_errors"] = se;
  if (fit.covariance.size() > 0) {
    json cov = json::array();
    for (Eigen::Index r = 0; r < fit.covariance.rows(); ++r) cov.push_back(vector_json(fit.covariance.row(r)));
    j["covariance"] = cov;
  }
  j["objective"] = number_or_null(fit.objective);
  json trace = json::array();
  for (double v : fit.objective_trace) trace.push_back(number_or_null(v));
  j["objective_trace"] = trace;
  j["iterations"] = fit.iterations;
  j["converged"] = fit.converged;
  j["warnings"] = fit.warnings;
  j["diagnostics"] = fit.diagnostics;
  return j;
}

std::string format_double(double x) { return fmt::format("{:.17g}", x); }

InputFile read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return {path.string(), ss.str()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  out << bytes;
  if (!out) throw InputError(fmt::format("cannot write {}", path.string()));
}

json parse_json(const InputFile& file) {
  try {
    return json::parse(file.bytes);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, file.bytes.size());
    const auto line = 1 + std::count(file.bytes.begin(), file.bytes.begin() + static_cast<long>(upto), '\n');
    const auto nl = file.bytes.rfind('\n', upto == 0 ? 0 : upto - 1);
    const auto col = nl == std::string::npos ? upto + 1 : upto - nl;
    throw InputError(fmt::format("{}:{}:{}: malformed JSON", file.name, line, col));
  }
}

namespace {

const json& field(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object()) throw InputError(fmt::format("{}: expected an object", where));
  auto it = j.find(key);
  if (it == j.end()) throw InputError(fmt::format("{}: missing field '{}'", where, key));
  return *it;
}

int as_int(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw InputError(fmt::format("{}: expected an integer", where));
  return j.get<int>();
}

double as_double(const json& j, const std::string& where) {
  if (!j.is_number()) throw InputError(fmt::format("{}: expected a number", where));
  return j.get<double>();
}

std::string as_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw InputError(fmt::format("{}: expected a string", where));
  return j.get<std::string>();
}

Topology topology_from_json(const json& j, const std::string& where) {
  const int root = as_int(field(j, "root", where), where + ".root");
  const json& edges = field(j, "edges", where);
  if (!edges.is_array()) throw InputError(fmt::format("{}.edges: expected an array", where));
  std::vector<std::pair<NodeId, NodeId>> list;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string w = fmt::format("{}.edges[{}]", where, i);
    const json& e = edges[i];
    if (!e.is_array() || e.size() != 2) throw InputError(fmt::format("{}: expected [parent, child]", w));
    list.emplace_back(as_int(e[0], w), as_int(e[1], w));
  }
  return Topology::from_edges(list, root);
}

FlexicastExperiment experiment_from_json(const json& j, const std::string& where) {
  const json& schemes = field(j, "schemes", where);
  if (!schemes.is_array()) throw InputError(fmt::format("{}.schemes: expected an array", where));
  FlexicastExperiment exp;
  for (std::size_t i = 0; i < schemes.size(); ++i) {
    const std::string w = fmt::format("{}.schemes[{}]", where, i);
    if (!schemes[i].is_array()) throw InputError(fmt::format("{}: expected a receiver list", w));
    Scheme s;
    for (const auto& r : schemes[i]) s.receivers.push_back(as_int(r, w));
    exp.schemes.push_back(std::move(s));
  }
  return exp;
}

NodeId link_key(const std::string& key, const std::string& where) {
  NodeId v = 0;
  auto [p, ec] = std::from_chars(key.data(), key.data() + key.size(), v);
  if (ec != std::errc() || p != key.data() + key.size()) {
    throw InputError(fmt::format("{}: link key '{}' is not an integer", where, key));
  }
  return v;
}

Model model_from_json(const json& j, const std::string& where) {
  const std::string type = as_string(field(j, "type", where), where + ".type");
  const json& links = field(j, "links", where);
  if (!links.is_object()) throw InputError(fmt::format("{}.links: expected an object", where));
  if (type == "loss") {
    LossModel m;
    for (const auto& [k, v] : links.items()) {
      const std::string w = fmt::format("{}.links.{}", where, k);
      m.alpha[link_key(k, w)] = as_double(v, w);
    }
    return m;
  }
  if (type != "delay") {
    throw InputError(fmt::format("{}.type: expected 'loss' or 'delay', got '{}'", where, type));
  }
  DelayModel m;
  for (const auto& [k, v] : links.items()) {
    const std::string w = fmt::format("{}.links.{}", where, k);
    const std::string fam = as_string(field(v, "family", w), w + ".family");
    const NodeId id = link_key(k, w);
    if (fam == "discrete") {
      DiscreteLaw d;
      d.q = as_double(field(v, "q", w), w + ".q");
      const json& pmf = field(v, "pmf", w);
      if (!pmf.is_array()) throw InputError(fmt::format("{}.pmf: expected an array", w));
      for (const auto& p : pmf) d.pmf.push_back(as_double(p, w + ".pmf"));
      m.links[id] = d;
      continue;
    }
    ZeroInflatedLaw z;
    if (v.contains("p_zero")) z.p_zero = as_double(v["p_zero"], w + ".p_zero");
    if (fam == "exp") {
      z.family = ExponentialLaw{as_double(field(v, "rate", w), w + ".rate")};
    } else if (fam == "gamma") {
      z.family = GammaLaw{as_double(field(v, "shape", w), w + ".shape"),
                          as_double(field(v, "scale", w), w + ".scale")};
    } else if (fam == "uniform") {
      z.family = UniformLaw{as_double(field(v, "upper", w), w + ".upper")};
    } else {
      throw InputError(fmt::format("{}.family: unknown family '{}'", w, fam));
    }
    m.links[id] = z;
  }
  return m;
}

// Minimal CSV reader: comma separated, double quotes around fields that
// contain commas.
std::vector<std::vector<std::string>> csv_rows(const InputFile& file,
                                               const std::vector<std::string>& header) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(file.bytes);
  std::string line;
  int lineno = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') {
        quoted = !quoted;
      } else if (c == ',' && !quoted) {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (quoted) throw InputError(fmt::format("{}:{}: unterminated quote", file.name, lineno));
    cells.push_back(cur);
    if (!seen_header) {
      if (cells != header) {
        throw InputError(fmt::format("{}:{}: expected header '{}'", file.name, lineno,
                                     fmt::join(header, ",")));
      }
      seen_header = true;
      continue;
    }
    if (cells.size() != header.size()) {
      throw InputError(fmt::format("{}:{}: expected {} fields, got {}", file.name, lineno,
                                   header.size(), cells.size()));
    }
    cells.push_back(std::to_string(lineno));  // kept for diagnostics
    rows.push_back(std::move(cells));
  }
  if (!seen_header) throw InputError(fmt::format("{}: empty file", file.name));
  return rows;
}

template <class T>
T parse_number(const std::string& s, const InputFile& file, const std::string& lineno,
               const char* what) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw InputError(fmt::format("{}:{}: invalid {} '{}'", file.name, lineno, what, s));
  }
  return v;
}

}  // namespace

Topology parse_topology(const InputFile& file) {
  return topology_from_json(parse_json(file), file.name);
}

json topology_json(const Topology& topology) {
  json edges = json::array();
  for (auto [p, c] : topology.edges()) edges.push_back({p, c});
  return {{"root", topology.root()}, {"edges", edges}};
}

FlexicastExperiment parse_experiment(const InputFile& file) {
  return experiment_from_json(parse_json(file), file.name);
}

json experiment_json(const FlexicastExperiment& experiment) {
  json schemes = json::array();
  for (const auto& s : experiment.schemes) schemes.push_back(s.receivers);
  return {{"schemes", schemes}};
}

Model parse_model(const InputFile& file) { return model_from_json(parse_json(file), file.name); }

json model_json(const Model& model) {
  json links = json::object();
  if (const auto* lm = std::get_if<LossModel>(&model)) {
    for (auto [k, a] : lm->alpha) links[std::to_string(k)] = a;
    return {{"type", "loss"}, {"links", links}};
  }
  for (const auto& [k, law] : std::get<DelayModel>(model).links) {
    json l;
    if (const auto* d = std::get_if<DiscreteLaw>(&law)) {
      l = {{"family", "discrete"}, {"q", d->q}, {"pmf", d->pmf}};
    } else {
      const auto& z = std::get<ZeroInflatedLaw>(law);
      if (const auto* e = std::get_if<ExponentialLaw>(&z.family)) {
        l = {{"family", "exp"}, {"rate", e->rate}};
      } else if (const auto* g = std::get_if<GammaLaw>(&z.family)) {
        l = {{"family", "gamma"}, {"shape", g->shape}, {"scale", g->scale}};
      } else {
        l = {{"family", "uniform"}, {"upper", std::get<UniformLaw>(z.family).upper}};
      }
      l["p_zero"] = z.p_zero;
    }
    links[std::to_string(k)] = l;
  }
  return {{"type", "delay"}, {"links", links}};
}

std::string loss_csv(const LossObservations& obs, const FlexicastExperiment& experiment) {
  if (obs.schemes.size() != experiment.schemes.size()) {
    throw InputError("loss observations do not match the experiment");
  }
  std::string out = "scheme_index,outcome_bits,count\n";
  for (std::size_t j = 0; j < obs.schemes.size(); ++j) {
    const std::size_t k = experiment.schemes[j].size();
    for (std::size_t mask = 0; mask < obs.schemes[j].counts.size(); ++mask) {
      out += fmt::format("{},{},{}\n", j, outcome_bits(static_cast<std::uint32_t>(mask), k),
                         obs.schemes[j].counts[mask]);
    }
  }
  return out;
}

LossObservations parse_loss_csv(const InputFile& file, const FlexicastExperiment& experiment) {
  LossObservations obs;
  for (const auto& s : experiment.schemes) {
    if (s.size() > 30) throw InputError("schemes with more than 30 receivers are not supported");
    obs.schemes.push_back({std::vector<std::uint64_t>(std::size_t{1} << s.size(), 0)});
  }
  std::vector<std::vector<bool>> seen(obs.schemes.size());
  for (std::size_t j = 0; j < obs.schemes.size(); ++j) seen[j].assign(obs.schemes[j].counts.size(), false);
  for (const auto& row : csv_rows(file, {"scheme_index", "outcome_bits", "count"})) {
    const std::string& ln = row[3];
    const auto j = parse_number<std::size_t>(row[0], file, ln, "scheme_index");
    if (j >= obs.schemes.size()) throw InputError(fmt::format("{}:{}: scheme {} not in experiment", file.name, ln, j));
    if (row[1].size() != experiment.schemes[j].size()) {
      throw InputError(fmt::format("{}:{}: outcome_bits '{}' should have {} characters", file.name,
                                   ln, row[1], experiment.schemes[j].size()));
    }
    std::uint32_t mask = 0;
    try {
      mask = parse_outcome_bits(row[1]);
    } catch (const InputError& e) {
      throw InputError(fmt::format("{}:{}: {}", file.name, ln, e.what()));
    }
    if (seen[j][mask]) throw InputError(fmt::format("{}:{}: duplicate outcome", file.name, ln));
    seen[j][mask] = true;
    obs.schemes[j].counts[mask] = parse_number<std::uint64_t>(row[2], file, ln, "count");
  }
  return obs;
}

std::string delay_csv(const DelayObservations& obs, const FlexicastExperiment& experiment) {
  if (obs.schemes.size() != experiment.schemes.size()) {
    throw InputError("delay observations do not match the experiment");
  }
  std::string out = "scheme_index,probe_index,receiver_id,delay_seconds\n";
  for (std::size_t j = 0; j < obs.schemes.size(); ++j) {
    const auto& Y = obs.schemes[j];
    for (Eigen::Index p = 0; p < Y.rows(); ++p) {
      for (Eigen::Index c = 0; c < Y.cols(); ++c) {
        out += fmt::format("{},{},{},{}\n", j, p,
                           experiment.schemes[j].receivers[static_cast<std::size_t>(c)],
                           format_double(Y(p, c)));
      }
    }
  }
  return out;
}

DelayObservations parse_delay_csv(const InputFile& file, const FlexicastExperiment& experiment) {
  const std::size_t S = experiment.schemes.size();
  // scheme -> probe -> per-receiver delays (NaN until seen)
  std::vector<std::map<std::uint64_t, std::vector<double>>> probes(S);
  for (const auto& row : csv_rows(file, {"scheme_index", "probe_index", "receiver_id", "delay_seconds"})) {
    const std::string& ln = row[4];
    const auto j = parse_number<std::size_t>(row[0], file, ln, "scheme_index");
    if (j >= S) throw InputError(fmt::format("{}:{}: scheme {} not in experiment", file.name, ln, j));
    const auto p = parse_number<std::uint64_t>(row[1], file, ln, "probe_index");
    const auto r = parse_number<NodeId>(row[2], file, ln, "receiver_id");
    const double y = parse_number<double>(row[3], file, ln, "delay_seconds");
    if (!(y >= 0.0) || !std::isfinite(y)) {
      throw InputError(fmt::format("{}:{}: delay must be finite and >= 0", file.name, ln));
    }
    const auto& rs = experiment.schemes[j].receivers;
    auto it = std::ranges::find(rs, r);
    if (it == rs.end()) {
      throw InputError(fmt::format("{}:{}: receiver {} not in scheme {}", file.name, ln, r, j));
    }
    auto& slot = probes[j].try_emplace(p, std::vector<double>(rs.size(), std::nan(""))).first->second;
    double& cell = slot[static_cast<std::size_t>(it - rs.begin())];
    if (!std::isnan(cell)) throw InputError(fmt::format("{}:{}: duplicate delay", file.name, ln));
    cell = y;
  }
  DelayObservations obs;
  for (std::size_t j = 0; j < S; ++j) {
    const auto k = static_cast<Eigen::Index>(experiment.schemes[j].size());
    Eigen::MatrixXd Y(static_cast<Eigen::Index>(probes[j].size()), k);
    Eigen::Index row = 0;
    for (const auto& [p, ys] : probes[j]) {
      for (Eigen::Index c = 0; c < k; ++c) {
        if (std::isnan(ys[static_cast<std::size_t>(c)])) {
          throw InputError(fmt::format("{}: scheme {} probe {} lacks receiver {}", file.name, j, p,
                                       experiment.schemes[j].receivers[static_cast<std::size_t>(c)]));
        }
        Y(row, c) = ys[static_cast<std::size_t>(c)];
      }
      ++row;
    }
    obs.schemes.push_back(std::move(Y));
  }
  return obs;
}

std::string outcome_table_csv(const std::vector<OutcomeTable>& tables) {
  std::string out = "scheme_index,y_bins,count\n";
  for (std::size_t j = 0; j < tables.size(); ++j) {
    for (const auto& [tuple, n] : tables[j]) {
      out += fmt::format("{},\"{}\",{}\n", j, fmt::join(tuple, ","), n);
    }
  }
  return out;
}

std::vector<OutcomeTable> parse_outcome_table_csv(const InputFile& file,
                                                  const FlexicastExperiment& experiment) {
  std::vector<OutcomeTable> tables(experiment.schemes.size());
  for (const auto& row : csv_rows(file, {"scheme_index", "y_bins", "count"})) {
    const std::string& ln = row[3];
    const auto j = parse_number<std::size_t>(row[0], file, ln, "scheme_index");
    if (j >= tables.size()) throw InputError(fmt::format("{}:{}: scheme {} not in experiment", file.name, ln, j));
    std::vector<int> tuple;
    std::string cell;
    std::istringstream cells(row[1]);
    while (std::getline(cells, cell, ',')) tuple.push_back(parse_number<int>(cell, file, ln, "bin"));
    if (tuple.size() != experiment.schemes[j].size()) {
      throw InputError(fmt::format("{}:{}: y_bins needs {} entries", file.name, ln,
                                   experiment.schemes[j].size()));
    }
    if (tables[j].contains(tuple)) throw InputError(fmt::format("{}:{}: duplicate tuple", file.name, ln));
    tables[j][tuple] = parse_number<std::uint64_t>(row[2], file, ln, "count");
  }
  return tables;
}

std::vector<MomentDescriptor> parse_descriptors(const InputFile& file) {
  const json j = parse_json(file);
  if (!j.is_array()) throw InputError(fmt::format("{}: expected a list of descriptors", file.name));
  std::vector<MomentDescriptor> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string w = fmt::format("{}[{}]", file.name, i);
    MomentDescriptor d;
    d.scheme = static_cast<std::size_t>(as_int(field(j[i], "scheme", w), w + ".scheme"));
    d.kind = parse_moment_kind(as_string(field(j[i], "kind", w), w + ".kind"));
    const json& rs = field(j[i], "receivers", w);
    const std::size_t need = (d.kind == MomentKind::Mean || d.kind == MomentKind::Var) ? 1 : 2;
    if (!rs.is_array() || rs.size() != need) {
      throw InputError(fmt::format("{}.receivers: expected {} receiver(s)", w, need));
    }
    d.r = as_int(rs[0], w + ".receivers");
    d.s = need == 2 ? as_int(rs[1], w + ".receivers") : d.r;
    out.push_back(d);
  }
  return out;
}

StudyConfig parse_study_config(const InputFile& file) {
  const json j = parse_json(file);
  const std::string& w = file.name;
  StudyConfig c{topology_from_json(field(j, "topology", w), w + ".topology"),
                experiment_from_json(field(j, "experiment", w), w + ".experiment"),
                {}};
  const Model m = model_from_json(field(j, "model", w), w + ".model");
  if (!std::holds_alternative<DelayModel>(m)) throw InputError(w + ".model: expected a delay model");
  c.model = std::get<DelayModel>(m);
  if (j.contains("replications")) c.replications = as_int(j["replications"], w + ".replications");
  if (j.contains("probes")) {
    const int n = as_int(j["probes"], w + ".probes");
    if (n < 0) throw InputError(w + ".probes: must be positive");
    c.probes = static_cast<std::uint64_t>(n);
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw InputError(w + ".seed: expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("tol")) c.tol = as_double(j["tol"], w + ".tol");
  if (j.contains("estimators")) {
    c.estimators.clear();
    for (const auto& e : j["estimators"]) c.estimators.push_back(parse_estimator(as_string(e, w + ".estimators")));
  }
  c.validate();
  return c;
}

}  // namespace tomolab
