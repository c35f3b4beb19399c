#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tomolab/cli.hpp"
#include "tomolab/io.hpp"

using namespace tomolab;
namespace fs = std::filesystem;

namespace {
struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / "tomolab_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string put(const std::string& name, const std::string& text) const {
    write_file(dir / name, text);
    return (dir / name).string();
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& p) { return read_file(p).bytes; }

const char* kTwoLayer = R"({"root": 0, "edges": [[0, 1], [1, 2], [1, 3]]})";
const char* kBicast = R"({"schemes": [[2, 3]]})";
const char* kWideTree = R"({"root": 0, "edges": [[0,1],[1,2],[1,3],[1,4],[1,5],[4,6],[4,7],[5,8],[5,9],[5,10],[5,11],[7,12],[7,13],[7,14],[7,15]]})";
}  // namespace

TEST_CASE("check exit codes") {
  Workspace w;
  const auto topo = w.put("t.json", kWideTree);
  const auto good = w.put("good.json", R"({"schemes": [[2,3],[6,12],[13,14],[8,15],[9,10],[11]]})");
  const auto bad = w.put("bad.json", R"({"schemes": [[2,3],[6],[12,13,14,15],[8,9,10,11]]})");
  auto r = run({"check", "--topology", topo, "--experiment", good});
  CHECK(r.code == 0);
  CHECK(nlohmann::json::parse(r.out).at("identifiable") == true);
  r = run({"check", "--topology", topo, "--experiment", bad});
  CHECK(r.code == 2);
  CHECK(nlohmann::json::parse(r.out).at("non_splitting_internals") == nlohmann::json::array({4}));
  CHECK(r.err.find("4") != std::string::npos);
  CHECK(run({"check", "--topology", w.put("m.json", "{oops"), "--experiment", good}).code == 1);
  CHECK(run({"check", "--topology", topo}).code == 1);
  CHECK(run({"check", "--topology", topo, "--experiment", w.path("missing.json")}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"--version"}).out == std::string(kToolVersion) + "\n");
}

TEST_CASE("simulate is reproducible and writes a manifest") {
  Workspace w;
  const auto topo = w.put("t.json", kTwoLayer);
  const auto exp = w.put("e.json", kBicast);
  const auto model = w.put("m.json", R"({"type": "loss", "links": {"1": 0.9, "2": 0.8, "3": 0.8}})");
  const std::vector<std::string> base{"simulate", "--topology", topo, "--experiment", exp,
                                      "--model", model, "--mode", "loss", "--n", "1000", "--seed", "7"};
  auto a = base;
  a.insert(a.end(), {"--out", w.path("a.csv")});
  auto b = base;
  b.insert(b.end(), {"--out", w.path("b.csv")});
  REQUIRE(run(a).code == 0);
  REQUIRE(run(b).code == 0);
  CHECK(slurp(w.path("a.csv")) == slurp(w.path("b.csv")));

  const auto m = nlohmann::json::parse(slurp(w.path("a.csv") + ".manifest.json"));
  CHECK(m.at("command") == "simulate");
  CHECK(m.at("seed") == 7);
  CHECK(m.at("tool_version") == kToolVersion);
  CHECK(m.at("inputs").size() == 3);
  CHECK(m.at("inputs")[0].at("sha256") == sha256_hex(slurp(topo)));

  auto mismatch = base;
  mismatch[8] = "delay";
  CHECK(run(mismatch).code == 1);
}

TEST_CASE("simulate through the installed binary") {
  Workspace w;
  const auto topo = w.put("t.json", kTwoLayer);
  const auto exp = w.put("e.json", kBicast);
  const auto model = w.put("m.json", R"({"type": "delay", "links": {"1": {"family": "exp", "rate": 2},
      "2": {"family": "gamma", "shape": 2, "scale": 0.2}, "3": {"family": "uniform", "upper": 1}}})");
  std::string cmd_a = std::string(TOMOLAB_BIN) + " simulate --topology " + topo + " --experiment " + exp +
                      " --model " + model + " --mode delay --n 200 --seed 3 --out ";
  REQUIRE(std::system((cmd_a + w.path("x.csv")).c_str()) == 0);
  REQUIRE(std::system((cmd_a + w.path("y.csv")).c_str()) == 0);
  CHECK(slurp(w.path("x.csv")) == slurp(w.path("y.csv")));
  const auto in_process = run({"simulate", "--topology", topo, "--experiment", exp, "--model", model,
                               "--mode", "delay", "--n", "200", "--seed", "3"});
  CHECK(in_process.out == slurp(w.path("x.csv")));
}

TEST_CASE("fit-loss") {
  Workspace w;
  const auto topo = w.put("t.json", kTwoLayer);
  const auto exp = w.put("e.json", kBicast);
  const auto counts = w.put("c.csv", "scheme_index,outcome_bits,count\n0,11,560\n0,10,140\n0,01,140\n0,00,160\n");
  const auto r = run({"fit-loss", "--topology", topo, "--experiment", exp, "--counts", counts});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(std::abs(j.at("alpha").at("1").get<double>() - 0.875) < 1e-6);
  CHECK(std::abs(j.at("alpha").at("2").get<double>() - 0.8) < 1e-6);
  CHECK(j.at("converged") == true);

  const auto capped = run({"fit-loss", "--topology", topo, "--experiment", exp, "--counts", counts,
                           "--max-iter", "2"});
  CHECK(capped.code == 3);
  CHECK(run({"fit-loss", "--topology", topo, "--experiment", exp, "--counts", counts, "--tol", "-1"}).code == 1);
}

TEST_CASE("fit-delay-discrete from a table") {
  Workspace w;
  const auto topo = w.put("t.json", kTwoLayer);
  const auto exp = w.put("e.json", kBicast);
  const auto table = w.put("o.csv", "scheme_index,y_bins,count\n0,\"0,0\",125\n0,\"1,1\",250\n0,\"2,2\",125\n"
                                    "0,\"0,1\",125\n0,\"1,0\",125\n0,\"1,2\",125\n0,\"2,1\",125\n");
  const auto r = run({"fit-delay-discrete", "--topology", topo, "--experiment", exp, "--table", table,
                      "--q", "0.001", "--b", "1"});
  REQUIRE(r.code == 0);
  const auto pmf = nlohmann::json::parse(r.out).at("pmf");
  for (const char* k : {"1", "2", "3"}) CHECK(std::abs(pmf.at(k)[0].get<double>() - 0.5) < 1e-4);
  CHECK(run({"fit-delay-discrete", "--topology", topo, "--experiment", exp, "--table", table}).code == 1);
}

TEST_CASE("fit-delay-mle") {
  Workspace w;
  const auto topo = w.put("t.json", kTwoLayer);
  const auto exp = w.put("e.json", kBicast);
  const auto model = w.put("m.json", R"({"type": "delay", "links": {"1": {"family": "exp", "rate": 2},
      "2": {"family": "exp", "rate": 2}, "3": {"family": "exp", "rate": 2}}})");
  const auto delays = w.path("d.csv");
  REQUIRE(run({"simulate", "--topology", topo, "--experiment", exp, "--model", model, "--mode", "delay",
               "--n", "3000", "--seed", "5", "--out", delays}).code == 0);
  const auto r = run({"fit-delay-mle", "--topology", topo, "--experiment", exp, "--delays", delays});
  REQUIRE(r.code == 0);
  const auto fit = nlohmann::json::parse(r.out).at("fit");
  for (const char* k : {"rate[1]", "rate[2]", "rate[3]"}) {
    CHECK(std::abs(fit.at("estimates").at(k).get<double>() - 2.0) < 4 * fit.at("std_errors").at(k).get<double>());
  }
  const auto empty = w.put("empty.csv", "scheme_index,probe_index,receiver_id,delay_seconds\n");
  CHECK(run({"fit-delay-mle", "--topology", topo, "--experiment", exp, "--delays", empty}).code == 1);
  CHECK(run({"fit-delay-mle", "--topology", topo, "--experiment", exp, "--delays", w.put("z.csv", "")}).code == 1);
  CHECK(run({"fit-delay-mle", "--topology", topo, "--experiment", exp, "--delays", delays, "--family", "uniform"}).code == 1);
}

TEST_CASE("fit-delay-mom recovers uniform links on the four-receiver tree") {
  Workspace w;
  const auto topo = w.put("t.json", R"({"root": 0, "edges": [[0,1],[1,2],[1,3],[3,4],[3,5],[3,6]]})");
  const auto exp = w.put("e.json", R"({"schemes": [[2, 4, 5, 6]]})");
  const std::map<std::string, double> truth{{"1", 0.89}, {"2", 0.79}, {"3", 0.53},
                                            {"4", 1.10}, {"5", 1.09}, {"6", 1.13}};
  nlohmann::json links;
  for (const auto& [k, b] : truth) links[k] = {{"family", "uniform"}, {"upper", b}};
  const auto model = w.put("m.json", nlohmann::json{{"type", "delay"}, {"links", links}}.dump());
  const auto delays = w.path("d.csv");
  REQUIRE(run({"simulate", "--topology", topo, "--experiment", exp, "--model", model, "--mode", "delay",
               "--n", "5000", "--seed", "8", "--out", delays}).code == 0);
  for (const char* weighting : {"ols", "gls"}) {
    const auto r = run({"fit-delay-mom", "--topology", topo, "--experiment", exp, "--delays", delays,
                        "--family", "uniform", "--weighting", weighting, "--out", w.path("fit.json")});
    REQUIRE(r.code == 0);
    const auto fit = nlohmann::json::parse(slurp(w.path("fit.json"))).at("fit");
    for (const auto& [k, b] : truth) {
      const std::string name = "upper[" + k + "]";
      CHECK(std::abs(fit.at("estimates").at(name).get<double>() - b) <
            4 * fit.at("std_errors").at(name).get<double>());
    }
  }
  CHECK(run({"fit-delay-mom", "--topology", topo, "--experiment", exp, "--delays", delays, "--weighting", "wls"}).code == 1);
}

TEST_CASE("study-efficiency writes its report") {
  Workspace w;
  const auto cfg = w.put("s.json", R"({
    "topology": {"root": 0, "edges": [[0, 1], [1, 2], [1, 3]]},
    "experiment": {"schemes": [[2, 3]]},
    "model": {"type": "delay", "links": {"1": {"family": "exp", "rate": 2},
                                         "2": {"family": "exp", "rate": 2},
                                         "3": {"family": "exp", "rate": 2}}},
    "replications": 10, "probes": 300, "seed": 4})");
  const auto out = w.path("study");
  REQUIRE(run({"study-efficiency", "--config", cfg, "--out", out, "--threads", "2"}).code == 0);
  CHECK(fs::exists(fs::path(out) / "estimates.csv"));
  const auto m = nlohmann::json::parse(slurp((fs::path(out) / "manifest.json").string()));
  CHECK(m.at("seed") == 4);
  const auto s = nlohmann::json::parse(slurp((fs::path(out) / "summary.json").string()));
  CHECK(s.at("estimators").at("mle").at("relative_efficiency")[0] == 1.0);
  CHECK(run({"study-efficiency", "--config", cfg}).code == 1);
}
