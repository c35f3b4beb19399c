#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "tomolab/error.hpp"
#include "tomolab/study.hpp"

using namespace tomolab;

namespace {
StudyConfig small_study(unsigned threads) {
  StudyConfig c = two_layer_exponential_study(2.0, 4.0, 6.0);
  c.replications = 30;
  c.probes = 400;
  c.seed = 17;
  c.threads = threads;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}
}  // namespace

TEST_CASE("quantiles interpolate linearly") {
  CHECK(quantile({4, 1, 3, 2}, 0.25) == doctest::Approx(1.75));
  CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
  CHECK(quantile({7}, 0.3) == 7.0);
}

TEST_CASE("estimator names") {
  for (Estimator e : {Estimator::MLE, Estimator::OLS, Estimator::GLS}) CHECK(parse_estimator(estimator_name(e)) == e);
  CHECK_THROWS_AS(parse_estimator("lasso"), InputError);
}

TEST_CASE("study configuration checks") {
  StudyConfig c = small_study(1);
  c.replications = 1;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = small_study(1);
  c.estimators = {Estimator::OLS};
  CHECK_THROWS_AS(c.validate(), InputError);
  c = small_study(1);
  c.model.links[2] = ZeroInflatedLaw{0.0, GammaLaw{2, 1}};
  CHECK_THROWS_AS(c.validate(), InputError);
  c = small_study(1);
  c.experiment = {{Scheme{{2}}, Scheme{{3}}}};
  CHECK_THROWS_AS(c.validate(), InputError);
}

TEST_CASE("small efficiency study") {
  const StudyResult r = run_efficiency_study(small_study(1));
  REQUIRE(r.summaries.size() == 3);
  CHECK(r.parameters == std::vector<std::string>{"rate[1]", "rate[2]", "rate[3]"});
  CHECK(r.truth.isApprox(Eigen::Vector3d(2, 4, 6)));
  const auto& mle = r.summaries[0];
  CHECK(mle.estimator == Estimator::MLE);
  for (Eigen::Index k = 0; k < 3; ++k) {
    CHECK(mle.relative_efficiency[k] == 1.0);
    CHECK(std::isfinite(r.summaries[1].relative_efficiency[k]));
    CHECK(r.summaries[1].relative_efficiency[k] > 0.5);
  }

  // Summary statistics recomputed from the per-replication table.
  for (std::size_t e = 0; e < r.summaries.size(); ++e) {
    const auto& s = r.summaries[e];
    for (Eigen::Index k = 0; k < 3; ++k) {
      std::vector<double> xs;
      for (const auto& est : r.estimates[e]) {
        if (est) xs.push_back((*est)[k]);
      }
      double m = 0.0;
      for (double x : xs) m += x / static_cast<double>(xs.size());
      CHECK(s.mean[k] == doctest::Approx(m).epsilon(1e-12));
      CHECK(s.bias[k] == doctest::Approx(m - r.truth[k]).epsilon(1e-10));
      CHECK(s.quartiles(k, 1) == doctest::Approx(quantile(xs, 0.5)).epsilon(1e-14));
      CHECK(s.quartiles(k, 0) <= s.quartiles(k, 1));
      CHECK(s.quartiles(k, 1) <= s.quartiles(k, 2));
    }
  }
}

TEST_CASE("results do not depend on the thread count") {
  const StudyResult a = run_efficiency_study(small_study(1));
  const StudyResult b = run_efficiency_study(small_study(3));
  REQUIRE(a.estimates.size() == b.estimates.size());
  for (std::size_t e = 0; e < a.estimates.size(); ++e) {
    for (std::size_t i = 0; i < a.estimates[e].size(); ++i) {
      REQUIRE(a.estimates[e][i].has_value() == b.estimates[e][i].has_value());
      if (a.estimates[e][i]) CHECK((*a.estimates[e][i] - *b.estimates[e][i]).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  CHECK(summary_json(a).dump() == summary_json(b).dump());
}

TEST_CASE("report files") {
  const StudyResult r = run_efficiency_study(small_study(1));
  const auto dir = std::filesystem::temp_directory_path() / "tomolab_study_report";
  std::filesystem::remove_all(dir);
  emit_report(r, dir);

  std::ifstream csv(dir / "estimates.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "replication,estimator,parameter,estimate");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 30 * 3 * 3);

  const auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(j == summary_json(r));
  CHECK(j.at("replications") == 30);
  CHECK(j.at("estimators").size() == 3);
  std::filesystem::remove_all(dir);
}
