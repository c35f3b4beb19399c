#include <doctest.h>

#include <cmath>
#include <bit>
#include <random>

#include "oracles.hpp"
#include "tomolab/error.hpp"
#include "tomolab/loss_em.hpp"

using namespace tomolab;

namespace {
const FlexicastExperiment kBicast{{Scheme{{2, 3}}}};

// counts[mask]: 00, 10, 01, 11 in mask order
LossObservations bicast_counts(std::uint64_t n11, std::uint64_t n10, std::uint64_t n01,
                               std::uint64_t n00) {
  return {{SchemeCounts{{n00, n10, n01, n11}}}};
}
}  // namespace

TEST_CASE("outcome probabilities agree with enumeration") {
  const Topology t = oracle::two_layer();
  const LossParams p{{{1, 0.9}, {2, 0.8}, {3, 0.8}}};
  const auto got = outcome_probs(t, Scheme{{2, 3}}, p);
  CHECK(got[3] == doctest::Approx(0.576).epsilon(1e-13));
  CHECK(got[1] == doctest::Approx(0.144).epsilon(1e-13));
  CHECK(got[2] == doctest::Approx(0.144).epsilon(1e-13));
  CHECK(got[0] == doctest::Approx(0.136).epsilon(1e-13));

  const Topology f = oracle::wide_tree();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  LossParams q;
  for (NodeId l : f.links()) q.alpha[l] = u(rng);
  for (const Scheme& s : {Scheme{{12}}, Scheme{{2, 12}}, Scheme{{6, 12, 13}}, Scheme{{8, 9, 12, 13, 14}}}) {
    const auto a = outcome_probs(f, s, q);
    const auto b = oracle::loss_outcome_probs(f, s, q.alpha);
    REQUIRE(a.size() == b.size());
    double sum = 0.0;
    for (std::size_t y = 0; y < a.size(); ++y) {
      CHECK(std::abs(a[y] - b[y]) < 1e-14);
      sum += a[y];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("unicast and lossless outcome probabilities") {
  const Topology f = oracle::wide_tree();
  LossParams q;
  for (NodeId l : f.links()) q.alpha[l] = 0.9 + 0.005 * l;
  const double expect = q.alpha[1] * q.alpha[4] * q.alpha[7] * q.alpha[12];
  CHECK(outcome_probs(f, Scheme{{12}}, q)[1] == doctest::Approx(expect).epsilon(1e-14));
  for (NodeId l : f.links()) q.alpha[l] = 1.0;
  CHECK(outcome_probs(f, Scheme{{12, 13, 14}}, q)[7] == 1.0);
}

TEST_CASE("enumeration budget") {
  std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}};
  std::vector<NodeId> leaves;
  for (NodeId v = 2; v < 24; ++v) {
    edges.emplace_back(1, v);
    leaves.push_back(v);
  }
  const Topology t = oracle::tree(edges);
  LossParams p;
  for (NodeId l : t.links()) p.alpha[l] = 0.9;
  CHECK_THROWS_AS(outcome_probs(t, Scheme{leaves}, p), EstimationError);
}

TEST_CASE("bicast log-likelihood") {
  const Topology t = oracle::two_layer();
  const auto counts = bicast_counts(560, 140, 140, 160);
  const LossParams p{{{1, 0.875}, {2, 0.8}, {3, 0.8}}};
  const double expect = 560 * std::log(0.56) + 280 * std::log(0.14) + 160 * std::log(0.16);
  CHECK(loss_loglik(t, kBicast, counts, p) == doctest::Approx(expect).epsilon(1e-13));

  const Topology one = oracle::tree({{0, 1}});
  CHECK(loss_loglik(one, {{Scheme{{1}}}}, {{SchemeCounts{{0, 50}}}}, LossParams{{{1, 1.0}}}) == 0.0);
  CHECK(std::isinf(loss_loglik(one, {{Scheme{{1}}}}, {{SchemeCounts{{3, 50}}}}, LossParams{{{1, 1.0}}})));
  CHECK_THROWS_AS(loss_loglik(t, kBicast, {{SchemeCounts{{1, 2}}}}, p), InputError);
}

TEST_CASE("closed-form bicast maximum") {
  const Topology t = oracle::two_layer();
  const auto counts = bicast_counts(560, 140, 140, 160);
  const auto mle = oracle::bicast_loss_mle(560, 140, 140, 160);
  CHECK(mle[0] == doctest::Approx(0.875));

  const auto fit = em_fit(t, kBicast, counts, default_loss_init(t, kBicast));
  CHECK(fit.fit.converged);
  CHECK(std::abs(fit.params.alpha.at(1) - mle[0]) < 1e-6);
  CHECK(std::abs(fit.params.alpha.at(2) - mle[1]) < 1e-6);
  CHECK(std::abs(fit.params.alpha.at(3) - mle[2]) < 1e-6);
  CHECK(fit.fit.names == std::vector<std::string>{"alpha[1]", "alpha[2]", "alpha[3]"});

  const auto& tr = fit.fit.objective_trace;
  for (std::size_t i = 1; i < tr.size(); ++i) CHECK(tr[i] >= tr[i - 1] - 1e-12);

  // Moving off the maximum lowers the likelihood.
  const double best = loss_loglik(t, kBicast, counts, fit.params);
  for (NodeId l : {1, 2, 3}) {
    for (double d : {-1e-3, 1e-3}) {
      LossParams q = fit.params;
      q.alpha[l] += d;
      CHECK(loss_loglik(t, kBicast, counts, q) < best);
    }
  }
}

TEST_CASE("moment identities at the EM limit") {
  const Topology t = oracle::two_layer();
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> c(50, 500);
  int interior = 0;
  for (int rep = 0; rep < 10; ++rep) {
    const double n11 = c(rng) * 3, n10 = c(rng), n01 = c(rng), n00 = c(rng);
    const auto counts = bicast_counts(static_cast<std::uint64_t>(n11), static_cast<std::uint64_t>(n10),
                                      static_cast<std::uint64_t>(n01), static_cast<std::uint64_t>(n00));
    EmOptions o;
    o.tol = 1e-13;
    const auto fit = em_fit(t, kBicast, counts, default_loss_init(t, kBicast), o);
    const double n = n11 + n10 + n01 + n00;
    const auto& a = fit.params.alpha;
    // The identities hold only when the maximum is interior.
    const auto mle = oracle::bicast_loss_mle(n11, n10, n01, n00);
    if (*std::max_element(mle.begin(), mle.end()) >= 1.0) continue;
    ++interior;
    CHECK(std::abs(a.at(1) * a.at(2) - (n11 + n10) / n) < 1e-9);
    CHECK(std::abs(a.at(1) * a.at(3) - (n11 + n01) / n) < 1e-9);
    CHECK(std::abs(a.at(1) * a.at(2) * a.at(3) - n11 / n) < 1e-9);
  }
  CHECK(interior >= 3);
}

TEST_CASE("general EM reproduces the closed-form iterates") {
  const Topology t = oracle::wide_tree();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.6, 0.99);
  const auto rs = t.receivers();
  std::uniform_int_distribution<std::size_t> pick(0, rs.size() - 1);
  for (int rep = 0; rep < 20; ++rep) {
    NodeId a = rs[pick(rng)], b = rs[pick(rng)];
    while (b == a) b = rs[pick(rng)];
    const FlexicastExperiment exp{{Scheme{{a, b}}, Scheme{{rs[pick(rng)]}}}};
    LossModel m;
    for (NodeId l : t.links()) m.alpha[l] = u(rng);
    const auto counts = simulate_loss(t, m, exp, 2000, 100 + static_cast<std::uint64_t>(rep));
    EmOptions o;
    o.record_iterates = true;
    o.max_iter = 200;
    const auto init = default_loss_init(t, exp);
    const auto f1 = em_fit_bicast_unicast(t, exp, counts, init, o);
    const auto f2 = em_fit_general(t, exp, counts, init, o);
    REQUIRE(f1.fit.iterates.size() == f2.fit.iterates.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < f1.fit.iterates.size(); ++i) {
      worst = std::max(worst, (f1.fit.iterates[i] - f2.fit.iterates[i]).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("general EM ascent and consistency on a multicast tree") {
  const Topology t = oracle::binary_three_layer();
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.7, 0.98);
  LossModel m;
  for (NodeId l : t.links()) m.alpha[l] = u(rng);
  const FlexicastExperiment exp{{Scheme{{4, 5, 6, 7}}}};
  const auto counts = simulate_loss(t, m, exp, 100000, 8);
  const auto fit = em_fit(t, exp, counts, default_loss_init(t, exp));
  CHECK(fit.fit.converged);
  const auto& tr = fit.fit.objective_trace;
  for (std::size_t i = 1; i < tr.size(); ++i) CHECK(tr[i] >= tr[i - 1] - 1e-12);
  for (NodeId l : t.links()) {
    const std::string name = "alpha[" + std::to_string(l) + "]";
    const double se = fit.fit.std_error(name);
    CHECK(std::isfinite(se));
    CHECK(std::abs(fit.fit.value(name) - m.alpha.at(l)) < 4 * se);
  }
}

TEST_CASE("symmetric tricast counts give symmetric estimates") {
  const Topology t = oracle::tree({{0, 1}, {1, 2}, {1, 3}, {1, 4}});
  const FlexicastExperiment exp{{Scheme{{2, 3, 4}}}};
  // counts depend only on the number of receivers reached
  const std::array<std::uint64_t, 4> by_weight{90, 40, 70, 600};
  SchemeCounts sc;
  for (std::uint32_t mask = 0; mask < 8; ++mask) sc.counts.push_back(by_weight[static_cast<std::size_t>(std::popcount(mask))]);
  EmOptions o;
  o.tol = 1e-12;
  const auto fit = em_fit_general(t, exp, {{sc}}, default_loss_init(t, exp), o);
  CHECK(std::abs(fit.params.alpha.at(2) - fit.params.alpha.at(3)) < 1e-10);
  CHECK(std::abs(fit.params.alpha.at(3) - fit.params.alpha.at(4)) < 1e-10);
  CHECK_THROWS_AS(em_fit_bicast_unicast(t, exp, {{sc}}, default_loss_init(t, exp)), InputError);
}

TEST_CASE("unicast binomial estimate and boundary") {
  const Topology one = oracle::tree({{0, 1}});
  const FlexicastExperiment exp{{Scheme{{1}}}};
  const auto fit = em_fit(one, exp, {{SchemeCounts{{100, 900}}}}, LossParams{{{1, 0.5}}});
  CHECK(fit.params.alpha.at(1) == doctest::Approx(0.9).epsilon(1e-12));

  const Topology t = oracle::two_layer();
  const auto all = em_fit(t, kBicast, bicast_counts(1000, 0, 0, 0), default_loss_init(t, kBicast));
  for (NodeId l : {1, 2, 3}) CHECK(all.params.alpha.at(l) > 1.0 - 1e-6);
}

TEST_CASE("non-identifiable designs carry a warning") {
  const Topology t = oracle::two_layer();
  const FlexicastExperiment exp{{Scheme{{2}}, Scheme{{3}}}};
  const auto fit = em_fit(t, exp, {{SchemeCounts{{200, 800}}, SchemeCounts{{300, 700}}}},
                          default_loss_init(t, exp));
  CHECK_FALSE(fit.fit.warnings.empty());
  CHECK(fit.fit.diagnostics.at("confounded_nodes") == nlohmann::json::array({1}));
  // Only path products are identified.
  CHECK(fit.params.alpha.at(1) * fit.params.alpha.at(2) == doctest::Approx(0.8).epsilon(1e-7));
  CHECK(fit.params.alpha.at(1) * fit.params.alpha.at(3) == doctest::Approx(0.7).epsilon(1e-7));
}

TEST_CASE("invalid inputs") {
  const Topology t = oracle::two_layer();
  CHECK_THROWS_AS(em_fit(t, kBicast, bicast_counts(1, 1, 1, 1), LossParams{{{1, 0.9}, {2, 0.9}}}), InputError);
  CHECK_THROWS_AS(em_fit(t, kBicast, bicast_counts(1, 1, 1, 1), LossParams{{{1, 0.9}, {2, 0.9}, {3, 0.0}}}),
                  InputError);
  CHECK_THROWS_AS(em_fit(t, kBicast, LossObservations{}, default_loss_init(t, kBicast)), InputError);
}

TEST_CASE("zero-delay probabilities reduce to the loss EM") {
  const Topology t = oracle::two_layer();
  DelayModel m;
  m.links[1] = ZeroInflatedLaw{0.3, ExponentialLaw{2}};
  m.links[2] = ZeroInflatedLaw{0.5, ExponentialLaw{2}};
  m.links[3] = ZeroInflatedLaw{0.5, ExponentialLaw{2}};
  const auto d = simulate_delay(t, m, kBicast, 100000, 4);
  const auto init = default_loss_init(t, kBicast);
  const auto z = estimate_zero_delay_probs(t, kBicast, d, init);
  const auto ref = em_fit(t, kBicast, zero_delay_indicator_counts(d), init);
  CHECK((z.fit.estimates.array() == ref.fit.estimates.array()).all());
  CHECK(z.fit.objective == ref.fit.objective);
  CHECK(z.fit.names == std::vector<std::string>{"p[1]", "p[2]", "p[3]"});

  // Against truth and against the closed-form bicast maximum.
  const auto indicators = zero_delay_indicator_counts(d);
  const auto& c = indicators.schemes[0].counts;
  const auto mle = oracle::bicast_loss_mle(static_cast<double>(c[3]), static_cast<double>(c[1]),
                                           static_cast<double>(c[2]), static_cast<double>(c[0]));
  const std::array<double, 3> truth{0.3, 0.5, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    CHECK(std::abs(z.fit.estimates[k] - mle[i]) < 1e-6);
    CHECK(std::abs(z.fit.estimates[k] - truth[i]) < 4 * z.fit.std_errors[k]);
  }
}

TEST_CASE("all-zero delays give unit zero probabilities") {
  const Topology t = oracle::two_layer();
  DelayObservations d{{Eigen::MatrixXd::Zero(50, 2)}};
  const auto z = estimate_zero_delay_probs(t, kBicast, d, default_loss_init(t, kBicast));
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(z.fit.estimates[i] > 1.0 - 1e-6);
  CHECK_THROWS_AS(estimate_zero_delay_probs(t, kBicast, DelayObservations{{Eigen::MatrixXd(0, 2)}},
                                            default_loss_init(t, kBicast)),
                  InputError);
}

TEST_CASE("Fisher information matches the numerical curvature") {
  const Topology t = oracle::two_layer();
  const auto counts = bicast_counts(560, 140, 140, 160);
  const LossParams p{{{1, 0.875}, {2, 0.8}, {3, 0.8}}};
  const Eigen::MatrixXd info = loss_fisher_information(t, kBicast, counts, p);
  // At the MLE the observed and expected information coincide for a saturated model.
  const double h = 1e-4;
  auto ll = [&](const Eigen::Vector3d& a) {
    return loss_loglik(t, kBicast, counts, LossParams{{{1, a[0]}, {2, a[1]}, {3, a[2]}}});
  };
  const Eigen::Vector3d a0(0.875, 0.8, 0.8);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Eigen::Vector3d pp = a0, pm = a0, mp = a0, mm = a0;
      pp[i] += h; pp[j] += h;
      pm[i] += h; pm[j] -= h;
      mp[i] -= h; mp[j] += h;
      mm[i] -= h; mm[j] -= h;
      const double hess = (ll(pp) - ll(pm) - ll(mp) + ll(mm)) / (4 * h * h);
      CHECK(-hess == doctest::Approx(info(i, j)).epsilon(1e-4));
    }
  }
}
