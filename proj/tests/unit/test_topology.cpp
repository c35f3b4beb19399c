#include <doctest.h>

#include "oracles.hpp"
#include "tomolab/error.hpp"
#include "tomolab/topology.hpp"

using namespace tomolab;

namespace {
std::set<NodeId> as_set(const std::vector<NodeId>& v) { return {v.begin(), v.end()}; }

FlexicastExperiment identifiable_design() {
  return {{Scheme{{2, 3}}, Scheme{{6, 12}}, Scheme{{13, 14}}, Scheme{{8, 15}}, Scheme{{9, 10}},
           Scheme{{11}}}};
}

FlexicastExperiment design_missing_node_4() {
  return {{Scheme{{2, 3}}, Scheme{{6}}, Scheme{{12, 13, 14, 15}}, Scheme{{8, 9, 10, 11}}}};
}
}  // namespace

TEST_CASE("two-layer tree classification") {
  const Topology t = oracle::two_layer();
  CHECK(as_set(t.receivers()) == std::set<NodeId>{2, 3});
  CHECK(as_set(t.internals()) == std::set<NodeId>{1});
  CHECK(t.links() == std::vector<NodeId>{1, 2, 3});
  CHECK(t.path(0, 2) == std::vector<NodeId>{1, 2});
  CHECK(t.path(0, 0).empty());
}

TEST_CASE("larger tree classification and paths") {
  const Topology t = oracle::wide_tree();
  CHECK(as_set(t.receivers()) == std::set<NodeId>{2, 3, 6, 8, 9, 10, 11, 12, 13, 14, 15});
  CHECK(as_set(t.internals()) == std::set<NodeId>{1, 4, 5, 7});
  // 12 hangs below 7, which hangs below 4.
  CHECK(t.path(0, 12) == std::vector<NodeId>{1, 4, 7, 12});
  CHECK(t.path(4, 12) == std::vector<NodeId>{7, 12});
  CHECK(t.depth(12) == 4);
  CHECK(t.lowest_common_ancestor(6, 12) == 4);
  CHECK(t.lowest_common_ancestor(2, 12) == 1);
  CHECK_THROWS_AS((void)t.path(5, 12), InputError);
  for (NodeId r : t.receivers()) CHECK(t.path_from_root(r) == oracle::root_path(t, r));
}

TEST_CASE("single link chain") {
  const Topology t = oracle::tree({{0, 1}});
  CHECK(t.receivers() == std::vector<NodeId>{1});
  CHECK(t.internals().empty());
}

TEST_CASE("malformed trees are rejected") {
  using E = std::vector<std::pair<NodeId, NodeId>>;
  CHECK_THROWS_AS(oracle::tree(E{{0, 1}, {1, 2}}), InputError);            // one child
  CHECK_THROWS_AS(oracle::tree(E{{0, 1}, {1, 2}, {1, 3}, {2, 3}}), InputError);  // two parents
  CHECK_THROWS_AS(oracle::tree(E{{0, 1}, {2, 3}, {3, 2}}), InputError);    // cycle
  CHECK_THROWS_AS(oracle::tree(E{{0, 1}, {1, 0}}), InputError);            // edge into root
  CHECK_THROWS_AS(oracle::tree(E{}), InputError);
}

TEST_CASE("splitting nodes") {
  const Topology t = oracle::wide_tree();
  CHECK(splitting_nodes(t, Scheme{{6, 12}}) == std::set<NodeId>{4});
  CHECK(splitting_nodes(t, Scheme{{12, 13, 14, 15}}) == std::set<NodeId>{7});
  CHECK(splitting_nodes(t, Scheme{{2, 12}}) == std::set<NodeId>{1});
  for (NodeId r : t.receivers()) CHECK(splitting_nodes(t, Scheme{{r}}).empty());
  // Full multicast splits at every internal node.
  CHECK(splitting_nodes(t, Scheme{t.receivers()}) == as_set(t.internals()));
}

TEST_CASE("splitting nodes lie on scheme paths and are internal") {
  const Topology t = oracle::wide_tree();
  const auto rs = t.receivers();
  for (std::size_t i = 0; i < rs.size(); ++i) {
    for (std::size_t j = i + 1; j < rs.size(); ++j) {
      const Scheme s{{rs[i], rs[j]}};
      for (NodeId v : splitting_nodes(t, s)) {
        CHECK(t.is_internal(v));
        CHECK(t.is_ancestor(v, rs[i]));
        CHECK(t.is_ancestor(v, rs[j]));
      }
    }
  }
}

TEST_CASE("identifiability verdicts") {
  const Topology t = oracle::wide_tree();
  CHECK(check_identifiability(t, identifiable_design()).identifiable());

  const auto bad = check_identifiability(t, design_missing_node_4());
  CHECK_FALSE(bad.identifiable());
  CHECK(bad.non_splitting_internals.contains(4));
  CHECK(bad.uncovered_receivers.empty());

  const auto unicast = check_identifiability(oracle::two_layer(), {{Scheme{{2}}, Scheme{{3}}}});
  CHECK(unicast.non_splitting_internals == std::set<NodeId>{1});

  const auto partial = check_identifiability(oracle::two_layer(), {{Scheme{{2}}}});
  CHECK(partial.uncovered_receivers == std::set<NodeId>{3});
}

TEST_CASE("adding a scheme never removes a satisfied condition") {
  const Topology t = oracle::wide_tree();
  FlexicastExperiment exp = design_missing_node_4();
  auto before = check_identifiability(t, exp);
  exp.schemes.push_back(Scheme{{6, 13}});
  auto after = check_identifiability(t, exp);
  for (NodeId v : after.non_splitting_internals) CHECK(before.non_splitting_internals.contains(v));
  CHECK(after.identifiable());
}

TEST_CASE("experiment validation") {
  const Topology t = oracle::two_layer();
  CHECK_THROWS_AS((FlexicastExperiment{{Scheme{{1}}}}.validate(t)), InputError);  // not a receiver
  CHECK_THROWS_AS((FlexicastExperiment{{Scheme{{2, 2}}}}.validate(t)), InputError);
  CHECK_THROWS_AS((FlexicastExperiment{{Scheme{{}}}}.validate(t)), InputError);
  CHECK_THROWS_AS((FlexicastExperiment{}.validate(t)), InputError);
}
