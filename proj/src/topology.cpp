#include "tomolab/topology.hpp"

#include <algorithm>
#include <deque>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tomolab/error.hpp"

namespace tomolab {

namespace {
const std::vector<NodeId> kNoChildren;
}

Topology Topology::from_edges(std::span<const std::pair<NodeId, NodeId>> edges, NodeId root) {
  if (edges.empty()) {
    throw InputError("topology has no edges");
  }
  Topology t;
  t.root_ = root;
  std::set<NodeId> all{root};
  for (const auto& [p, c] : edges) {
    if (p < 0 || c < 0) {
      throw InputError(fmt::format("negative node id in edge ({}, {})", p, c));
    }
    if (c == root) {
      throw InputError(fmt::format("root {} cannot have a parent (edge ({}, {}))", root, p, c));
    }
    if (p == c) {
      throw InputError(fmt::format("self loop at node {}", p));
    }
    if (auto [it, inserted] = t.parent_.emplace(c, p); !inserted) {
      throw InputError(fmt::format("node {} has multiple parents ({} and {})", c, it->second, p));
    }
    t.children_[p].push_back(c);
    all.insert(p);
    all.insert(c);
  }
  for (auto& [v, kids] : t.children_) {
    std::ranges::sort(kids);
  }

  // Breadth-first from the root; anything not reached sits on a cycle.
  std::deque<NodeId> queue{root};
  t.depth_[root] = 0;
  while (!queue.empty()) {
    NodeId v = queue.front();
    queue.pop_front();
    for (NodeId c : t.children(v)) {
      t.depth_[c] = t.depth_[v] + 1;
      queue.push_back(c);
    }
  }
  if (t.depth_.size() != all.size()) {
    std::vector<NodeId> stray;
    for (NodeId v : all) {
      if (!t.depth_.contains(v)) stray.push_back(v);
    }
    throw InputError(fmt::format("cycle detected or nodes unreachable from root {}: {}", root,
                                 fmt::join(stray, ",")));
  }

  t.nodes_.assign(all.begin(), all.end());
  for (NodeId v : t.nodes_) {
    if (v == root) continue;
    t.links_.push_back(v);
    const auto n_children = t.children(v).size();
    if (n_children == 0) {
      t.receivers_.push_back(v);
    } else if (n_children == 1) {
      throw InputError(fmt::format("internal node {} has a single child; logical topologies need "
                                   "at least two",
                                   v));
    } else {
      t.internals_.push_back(v);
    }
  }
  return t;
}

bool Topology::is_receiver(NodeId v) const {
  return std::ranges::binary_search(receivers_, v);
}

bool Topology::is_internal(NodeId v) const {
  return std::ranges::binary_search(internals_, v);
}

std::optional<NodeId> Topology::parent(NodeId v) const {
  if (auto it = parent_.find(v); it != parent_.end()) return it->second;
  return std::nullopt;
}

const std::vector<NodeId>& Topology::children(NodeId v) const {
  if (auto it = children_.find(v); it != children_.end()) return it->second;
  return kNoChildren;
}

int Topology::depth(NodeId v) const {
  auto it = depth_.find(v);
  if (it == depth_.end()) throw InputError(fmt::format("unknown node {}", v));
  return it->second;
}

bool Topology::is_ancestor(NodeId a, NodeId b) const {
  if (!contains(a) || !contains(b)) return false;
  for (std::optional<NodeId> v = b; v; v = parent(*v)) {
    if (*v == a) return true;
  }
  return false;
}

NodeId Topology::lowest_common_ancestor(NodeId a, NodeId b) const {
  int da = depth(a);
  int db = depth(b);
  while (da > db) { a = parent_.at(a); --da; }
  while (db > da) { b = parent_.at(b); --db; }
  while (a != b) {
    a = parent_.at(a);
    b = parent_.at(b);
  }
  return a;
}

std::vector<NodeId> Topology::path(NodeId a, NodeId b) const {
  if (!is_ancestor(a, b)) {
    throw InputError(fmt::format("node {} is not an ancestor of node {}", a, b));
  }
  std::vector<NodeId> links;
  for (NodeId v = b; v != a; v = parent_.at(v)) links.push_back(v);
  std::ranges::reverse(links);
  return links;
}

std::vector<std::pair<NodeId, NodeId>> Topology::edges() const {
  std::vector<std::pair<NodeId, NodeId>> out;
  for (NodeId v : links_) out.emplace_back(parent_.at(v), v);
  return out;
}

void FlexicastExperiment::validate(const Topology& topology) const {
  if (schemes.empty()) throw InputError("experiment has no schemes");
  for (std::size_t j = 0; j < schemes.size(); ++j) {
    const auto& r = schemes[j].receivers;
    if (r.empty()) throw InputError(fmt::format("scheme {} is empty", j));
    std::set<NodeId> seen;
    for (NodeId v : r) {
      if (!topology.is_receiver(v)) {
        throw InputError(fmt::format("scheme {}: node {} is not a receiver", j, v));
      }
      if (!seen.insert(v).second) {
        throw InputError(fmt::format("scheme {}: receiver {} listed twice", j, v));
      }
    }
  }
}

std::vector<NodeId> scheme_links(const Topology& topology, const Scheme& scheme) {
  std::set<NodeId> links;
  for (NodeId r : scheme.receivers) {
    for (NodeId k : topology.path_from_root(r)) links.insert(k);
  }
  return {links.begin(), links.end()};
}

std::set<NodeId> splitting_nodes(const Topology& topology, const Scheme& scheme) {
  // Count, for every node on a scheme path, which of its children lead to a
  // scheme receiver.
  std::map<NodeId, std::set<NodeId>> branches;
  for (NodeId r : scheme.receivers) {
    NodeId child = r;
    for (auto p = topology.parent(r); p; child = *p, p = topology.parent(*p)) {
      branches[*p].insert(child);
    }
  }
  std::set<NodeId> out;
  for (const auto& [v, kids] : branches) {
    if (kids.size() >= 2 && topology.is_internal(v)) out.insert(v);
  }
  return out;
}

IdentifiabilityReport check_identifiability(const Topology& topology,
                                            const FlexicastExperiment& experiment) {
  IdentifiabilityReport report;
  std::set<NodeId> covered;
  std::set<NodeId> split;
  for (const auto& s : experiment.schemes) {
    covered.insert(s.receivers.begin(), s.receivers.end());
    auto sn = splitting_nodes(topology, s);
    split.insert(sn.begin(), sn.end());
  }
  for (NodeId r : topology.receivers()) {
    if (!covered.contains(r)) report.uncovered_receivers.insert(r);
  }
  for (NodeId v : topology.internals()) {
    if (!split.contains(v)) report.non_splitting_internals.insert(v);
  }
  report.covered = report.uncovered_receivers.empty();
  return report;
}

}  // namespace tomolab
