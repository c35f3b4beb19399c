#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <utility>
#include <vector>

namespace tomolab {

/// Node identifier. A link is named after the node at its terminus, so link
/// ids and non-root node ids share this type.
using NodeId = int;

/// Rooted logical tree. Immutable once built.
class Topology {
 public:
  /// Builds and validates a tree from (parent, child) pairs. Throws
  /// InputError on cycles, multiple parents, unreachable nodes, or an
  /// internal node with a single child.
  static Topology from_edges(std::span<const std::pair<NodeId, NodeId>> edges, NodeId root);

  [[nodiscard]] NodeId root() const { return root_; }
  [[nodiscard]] const std::vector<NodeId>& nodes() const { return nodes_; }
  [[nodiscard]] const std::vector<NodeId>& receivers() const { return receivers_; }
  [[nodiscard]] const std::vector<NodeId>& internals() const { return internals_; }
  /// Every non-root node, ascending.
  [[nodiscard]] const std::vector<NodeId>& links() const { return links_; }

  [[nodiscard]] bool contains(NodeId v) const { return parent_.contains(v) || v == root_; }
  [[nodiscard]] bool is_receiver(NodeId v) const;
  [[nodiscard]] bool is_internal(NodeId v) const;
  [[nodiscard]] std::optional<NodeId> parent(NodeId v) const;
  [[nodiscard]] const std::vector<NodeId>& children(NodeId v) const;
  /// Number of links between the root and v.
  [[nodiscard]] int depth(NodeId v) const;
  [[nodiscard]] bool is_ancestor(NodeId a, NodeId b) const;
  [[nodiscard]] NodeId lowest_common_ancestor(NodeId a, NodeId b) const;

  /// Links from a down to b, ordered root-ward to leaf-ward. Throws
  /// InputError unless a is an ancestor of (or equal to) b.
  [[nodiscard]] std::vector<NodeId> path(NodeId a, NodeId b) const;
  [[nodiscard]] std::vector<NodeId> path_from_root(NodeId v) const { return path(root_, v); }

  [[nodiscard]] std::vector<std::pair<NodeId, NodeId>> edges() const;

 private:
  NodeId root_ = 0;
  std::vector<NodeId> nodes_;
  std::vector<NodeId> receivers_;
  std::vector<NodeId> internals_;
  std::vector<NodeId> links_;
  std::map<NodeId, NodeId> parent_;
  std::map<NodeId, std::vector<NodeId>> children_;
  std::map<NodeId, int> depth_;
};

/// A k-cast scheme: receivers probed simultaneously by one probe.
struct Scheme {
  std::vector<NodeId> receivers;

  [[nodiscard]] std::size_t size() const { return receivers.size(); }
  bool operator==(const Scheme&) const = default;
};

struct FlexicastExperiment {
  std::vector<Scheme> schemes;

  /// Checks every scheme against the topology (non-empty, distinct
  /// receivers, receivers only). Throws InputError.
  void validate(const Topology& topology) const;
};

/// Sorted union of the root paths of the scheme's receivers.
std::vector<NodeId> scheme_links(const Topology& topology, const Scheme& scheme);

/// Internal nodes at which the scheme's receivers fall into at least two
/// distinct child subtrees.
std::set<NodeId> splitting_nodes(const Topology& topology, const Scheme& scheme);

struct IdentifiabilityReport {
  bool covered = false;
  std::set<NodeId> uncovered_receivers;
  std::set<NodeId> non_splitting_internals;

  [[nodiscard]] bool identifiable() const {
    return uncovered_receivers.empty() && non_splitting_internals.empty();
  }
};

/// Flexicast identifiability: every receiver is covered and every internal
/// node splits for some scheme.
IdentifiabilityReport check_identifiability(const Topology& topology,
                                            const FlexicastExperiment& experiment);

}  // namespace tomolab
