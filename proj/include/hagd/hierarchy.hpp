#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hagd/attribution.hpp"
#include "hagd/tensor.hpp"

namespace hagd {

struct LevelEdge {
  std::size_t src = 0, dst = 0;
  double weight = 0.0;
  auto operator<=>(const LevelEdge&) const = default;
};

// One resolution of the hierarchy. Vertex v of this level stands for the base
// vertices in members[v]; edges are directed, signed aggregates between
// distinct vertices, and weight between members of the same vertex is kept
// in internal_weight.
struct HierarchyLevel {
  std::vector<std::vector<std::size_t>> members;
  std::vector<double> internal_weight;
  std::vector<LevelEdge> edges;  // sorted by (src, dst), src != dst
  std::vector<std::size_t> parent;  // vertex -> supernode one level up; empty at the top

  std::size_t size() const { return members.size(); }
  double total_weight() const;
};

struct Hierarchy {
  std::size_t branching = 2;
  std::vector<HierarchyLevel> levels;  // levels[0] is the input graph

  std::size_t depth() const { return levels.empty() ? 0 : levels.size() - 1; }
  std::size_t base_size() const { return levels.empty() ? 0 : levels[0].size(); }
};

// The graph's edges as level edges over node indices.
std::vector<LevelEdge> index_edges(const AttributionGraph& graph);

// Level sizes produced by shrinking n by ceil(n / b) until at most b remain.
std::vector<std::size_t> planned_level_sizes(std::size_t n, std::size_t b);

// (|A| + |A|^T) / 2 over the level's edges, as a dense matrix.
ad::Tensor symmetric_adjacency(const HierarchyLevel& level);

// Contracts `level` by a total labelling onto [0, k); every label must be used.
HierarchyLevel contract(const HierarchyLevel& level, const std::vector<std::size_t>& labels);

HierarchyLevel base_level(std::size_t n, const std::vector<LevelEdge>& edges);

// Spectral coarsening: each level is split into ceil(n_r / b) clusters until
// at most b vertices remain. b < 2 raises ParameterError.
Hierarchy build_hierarchy(std::size_t n, const std::vector<LevelEdge>& edges, std::size_t b,
                          std::uint64_t seed = 0);
Hierarchy build_hierarchy(const AttributionGraph& graph, std::size_t b, std::uint64_t seed = 0);

// Hierarchy with caller-supplied memberships, one labelling per level.
Hierarchy hierarchy_from_partitions(std::size_t n, const std::vector<LevelEdge>& edges, std::size_t b,
                                    const std::vector<std::vector<std::size_t>>& parents);

// JSON document holding the base edges and membership tables. The hash ties it
// to the graph it was built from.
std::string serialize_hierarchy(const Hierarchy& h, const std::string& base_graph_hash);
struct LoadedHierarchy {
  Hierarchy hierarchy;
  std::string base_graph_hash;
};
LoadedHierarchy deserialize_hierarchy(const std::string& text);

}  // namespace hagd
