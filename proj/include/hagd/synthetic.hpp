#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hagd/gnn.hpp"
#include "hagd/hierarchy.hpp"
#include "hagd/search.hpp"

namespace hagd {

// Planted-circuit graph: a vertex set S carries heavy edges among its
// members (each links to up to three others), the rest is light noise.
struct PlantedGraph {
  std::size_t n = 0;
  std::vector<LevelEdge> edges;      // sorted, about 15% negative
  std::vector<std::size_t> planted;  // sorted
};

PlantedGraph planted_graph(std::size_t n, std::size_t circuit, double noise_degree, std::uint64_t seed);

// Fraction of S's internal |weight| whose endpoints both lie in the node set.
Evaluator planted_evaluator(const PlantedGraph& g);

// Consecutive blocks of b vertices at every level, down to at most b.
std::vector<std::vector<std::size_t>> block_partitions(std::size_t n, std::size_t b);

// Training family for the GNN: planted graphs of 12 to 20 vertices, labels
// from the exhaustive optimum at theta = 0.9, three synthetic layers.
std::vector<GnnInstance> planted_gnn_instances(std::size_t count, std::uint64_t seed);

struct ScalingPoint {
  std::size_t n = 0, depth = 0, decisions = 0, circuit = 0;
  std::size_t fixed_b_decisions = 0;  // b candidates per level
};

// Hierarchical search over planted graphs (|S| = n / 16, block hierarchies).
std::vector<ScalingPoint> scaling_series(const std::vector<std::size_t>& sizes, std::size_t b, std::uint64_t seed);
// Least-squares slope of log(decisions) against log(n).
double loglog_slope(const std::vector<ScalingPoint>& pts);

}  // namespace hagd
