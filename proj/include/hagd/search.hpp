#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hagd/attribution.hpp"
#include "hagd/hierarchy.hpp"

namespace hagd {

// Behavioural preservation of a feature set, given as sorted base-vertex
// indices.
using Evaluator = std::function<double(std::span<const std::size_t> nodes)>;

// Caches evaluator results per node set; counts distinct evaluations.
class MemoEvaluator {
 public:
  explicit MemoEvaluator(Evaluator fn) : fn_(std::move(fn)) {}
  double operator()(std::span<const std::size_t> nodes);
  std::size_t evaluations() const { return cache_.size(); }

 private:
  Evaluator fn_;
  std::map<std::vector<std::size_t>, double> cache_;
};

enum class Guidance { heuristic, gnn, none };
std::string to_string(Guidance g);
Guidance guidance_from_string(const std::string& s);

struct SearchConfig {
  double theta = 0.9;
  std::size_t beam_width = 4;
  Guidance guidance = Guidance::heuristic;
  bool refine = true;
  std::uint64_t seed = 0;
};

void validate(const SearchConfig& cfg);

struct SearchMeta {
  std::string method;
  bool found = false;
  double best_preservation = 0.0;     // best value seen when nothing qualifies
  std::size_t decisions = 0;          // candidate vertices considered across all levels
  std::vector<std::size_t> level_decisions;  // per hierarchy level, base first
  std::size_t evaluations = 0;
  double wall_seconds = 0.0;
};

struct Circuit {
  std::vector<std::size_t> nodes;  // sorted base-vertex indices
  double preservation = 0.0;
  SearchMeta meta;
};

inline constexpr std::size_t exhaustive_cap = 20;

// Smallest subset (lexicographically first among equals) with
// evaluator >= theta. More than exhaustive_cap vertices raises SearchError.
Circuit exhaustive_search(std::size_t n, const Evaluator& evaluator, double theta);

// Coarse-to-fine search. At every level the candidates (children of the
// vertices kept one level up) are ranked by the best score among their members
// and the shortest passing prefix is kept, padded to the beam width above the
// base. At the base this is the greedy add; reverse pruning then drops
// features lowest score first while the threshold still holds.
Circuit hierarchical_search(const Hierarchy& h, const Evaluator& evaluator, const std::vector<double>& scores,
                            const SearchConfig& cfg);

// Total incident |weight| of every vertex.
std::vector<double> incident_weight(std::size_t n, const std::vector<LevelEdge>& edges);
// Incident |weight| divided by the largest value within the vertex's layer.
std::vector<double> heuristic_scores(const AttributionGraph& graph);
double heuristic_score(const AttributionGraph& graph, std::size_t node);
// Scores used when guidance is `none`: a seeded random order.
std::vector<double> unguided_scores(std::size_t n, std::uint64_t seed);

// Edges of `graph` with both endpoints in `nodes` (indices into graph.edges).
std::vector<std::size_t> induced_edges(const AttributionGraph& graph, const std::vector<std::size_t>& nodes);

// Circuit file: node and edge lists, preservation, search metadata and the
// provenance fields given by the caller.
std::string serialize_circuit(const Circuit& c, const AttributionGraph& graph, const std::string& graph_hash,
                              const SearchConfig& cfg);
Circuit deserialize_circuit(const std::string& text, const AttributionGraph& graph);
std::string circuit_to_dot(const Circuit& c, const AttributionGraph& graph);

}  // namespace hagd
