#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "hagd/model.hpp"
#include "hagd/transcoder.hpp"

namespace hagd {

struct FeatureId {
  std::size_t layer = 0;
  std::size_t index = 0;
  auto operator<=>(const FeatureId&) const = default;
};

std::string to_string(const FeatureId& f);

struct FeatureNode {
  FeatureId id;
  double mean_activation = 0.0;  // over all probe positions, zeros included
  double frequency = 0.0;        // fraction of probe positions where it fires
  bool operator==(const FeatureNode&) const = default;
};

struct GraphEdge {
  std::size_t src = 0;  // node indices
  std::size_t dst = 0;
  double weight = 0.0;
  bool operator==(const GraphEdge&) const = default;
};

enum class Aggregation { mean_abs, mean_signed };
enum class Pruning { top_fraction, threshold, max_edges };

std::string to_string(Aggregation a);
std::string to_string(Pruning p);

struct GraphMeta {
  std::string model_hash;
  std::string transcoder_hash;
  std::string probe_id;
  std::size_t probe_count = 0;
  std::size_t n_layers = 0;
  std::size_t dict_size = 0;
  Aggregation aggregation = Aggregation::mean_abs;
  Pruning pruning = Pruning::top_fraction;
  double prune_value = 0.05;  // fraction, tau or edge cap depending on pruning
  bool operator==(const GraphMeta&) const = default;
};

// Nodes sorted by (layer, index); edges sorted by (src, dst) and always
// run from layer l to l + 1.
struct AttributionGraph {
  GraphMeta meta;
  std::vector<FeatureNode> nodes;
  std::vector<GraphEdge> edges;

  std::optional<std::size_t> find(const FeatureId& f) const;
  bool operator==(const AttributionGraph&) const = default;
};

// Checks ordering, layer adjacency, duplicates and finiteness. Throws GraphError.
void validate(const AttributionGraph& g);

// A(q) = sum_p d f_dst(q) / d f_src(p) * f_src(p) for every position q of the
// input: the directional derivative of the downstream feature when the
// upstream feature's decoded contribution is scaled, masks frozen.
std::vector<double> feature_attribution(const Transformer& model, const Transcoders& tc,
                                        const std::vector<std::size_t>& tokens, const FeatureId& src,
                                        const FeatureId& dst);

struct GraphConfig {
  Aggregation aggregation = Aggregation::mean_abs;
  Pruning pruning = Pruning::top_fraction;
  double top_fraction = 0.05;       // per layer pair, of the nonzero edges
  double tau = 0.0;                 // threshold mode: keep |w| >= tau
  std::size_t max_edges = 1000;     // max_edges mode: global cap
  std::string probe_id;
  std::string model_hash;
  std::string transcoder_hash;
};

// Dense aggregated weights before pruning: pair[l] is m x m, row = source
// feature of layer l, column = target feature of layer l + 1.
struct DenseAttribution {
  std::vector<ad::Tensor> pair;
  std::vector<ad::Tensor> mean_activation;  // per layer, [m]
  std::vector<ad::Tensor> frequency;        // per layer, [m]
  std::size_t probe_count = 0;
  std::size_t samples = 0;  // probe positions
};

DenseAttribution aggregate_attributions(const Transformer& model, const Transcoders& tc,
                                        const std::vector<TaskInstance>& probes, Aggregation aggregation);

AttributionGraph prune(const DenseAttribution& dense, const GraphConfig& cfg);

AttributionGraph build_graph(const Transformer& model, const Transcoders& tc, const std::vector<TaskInstance>& probes,
                             const GraphConfig& cfg);

std::string serialize_graph(const AttributionGraph& g);
// Throws ParseError (with byte offset) on malformed input.
AttributionGraph deserialize_graph(const std::string& bytes);

std::string to_dot(const AttributionGraph& g);

}  // namespace hagd
