#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hagd/attribution.hpp"
#include "hagd/hierarchy.hpp"
#include "hagd/model.hpp"
#include "hagd/search.hpp"
#include "hagd/transcoder.hpp"

namespace hagd {

enum class AblationMode { zero, mean };
enum class ResidualMode { keep, drop };
std::string to_string(AblationMode m);
std::string to_string(ResidualMode m);
AblationMode ablation_from_string(const std::string& s);
ResidualMode residual_from_string(const std::string& s);

struct RestrictionConfig {
  AblationMode ablation = AblationMode::zero;
  ResidualMode residual = ResidualMode::keep;
};

// Per-layer 0/1 vectors over the dictionary, 1 for kept features.
std::vector<ad::Tensor> feature_mask(const Transcoders& tc, const std::vector<FeatureId>& features);

// Mean activation of every feature over all positions of `tasks`, per layer.
std::vector<ad::Tensor> feature_means(const Transformer& model, const Transcoders& tc,
                                      const std::vector<TaskInstance>& tasks);

// Replaces the residual after each block by the circuit's reconstruction:
// keep:  h - D((f - a) * (1 - mask)) / s
// drop:  D(f * mask + a * (1 - mask)) / s
// where a is 0 for zero ablation and the feature mean for mean ablation.
ResidualHook restriction_hook(const Transcoders& tc, std::vector<ad::Tensor> mask, const RestrictionConfig& cfg,
                              std::vector<ad::Tensor> means = {});

// Logits at every position of one input under the restriction.
ad::Tensor restricted_forward(const Transformer& model, const Transcoders& tc, const std::vector<FeatureId>& circuit,
                              const std::vector<std::size_t>& tokens, const RestrictionConfig& cfg = {},
                              const std::vector<ad::Tensor>& means = {});

// Batched evaluation of circuit-restricted models over a fixed task set.
class CircuitEvaluator {
 public:
  CircuitEvaluator(const Transformer& model, const Transcoders& tc, std::vector<TaskInstance> tasks,
                   RestrictionConfig cfg = {});

  struct Outcome {
    double accuracy = 0.0;
    double loss = 0.0;                // mean cross-entropy at the answer position
    std::vector<std::size_t> predictions;
    ad::Tensor logits;                // [tasks x vocab], in task order
  };
  Outcome run(const std::vector<FeatureId>& circuit) const;
  const Outcome& full() const { return full_; }  // unmodified model
  const std::vector<TaskInstance>& tasks() const { return tasks_; }
  const RestrictionConfig& config() const { return cfg_; }
  const Transformer& model() const { return model_; }
  const Transcoders& transcoders() const { return tc_; }
  // Acc(M_C) / Acc(M). DomainError when the full model scores 0.
  double preservation(const std::vector<FeatureId>& circuit) const;

 private:
  Outcome evaluate(const ResidualHook& hook) const;

  const Transformer& model_;
  const Transcoders& tc_;
  std::vector<TaskInstance> tasks_;
  RestrictionConfig cfg_;
  std::vector<ad::Tensor> means_;
  Outcome full_;
};

struct NecessityEntry {
  FeatureId feature;
  double delta = 0.0;
};

struct NecessityReport {
  std::vector<NecessityEntry> effects;  // descending by delta
  std::vector<FeatureId> kept;          // delta >= epsilon, in circuit order
  double epsilon = 0.0;
};

// delta_i = loss(C \ {i}) - loss(C), averaged over the evaluator's tasks.
NecessityReport necessity(const CircuitEvaluator& eval, const std::vector<FeatureId>& circuit,
                          double epsilon = 0.01);

struct SufficiencyReport {
  double preservation = 0.0;
  double standard_error = 0.0;  // binomial, scaled by 1 / Acc(M)
  double circuit_accuracy = 0.0, full_accuracy = 0.0;
  std::size_t samples = 0;
  double theta = 0.9;
  bool pass = false;  // preservation > theta
};

SufficiencyReport sufficiency(const CircuitEvaluator& eval, const std::vector<FeatureId>& circuit,
                              double theta = 0.9);

// Feature alignment and Jaccard transfer between two circuits.
using FeatureEdge = std::pair<FeatureId, FeatureId>;
using ActivationTable = std::map<FeatureId, std::vector<double>>;

double pearson(const std::vector<double>& a, const std::vector<double>& b);
// Greedy one-to-one matching within each layer by descending correlation,
// accepting pairs strictly above the threshold.
std::map<FeatureId, FeatureId> align_features(const ActivationTable& a, const ActivationTable& b,
                                              double match_threshold = 0.5);
// Edges of A are mapped through the alignment; an edge with an unmatched end
// cannot appear in B and counts once in the union. Both sets empty gives 1.
double jaccard_transfer(const std::vector<FeatureEdge>& edges_a, const std::vector<FeatureEdge>& edges_b,
                        const std::map<FeatureId, FeatureId>& alignment);

struct TransferReport {
  double tau = 0.0;
  std::map<FeatureId, FeatureId> alignment;
  std::size_t edges_a = 0, edges_b = 0, mapped = 0, shared = 0;
};
TransferReport transfer_coefficient(const std::vector<FeatureEdge>& edges_a, const std::vector<FeatureEdge>& edges_b,
                                    const ActivationTable& activations_a, const ActivationTable& activations_b,
                                    double match_threshold = 0.5);

// Activation of each feature at every position of every task, concatenated
// in task order.
ActivationTable feature_activations(const Transformer& model, const Transcoders& tc,
                                    const std::vector<TaskInstance>& tasks, const std::vector<FeatureId>& features);

struct MetricBundle {
  std::size_t node_count = 0, edge_count = 0;
  double compression_ratio = 0.0;
  double intervention_effect = 0.0;
  double reconstruction_error = 0.0;
  double modularity = 0.0;
  bool modularity_infinite = false;  // no inter-cluster weight inside the circuit
  double description_length_bits = 0.0;
  double concept_purity = 0.0;  // proxy: share of features with >= 50% of activation mass on one answer class
};

double description_length_bits(std::size_t nodes, std::size_t edges, std::size_t n_layers, std::size_t dict_size);
// Intra / inter cluster |weight| over the given edges; nullopt when the inter
// weight is zero.
std::optional<double> modularity(const AttributionGraph& graph, const std::vector<std::size_t>& edges,
                                 const std::vector<std::size_t>& cluster);

// `nodes` are indices into graph.nodes; clusters come from the hierarchy's
// first contraction (singletons when it has none).
MetricBundle metric_bundle(const std::vector<std::size_t>& nodes, const AttributionGraph& graph,
                           const Hierarchy& hierarchy, const CircuitEvaluator& eval);

std::vector<FeatureId> circuit_features(const AttributionGraph& graph, const std::vector<std::size_t>& nodes);

}  // namespace hagd
