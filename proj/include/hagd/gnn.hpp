#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hagd/attribution.hpp"
#include "hagd/hierarchy.hpp"
#include "hagd/tensor.hpp"

namespace hagd {

inline constexpr std::size_t gnn_input_width = 5;

// Vertex inputs: incoming and outgoing |weight| (scaled by the graph's largest
// such sum), mean activation (scaled by the largest |mean|), firing frequency
// and layer / (L - 1).
struct GnnGraph {
  std::size_t n = 0;
  ad::Tensor features;   // [n x 5]
  ad::Tensor neighbours; // [n x n], 1 where u and v share an edge in either direction
};

GnnGraph make_gnn_graph(std::size_t n, const std::vector<LevelEdge>& edges, const std::vector<double>& mean_activation,
                        const std::vector<double>& frequency, const std::vector<std::size_t>& layer,
                        std::size_t n_layers);
GnnGraph make_gnn_graph(const AttributionGraph& graph);

struct GnnConfig {
  std::size_t width = 32;
  std::size_t rounds = 2;
  std::size_t epochs = 200;
  double lr = 1e-2;
  double heldout_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct GnnRound {
  ad::Var w1, b1, w2, b2;  // MLP
  ad::Var a_src, a_dst;    // attention vector a = [a_src ; a_dst]
};

struct GnnParams {
  std::size_t width = 0;
  ad::Var w_in, b_in;
  std::vector<GnnRound> rounds;
  ad::Var w_out, b_out;  // readout starts at zero, so an untrained net scores every vertex 0.5

  std::vector<ad::Var> parameters() const;
};

GnnParams init_gnn(const GnnConfig& cfg);

// Membership logits [n x 1]. z <- relu(x W_in + b); each round
// z_v <- MLP(z_v + sum_u alpha_uv z_u) with alpha_v = softmax over the
// neighbourhood of a_src.z_u + a_dst.z_v; readout z W_out + b.
ad::Var gnn_logits(ad::Tape& t, const GnnParams& p, const GnnGraph& g, std::vector<ad::Tensor>* attention = nullptr);
std::vector<double> gnn_forward(const GnnParams& p, const GnnGraph& g);

struct GnnInstance {
  GnnGraph graph;
  std::vector<double> labels;  // 1 = vertex belongs to the oracle circuit
};

struct GnnTrainReport {
  GnnParams params;
  std::vector<double> loss_curve;  // mean training BCE before each epoch's update
  double heldout_auc = 0.5;
  std::size_t train_instances = 0, heldout_instances = 0, skipped = 0;
  std::vector<std::string> warnings;
};

// Pooled binary cross-entropy over all instances. Instances with all-in or
// all-out labels are skipped with a warning.
GnnTrainReport train_gnn(const std::vector<GnnInstance>& instances, const GnnConfig& cfg);

// Probability that a random positive outranks a random negative (ties 1/2).
double ranking_auc(const std::vector<double>& scores, const std::vector<double>& labels);

}  // namespace hagd
