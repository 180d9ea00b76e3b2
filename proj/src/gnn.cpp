#include "hagd/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hagd/error.hpp"
#include "hagd/optim.hpp"
#include "hagd/search.hpp"

namespace hagd {

using ad::Tape;
using ad::Tensor;
using ad::Var;

GnnGraph make_gnn_graph(std::size_t n, const std::vector<LevelEdge>& edges, const std::vector<double>& mean_activation,
                        const std::vector<double>& frequency, const std::vector<std::size_t>& layer,
                        std::size_t n_layers) {
  if (mean_activation.size() != n || frequency.size() != n || layer.size() != n)
    throw ContractError("gnn graph: per-vertex inputs must have one entry per vertex");
  GnnGraph g;
  g.n = n;
  g.features = Tensor({n, gnn_input_width}, 0.0);
  g.neighbours = Tensor({n, n}, 0.0);
  std::vector<double> in(n, 0.0), out(n, 0.0);
  for (const auto& e : edges) {
    if (e.src >= n || e.dst >= n) throw GraphError("gnn graph: edge endpoint out of range");
    out[e.src] += std::abs(e.weight);
    in[e.dst] += std::abs(e.weight);
    if (e.src != e.dst) g.neighbours.at(e.src, e.dst) = g.neighbours.at(e.dst, e.src) = 1.0;
  }
  double wmax = 0.0, amax = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    wmax = std::max({wmax, in[v], out[v]});
    amax = std::max(amax, std::abs(mean_activation[v]));
  }
  for (std::size_t v = 0; v < n; ++v) {
    g.features.at(v, 0) = wmax > 0.0 ? in[v] / wmax : 0.0;
    g.features.at(v, 1) = wmax > 0.0 ? out[v] / wmax : 0.0;
    g.features.at(v, 2) = amax > 0.0 ? mean_activation[v] / amax : 0.0;
    g.features.at(v, 3) = frequency[v];
    g.features.at(v, 4) = n_layers > 1 ? static_cast<double>(layer[v]) / static_cast<double>(n_layers - 1) : 0.0;
  }
  return g;
}

GnnGraph make_gnn_graph(const AttributionGraph& graph) {
  const std::size_t n = graph.nodes.size();
  std::vector<double> mean(n), freq(n);
  std::vector<std::size_t> layer(n);
  for (std::size_t v = 0; v < n; ++v) {
    mean[v] = graph.nodes[v].mean_activation;
    freq[v] = graph.nodes[v].frequency;
    layer[v] = graph.nodes[v].id.layer;
  }
  return make_gnn_graph(n, index_edges(graph), mean, freq, layer, graph.meta.n_layers);
}

std::vector<Var> GnnParams::parameters() const {
  std::vector<Var> out{w_in, b_in};
  for (const auto& r : rounds) out.insert(out.end(), {r.w1, r.b1, r.w2, r.b2, r.a_src, r.a_dst});
  out.insert(out.end(), {w_out, b_out});
  return out;
}

GnnParams init_gnn(const GnnConfig& cfg) {
  if (cfg.width == 0) throw ParameterError("gnn: width must be positive");
  std::mt19937_64 rng(cfg.seed);
  auto normal = [&](ad::Shape shape, double std) {
    std::normal_distribution<double> g(0.0, std);
    Tensor t(std::move(shape), 0.0);
    for (double& x : t.data()) x = g(rng);
    return Var::parameter(std::move(t));
  };
  const std::size_t w = cfg.width;
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  GnnParams p;
  p.width = w;
  p.w_in = normal({gnn_input_width, w}, 1.0 / std::sqrt(double(gnn_input_width)));
  p.b_in = Var::parameter(Tensor({w}, 0.0));
  for (std::size_t r = 0; r < cfg.rounds; ++r)
    p.rounds.push_back({normal({w, w}, s), Var::parameter(Tensor({w}, 0.0)), normal({w, w}, s),
                        Var::parameter(Tensor({w}, 0.0)), normal({w, 1}, s), normal({w, 1}, s)});
  p.w_out = Var::parameter(Tensor({w, 1}, 0.0));
  p.b_out = Var::parameter(Tensor({1}, 0.0));
  return p;
}

Var gnn_logits(Tape& t, const GnnParams& p, const GnnGraph& g, std::vector<Tensor>* attention) {
  if (g.n == 0) throw InputError("gnn: empty graph");
  Var z = relu(t, add_bias(t, matmul(t, Var::constant(g.features), p.w_in), p.b_in));
  for (const auto& r : p.rounds) {
    // scores[v][u] = a_dst.z_v + a_src.z_u
    Var scores = pairwise_sum(t, matmul(t, z, r.a_dst), matmul(t, z, r.a_src));
    Var alpha = masked_softmax_rows(t, scores, g.neighbours);
    if (attention) attention->push_back(alpha.value());
    Var u = add(t, z, matmul(t, alpha, z));
    Var hidden = relu(t, add_bias(t, matmul(t, u, r.w1), r.b1));
    z = relu(t, add_bias(t, matmul(t, hidden, r.w2), r.b2));
  }
  return add_bias(t, matmul(t, z, p.w_out), p.b_out);
}

std::vector<double> gnn_forward(const GnnParams& p, const GnnGraph& g) {
  Tape t(false);
  Var logits = gnn_logits(t, p, g);
  std::vector<double> out(g.n);
  for (std::size_t v = 0; v < g.n; ++v) out[v] = 1.0 / (1.0 + std::exp(-logits.value()[v]));
  return out;
}

double ranking_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] < 0.5) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] >= 0.5) continue;
      pairs += 1.0;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return pairs > 0.0 ? wins / pairs : 0.5;
}

GnnTrainReport train_gnn(const std::vector<GnnInstance>& instances, const GnnConfig& cfg) {
  if (instances.size() < 10) throw InputError("gnn training needs at least 10 labelled instances");
  GnnTrainReport rep;
  std::vector<const GnnInstance*> usable;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    if (inst.graph.n > exhaustive_cap)
      throw InputError("gnn training instances must have at most " + std::to_string(exhaustive_cap) + " vertices");
    if (inst.labels.size() != inst.graph.n) throw ContractError("gnn: one label per vertex required");
    const double pos = std::accumulate(inst.labels.begin(), inst.labels.end(), 0.0);
    if (pos == 0.0 || pos == static_cast<double>(inst.labels.size())) {
      rep.warnings.push_back("instance " + std::to_string(i) + " has degenerate labels; skipped");
      ++rep.skipped;
      continue;
    }
    usable.push_back(&inst);
  }
  if (usable.size() < 2) throw InputError("gnn training: fewer than two instances with mixed labels");
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(usable.begin(), usable.end(), rng);
  std::size_t n_held = static_cast<std::size_t>(std::llround(cfg.heldout_fraction * double(usable.size())));
  n_held = std::clamp<std::size_t>(n_held, 1, usable.size() - 1);
  std::vector<const GnnInstance*> train(usable.begin(), usable.end() - static_cast<std::ptrdiff_t>(n_held));
  std::vector<const GnnInstance*> held(usable.end() - static_cast<std::ptrdiff_t>(n_held), usable.end());
  rep.train_instances = train.size();
  rep.heldout_instances = held.size();

  rep.params = init_gnn(cfg);
  ad::AdamW opt(rep.params.parameters(), {.lr = cfg.lr, .weight_decay = 0.0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.zero_grad();
    double total = 0.0;
    for (const auto* inst : train) {
      Tape t;
      Var loss = scale(t, bce_with_logits(t, gnn_logits(t, rep.params, inst->graph), Tensor({inst->graph.n, 1}, inst->labels)),
                       1.0 / static_cast<double>(train.size()));
      t.backward(loss);
      total += loss.value().item();
    }
    if (!std::isfinite(total))
      throw TrainingError("gnn: non-finite loss at epoch " + std::to_string(epoch),
                          rep.loss_curve.empty() ? NAN : rep.loss_curve.back());
    rep.loss_curve.push_back(total);
    opt.step();
  }

  std::vector<double> scores, labels;
  for (const auto* inst : held) {
    auto s = gnn_forward(rep.params, inst->graph);
    scores.insert(scores.end(), s.begin(), s.end());
    labels.insert(labels.end(), inst->labels.begin(), inst->labels.end());
  }
  rep.heldout_auc = ranking_auc(scores, labels);
  return rep;
}

}  // namespace hagd
