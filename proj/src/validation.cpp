#include "hagd/validation.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <numeric>
#include <tuple>

#include "hagd/error.hpp"

namespace hagd {

using ad::Tape;
using ad::Tensor;
using ad::Var;

std::string to_string(AblationMode m) { return m == AblationMode::zero ? "zero" : "mean"; }
std::string to_string(ResidualMode m) { return m == ResidualMode::keep ? "keep" : "drop"; }

AblationMode ablation_from_string(const std::string& s) {
  if (s == "zero") return AblationMode::zero;
  if (s == "mean") return AblationMode::mean;
  throw ParameterError("unknown ablation mode '" + s + "'");
}

ResidualMode residual_from_string(const std::string& s) {
  if (s == "keep") return ResidualMode::keep;
  if (s == "drop") return ResidualMode::drop;
  throw ParameterError("unknown residual mode '" + s + "'");
}

std::vector<Tensor> feature_mask(const Transcoders& tc, const std::vector<FeatureId>& features) {
  std::vector<Tensor> mask(tc.n_layers(), Tensor({tc.m}, 0.0));
  for (const auto& f : features) {
    if (f.layer >= tc.n_layers() || f.index >= tc.m) throw RangeError("circuit feature " + to_string(f) + " not in the transcoders");
    mask[f.layer][f.index] = 1.0;
  }
  return mask;
}

std::vector<Tensor> feature_means(const Transformer& model, const Transcoders& tc,
                                  const std::vector<TaskInstance>& tasks) {
  auto hidden = collect_hidden(model, tasks);
  std::vector<Tensor> means;
  for (std::size_t l = 0; l < tc.n_layers(); ++l) {
    Tensor f = encode(tc, l, hidden[l]);
    Tensor mu({tc.m}, 0.0);
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t j = 0; j < tc.m; ++j) mu[j] += f.at(r, j);
    for (double& x : mu.data()) x /= static_cast<double>(std::max<std::size_t>(1, f.rows()));
    means.push_back(std::move(mu));
  }
  return means;
}

ResidualHook restriction_hook(const Transcoders& tc, std::vector<Tensor> mask, const RestrictionConfig& cfg,
                              std::vector<Tensor> means) {
  if (mask.size() != tc.n_layers()) throw ContractError("restriction: one mask per transcoder layer required");
  if (cfg.ablation == AblationMode::mean && means.size() != tc.n_layers())
    throw ContractError("restriction: mean ablation needs per-layer feature means");
  return [&tc, mask = std::move(mask), cfg, means = std::move(means)](Tape&, std::size_t layer, const Var& residual) {
    const Tensor& h = residual.value();
    const Tensor f = encode(tc, layer, h);
    const Tensor& keep = mask[layer];
    const std::size_t rows = f.rows(), m = tc.m;
    Tensor coded({rows, m}, 0.0);
    bool any = false;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) {
        const double a = cfg.ablation == AblationMode::mean ? means[layer][j] : 0.0;
        double v;
        if (cfg.residual == ResidualMode::keep)
          v = keep[j] != 0.0 ? 0.0 : f.at(r, j) - a;  // contribution to remove
        else
          v = keep[j] != 0.0 ? f.at(r, j) : a;  // code to decode
        coded.at(r, j) = v;
        any |= v != 0.0;
      }
    if (cfg.residual == ResidualMode::keep) {
      if (!any) return residual;  // nothing removed: the stream is untouched
      Tensor out = h;
      const Tensor removed = decode(tc, layer, coded);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= removed[i];
      return Var::constant(std::move(out));
    }
    return Var::constant(decode(tc, layer, coded));
  };
}

Tensor restricted_forward(const Transformer& model, const Transcoders& tc, const std::vector<FeatureId>& circuit,
                          const std::vector<std::size_t>& tokens, const RestrictionConfig& cfg,
                          const std::vector<Tensor>& means) {
  Tape t(false);
  auto hook = restriction_hook(tc, feature_mask(tc, circuit), cfg, means);
  return model.forward(t, TokenBatch::single(tokens), hook).value();
}

CircuitEvaluator::CircuitEvaluator(const Transformer& model, const Transcoders& tc, std::vector<TaskInstance> tasks,
                                   RestrictionConfig cfg)
    : model_(model), tc_(tc), tasks_(std::move(tasks)), cfg_(cfg) {
  if (tasks_.empty()) throw InputError("circuit evaluation needs at least one task");
  if (cfg_.ablation == AblationMode::mean) means_ = feature_means(model_, tc_, tasks_);
  full_ = evaluate({});
}

CircuitEvaluator::Outcome CircuitEvaluator::evaluate(const ResidualHook& hook) const {
  Outcome out;
  const std::size_t vocab = model_.config().vocab_size;
  out.logits = Tensor({tasks_.size(), vocab}, 0.0);
  out.predictions.assign(tasks_.size(), 0);
  std::size_t correct = 0;
  double loss = 0.0;
  for (const auto& group : group_by_length(tasks_)) {
    Tape t(false);
    const Tensor logits = model_.forward_last(t, TokenBatch::from_tasks(group), hook).value();
    for (std::size_t b = 0; b < group.size(); ++b) {
      const auto idx = static_cast<std::size_t>(group[b] - tasks_.data());
      double mx = -std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < vocab; ++c) {
        out.logits.at(idx, c) = logits.at(b, c);
        if (logits.at(b, c) > mx) mx = logits.at(b, c), arg = c;
      }
      double z = 0.0;
      for (std::size_t c = 0; c < vocab; ++c) z += std::exp(logits.at(b, c) - mx);
      loss += std::log(z) + mx - logits.at(b, group[b]->target);
      out.predictions[idx] = arg;
      correct += arg == group[b]->target;
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(tasks_.size());
  out.loss = loss / static_cast<double>(tasks_.size());
  return out;
}

CircuitEvaluator::Outcome CircuitEvaluator::run(const std::vector<FeatureId>& circuit) const {
  return evaluate(restriction_hook(tc_, feature_mask(tc_, circuit), cfg_, means_));
}

double CircuitEvaluator::preservation(const std::vector<FeatureId>& circuit) const {
  if (full_.accuracy == 0.0) throw DomainError("preservation undefined: the full model scores 0 on these tasks");
  return run(circuit).accuracy / full_.accuracy;
}

namespace {

std::vector<FeatureId> without(const std::vector<FeatureId>& c, const FeatureId& f) {
  std::vector<FeatureId> out;
  for (const auto& g : c)
    if (g != f) out.push_back(g);
  return out;
}

}  // namespace

NecessityReport necessity(const CircuitEvaluator& eval, const std::vector<FeatureId>& circuit, double epsilon) {
  NecessityReport rep;
  rep.epsilon = epsilon;
  const double base = eval.run(circuit).loss;
  for (const auto& f : circuit) {
    const double delta = eval.run(without(circuit, f)).loss - base;
    rep.effects.push_back({f, delta});
    if (delta >= epsilon) rep.kept.push_back(f);
  }
  std::stable_sort(rep.effects.begin(), rep.effects.end(), [](const NecessityEntry& a, const NecessityEntry& b) {
    return a.delta != b.delta ? a.delta > b.delta : a.feature < b.feature;
  });
  return rep;
}

SufficiencyReport sufficiency(const CircuitEvaluator& eval, const std::vector<FeatureId>& circuit, double theta) {
  SufficiencyReport rep;
  rep.theta = theta;
  rep.samples = eval.tasks().size();
  rep.full_accuracy = eval.full().accuracy;
  if (rep.full_accuracy == 0.0) throw DomainError("preservation undefined: the full model scores 0 on these tasks");
  rep.circuit_accuracy = eval.run(circuit).accuracy;
  rep.preservation = rep.circuit_accuracy / rep.full_accuracy;
  const double p = rep.circuit_accuracy;
  rep.standard_error = std::sqrt(p * (1.0 - p) / static_cast<double>(rep.samples)) / rep.full_accuracy;
  rep.pass = rep.preservation > theta;
  return rep;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("pearson: activation vectors must cover the same probes");
  const double n = static_cast<double>(a.size());
  if (a.empty()) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::map<FeatureId, FeatureId> align_features(const ActivationTable& a, const ActivationTable& b,
                                              double match_threshold) {
  struct Pair {
    double corr;
    FeatureId fa, fb;
  };
  std::vector<Pair> pairs;
  for (const auto& [fa, va] : a)
    for (const auto& [fb, vb] : b) {
      if (fa.layer != fb.layer) continue;
      const double c = pearson(va, vb);
      if (c > match_threshold) pairs.push_back({c, fa, fb});
    }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) {
    return std::tie(y.corr, x.fa, x.fb) < std::tie(x.corr, y.fa, y.fb);
  });
  std::map<FeatureId, FeatureId> out;
  std::set<FeatureId> used;
  for (const auto& p : pairs) {
    if (out.count(p.fa) || used.count(p.fb)) continue;
    out.emplace(p.fa, p.fb);
    used.insert(p.fb);
  }
  return out;
}

double jaccard_transfer(const std::vector<FeatureEdge>& edges_a, const std::vector<FeatureEdge>& edges_b,
                        const std::map<FeatureId, FeatureId>& alignment) {
  std::set<FeatureEdge> b(edges_b.begin(), edges_b.end());
  std::set<FeatureEdge> mapped;
  std::size_t unmapped = 0;
  for (const auto& [u, v] : std::set<FeatureEdge>(edges_a.begin(), edges_a.end())) {
    auto mu = alignment.find(u), mv = alignment.find(v);
    if (mu == alignment.end() || mv == alignment.end())
      ++unmapped;
    else
      mapped.insert({mu->second, mv->second});
  }
  std::size_t shared = 0;
  for (const auto& e : mapped) shared += b.count(e);
  const std::size_t uni = mapped.size() + unmapped + b.size() - shared;
  return uni == 0 ? 1.0 : static_cast<double>(shared) / static_cast<double>(uni);
}

TransferReport transfer_coefficient(const std::vector<FeatureEdge>& edges_a, const std::vector<FeatureEdge>& edges_b,
                                    const ActivationTable& activations_a, const ActivationTable& activations_b,
                                    double match_threshold) {
  TransferReport rep;
  rep.alignment = align_features(activations_a, activations_b, match_threshold);
  rep.tau = jaccard_transfer(edges_a, edges_b, rep.alignment);
  rep.edges_a = edges_a.size();
  rep.edges_b = edges_b.size();
  std::set<FeatureEdge> b(edges_b.begin(), edges_b.end());
  for (const auto& [u, v] : edges_a) {
    auto mu = rep.alignment.find(u), mv = rep.alignment.find(v);
    if (mu == rep.alignment.end() || mv == rep.alignment.end()) continue;
    ++rep.mapped;
    rep.shared += b.count({mu->second, mv->second});
  }
  return rep;
}

ActivationTable feature_activations(const Transformer& model, const Transcoders& tc,
                                    const std::vector<TaskInstance>& tasks, const std::vector<FeatureId>& features) {
  auto hidden = collect_hidden(model, tasks);
  std::vector<Tensor> codes;
  for (std::size_t l = 0; l < tc.n_layers(); ++l) codes.push_back(encode(tc, l, hidden[l]));
  ActivationTable out;
  for (const auto& f : features) {
    if (f.layer >= tc.n_layers() || f.index >= tc.m) throw RangeError("feature " + to_string(f) + " not in the transcoders");
    std::vector<double> v(codes[f.layer].rows());
    for (std::size_t r = 0; r < v.size(); ++r) v[r] = codes[f.layer].at(r, f.index);
    out.emplace(f, std::move(v));
  }
  return out;
}

double description_length_bits(std::size_t nodes, std::size_t edges, std::size_t n_layers, std::size_t dict_size) {
  if (nodes == 0) return 0.0;
  const double v = static_cast<double>(nodes);
  return v * std::log2(static_cast<double>(n_layers * dict_size)) + static_cast<double>(edges) * std::log2(v * v);
}

std::optional<double> modularity(const AttributionGraph& graph, const std::vector<std::size_t>& edges,
                                 const std::vector<std::size_t>& cluster) {
  double intra = 0.0, inter = 0.0;
  for (std::size_t e : edges) {
    const auto& ge = graph.edges.at(e);
    (cluster.at(ge.src) == cluster.at(ge.dst) ? intra : inter) += std::abs(ge.weight);
  }
  if (inter == 0.0) return std::nullopt;
  return intra / inter;
}

std::vector<FeatureId> circuit_features(const AttributionGraph& graph, const std::vector<std::size_t>& nodes) {
  std::vector<FeatureId> out;
  for (std::size_t v : nodes) out.push_back(graph.nodes.at(v).id);
  return out;
}

MetricBundle metric_bundle(const std::vector<std::size_t>& nodes, const AttributionGraph& graph,
                           const Hierarchy& hierarchy, const CircuitEvaluator& eval) {
  if (hierarchy.base_size() != graph.nodes.size()) throw ContractError("metric bundle: hierarchy built over another graph");
  MetricBundle mb;
  const auto edges = induced_edges(graph, nodes);
  mb.node_count = nodes.size();
  mb.edge_count = edges.size();
  mb.compression_ratio =
      graph.edges.empty() ? 1.0 : static_cast<double>(edges.size()) / static_cast<double>(graph.edges.size());

  std::vector<std::size_t> cluster(graph.nodes.size());
  if (hierarchy.depth() > 0)
    cluster = hierarchy.levels[0].parent;
  else
    std::iota(cluster.begin(), cluster.end(), std::size_t{0});
  if (auto q = modularity(graph, edges, cluster))
    mb.modularity = *q;
  else
    mb.modularity = std::numeric_limits<double>::infinity(), mb.modularity_infinite = true;

  mb.description_length_bits = description_length_bits(nodes.size(), edges.size(), graph.meta.n_layers, graph.meta.dict_size);

  const auto features = circuit_features(graph, nodes);
  const auto restricted = eval.run(features);
  const auto& full = eval.full();
  double dist = 0.0;
  for (std::size_t i = 0; i < eval.tasks().size(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < full.logits.cols(); ++c) {
      const double d = restricted.logits.at(i, c) - full.logits.at(i, c);
      s += d * d;
    }
    dist += std::sqrt(s);
  }
  mb.reconstruction_error = dist / static_cast<double>(eval.tasks().size());

  double drop = 0.0;
  for (const auto& f : features) drop += restricted.accuracy - eval.run(without(features, f)).accuracy;
  mb.intervention_effect = features.empty() ? 0.0 : drop / static_cast<double>(features.size());

  if (!features.empty()) {
    // Activation mass per answer class, summed over each task's positions.
    const auto& tasks = eval.tasks();
    std::vector<std::size_t> row_task;
    for (std::size_t i = 0; i < tasks.size(); ++i) row_task.insert(row_task.end(), tasks[i].tokens.size(), i);
    auto acts = feature_activations(eval.model(), eval.transcoders(), tasks, features);
    std::size_t pure = 0;
    for (const auto& f : features) {
      std::map<std::size_t, double> mass;
      double total = 0.0;
      const auto& v = acts.at(f);
      for (std::size_t r = 0; r < v.size(); ++r) {
        mass[tasks[row_task[r]].target] += std::abs(v[r]);
        total += std::abs(v[r]);
      }
      double top = 0.0;
      for (const auto& [cls, w] : mass) top = std::max(top, w);
      pure += total > 0.0 && top >= 0.5 * total;
    }
    mb.concept_purity = static_cast<double>(pure) / static_cast<double>(features.size());
  }
  return mb;
}

}  // namespace hagd
