#include "hagd/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

#include "hagd/error.hpp"

namespace hagd {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using json = nlohmann::json;

std::string to_string(const FeatureId& f) { return "L" + std::to_string(f.layer) + ":F" + std::to_string(f.index); }

std::string to_string(Aggregation a) { return a == Aggregation::mean_abs ? "mean_abs" : "mean_signed"; }

std::string to_string(Pruning p) {
  switch (p) {
    case Pruning::top_fraction: return "top_fraction";
    case Pruning::threshold: return "threshold";
    case Pruning::max_edges: return "max_edges";
  }
  return "unknown";
}

std::optional<std::size_t> AttributionGraph::find(const FeatureId& f) const {
  auto it = std::lower_bound(nodes.begin(), nodes.end(), f,
                             [](const FeatureNode& n, const FeatureId& id) { return n.id < id; });
  if (it == nodes.end() || it->id != f) return std::nullopt;
  return static_cast<std::size_t>(it - nodes.begin());
}

void validate(const AttributionGraph& g) {
  for (std::size_t i = 1; i < g.nodes.size(); ++i)
    if (!(g.nodes[i - 1].id < g.nodes[i].id)) throw GraphError("graph nodes not in strict (layer, index) order");
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& ed = g.edges[e];
    if (ed.src >= g.nodes.size() || ed.dst >= g.nodes.size()) throw GraphError("edge endpoint out of range");
    if (g.nodes[ed.dst].id.layer != g.nodes[ed.src].id.layer + 1)
      throw GraphError("edge " + to_string(g.nodes[ed.src].id) + " -> " + to_string(g.nodes[ed.dst].id) +
                       " does not join adjacent layers");
    if (!std::isfinite(ed.weight)) throw GraphError("non-finite edge weight");
    if (e > 0) {
      const auto& prev = g.edges[e - 1];
      if (std::tie(prev.src, prev.dst) >= std::tie(ed.src, ed.dst)) throw GraphError("edges unsorted or duplicated");
    }
  }
}

namespace {

// Attribution passes for one input. For every layer pair and every active
// downstream feature (q, j), `fn` receives the attributions from every
// upstream feature that fires somewhere in the input.
template <class Fn>
void for_each_attribution(const Transformer& fm, const Transcoders& ftc, const std::vector<std::size_t>& tokens,
                          std::optional<std::size_t> only_pair, std::optional<std::size_t> only_dst, Fn&& fn) {
  const ActivationTrace trace = forward(fm, tokens);
  const std::size_t s = tokens.size(), L = fm.config().n_layers, m = ftc.m;
  for (std::size_t l = 0; l + 1 < L; ++l) {
    if (only_pair && *only_pair != l) continue;
    const Tensor f_src = encode(ftc, l, trace.hidden[l]);
    Tensor residual = trace.hidden[l];
    {
      const Tensor recon = decode(ftc, l, f_src);
      for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= recon[i];
    }
    Tape t;
    Var F = t.leaf(f_src, true);
    Var h = ad::add_const(t, decode(t, ftc, l, F), residual);
    Var x = fm.block(t, l + 1, h, s);
    const Tensor f_dst = encode(ftc, l + 1, x.value());
    Tensor mask(f_dst.shape(), 0.0);
    for (std::size_t i = 0; i < f_dst.size(); ++i) mask[i] = f_dst[i] > 0.0 ? 1.0 : 0.0;
    Var out = encode_frozen(t, ftc, l + 1, x, mask);

    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < s; ++p)
        if (f_src.at(p, i) != 0.0) {
          live.push_back(i);
          break;
        }
    std::vector<double> a(live.size());
    Tensor seed(f_dst.shape(), 0.0);
    for (std::size_t q = 0; q < s; ++q)
      for (std::size_t j = 0; j < m; ++j) {
        if (mask.at(q, j) == 0.0 || (only_dst && *only_dst != j)) continue;
        F.zero_grad();
        seed.at(q, j) = 1.0;
        t.backward(out, seed);
        seed.at(q, j) = 0.0;
        const Tensor& G = F.grad();
        for (std::size_t n = 0; n < live.size(); ++n) {
          double acc = 0.0;
          for (std::size_t p = 0; p < s; ++p) acc += G.at(p, live[n]) * f_src.at(p, live[n]);
          a[n] = acc;
        }
        fn(l, q, j, live, a);
      }
  }
}

void check_feature(const Transformer& model, const Transcoders& tc, const FeatureId& f) {
  if (f.layer >= model.config().n_layers || f.layer >= tc.n_layers())
    throw RangeError("feature " + to_string(f) + ": layer out of range");
  if (f.index >= tc.m) throw RangeError("feature " + to_string(f) + ": index out of range");
}

}  // namespace

std::vector<double> feature_attribution(const Transformer& model, const Transcoders& tc,
                                        const std::vector<std::size_t>& tokens, const FeatureId& src,
                                        const FeatureId& dst) {
  if (dst.layer != src.layer + 1)
    throw ContractError("attribution is defined between adjacent layers only (" + to_string(src) + " -> " +
                        to_string(dst) + ")");
  check_feature(model, tc, src);
  check_feature(model, tc, dst);
  std::vector<double> out(tokens.size(), 0.0);
  for_each_attribution(model.frozen(), frozen(tc), tokens, src.layer, dst.index,
                       [&](std::size_t, std::size_t q, std::size_t, const std::vector<std::size_t>& live,
                           const std::vector<double>& a) {
                         auto it = std::lower_bound(live.begin(), live.end(), src.index);
                         if (it != live.end() && *it == src.index) out[q] = a[static_cast<std::size_t>(it - live.begin())];
                       });
  return out;
}

DenseAttribution aggregate_attributions(const Transformer& model, const Transcoders& tc,
                                        const std::vector<TaskInstance>& probes, Aggregation aggregation) {
  if (probes.empty()) throw InputError("build_graph: empty probe set");
  if (tc.n_layers() != model.config().n_layers || tc.d != model.config().hidden_dim)
    throw DimensionError("build_graph: transcoders do not match the model");
  const Transformer fm = model.frozen();
  const Transcoders ftc = frozen(tc);
  const std::size_t L = tc.n_layers(), m = tc.m;

  // Canonical probe order makes the floating-point sums independent of the
  // order the caller passes probes in.
  std::vector<const TaskInstance*> order;
  for (const auto& p : probes) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(),
                   [](const TaskInstance* a, const TaskInstance* b) { return a->tokens < b->tokens; });

  DenseAttribution out;
  out.pair.assign(L - 1, Tensor({m, m}, 0.0));
  out.mean_activation.assign(L, Tensor({m}, 0.0));
  out.frequency.assign(L, Tensor({m}, 0.0));
  out.probe_count = probes.size();
  for (const TaskInstance* p : order) {
    out.samples += p->tokens.size();
    const ActivationTrace trace = forward(fm, p->tokens);
    for (std::size_t l = 0; l < L; ++l) {
      const Tensor f = encode(ftc, l, trace.hidden[l]);
      for (std::size_t r = 0; r < f.rows(); ++r)
        for (std::size_t i = 0; i < m; ++i)
          if (f.at(r, i) > 0.0) {
            out.mean_activation[l][i] += f.at(r, i);
            out.frequency[l][i] += 1.0;
          }
    }
    for_each_attribution(fm, ftc, p->tokens, std::nullopt, std::nullopt,
                         [&](std::size_t l, std::size_t, std::size_t j, const std::vector<std::size_t>& live,
                             const std::vector<double>& a) {
                           Tensor& w = out.pair[l];
                           for (std::size_t n = 0; n < live.size(); ++n)
                             w.at(live[n], j) += aggregation == Aggregation::mean_abs ? std::abs(a[n]) : a[n];
                         });
  }
  const double denom = static_cast<double>(out.samples);
  for (auto& w : out.pair)
    for (double& v : w.data()) v /= denom;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < m; ++i) {
      out.mean_activation[l][i] /= denom;
      out.frequency[l][i] /= denom;
    }
  return out;
}

AttributionGraph prune(const DenseAttribution& dense, const GraphConfig& cfg) {
  struct Cand {
    std::size_t layer, i, j;
    double w;
  };
  auto stronger = [](const Cand& a, const Cand& b) {
    const double x = std::abs(a.w), y = std::abs(b.w);
    if (x != y) return x > y;
    return std::tie(a.layer, a.i, a.j) < std::tie(b.layer, b.i, b.j);
  };
  std::vector<std::vector<Cand>> per_pair(dense.pair.size());
  for (std::size_t l = 0; l < dense.pair.size(); ++l) {
    const Tensor& w = dense.pair[l];
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j)
        if (w.at(i, j) != 0.0) per_pair[l].push_back({l, i, j, w.at(i, j)});
  }

  std::vector<Cand> kept;
  double prune_value = 0.0;
  switch (cfg.pruning) {
    case Pruning::top_fraction: {
      if (!(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0))
        throw ParameterError("top_fraction must be in (0, 1]");
      prune_value = cfg.top_fraction;
      for (auto& c : per_pair) {
        std::sort(c.begin(), c.end(), stronger);
        const auto keep = static_cast<std::size_t>(std::ceil(cfg.top_fraction * static_cast<double>(c.size())));
        kept.insert(kept.end(), c.begin(), c.begin() + static_cast<std::ptrdiff_t>(std::min(keep, c.size())));
      }
      break;
    }
    case Pruning::threshold: {
      if (std::isnan(cfg.tau) || cfg.tau < 0.0) throw ParameterError("tau must be >= 0");
      prune_value = cfg.tau;
      for (auto& c : per_pair)
        for (const auto& e : c)
          if (std::abs(e.w) >= cfg.tau) kept.push_back(e);
      break;
    }
    case Pruning::max_edges: {
      if (cfg.max_edges == 0) throw ParameterError("max_edges must be positive");
      prune_value = static_cast<double>(cfg.max_edges);
      for (auto& c : per_pair) kept.insert(kept.end(), c.begin(), c.end());
      std::sort(kept.begin(), kept.end(), stronger);
      if (kept.size() > cfg.max_edges) kept.resize(cfg.max_edges);
      break;
    }
  }
  if (kept.empty())
    throw GraphError("attribution graph is empty after pruning (" + to_string(cfg.pruning) + " = " +
                     std::to_string(prune_value) + "); lower tau or raise the edge budget");

  std::map<FeatureId, std::size_t> index;
  for (const auto& e : kept) {
    index[{e.layer, e.i}] = 0;
    index[{e.layer + 1, e.j}] = 0;
  }
  AttributionGraph g;
  for (auto& [id, idx] : index) {
    idx = g.nodes.size();
    g.nodes.push_back({id, dense.mean_activation[id.layer][id.index], dense.frequency[id.layer][id.index]});
  }
  for (const auto& e : kept) g.edges.push_back({index[{e.layer, e.i}], index[{e.layer + 1, e.j}], e.w});
  std::sort(g.edges.begin(), g.edges.end(),
            [](const GraphEdge& a, const GraphEdge& b) { return std::tie(a.src, a.dst) < std::tie(b.src, b.dst); });

  g.meta.model_hash = cfg.model_hash;
  g.meta.transcoder_hash = cfg.transcoder_hash;
  g.meta.probe_id = cfg.probe_id;
  g.meta.probe_count = dense.probe_count;
  g.meta.n_layers = dense.mean_activation.size();
  g.meta.dict_size = dense.mean_activation.empty() ? 0 : dense.mean_activation.front().size();
  g.meta.pruning = cfg.pruning;
  g.meta.prune_value = prune_value;
  return g;
}

AttributionGraph build_graph(const Transformer& model, const Transcoders& tc, const std::vector<TaskInstance>& probes,
                             const GraphConfig& cfg) {
  AttributionGraph g = prune(aggregate_attributions(model, tc, probes, cfg.aggregation), cfg);
  g.meta.aggregation = cfg.aggregation;
  return g;
}

std::string serialize_graph(const AttributionGraph& g) {
  json j;
  j["format"] = "hagd-attribution-graph";
  j["version"] = 1;
  j["meta"] = {{"model_hash", g.meta.model_hash},
               {"transcoder_hash", g.meta.transcoder_hash},
               {"probe_id", g.meta.probe_id},
               {"probe_count", g.meta.probe_count},
               {"n_layers", g.meta.n_layers},
               {"dict_size", g.meta.dict_size},
               {"aggregation", to_string(g.meta.aggregation)},
               {"pruning", to_string(g.meta.pruning)},
               {"prune_value", g.meta.prune_value}};
  j["nodes"] = json::array();
  for (const auto& n : g.nodes) j["nodes"].push_back({n.id.layer, n.id.index, n.mean_activation, n.frequency});
  j["edges"] = json::array();
  for (const auto& e : g.edges) j["edges"].push_back({e.src, e.dst, e.weight});
  return j.dump() + "\n";
}

namespace {

Aggregation aggregation_from(const std::string& s) {
  if (s == "mean_abs") return Aggregation::mean_abs;
  if (s == "mean_signed") return Aggregation::mean_signed;
  throw ParseError("unknown aggregation '" + s + "'", 0);
}

Pruning pruning_from(const std::string& s) {
  if (s == "top_fraction") return Pruning::top_fraction;
  if (s == "threshold") return Pruning::threshold;
  if (s == "max_edges") return Pruning::max_edges;
  throw ParseError("unknown pruning '" + s + "'", 0);
}

}  // namespace

AttributionGraph deserialize_graph(const std::string& bytes) {
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("attribution graph: ") + e.what(), e.byte);
  }
  AttributionGraph g;
  try {
    if (j.at("format").get<std::string>() != "hagd-attribution-graph" || j.at("version").get<int>() != 1)
      throw ParseError("attribution graph: unsupported format", 0);
    const json& m = j.at("meta");
    g.meta.model_hash = m.at("model_hash").get<std::string>();
    g.meta.transcoder_hash = m.at("transcoder_hash").get<std::string>();
    g.meta.probe_id = m.at("probe_id").get<std::string>();
    g.meta.probe_count = m.at("probe_count").get<std::size_t>();
    g.meta.n_layers = m.at("n_layers").get<std::size_t>();
    g.meta.dict_size = m.at("dict_size").get<std::size_t>();
    g.meta.aggregation = aggregation_from(m.at("aggregation").get<std::string>());
    g.meta.pruning = pruning_from(m.at("pruning").get<std::string>());
    g.meta.prune_value = m.at("prune_value").get<double>();
    for (const auto& n : j.at("nodes"))
      g.nodes.push_back({{n.at(0).get<std::size_t>(), n.at(1).get<std::size_t>()}, n.at(2).get<double>(),
                         n.at(3).get<double>()});
    for (const auto& e : j.at("edges"))
      g.edges.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<double>()});
  } catch (const json::exception& e) {
    throw ParseError(std::string("attribution graph: ") + e.what(), 0);
  }
  try {
    validate(g);
  } catch (const GraphError& e) {
    throw ParseError(std::string("attribution graph: ") + e.what(), 0);
  }
  return g;
}

std::string to_dot(const AttributionGraph& g) {
  std::ostringstream os;
  os << "digraph attribution {\n  rankdir=LR;\n";
  double wmax = 0.0;
  for (const auto& e : g.edges) wmax = std::max(wmax, std::abs(e.weight));
  std::size_t layer = static_cast<std::size_t>(-1);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& n = g.nodes[i];
    if (n.id.layer != layer) {
      if (layer != static_cast<std::size_t>(-1)) os << "  }\n";
      layer = n.id.layer;
      os << "  subgraph cluster_L" << layer << " {\n    label=\"layer " << layer << "\";\n";
    }
    os << "    n" << i << " [label=\"" << to_string(n.id) << "\"];\n";
  }
  if (!g.nodes.empty()) os << "  }\n";
  for (const auto& e : g.edges) {
    const double width = wmax > 0.0 ? 0.5 + 4.5 * std::abs(e.weight) / wmax : 1.0;
    os << "  n" << e.src << " -> n" << e.dst << " [penwidth=" << width << (e.weight < 0 ? ", style=dashed" : "")
       << "];\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace hagd
