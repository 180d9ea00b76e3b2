#include "hagd/search.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "hagd/error.hpp"

namespace hagd {

double MemoEvaluator::operator()(std::span<const std::size_t> nodes) {
  std::vector<std::size_t> key(nodes.begin(), nodes.end());
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  const double v = fn_(nodes);
  cache_.emplace(std::move(key), v);
  return v;
}

std::string to_string(Guidance g) {
  switch (g) {
    case Guidance::heuristic: return "heuristic";
    case Guidance::gnn: return "gnn";
    case Guidance::none: return "none";
  }
  return "unknown";
}

Guidance guidance_from_string(const std::string& s) {
  if (s == "heuristic") return Guidance::heuristic;
  if (s == "gnn") return Guidance::gnn;
  if (s == "none") return Guidance::none;
  throw ParameterError("unknown guidance '" + s + "'");
}

void validate(const SearchConfig& cfg) {
  if (!(cfg.theta >= 0.0 && cfg.theta <= 1.0)) throw ParameterError("search: theta must be in [0, 1]");
  if (cfg.beam_width < 1) throw ParameterError("search: beam width must be >= 1");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

Circuit exhaustive_search(std::size_t n, const Evaluator& evaluator, double theta) {
  if (n > exhaustive_cap)
    throw SearchError("exhaustive search refuses " + std::to_string(n) + " nodes (cap " +
                      std::to_string(exhaustive_cap) + ")");
  const auto t0 = Clock::now();
  Circuit c;
  c.meta.method = "exhaustive";
  MemoEvaluator eval(evaluator);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const double full = eval(all);
  c.meta.best_preservation = full;
  if (full >= theta) {
    // Subsets in order of size, each size in lexicographic order.
    for (std::size_t size = 0; size <= n && !c.meta.found; ++size) {
      std::vector<std::size_t> pick(size);
      std::iota(pick.begin(), pick.end(), std::size_t{0});
      while (true) {
        ++c.meta.decisions;
        const double phi = eval(pick);
        if (phi >= theta) {
          c.nodes = pick;
          c.preservation = phi;
          c.meta.found = true;
          c.meta.best_preservation = phi;
          break;
        }
        // Next combination.
        std::size_t i = size;
        while (i > 0 && pick[i - 1] == n - size + i - 1) --i;
        if (i == 0) break;
        ++pick[i - 1];
        for (std::size_t j = i; j < size; ++j) pick[j] = pick[j - 1] + 1;
      }
    }
  }
  c.meta.evaluations = eval.evaluations();
  c.meta.wall_seconds = seconds_since(t0);
  return c;
}

namespace {

// Ranking key: higher score first, then lower index.
struct Ranked {
  double score;
  std::size_t vertex;
  bool operator<(const Ranked& o) const { return score != o.score ? score > o.score : vertex < o.vertex; }
};

std::vector<std::size_t> union_members(const HierarchyLevel& lvl, std::span<const Ranked> picked) {
  std::vector<std::size_t> out;
  for (const auto& r : picked) out.insert(out.end(), lvl.members[r.vertex].begin(), lvl.members[r.vertex].end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> without(const std::vector<std::size_t>& set, std::initializer_list<std::size_t> drop) {
  std::vector<std::size_t> out;
  for (std::size_t v : set)
    if (std::find(drop.begin(), drop.end(), v) == drop.end()) out.push_back(v);
  return out;
}

}  // namespace

Circuit hierarchical_search(const Hierarchy& h, const Evaluator& evaluator, const std::vector<double>& scores,
                            const SearchConfig& cfg) {
  validate(cfg);
  if (h.levels.empty()) throw SearchError("hierarchical search needs a built hierarchy");
  const std::size_t n = h.base_size();
  if (scores.size() != n) throw ContractError("hierarchical search: one score per base vertex required");
  const auto t0 = Clock::now();
  Circuit c;
  c.meta.method = "hierarchical";
  c.meta.level_decisions.assign(h.levels.size(), 0);
  MemoEvaluator eval(evaluator);
  auto finish = [&] {
    c.meta.evaluations = eval.evaluations();
    c.meta.wall_seconds = seconds_since(t0);
    return c;
  };

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const double full = eval(all);
  c.meta.best_preservation = full;
  if (full < cfg.theta) return finish();
  const double empty = eval(std::vector<std::size_t>{});
  if (empty >= cfg.theta) {
    c.meta.found = true;
    c.preservation = empty;
    c.meta.best_preservation = std::max(full, empty);
    return finish();
  }

  // Best member score of every vertex at every level.
  std::vector<std::vector<double>> level_score(h.levels.size());
  for (std::size_t r = 0; r < h.levels.size(); ++r) {
    const auto& lvl = h.levels[r];
    level_score[r].assign(lvl.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t v = 0; v < lvl.size(); ++v)
      for (std::size_t m : lvl.members[v]) level_score[r][v] = std::max(level_score[r][v], scores[m]);
  }

  std::vector<bool> keep_parent;  // vertices kept one level up
  std::vector<std::size_t> circuit;
  for (std::size_t r = h.levels.size(); r-- > 0;) {
    const auto& lvl = h.levels[r];
    std::vector<Ranked> cand;
    for (std::size_t v = 0; v < lvl.size(); ++v)
      if (keep_parent.empty() || keep_parent[lvl.parent[v]]) cand.push_back({level_score[r][v], v});
    std::sort(cand.begin(), cand.end());
    c.meta.level_decisions[r] = cand.size();
    c.meta.decisions += cand.size();

    // The whole candidate set covers everything kept above, which passed.
    std::size_t p = cand.size();
    for (std::size_t q = 1; q < cand.size(); ++q) {
      if (eval(union_members(lvl, std::span(cand).first(q))) >= cfg.theta) {
        p = q;
        break;
      }
    }
    if (r > 0) p = std::max(p, std::min(cfg.beam_width, cand.size()));
    keep_parent.assign(lvl.size(), false);
    for (std::size_t i = 0; i < p; ++i) keep_parent[cand[i].vertex] = true;
    if (r == 0) circuit = union_members(lvl, std::span(cand).first(p));
  }

  auto by_score_ascending = [&](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) { return Ranked{scores[b], b} < Ranked{scores[a], a}; });
    return v;
  };
  auto reverse_prune = [&] {
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t u : by_score_ascending(circuit)) {
        ++c.meta.decisions;
        auto trial = without(circuit, {u});
        if (eval(trial) >= cfg.theta) {
          circuit = std::move(trial);
          changed = true;
        }
      }
    }
  };
  reverse_prune();

  if (cfg.refine) {
    // Replace two of the weakest members by one strong outsider when that
    // still passes. Both pools are capped by the beam width so a round costs
    // O(beam^3) evaluations.
    for (bool improved = true; improved && circuit.size() >= 2;) {
      improved = false;
      std::vector<Ranked> outside;
      for (std::size_t v = 0; v < n; ++v)
        if (!std::binary_search(circuit.begin(), circuit.end(), v)) outside.push_back({scores[v], v});
      std::sort(outside.begin(), outside.end());
      outside.resize(std::min(outside.size(), cfg.beam_width));
      auto weak = by_score_ascending(circuit);
      weak.resize(std::min(weak.size(), 2 * cfg.beam_width));
      for (std::size_t o = 0; o < outside.size() && !improved; ++o)
        for (std::size_t i = 0; i < weak.size() && !improved; ++i)
          for (std::size_t j = i + 1; j < weak.size() && !improved; ++j) {
            ++c.meta.decisions;
            auto trial = without(circuit, {weak[i], weak[j]});
            trial.insert(std::upper_bound(trial.begin(), trial.end(), outside[o].vertex), outside[o].vertex);
            if (eval(trial) >= cfg.theta) {
              circuit = std::move(trial);
              improved = true;
            }
          }
      if (improved) reverse_prune();
    }
  }

  c.nodes = circuit;
  c.preservation = eval(circuit);
  c.meta.found = true;
  c.meta.best_preservation = std::max(full, c.preservation);
  return finish();
}

std::vector<double> incident_weight(std::size_t n, const std::vector<LevelEdge>& edges) {
  std::vector<double> w(n, 0.0);
  for (const auto& e : edges) {
    w[e.src] += std::abs(e.weight);
    if (e.dst != e.src) w[e.dst] += std::abs(e.weight);
  }
  return w;
}

std::vector<double> heuristic_scores(const AttributionGraph& graph) {
  auto raw = incident_weight(graph.nodes.size(), index_edges(graph));
  std::map<std::size_t, double> layer_max;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    double& m = layer_max[graph.nodes[i].id.layer];
    m = std::max(m, raw[i]);
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double m = layer_max[graph.nodes[i].id.layer];
    raw[i] = m > 0.0 ? raw[i] / m : 0.0;
  }
  return raw;
}

double heuristic_score(const AttributionGraph& graph, std::size_t node) {
  if (node >= graph.nodes.size()) throw RangeError("heuristic_score: node index out of range");
  return heuristic_scores(graph)[node];
}

std::vector<double> unguided_scores(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(n);
  for (double& x : s) x = u(rng);
  return s;
}

std::vector<std::size_t> induced_edges(const AttributionGraph& graph, const std::vector<std::size_t>& nodes) {
  std::vector<bool> in(graph.nodes.size(), false);
  for (std::size_t v : nodes) in.at(v) = true;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < graph.edges.size(); ++i)
    if (in[graph.edges[i].src] && in[graph.edges[i].dst]) out.push_back(i);
  return out;
}

std::string serialize_circuit(const Circuit& c, const AttributionGraph& graph, const std::string& graph_hash,
                              const SearchConfig& cfg) {
  using nlohmann::json;
  json doc;
  doc["format"] = "hagd-circuit";
  doc["version"] = 1;
  doc["graph_hash"] = graph_hash;
  doc["config"] = {{"theta", cfg.theta},
                   {"beam_width", cfg.beam_width},
                   {"guidance", to_string(cfg.guidance)},
                   {"refine", cfg.refine},
                   {"seed", cfg.seed}};
  json nodes = json::array();
  for (std::size_t v : c.nodes) nodes.push_back(json::array({v, graph.nodes.at(v).id.layer, graph.nodes.at(v).id.index}));
  doc["nodes"] = std::move(nodes);
  json edges = json::array();
  for (std::size_t e : induced_edges(graph, c.nodes)) {
    const auto& ge = graph.edges[e];
    edges.push_back(json::array({ge.src, ge.dst, ge.weight}));
  }
  doc["edges"] = std::move(edges);
  doc["preservation"] = c.preservation;
  // Wall time is left out so identical runs give identical files.
  doc["search"] = {{"method", c.meta.method},
                   {"found", c.meta.found},
                   {"best_preservation", c.meta.best_preservation},
                   {"decisions", c.meta.decisions},
                   {"level_decisions", c.meta.level_decisions},
                   {"evaluations", c.meta.evaluations}};
  return doc.dump(1) + "\n";
}

Circuit deserialize_circuit(const std::string& text, const AttributionGraph& graph) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("circuit: ") + e.what(), e.byte);
  }
  try {
    if (doc.at("format") != "hagd-circuit") throw ParseError("circuit: unexpected format tag", 0);
    Circuit c;
    for (const auto& n : doc.at("nodes")) {
      const auto v = n.at(0).get<std::size_t>();
      if (v >= graph.nodes.size() || graph.nodes[v].id.layer != n.at(1).get<std::size_t>() ||
          graph.nodes[v].id.index != n.at(2).get<std::size_t>())
        throw ParseError("circuit: node " + std::to_string(v) + " does not match the graph", 0);
      c.nodes.push_back(v);
    }
    if (!std::is_sorted(c.nodes.begin(), c.nodes.end())) throw ParseError("circuit: nodes out of order", 0);
    c.preservation = doc.at("preservation").get<double>();
    const auto& s = doc.at("search");
    c.meta.method = s.at("method").get<std::string>();
    c.meta.found = s.at("found").get<bool>();
    c.meta.best_preservation = s.at("best_preservation").get<double>();
    c.meta.decisions = s.at("decisions").get<std::size_t>();
    c.meta.level_decisions = s.at("level_decisions").get<std::vector<std::size_t>>();
    c.meta.evaluations = s.at("evaluations").get<std::size_t>();
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("circuit: ") + e.what(), 0);
  }
}

std::string circuit_to_dot(const Circuit& c, const AttributionGraph& graph) {
  AttributionGraph sub;
  sub.meta = graph.meta;
  std::map<std::size_t, std::size_t> remap;
  for (std::size_t v : c.nodes) {
    remap[v] = sub.nodes.size();
    sub.nodes.push_back(graph.nodes.at(v));
  }
  for (std::size_t e : induced_edges(graph, c.nodes)) {
    GraphEdge ge = graph.edges[e];
    ge.src = remap[ge.src];
    ge.dst = remap[ge.dst];
    sub.edges.push_back(ge);
  }
  return to_dot(sub);
}

}  // namespace hagd
