#include "hagd/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "hagd/error.hpp"
#include "hagd/spectral.hpp"

namespace hagd {

double HierarchyLevel::total_weight() const {
  double s = 0.0;
  for (double w : internal_weight) s += w;
  for (const auto& e : edges) s += e.weight;
  return s;
}

std::vector<LevelEdge> index_edges(const AttributionGraph& graph) {
  std::vector<LevelEdge> out;
  out.reserve(graph.edges.size());
  for (const auto& e : graph.edges) {
    if (e.src >= graph.nodes.size() || e.dst >= graph.nodes.size())
      throw GraphError("edge endpoint outside the node list");
    out.push_back({e.src, e.dst, e.weight});
  }
  return out;
}

std::vector<std::size_t> planned_level_sizes(std::size_t n, std::size_t b) {
  if (b < 2) throw ParameterError("branching factor must be >= 2");
  std::vector<std::size_t> sizes{n};
  while (sizes.back() > b) sizes.push_back((sizes.back() + b - 1) / b);
  return sizes;
}

ad::Tensor symmetric_adjacency(const HierarchyLevel& level) {
  const std::size_t n = level.size();
  ad::Tensor a({n, n}, 0.0);
  for (const auto& e : level.edges) {
    const double w = 0.5 * std::abs(e.weight);
    a.at(e.src, e.dst) += w;
    a.at(e.dst, e.src) += w;
  }
  return a;
}

namespace {

std::vector<LevelEdge> merge_edges(std::map<std::pair<std::size_t, std::size_t>, double>& acc) {
  std::vector<LevelEdge> out;
  out.reserve(acc.size());
  for (const auto& [key, w] : acc) out.push_back({key.first, key.second, w});
  return out;
}

}  // namespace

HierarchyLevel base_level(std::size_t n, const std::vector<LevelEdge>& edges) {
  HierarchyLevel lvl;
  lvl.members.resize(n);
  for (std::size_t i = 0; i < n; ++i) lvl.members[i] = {i};
  lvl.internal_weight.assign(n, 0.0);
  std::map<std::pair<std::size_t, std::size_t>, double> acc;
  for (const auto& e : edges) {
    if (e.src >= n || e.dst >= n) throw GraphError("edge endpoint outside the vertex range");
    if (!std::isfinite(e.weight)) throw GraphError("non-finite edge weight");
    if (e.src == e.dst)
      lvl.internal_weight[e.src] += e.weight;
    else
      acc[{e.src, e.dst}] += e.weight;
  }
  lvl.edges = merge_edges(acc);
  return lvl;
}

HierarchyLevel contract(const HierarchyLevel& level, const std::vector<std::size_t>& labels) {
  if (labels.size() != level.size()) throw ContractError("contract: one label per vertex required");
  std::size_t k = 0;
  for (std::size_t l : labels) k = std::max(k, l + 1);
  HierarchyLevel up;
  up.members.resize(k);
  up.internal_weight.assign(k, 0.0);
  for (std::size_t v = 0; v < labels.size(); ++v) {
    auto& m = up.members[labels[v]];
    m.insert(m.end(), level.members[v].begin(), level.members[v].end());
    up.internal_weight[labels[v]] += level.internal_weight[v];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (up.members[c].empty()) throw ContractError("contract: labels must cover [0, k)");
    std::sort(up.members[c].begin(), up.members[c].end());
  }
  std::map<std::pair<std::size_t, std::size_t>, double> acc;
  for (const auto& e : level.edges) {
    const std::size_t a = labels[e.src], b = labels[e.dst];
    if (a == b)
      up.internal_weight[a] += e.weight;
    else
      acc[{a, b}] += e.weight;
  }
  up.edges = merge_edges(acc);
  return up;
}

Hierarchy build_hierarchy(std::size_t n, const std::vector<LevelEdge>& edges, std::size_t b, std::uint64_t seed) {
  if (b < 2) throw ParameterError("branching factor must be >= 2");
  if (n == 0) throw GraphError("cannot build a hierarchy over an empty graph");
  Hierarchy h;
  h.branching = b;
  h.levels.push_back(base_level(n, edges));
  while (h.levels.back().size() > b) {
    HierarchyLevel& cur = h.levels.back();
    const std::size_t k = (cur.size() + b - 1) / b;
    cur.parent = spectral_partition(symmetric_adjacency(cur), k, seed + h.levels.size() - 1);
    HierarchyLevel next = contract(cur, cur.parent);
    h.levels.push_back(std::move(next));
  }
  return h;
}

Hierarchy build_hierarchy(const AttributionGraph& graph, std::size_t b, std::uint64_t seed) {
  return build_hierarchy(graph.nodes.size(), index_edges(graph), b, seed);
}

Hierarchy hierarchy_from_partitions(std::size_t n, const std::vector<LevelEdge>& edges, std::size_t b,
                                    const std::vector<std::vector<std::size_t>>& parents) {
  if (b < 2) throw ParameterError("branching factor must be >= 2");
  Hierarchy h;
  h.branching = b;
  h.levels.push_back(base_level(n, edges));
  for (const auto& labels : parents) {
    h.levels.back().parent = labels;
    HierarchyLevel next = contract(h.levels.back(), labels);
    h.levels.push_back(std::move(next));
  }
  return h;
}

std::string serialize_hierarchy(const Hierarchy& h, const std::string& base_graph_hash) {
  using nlohmann::json;
  json doc;
  doc["format"] = "hagd-hierarchy";
  doc["version"] = 1;
  doc["base_graph_hash"] = base_graph_hash;
  doc["branching"] = h.branching;
  doc["vertices"] = h.base_size();
  json edges = json::array();
  if (!h.levels.empty()) {
    // Self-loops were folded into internal weight; write them back as edges.
    for (std::size_t v = 0; v < h.levels[0].size(); ++v)
      if (h.levels[0].internal_weight[v] != 0.0) edges.push_back(json::array({v, v, h.levels[0].internal_weight[v]}));
    for (const auto& e : h.levels[0].edges) edges.push_back(json::array({e.src, e.dst, e.weight}));
  }
  doc["edges"] = std::move(edges);
  json membership = json::array();
  for (std::size_t r = 0; r + 1 < h.levels.size(); ++r) membership.push_back(h.levels[r].parent);
  doc["membership"] = std::move(membership);
  return doc.dump(1) + "\n";
}

LoadedHierarchy deserialize_hierarchy(const std::string& text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("hierarchy: ") + e.what(), e.byte);
  }
  try {
    if (doc.at("format") != "hagd-hierarchy") throw ParseError("hierarchy: unexpected format tag", 0);
    if (doc.at("version") != 1) throw ParseError("hierarchy: unsupported version", 0);
    std::vector<LevelEdge> edges;
    for (const auto& e : doc.at("edges"))
      edges.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<double>()});
    auto parents = doc.at("membership").get<std::vector<std::vector<std::size_t>>>();
    const auto n = doc.at("vertices").get<std::size_t>();
    std::size_t expect = n;
    for (const auto& p : parents) {
      if (p.size() != expect) throw ParseError("hierarchy: membership table size mismatch", 0);
      expect = p.empty() ? 0 : *std::max_element(p.begin(), p.end()) + 1;
    }
    LoadedHierarchy out;
    out.hierarchy = hierarchy_from_partitions(n, edges, doc.at("branching").get<std::size_t>(), parents);
    out.base_graph_hash = doc.at("base_graph_hash").get<std::string>();
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("hierarchy: ") + e.what(), 0);
  } catch (const ContractError& e) {
    throw ParseError(std::string("hierarchy: ") + e.what(), 0);
  } catch (const GraphError& e) {
    throw ParseError(std::string("hierarchy: ") + e.what(), 0);
  }
}

}  // namespace hagd
