#include "hagd/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "hagd/error.hpp"

namespace hagd {

PlantedGraph planted_graph(std::size_t n, std::size_t circuit, double noise_degree, std::uint64_t seed) {
  if (circuit > n) throw ParameterError("planted circuit larger than the graph");
  std::mt19937_64 rng(seed);
  PlantedGraph g;
  g.n = n;
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::shuffle(ids.begin(), ids.end(), rng);
  g.planted.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(circuit));
  std::sort(g.planted.begin(), g.planted.end());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  auto add = [&](std::size_t a, std::size_t b, double w) {
    if (a == b || !seen.insert({a, b}).second) return;
    g.edges.push_back({a, b, u(rng) < 0.15 ? -w : w});
  };
  for (std::size_t i = 0; i < circuit; ++i)
    for (std::size_t k = 1; k <= std::min<std::size_t>(3, circuit - 1); ++k)
      add(g.planted[i], g.planted[(i + k) % circuit], 0.5 + 1.5 * u(rng));
  if (n > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const auto noise = static_cast<std::size_t>(noise_degree * static_cast<double>(n));
    for (std::size_t i = 0; i < noise; ++i) add(pick(rng), pick(rng), 0.02 + 0.3 * u(rng));
  }
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

Evaluator planted_evaluator(const PlantedGraph& g) {
  std::vector<bool> in_s(g.n, false);
  for (std::size_t v : g.planted) in_s[v] = true;
  std::vector<LevelEdge> signal;
  double total = 0.0;
  for (const auto& e : g.edges)
    if (in_s[e.src] && in_s[e.dst]) signal.push_back(e), total += std::abs(e.weight);
  return [signal, total, n = g.n](std::span<const std::size_t> nodes) {
    std::vector<bool> in(n, false);
    for (std::size_t v : nodes) in[v] = true;
    double kept = 0.0;
    for (const auto& e : signal)
      if (in[e.src] && in[e.dst]) kept += std::abs(e.weight);
    return total > 0.0 ? kept / total : 1.0;
  };
}

std::vector<std::vector<std::size_t>> block_partitions(std::size_t n, std::size_t b) {
  if (b < 2) throw ParameterError("branching factor must be >= 2");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t size = n; size > b; size = (size + b - 1) / b) {
    std::vector<std::size_t> labels(size);
    for (std::size_t v = 0; v < size; ++v) labels[v] = v / b;
    out.push_back(std::move(labels));
  }
  return out;
}

std::vector<GnnInstance> planted_gnn_instances(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size(12, 20), circ(4, 6);
  std::vector<GnnInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t n = size(rng);
    auto g = planted_graph(n, circ(rng), 1.5, rng());
    auto c = exhaustive_search(n, planted_evaluator(g), 0.9);
    GnnInstance inst;
    inst.labels.assign(n, 0.0);
    for (std::size_t v : c.nodes) inst.labels[v] = 1.0;
    std::vector<std::size_t> layer(n);
    for (std::size_t v = 0; v < n; ++v) layer[v] = v % 3;
    inst.graph = make_gnn_graph(n, g.edges, std::vector<double>(n, 1.0), std::vector<double>(n, 0.5), layer, 3);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<ScalingPoint> scaling_series(const std::vector<std::size_t>& sizes, std::size_t b, std::uint64_t seed) {
  std::vector<ScalingPoint> out;
  for (std::size_t n : sizes) {
    auto g = planted_graph(n, std::max<std::size_t>(2, n / 16), 2.0, seed + n);
    Hierarchy h = hierarchy_from_partitions(n, g.edges, b, block_partitions(n, b));
    auto c = hierarchical_search(h, planted_evaluator(g), incident_weight(n, g.edges), {.theta = 0.9});
    if (!c.meta.found) throw SearchError("scaling series: planted circuit not recovered at n = " + std::to_string(n));
    out.push_back({n, h.depth(), c.meta.decisions, c.nodes.size(), b * (h.depth() + 1)});
  }
  return out;
}

double loglog_slope(const std::vector<ScalingPoint>& pts) {
  if (pts.size() < 2) throw ParameterError("slope needs at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double k = static_cast<double>(pts.size());
  for (const auto& p : pts) {
    const double x = std::log(static_cast<double>(p.n)), y = std::log(static_cast<double>(p.decisions));
    sx += x, sy += y, sxx += x * x, sxy += x * y;
  }
  return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

}  // namespace hagd
