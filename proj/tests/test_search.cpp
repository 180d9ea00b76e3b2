#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hagd/error.hpp"
#include "hagd/search.hpp"
#include "hagd/synthetic.hpp"

using namespace hagd;

namespace {

// Six vertices; {1, 3} share the heaviest edge.
std::vector<LevelEdge> six_node_edges() {
  return {{0, 1, 0.2}, {1, 3, 2.0}, {3, 5, 0.3}, {2, 4, 0.4}, {4, 5, 0.1}, {0, 2, 0.2}};
}

double needs_1_and_3(std::span<const std::size_t> nodes) {
  bool a = false, b = false;
  for (std::size_t v : nodes) a |= v == 1, b |= v == 3;
  return a && b ? 1.0 : 0.0;
}

bool contains(const std::vector<std::size_t>& set, std::size_t v) {
  return std::binary_search(set.begin(), set.end(), v);
}

}  // namespace

TEST_CASE("exhaustive search on the six-node example") {
  auto c = exhaustive_search(6, needs_1_and_3, 0.9);
  CHECK(c.meta.found);
  CHECK(c.nodes == std::vector<std::size_t>{1, 3});
  CHECK(c.preservation == 1.0);

  auto vacuous = exhaustive_search(6, needs_1_and_3, 0.0);
  CHECK(vacuous.meta.found);
  CHECK(vacuous.nodes.empty());

  auto none = exhaustive_search(6, [](std::span<const std::size_t>) { return 0.5; }, 0.9);
  CHECK_FALSE(none.meta.found);
  CHECK(none.meta.best_preservation == 0.5);
}

TEST_CASE("exhaustive search breaks ties lexicographically and refuses large graphs") {
  auto c = exhaustive_search(5, [](std::span<const std::size_t> s) { return s.size() >= 2 ? 1.0 : 0.0; }, 1.0);
  CHECK(c.nodes == std::vector<std::size_t>{0, 1});
  auto d = exhaustive_search(5, [](std::span<const std::size_t> s) {
    return (s.size() == 2 && s[0] == 2) || s.size() == 5 ? 1.0 : 0.0;
  }, 1.0);
  CHECK(d.nodes == std::vector<std::size_t>{2, 3});
  try {
    exhaustive_search(21, needs_1_and_3, 0.5);
    FAIL("expected SearchError");
  } catch (const SearchError& e) {
    CHECK(std::string(e.what()).find("20") != std::string::npos);
  }
}

TEST_CASE("hierarchical search on the six-node example matches the oracle") {
  const auto edges = six_node_edges();
  const auto scores = incident_weight(6, edges);
  for (std::size_t b : {2, 3}) {
    Hierarchy h = build_hierarchy(6, edges, b);
    auto c = hierarchical_search(h, needs_1_and_3, scores, {});
    CHECK(c.nodes == exhaustive_search(6, needs_1_and_3, 0.9).nodes);
    // Unguided order still reaches the same circuit after pruning.
    auto u = hierarchical_search(h, needs_1_and_3, unguided_scores(6, 4), {.guidance = Guidance::none});
    CHECK(u.nodes == std::vector<std::size_t>{1, 3});
    auto vacuous = hierarchical_search(h, needs_1_and_3, scores, {.theta = 0.0});
    CHECK(vacuous.nodes.empty());
    auto none = hierarchical_search(h, [](std::span<const std::size_t>) { return 0.4; }, scores, {});
    CHECK_FALSE(none.meta.found);
    CHECK(none.meta.best_preservation == 0.4);
  }
  Hierarchy h = build_hierarchy(6, edges, 2);
  CHECK_THROWS_AS(hierarchical_search(h, needs_1_and_3, {1.0}, {}), ContractError);
  CHECK_THROWS_AS(hierarchical_search(h, needs_1_and_3, scores, {.theta = 1.5}), ParameterError);
  CHECK_THROWS_AS(hierarchical_search(h, needs_1_and_3, scores, {.beam_width = 0}), ParameterError);
}

TEST_CASE("heuristic scores") {
  // Star on five vertices plus an isolated vertex.
  std::vector<LevelEdge> star{{0, 1, 1.0}, {0, 2, -2.0}, {3, 0, 0.5}, {0, 4, 1.5}};
  auto raw = incident_weight(6, star);
  CHECK(raw[5] == 0.0);
  CHECK(std::max_element(raw.begin(), raw.end()) - raw.begin() == 0);
  auto doubled = star;
  for (auto& e : doubled) e.weight *= 2.0;
  auto raw2 = incident_weight(6, doubled);
  for (std::size_t v = 0; v < 6; ++v) CHECK(raw2[v] == 2.0 * raw[v]);

  AttributionGraph g;
  g.meta.n_layers = 2;
  for (std::size_t i = 0; i < 3; ++i) g.nodes.push_back({{0, i}, 1.0, 0.5});
  for (std::size_t i = 0; i < 3; ++i) g.nodes.push_back({{1, i}, 1.0, 0.5});
  g.edges = {{0, 3, 1.0}, {0, 4, 3.0}, {1, 4, -1.0}};
  auto s = heuristic_scores(g);
  CHECK(s[0] == 1.0);   // 4 / 4 within layer 0
  CHECK(s[1] == 0.25);  // 1 / 4
  CHECK(s[2] == 0.0);   // isolated
  CHECK(s[4] == 1.0);
  CHECK(s[3] == 0.25);
  CHECK(heuristic_score(g, 1) == 0.25);
  CHECK_THROWS_AS(heuristic_score(g, 6), RangeError);
}

TEST_CASE("hierarchical search agrees with exhaustive search on small planted graphs") {
  std::mt19937_64 rng(2024);
  double worst_phi = 0.0;
  long worst_size = 0;
  for (int s = 0; s < 25; ++s) {
    const std::size_t n = 8 + static_cast<std::size_t>(s % 9);
    auto g = planted_graph(n, 3 + static_cast<std::size_t>(s % 4), 1.5, rng());
    auto eval = planted_evaluator(g);
    Hierarchy h = build_hierarchy(n, g.edges, 4, static_cast<std::uint64_t>(s));
    auto ex = exhaustive_search(n, eval, 0.9);
    auto hi = hierarchical_search(h, eval, incident_weight(n, g.edges), {.theta = 0.9});
    REQUIRE(ex.meta.found);
    REQUIRE(hi.meta.found);
    worst_phi = std::max(worst_phi, std::abs(hi.preservation - ex.preservation));
    worst_size = std::max(worst_size, static_cast<long>(hi.nodes.size()) - static_cast<long>(ex.nodes.size()));
    CHECK(hi.nodes.size() >= ex.nodes.size());
  }
  MESSAGE("worst preservation gap " << worst_phi << ", worst size gap " << worst_size);
  CHECK(worst_phi <= 0.05);
  CHECK(worst_size <= 2);
}

TEST_CASE("reverse pruning leaves a locally minimal circuit") {
  std::mt19937_64 rng(5);
  for (int s = 0; s < 20; ++s) {
    auto g = planted_graph(40, 8, 2.0, rng());
    auto eval = planted_evaluator(g);
    Hierarchy h = build_hierarchy(40, g.edges, 4);
    for (bool refine : {false, true}) {
      auto c = hierarchical_search(h, eval, incident_weight(40, g.edges), {.theta = 0.8, .refine = refine});
      REQUIRE(c.meta.found);
      CHECK(eval(c.nodes) >= 0.8);
      for (std::size_t v : c.nodes) {
        std::vector<std::size_t> less;
        for (std::size_t u : c.nodes)
          if (u != v) less.push_back(u);
        CHECK(eval(less) < 0.8);
      }
    }
  }
}

TEST_CASE("circuit size is softly monotone in the threshold and searches are deterministic") {
  std::mt19937_64 rng(9);
  for (int s = 0; s < 10; ++s) {
    auto g = planted_graph(60, 10, 2.0, rng());
    auto eval = planted_evaluator(g);
    Hierarchy h = build_hierarchy(60, g.edges, 4, 3);
    const auto scores = incident_weight(60, g.edges);
    std::size_t prev = 0;
    for (double theta : {0.3, 0.5, 0.7, 0.9, 1.0}) {
      auto c = hierarchical_search(h, eval, scores, {.theta = theta});
      CHECK(prev <= c.nodes.size() + 2);
      prev = c.nodes.size();
      auto again = hierarchical_search(h, eval, scores, {.theta = theta});
      CHECK(again.nodes == c.nodes);
      CHECK(again.meta.decisions == c.meta.decisions);
    }
  }
}

TEST_CASE("decision counts grow like n log n on synthetic hierarchies") {
  std::mt19937_64 rng(31);
  std::vector<double> ratio;
  for (std::size_t n : {64, 256, 1024}) {
    auto g = planted_graph(n, n / 16, 2.0, rng());
    Hierarchy h = hierarchy_from_partitions(n, g.edges, 4, block_partitions(n, 4));
    auto c = hierarchical_search(h, planted_evaluator(g), incident_weight(n, g.edges), {.theta = 0.9});
    REQUIRE(c.meta.found);
    const double nlogn = static_cast<double>(n) * std::log2(static_cast<double>(n));
    ratio.push_back(static_cast<double>(c.meta.decisions) / nlogn);
    MESSAGE("n=" << n << " decisions=" << c.meta.decisions << " c=" << ratio.back());
  }
  const auto [lo, hi] = std::minmax_element(ratio.begin(), ratio.end());
  CHECK(*hi <= 3.0 * *lo);
}

TEST_CASE("memoised evaluator counts distinct node sets") {
  int calls = 0;
  MemoEvaluator m([&](std::span<const std::size_t> s) {
    ++calls;
    return static_cast<double>(s.size());
  });
  std::vector<std::size_t> a{1, 2}, b{3};
  CHECK(m(a) == 2.0);
  CHECK(m(a) == 2.0);
  CHECK(m(b) == 1.0);
  CHECK(calls == 2);
  CHECK(m.evaluations() == 2);
}

TEST_CASE("circuit file round trip and DOT export") {
  AttributionGraph g;
  g.meta.n_layers = 2;
  g.meta.dict_size = 8;
  for (std::size_t i = 0; i < 3; ++i) g.nodes.push_back({{0, i}, 0.2, 0.1});
  for (std::size_t i = 0; i < 3; ++i) g.nodes.push_back({{1, i + 2}, 0.3, 0.4});
  g.edges = {{0, 3, 1.0}, {0, 4, -0.5}, {1, 4, 0.25}, {2, 5, 0.1}};
  Circuit c;
  c.nodes = {0, 1, 4};
  c.preservation = 0.95;
  c.meta.method = "hierarchical";
  c.meta.found = true;
  c.meta.decisions = 12;
  c.meta.level_decisions = {6, 2};
  CHECK(induced_edges(g, c.nodes) == std::vector<std::size_t>{1, 2});
  const std::string text = serialize_circuit(c, g, "deadbeef", {});
  auto back = deserialize_circuit(text, g);
  CHECK(back.nodes == c.nodes);
  CHECK(back.preservation == c.preservation);
  CHECK(back.meta.decisions == 12);
  CHECK(serialize_circuit(back, g, "deadbeef", {}) == text);
  CHECK(text.find("deadbeef") != std::string::npos);
  AttributionGraph other = g;
  other.nodes[4].id.index = 7;
  CHECK_THROWS_AS(deserialize_circuit(text, other), ParseError);
  CHECK_THROWS_AS(deserialize_circuit("{\"format\":", g), ParseError);
  const std::string dot = circuit_to_dot(c, g);
  CHECK(dot.find("digraph") == 0);
  CHECK(dot.find("n0 -> n2") != std::string::npos);
  CHECK(dot.find("style=dashed") != std::string::npos);
}
