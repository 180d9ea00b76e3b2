#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "hagd/attribution.hpp"
#include "hagd/error.hpp"
#include "attribution_oracle.hpp"
#include "mod13_fixture.hpp"

using namespace hagd;
using ad::Tensor;
using ad::Var;

namespace {

void set(const Transformer& m, const std::string& name, const Tensor& value) {
  for (auto& [n, v] : m.named_parameters())
    if (n == name) {
      Var h = v;
      h.mutable_value() = value;
      return;
    }
  FAIL("no parameter " << name);
}

// Two identity blocks over d = 4: every weight that writes into the residual
// stream is zero, so h_l is just the embedding.
struct Linear {
  Transformer model;
  Transcoders tc;
};

Linear linear_stack(double input, double gain) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 4;
  c.n_heads = 1;
  c.vocab_size = 2;
  c.max_seq_len = 1;
  Linear s{Transformer(c), {}};
  for (auto& [n, v] : s.model.named_parameters())
    if (n.find("w_") != std::string::npos || n.find("b_") != std::string::npos || n.find("embed") != std::string::npos)
      set(s.model, n, Tensor(v.shape(), 0.0));
  set(s.model, "tok_embed", Tensor::matrix({{input, 0, 0, 0}, {0, 0, 0, 0}}));
  TranscoderConfig tcfg;
  tcfg.dict_size = 8;
  tcfg.k = 1;
  s.tc = init_transcoders(2, 4, tcfg);
  for (std::size_t l = 0; l < 2; ++l) {
    Tensor w({8, 4}, 0.0), dec({4, 8}, 0.0);
    w.at(0, 0) = l == 0 ? 1.0 : gain;
    dec.at(0, 0) = 1.0;
    s.tc.layers[l].w_enc.mutable_value() = w;
    s.tc.layers[l].dec.mutable_value() = dec;
  }
  return s;
}

AttributionGraph three_nodes() {
  AttributionGraph g;
  g.meta.probe_id = "unit";
  g.meta.n_layers = 3;
  g.meta.dict_size = 8;
  g.nodes = {{{0, 2}, 0.5, 0.25}, {{1, 0}, 1.0 / 3.0, 1.0}, {{2, 7}, 1e-17, 0.125}};
  g.edges = {{0, 1, 0.1}, {1, 2, -2.5e-9}};
  return g;
}

}  // namespace

TEST_CASE("synthetic linear stack: f_j = 2 f_i with f_i = 3 gives 6") {
  auto s = linear_stack(3.0, 2.0);
  auto a = feature_attribution(s.model, s.tc, {0}, {0, 0}, {1, 0});
  REQUIRE(a.size() == 1);
  CHECK(a[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("attribution is linear in the injected activation") {
  auto one = linear_stack(3.0, 2.0);
  auto two = linear_stack(6.0, 2.0);
  const double a1 = feature_attribution(one.model, one.tc, {0}, {0, 0}, {1, 0})[0];
  const double a2 = feature_attribution(two.model, two.tc, {0}, {0, 0}, {1, 0})[0];
  CHECK(std::abs(a2) == doctest::Approx(2.0 * std::abs(a1)).epsilon(1e-12));
}

TEST_CASE("inactive source feature has zero attribution") {
  auto s = linear_stack(3.0, 2.0);
  CHECK(feature_attribution(s.model, s.tc, {0}, {0, 3}, {1, 0})[0] == 0.0);
  // Token 1 embeds to zero, so nothing fires.
  CHECK(feature_attribution(s.model, s.tc, {1}, {0, 0}, {1, 0})[0] == 0.0);
}

TEST_CASE("attribution rejects non-adjacent and out-of-range features") {
  auto s = linear_stack(3.0, 2.0);
  CHECK_THROWS_AS(feature_attribution(s.model, s.tc, {0}, {0, 0}, {0, 1}), ContractError);
  CHECK_THROWS_AS(feature_attribution(s.model, s.tc, {0}, {1, 0}, {0, 0}), ContractError);
  CHECK_THROWS_AS(feature_attribution(s.model, s.tc, {0}, {0, 8}, {1, 0}), RangeError);
}

TEST_CASE("attributions match perturbation finite differences on trained mod-13 features") {
  const auto& fx = hagd::testing::mod13();
  const auto& tc = hagd::testing::mod13_transcoders();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, fx.all.size() - 1);
  int checked = 0;
  double worst = 0.0;
  while (checked < 60) {
    const auto& tokens = fx.all[pick(rng)].tokens;
    auto trace = forward(fx.model, tokens);
    Tensor f0 = encode(tc, 0, trace.hidden[0]);
    Tensor f1 = encode(tc, 1, trace.hidden[1]);
    std::vector<std::size_t> src, dst;
    for (std::size_t i = 0; i < tc.m; ++i) {
      if (f0.at(2, i) > 0.0) src.push_back(i);
      if (f1.at(2, i) > 0.0) dst.push_back(i);
    }
    REQUIRE(!src.empty());
    REQUIRE(!dst.empty());
    const FeatureId s{0, src[rng() % src.size()]};
    const std::size_t j = dst[rng() % dst.size()];
    const double a = feature_attribution(fx.model, tc, tokens, s, {1, j})[2];
    if (std::abs(a) < 1e-6) continue;
    const double h = 1e-6;
    const double fd = (hagd::testing::downstream_value(fx.model, tc, tokens, s, j, 2, 1.0 + h) -
                       hagd::testing::downstream_value(fx.model, tc, tokens, s, j, 2, 1.0 - h)) /
                      (2.0 * h);
    const double rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
    worst = std::max(worst, rel);
    INFO("pair " << to_string(s) << " -> L1:F" << j << " analytic " << a << " fd " << fd);
    CHECK(rel < 1e-4);
    ++checked;
  }
  MESSAGE("worst relative error over " << checked << " pairs: " << worst);
}

TEST_CASE("graph construction on mod-13: pruning, determinism and order independence") {
  const auto& fx = hagd::testing::mod13();
  const auto& tc = hagd::testing::mod13_transcoders();
  std::vector<TaskInstance> probes(fx.all.begin(), fx.all.begin() + 40);
  auto dense = aggregate_attributions(fx.model, tc, probes, Aggregation::mean_abs);
  std::size_t nonzero = 0;
  for (double v : dense.pair[0].data()) nonzero += v != 0.0;
  REQUIRE(nonzero > 0);

  GraphConfig cfg;
  cfg.probe_id = "mod13-first40";
  AttributionGraph g = prune(dense, cfg);
  validate(g);
  CHECK(g.edges.size() == static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(nonzero))));
  for (const auto& e : g.edges) {
    CHECK(g.nodes[e.dst].id.layer == g.nodes[e.src].id.layer + 1);
    CHECK(e.weight > 0.0);
  }
  // Every node touches a retained edge.
  std::vector<int> degree(g.nodes.size(), 0);
  for (const auto& e : g.edges) ++degree[e.src], ++degree[e.dst];
  for (int d : degree) CHECK(d > 0);

  AttributionGraph again = build_graph(fx.model, tc, probes, cfg);
  CHECK(serialize_graph(again) == serialize_graph(g));

  auto shuffled = probes;
  std::mt19937_64 rng(2);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(serialize_graph(build_graph(fx.model, tc, shuffled, cfg)) == serialize_graph(g));

  cfg.pruning = Pruning::threshold;
  cfg.tau = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(prune(dense, cfg), GraphError);
  cfg.tau = 0.0;
  AttributionGraph full = prune(dense, cfg);
  CHECK(full.edges.size() == nonzero);

  cfg.pruning = Pruning::max_edges;
  cfg.max_edges = 7;
  AttributionGraph capped = prune(dense, cfg);
  CHECK(capped.edges.size() == 7);
  double weakest_kept = std::numeric_limits<double>::infinity();
  for (const auto& e : capped.edges) weakest_kept = std::min(weakest_kept, e.weight);
  std::size_t stronger = 0;
  for (double v : dense.pair[0].data()) stronger += v > weakest_kept;
  CHECK(stronger < 7);
}

TEST_CASE("tau = 0 on a tiny untrained stack keeps at most m^2 edges per pair") {
  ModelConfig c;
  c.hidden_dim = 8;
  c.n_heads = 2;
  Transformer model(c);
  TranscoderConfig tcfg;
  tcfg.dict_size = 16;
  tcfg.k = 4;
  Transcoders tc = init_transcoders(2, 8, tcfg);
  TaskParams tp;
  GraphConfig cfg;
  cfg.pruning = Pruning::threshold;
  cfg.tau = 0.0;
  auto g = build_graph(model, tc, generate_task(tp, 30, 3), cfg);
  CHECK(g.edges.size() <= 16 * 16);
  CHECK_THROWS_AS(build_graph(model, tc, {}, cfg), InputError);
}

TEST_CASE("serialization round trips and is canonical") {
  AttributionGraph g = three_nodes();
  const std::string bytes = serialize_graph(g);
  AttributionGraph back = deserialize_graph(bytes);
  CHECK(back == g);
  CHECK(serialize_graph(back) == bytes);

  AttributionGraph empty = g;
  empty.edges.clear();
  CHECK(deserialize_graph(serialize_graph(empty)) == empty);
}

TEST_CASE("malformed graph files report a parse error with offset") {
  const std::string bytes = serialize_graph(three_nodes());
  try {
    deserialize_graph(bytes.substr(0, bytes.size() / 2));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.byte_offset() > 0);
  }
  CHECK_THROWS_AS(deserialize_graph("{\"format\": \"something-else\"}"), ParseError);
  AttributionGraph bad = three_nodes();
  bad.edges = {{0, 2, 1.0}};
  CHECK_THROWS_AS(validate(bad), GraphError);
  CHECK_THROWS_AS(deserialize_graph(serialize_graph(bad)), ParseError);
}

TEST_CASE("dot export lists every node and edge") {
  const std::string dot = to_dot(three_nodes());
  CHECK(dot.rfind("digraph", 0) == 0);
  CHECK(dot.find("L2:F7") != std::string::npos);
  std::size_t arrows = 0;
  for (std::size_t p = dot.find("->"); p != std::string::npos; p = dot.find("->", p + 2)) ++arrows;
  CHECK(arrows == 2);
}
