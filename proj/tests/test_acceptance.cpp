// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "attribution_oracle.hpp"
#include "gradcheck_battery.hpp"
#include "hagd/archive.hpp"
#include "hagd/pipeline.hpp"
#include "hagd/search.hpp"
#include "hagd/spectral.hpp"
#include "hagd/synthetic.hpp"
#include "hagd/validation.hpp"
#include "mod13_fixture.hpp"

using namespace hagd;
using ad::Tensor;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double budget_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (s > budget_s) {
    v.pass = false;
    v.detail += "; over the " + std::to_string(static_cast<int>(budget_s)) + " s budget";
  }
  char head[128];
  std::snprintf(head, sizeof head, "criterion %d %-26s %s  (%.1f s)  ", id, ("[" + name + "]").c_str(),
                v.pass ? "PASS" : "FAIL", s);
  std::printf("%s%s\n", head, v.detail.c_str());
  std::fflush(stdout);
  failures += !v.pass;
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t components(const Tensor& a) {
  const std::size_t n = a.rows();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::function<std::size_t(std::size_t)> root = [&](std::size_t v) {
    return parent[v] == v ? v : parent[v] = root(parent[v]);
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (a.at(i, j) != 0.0) parent[root(i)] = root(j);
  std::size_t c = 0;
  for (std::size_t v = 0; v < n; ++v) c += root(v) == v;
  return c;
}

const fs::path run_a = fs::temp_directory_path() / "hagd_acceptance_a";
const fs::path run_b = fs::temp_directory_path() / "hagd_acceptance_b";

void full_run(const fs::path& dir) {
  fs::remove_all(dir);
  Pipeline(RunConfig(), dir).run_all();
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();

  criterion(1, "gradient correctness", 60, [] {
    double worst = 0.0;
    std::string name;
    std::size_t ops = 0;
    for (const auto& r : hagd::testing::run_gradient_battery(100)) {
      ++ops;
      if (r.worst_rel_error >= worst) worst = r.worst_rel_error, name = r.name;
    }
    return Verdict{worst < 1e-4, std::to_string(ops) + " ops x 100 seeds, worst relative error " +
                                     fmt("%.2e", worst) + " (" + name + ")"};
  });

  criterion(2, "transcoder fidelity", 1800, [] {
    const auto& tc = hagd::testing::mod13_transcoders();
    double worst = 0.0;
    std::string list;
    for (double f : tc.fvu) worst = std::max(worst, f), list += (list.empty() ? "" : ", ") + fmt("%.4f", f);
    return Verdict{worst <= 0.20 && tc.m == 8 * tc.d && tc.k == 32,
                   "m/d = " + std::to_string(tc.m / tc.d) + ", k = " + std::to_string(tc.k) + ", per-layer FVU [" +
                       list + "], model held-out accuracy " + fmt("%.3f", hagd::testing::mod13().heldout_accuracy)};
  });

  criterion(3, "attribution correctness", 300, [] {
    const auto& fx = hagd::testing::mod13();
    const auto& tc = hagd::testing::mod13_transcoders();
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> pick(0, fx.all.size() - 1);
    int checked = 0, bad = 0;
    double worst = 0.0;
    while (checked < 60) {
      const auto& tokens = fx.all[pick(rng)].tokens;
      auto trace = forward(fx.model, tokens);
      Tensor f0 = encode(tc, 0, trace.hidden[0]), f1 = encode(tc, 1, trace.hidden[1]);
      std::vector<std::size_t> src, dst;
      for (std::size_t i = 0; i < tc.m; ++i) {
        if (f0.at(2, i) > 0.0) src.push_back(i);
        if (f1.at(2, i) > 0.0) dst.push_back(i);
      }
      if (src.empty() || dst.empty()) continue;
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
      bad += rel >= 1e-4;
      ++checked;
    }
    return Verdict{bad == 0 && checked >= 50, std::to_string(checked) + " active pairs, worst relative error " +
                                                  fmt("%.2e", worst)};
  });

  criterion(4, "spectral layer", 60, [] {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double lo = 0.0, hi = 0.0;
    int mismatched = 0;
    for (int g = 0; g < 50; ++g) {
      // Random blocks of 2-7 vertices, each a random tree plus sparse extra edges, vertices shuffled.
      // Isolated vertices are excluded: they contribute eigenvalue 1, not 0.
      std::vector<std::size_t> sizes;
      std::size_t n = 0;
      for (std::size_t c = 1 + rng() % 5; c > 0; --c) sizes.push_back(2 + rng() % 6), n += sizes.back();
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor a({n, n}, 0.0);
      std::size_t base = 0;
      for (std::size_t sz : sizes) {
        for (std::size_t v = 1; v < sz; ++v) {
          const std::size_t i = perm[base + v], j = perm[base + rng() % v];
          a.at(i, j) = a.at(j, i) = 0.1 + u(rng);
        }
        for (std::size_t v = 0; v < sz; ++v)
          for (std::size_t w = v + 1; w < sz; ++w)
            if (u(rng) < 0.2) a.at(perm[base + v], perm[base + w]) = a.at(perm[base + w], perm[base + v]) = 0.1 + u(rng);
        base += sz;
      }
      const auto eig = symmetric_eigen(normalized_laplacian(a));
      lo = std::min(lo, eig.values.front());
      hi = std::max(hi, eig.values.back());
      const auto zeros = static_cast<std::size_t>(
          std::count_if(eig.values.begin(), eig.values.end(), [](double v) { return std::abs(v) < 1e-9; }));
      mismatched += zeros != components(a);
    }
    Tensor a({8, 8}, 0.0);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        if (i != j && (i < 4) == (j < 4)) a.at(i, j) = 1.0;
    a.at(3, 4) = a.at(4, 3) = 0.01;
    double best = 1e300;
    for (unsigned mask = 1; mask < 128; ++mask) {
      std::vector<std::size_t> lab(8, 0);
      for (std::size_t v = 1; v < 8; ++v) lab[v] = (mask >> (v - 1)) & 1u;
      best = std::min(best, normalized_cut(a, lab));
    }
    const double got = normalized_cut(a, spectral_partition(a, 2, 0));
    const bool in_range = lo >= -1e-10 && hi <= 2.0 + 1e-10;
    return Verdict{in_range && mismatched == 0 && std::abs(got - best) < 1e-12,
                   "eigenvalues in [" + fmt("%.1e", lo) + ", " + fmt("%.12f", hi) + "], " +
                       std::to_string(50 - mismatched) + "/50 component counts match, two-clique cut " +
                       fmt("%.6f", got) + " vs brute-force " + fmt("%.6f", best)};
  });

  criterion(5, "oracle agreement", 600, [] {
    std::mt19937_64 rng(2024);
    double worst_phi = 0.0;
    long worst_size = 0;
    for (int s = 0; s < 25; ++s) {
      const std::size_t n = 8 + rng() % 9;
      auto g = planted_graph(n, 3 + rng() % 4, 1.5, rng());
      const auto eval = planted_evaluator(g);
      const auto ex = exhaustive_search(n, eval, 0.9);
      const Hierarchy h = build_hierarchy(n, g.edges, 4, static_cast<std::uint64_t>(s));
      const auto hs = hierarchical_search(h, eval, incident_weight(n, g.edges), {.theta = 0.9});
      if (!ex.meta.found || !hs.meta.found) return Verdict{false, "search found nothing on graph " + std::to_string(s)};
      worst_phi = std::max(worst_phi, std::abs(hs.preservation - ex.preservation));
      worst_size = std::max(worst_size, std::abs(long(hs.nodes.size()) - long(ex.nodes.size())));
    }
    return Verdict{worst_phi <= 0.05 && worst_size <= 2, "25 planted graphs of 8-16 nodes, worst preservation gap " +
                                                             fmt("%.4f", worst_phi) + ", worst size gap " +
                                                             std::to_string(worst_size)};
  });

  // Criteria 6, 8 and 9 share two full runs of the default mod-13 configuration.
  double run_seconds = 0.0;
  std::string run_error;
  try {
    const auto t0 = std::chrono::steady_clock::now();
    full_run(run_a);
    run_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } catch (const std::exception& e) {
    run_error = e.what();
  }

  criterion(6, "end-to-end circuit", 3600, [&] {
    if (!run_error.empty()) return Verdict{false, "pipeline failed: " + run_error};
    const json v = json::parse(slurp(run_a / "validation.json"));
    const json& suf = v["sufficiency"];
    const double phi = suf["preservation"], frac = v["metrics"]["node_fraction"];
    const std::size_t nodes = v["metrics"]["node_count"], graph_nodes = v["metrics"]["graph_nodes"];
    std::string held = "n/a";
    if (v["heldout_sufficiency"].is_object() && v["heldout_sufficiency"].contains("preservation"))
      held = fmt("%.3f", v["heldout_sufficiency"]["preservation"].get<double>()) + " on " +
             std::to_string(v["heldout_sufficiency"]["samples"].get<std::size_t>()) + " tasks";
    return Verdict{phi >= 0.9 && frac < 0.25,
                   "preservation " + fmt("%.3f", phi) + " on the " + std::to_string(suf["samples"].get<int>()) +
                       " search tasks, circuit " + std::to_string(nodes) + "/" + std::to_string(graph_nodes) +
                       " nodes (" + fmt("%.1f", 100 * frac) + "%), pipeline " + fmt("%.0f", run_seconds) +
                       " s; held-out preservation " + held + " (reported, not asserted)"};
  });

  criterion(7, "scaling check", 900, [] {
    const auto series = scaling_series({64, 256, 1024, 4096}, 4, 0);
    auto fixed_b = series;
    for (auto& p : fixed_b) p.decisions = p.fixed_b_decisions;
    const double slope = loglog_slope(series), slope_b = loglog_slope(fixed_b);
    std::string counts;
    for (const auto& p : series) counts += (counts.empty() ? "" : ", ") + std::to_string(p.decisions);
    return Verdict{slope <= 2.3, "decisions at n = 64..4096: " + counts + "; log-log slope " + fmt("%.3f", slope) +
                                     " (b-per-level count slope " + fmt("%.3f", slope_b) + ")"};
  });

  criterion(8, "transfer coefficient", 1200, [&] {
    const FeatureId a{0, 1}, b{1, 2}, c{1, 3}, d{2, 4}, e{2, 5};
    std::map<FeatureId, FeatureId> id;
    for (auto f : {a, b, c, d, e}) id[f] = f;
    const bool identities = jaccard_transfer({{a, b}, {b, d}}, {{a, b}, {b, d}}, id) == 1.0 &&
                            jaccard_transfer({{a, b}}, {{c, e}}, id) == 0.0 &&
                            jaccard_transfer({{a, b}, {b, d}, {a, c}}, {{b, d}, {a, c}, {c, e}}, id) == 0.5;
    if (!run_error.empty()) return Verdict{false, "pipeline failed: " + run_error};
    const json t = json::parse(slurp(run_a / "transfer.json"));
    const double tau = t["tau"];
    return Verdict{identities && tau > 0.0,
                   std::string("Jaccard identities ") + (identities ? "exact" : "WRONG") + "; seeds 0 and " +
                       std::to_string(t["seed_b"].get<int>()) + " give tau = " + fmt("%.4f", tau) + " (" +
                       std::to_string(t["shared"].get<int>()) + " shared edges, " +
                       std::to_string(t["alignment"].size()) + " aligned features)"};
  });

  criterion(9, "determinism", 7200, [&] {
    if (!run_error.empty()) return Verdict{false, "pipeline failed: " + run_error};
    full_run(run_b);
    const auto m = Manifest::load(run_a);
    std::size_t files = 1, differing = 0;
    std::string first;
    if (slurp(run_a / "manifest.json") != slurp(run_b / "manifest.json")) ++differing, first = "manifest.json";
    for (const auto& [name, r] : m.stages)
      for (const auto& art : r.artifacts) {
        ++files;
        if (slurp(run_a / art.path) != slurp(run_b / art.path)) {
          if (first.empty()) first = art.path;
          ++differing;
        }
      }
    const bool clean = orphans(run_a).empty() && orphans(run_b).empty();
    return Verdict{differing == 0 && clean,
                   std::to_string(files) + " hashed files compared, " + std::to_string(differing) + " differ" +
                       (first.empty() ? "" : " (first: " + first + ")") + (clean ? ", no orphans" : ", ORPHANS")};
  });

  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("acceptance: %d of 9 criteria failed, %.0f s total\n", failures, total);
  fs::remove_all(run_a);
  fs::remove_all(run_b);
  return failures == 0 && total <= 7200 ? 0 : 1;
}
