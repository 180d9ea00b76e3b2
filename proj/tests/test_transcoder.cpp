#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fd_oracle.hpp"
#include "hagd/error.hpp"
#include "hagd/transcoder.hpp"
#include "mod13_fixture.hpp"

using namespace hagd;
using ad::Tensor;
using ad::Var;
using hagd::testing::central_difference;
using hagd::testing::max_relative_error;
using hagd::testing::random_tensor;

namespace {

Transcoders tiny(std::size_t layers, std::size_t d, std::size_t m, std::size_t k, std::uint64_t seed) {
  TranscoderConfig cfg;
  cfg.dict_size = m;
  cfg.k = k;
  cfg.seed = seed;
  return init_transcoders(layers, d, cfg);
}

std::size_t nonzeros_in_row(const Tensor& f, std::size_t r) {
  std::size_t n = 0;
  for (std::size_t c = 0; c < f.cols(); ++c) n += f.at(r, c) != 0.0;
  return n;
}

// Rebuilds a transcoder set from raw tensors so finite differences never touch
// the tape.
Transcoders with_params(const Transcoders& like, const std::vector<Tensor>& ps) {
  Transcoders tc = like;
  std::size_t i = 0;
  for (auto& l : tc.layers) {
    l.w_enc = Var::parameter(ps[i++]);
    l.b_enc = Var::parameter(ps[i++]);
    l.dec = Var::parameter(ps[i++]);
  }
  for (auto& h : tc.heads) {
    h.w = Var::parameter(ps[i++]);
    h.b = Var::parameter(ps[i++]);
  }
  return tc;
}

}  // namespace

TEST_CASE("encode reduces to topk on an identity-padded encoder") {
  Transcoders tc = tiny(1, 4, 8, 2, 0);
  Tensor w({8, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  tc.layers[0].w_enc = Var::parameter(w);
  Tensor f = encode(tc, 0, Tensor::matrix({{3, -1, 2, 5}}));
  CHECK(f == Tensor::matrix({{3, 0, 0, 5, 0, 0, 0, 0}}));
}

TEST_CASE("k = m leaves relu(W h + b) untouched") {
  std::mt19937_64 rng(1);
  Transcoders tc = tiny(1, 4, 8, 8, 3);
  tc.layers[0].b_enc = Var::parameter(random_tensor({8}, rng));
  Tensor h = random_tensor({5, 4}, rng);
  Tensor f = encode(tc, 0, h);
  Tensor pre = ad::matmul_t(h, tc.layers[0].w_enc.value());
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(f.at(r, j) == std::max(0.0, pre.at(r, j) + tc.layers[0].b_enc.value()[j]));
}

TEST_CASE("encode keeps at most k nonnegative features") {
  std::mt19937_64 rng(2);
  Transcoders tc = tiny(1, 8, 64, 5, 4);
  Tensor h = random_tensor({1000, 8}, rng, -3, 3);
  Tensor f = encode(tc, 0, h);
  for (std::size_t r = 0; r < 1000; ++r) {
    CHECK(nonzeros_in_row(f, r) <= 5);
    for (std::size_t j = 0; j < 64; ++j) CHECK(f.at(r, j) >= 0.0);
  }
}

TEST_CASE("decode is linear and extracts columns") {
  Transcoders tc = tiny(1, 4, 8, 2, 5);
  CHECK(decode(tc, 0, Tensor({1, 8}, 0.0)) == Tensor({1, 4}, 0.0));
  for (std::size_t i = 0; i < 8; ++i) {
    Tensor e({1, 8}, 0.0);
    e.at(0, i) = 1.0;
    Tensor col = decode(tc, 0, e);
    for (std::size_t r = 0; r < 4; ++r) CHECK(col.at(0, r) == tc.layers[0].dec.value().at(r, i));
  }
  CHECK_THROWS_AS(decode(tc, 0, Tensor({1, 7}, 0.0)), DimensionError);
}

TEST_CASE("prediction head output range and layer bounds") {
  Transcoders tc = tiny(3, 4, 8, 2, 6);
  Tensor half = predict_next_layer(tc, 0, Tensor({1, 8}, 0.0));
  for (double v : half.data()) CHECK(v == 0.5);
  std::mt19937_64 rng(7);
  for (int s = 0; s < 50; ++s) {
    Tensor p = predict_next_layer(tc, 1, random_tensor({3, 8}, rng, -20, 20));
    for (double v : p.data()) CHECK((v > 0.0 && v < 1.0));
  }
  CHECK_THROWS_AS(predict_next_layer(tc, 2, Tensor({1, 8}, 0.0)), RangeError);
  CHECK_THROWS_AS(predict_next_layer(tc, 3, Tensor({1, 8}, 0.0)), RangeError);
}

TEST_CASE("initialisation: decoder is the encoder transpose, bitwise") {
  Transcoders tc = tiny(2, 16, 128, 8, 11);
  for (const auto& l : tc.layers) CHECK(l.dec.value() == ad::transpose(l.w_enc.value()));
  double sq = 0.0;
  for (double v : tc.layers[0].w_enc.value().data()) sq += v * v;
  CHECK(sq / static_cast<double>(128 * 16) == doctest::Approx(0.01).epsilon(0.1));
  REQUIRE(tc.heads.size() == 1);
  CHECK(tc.heads[0].w.value() != Tensor({128, 128}, 0.0));
}

TEST_CASE("config validation") {
  TranscoderConfig cfg;
  CHECK(init_transcoders(2, 8, cfg).m == 64);
  cfg.dict_size = 15;
  CHECK_THROWS_AS(init_transcoders(2, 8, cfg), ParameterError);
  cfg.dict_size = 16;
  cfg.k = 17;
  CHECK_THROWS_AS(init_transcoders(2, 8, cfg), ParameterError);
  cfg.k = 4;
  cfg.weights.lambda2 = -1.0;
  CHECK_THROWS_AS(init_transcoders(2, 8, cfg), ParameterError);
}

TEST_CASE("zero loss weights leave pure reconstruction") {
  std::mt19937_64 rng(8);
  Transcoders tc = tiny(2, 4, 8, 3, 9);
  std::vector<Tensor> hs{random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)};
  ad::Tape t(false);
  auto tl = transcoder_loss(t, tc, {0.0, 0.0}, hs);
  CHECK(tl.breakdown.total == tl.breakdown.reconstruction);
  CHECK(tl.breakdown.prediction == 0.0);
  CHECK(tl.breakdown.sparsity == 0.0);
}

TEST_CASE("a sign-split identity coder reconstructs exactly") {
  const std::size_t d = 4;
  Transcoders tc = tiny(1, d, 2 * d, 2 * d, 0);
  Tensor w({2 * d, d}, 0.0), dec({d, 2 * d}, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    w.at(i, i) = 1.0;
    w.at(d + i, i) = -1.0;
    dec.at(i, i) = 1.0;
    dec.at(i, d + i) = -1.0;
  }
  tc.layers[0].w_enc = Var::parameter(w);
  tc.layers[0].dec = Var::parameter(dec);
  std::mt19937_64 rng(10);
  ad::Tape t(false);
  auto tl = transcoder_loss(t, tc, {}, {random_tensor({20, d}, rng, -5, 5)});
  CHECK(tl.breakdown.reconstruction == 0.0);
}

TEST_CASE("transcoder loss gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Transcoders tc = tiny(2, 4, 8, 2, seed);
    tc.layers[0].b_enc = Var::parameter(random_tensor({8}, rng, -0.1, 0.1));
    tc.heads[0].b = Var::parameter(random_tensor({8}, rng, -0.5, 0.5));
    std::vector<Tensor> hs{random_tensor({5, 4}, rng, -2, 2), random_tensor({5, 4}, rng, -2, 2)};
    const LossWeights w{0.7, 0.05};
    for (bool literal : {false, true}) {
      tc.literal_prediction = literal;
      for (auto p : tc.parameters()) p.zero_grad();
      ad::Tape t;
      auto tl = transcoder_loss(t, tc, w, hs);
      t.backward(tl.loss);
      std::vector<Tensor> base;
      for (const auto& p : tc.parameters()) base.push_back(p.value());
      auto params = tc.parameters();
      for (std::size_t k = 0; k < base.size(); ++k) {
        auto fd = central_difference(
            [&](const Tensor& probe) {
              auto ps = base;
              ps[k] = probe;
              ad::Tape u(false);
              return transcoder_loss(u, with_params(tc, ps), w, hs).breakdown.total;
            },
            base[k]);
        Tensor analytic = params[k].has_grad() ? params[k].grad() : Tensor(base[k].shape(), 0.0);
        INFO("seed " << seed << " param " << k << " literal " << literal);
        CHECK(max_relative_error(analytic, fd) < 1e-4);
      }
    }
  }
}

TEST_CASE("sparsity weight strictly raises the loss when features fire") {
  std::mt19937_64 rng(12);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Transcoders tc = tiny(2, 4, 8, 2, seed);
    std::vector<Tensor> hs{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
    ad::Tape t(false);
    auto with = transcoder_loss(t, tc, {1.0, 0.01}, hs);
    auto without = transcoder_loss(t, tc, {1.0, 0.0}, hs);
    double active = 0.0;
    for (const auto& f : with.features)
      for (double v : f.value().data()) active += v;
    if (active > 0.0) CHECK(with.breakdown.total > without.breakdown.total);
  }
}

TEST_CASE("both prediction variants are reported and the flag picks the trained one") {
  std::mt19937_64 rng(13);
  Transcoders tc = tiny(2, 4, 8, 2, 1);
  std::vector<Tensor> hs{random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)};
  ad::Tape t(false);
  auto ind = transcoder_loss(t, tc, {2.0, 0.0}, hs).breakdown;
  tc.literal_prediction = true;
  auto lit = transcoder_loss(t, tc, {2.0, 0.0}, hs).breakdown;
  CHECK(ind.prediction == doctest::Approx(2.0 * ind.prediction_indicator));
  CHECK(lit.prediction == doctest::Approx(2.0 * lit.prediction_literal));
  CHECK(ind.prediction_literal == doctest::Approx(lit.prediction_literal));
  CHECK(ind.prediction_indicator == doctest::Approx(lit.prediction_indicator));
}

TEST_CASE("training keeps decoder columns unit norm and rejects NaN traces") {
  std::mt19937_64 rng(14);
  TranscoderConfig cfg;
  cfg.dict_size = 16;
  cfg.k = 3;
  cfg.epochs = 5;
  Transcoders tc = init_transcoders(2, 4, cfg);
  std::vector<Tensor> hs{random_tensor({40, 4}, rng), random_tensor({40, 4}, rng)};
  train_transcoders(tc, hs, cfg);
  for (const auto& l : tc.layers)
    for (std::size_t j = 0; j < 16; ++j) {
      double n = 0.0;
      for (std::size_t r = 0; r < 4; ++r) n += l.dec.value().at(r, j) * l.dec.value().at(r, j);
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
    }
  hs[1].at(3, 2) = std::nan("");
  Transcoders fresh = init_transcoders(2, 4, cfg);
  CHECK_THROWS_AS(train_transcoders(fresh, hs, cfg), TrainingError);
}

TEST_CASE("mod-13 traces: fidelity, k sweep and prediction head") {
  const auto& fx = hagd::testing::mod13();
  REQUIRE(fx.heldout_accuracy > 0.99);
  auto train_hidden = collect_hidden(fx.model, fx.split.first);
  auto held_hidden = collect_hidden(fx.model, fx.split.second);
  auto all_hidden = collect_hidden(fx.model, fx.all);

  std::vector<std::vector<double>> fvu;
  for (std::size_t k : {32, 64, 128}) {
    TranscoderConfig cfg;
    cfg.k = k;
    Transcoders tc = init_transcoders(2, 64, cfg);
    auto rep = train_transcoders(tc, all_hidden, cfg);
    INFO("k=" << k << " fvu " << rep.fvu[0] << " " << rep.fvu[1]);
    for (double v : rep.fvu) CHECK(v <= 0.20);
    fvu.push_back(rep.fvu);
  }
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(fvu[1][l] <= fvu[0][l]);
    CHECK(fvu[2][l] <= fvu[1][l]);
  }

  // Prediction head trained on the train split versus a fresh random head,
  // both scored on held-out traces through the same trained encoders.
  TranscoderConfig cfg;
  Transcoders tc = init_transcoders(2, 64, cfg);
  train_transcoders(tc, train_hidden, cfg);
  Transcoders baseline = tc;
  TranscoderConfig other = cfg;
  other.seed = 99;
  baseline.heads = init_transcoders(2, 64, other).heads;
  const double trained = prediction_loss(tc, held_hidden);
  const double untrained = prediction_loss(baseline, held_hidden);
  INFO("trained " << trained << " untrained " << untrained);
  CHECK(trained <= 0.5 * untrained);
}

TEST_CASE("full-batch steps on mod-13 traces descend monotonically in most seeds") {
  const auto& fx = hagd::testing::mod13();
  std::vector<TaskInstance> sub(fx.all.begin(), fx.all.begin() + 16);
  auto hidden = collect_hidden(fx.model, sub);
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TranscoderConfig cfg;
    cfg.epochs = 101;  // one full-batch step per epoch
    cfg.batch_size = 0;
    cfg.lr = 3e-4;
    cfg.resample_dead = false;
    cfg.seed = seed;
    Transcoders tc = init_transcoders(2, 64, cfg);
    auto rep = train_transcoders(tc, hidden, cfg);
    bool ok = true;
    for (std::size_t i = 1; i < rep.loss_curve.size(); ++i) ok = ok && rep.loss_curve[i] <= rep.loss_curve[i - 1];
    monotone += ok;
  }
  MESSAGE("monotone descent in " << monotone << " of 100 seeds");
  CHECK(monotone >= 95);
}
