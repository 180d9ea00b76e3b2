#include "hagd/transcoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hagd/error.hpp"
#include "hagd/optim.hpp"

namespace hagd {

using ad::Tape;
using ad::Tensor;
using ad::Var;

void validate(const TranscoderConfig& cfg, std::size_t d) {
  const std::size_t m = cfg.dict_size == 0 ? 8 * d : cfg.dict_size;
  if (m < 2 * d) throw ParameterError("transcoder: dictionary size must be at least 2*d");
  if (cfg.k < 1 || cfg.k > m) throw ParameterError("transcoder: k must be in [1, m]");
  if (cfg.weights.lambda1 < 0.0 || cfg.weights.lambda2 < 0.0)
    throw ParameterError("transcoder: loss weights must be non-negative");
  if (!(cfg.lr > 0.0)) throw ParameterError("transcoder: lr must be positive");
}

std::vector<Var> Transcoders::parameters() const {
  std::vector<Var> out;
  for (const auto& l : layers) out.insert(out.end(), {l.w_enc, l.b_enc, l.dec});
  for (const auto& h : heads) out.insert(out.end(), {h.w, h.b});
  return out;
}

Transcoders init_transcoders(std::size_t n_layers, std::size_t d, const TranscoderConfig& cfg) {
  validate(cfg, d);
  Transcoders tc;
  tc.d = d;
  tc.m = cfg.dict_size == 0 ? 8 * d : cfg.dict_size;
  tc.k = cfg.k;
  tc.weights = cfg.weights;
  tc.literal_prediction = cfg.literal_prediction;
  tc.input_scale.assign(n_layers, 1.0);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> enc(0.0, 0.1);
  for (std::size_t l = 0; l < n_layers; ++l) {
    Tensor w({tc.m, d});
    for (double& v : w.data()) v = enc(rng);
    tc.layers.push_back({Var::parameter(w), Var::parameter(Tensor({tc.m}, 0.0)),
                         Var::parameter(ad::transpose(w))});
  }
  std::normal_distribution<double> head(0.0, 1.0 / std::sqrt(static_cast<double>(tc.m)));
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    Tensor w({tc.m, tc.m});
    for (double& v : w.data()) v = head(rng);
    tc.heads.push_back({Var::parameter(w), Var::parameter(Tensor({tc.m}, 0.0))});
  }
  return tc;
}

namespace {

void check_layer(const Transcoders& tc, std::size_t layer) {
  if (layer >= tc.layers.size())
    throw RangeError("transcoder layer " + std::to_string(layer) + " out of range");
}

void check_head(const Transcoders& tc, std::size_t layer) {
  if (layer >= tc.heads.size())
    throw RangeError("no prediction head from layer " + std::to_string(layer) + " (have " +
                     std::to_string(tc.heads.size()) + ")");
}

Var mean_row_sum(Tape& t, const Var& x) {
  return ad::scale(t, ad::sum(t, x), 1.0 / static_cast<double>(x.value().rows()));
}

Tensor indicator(const Tensor& f) {
  Tensor out(f.shape(), 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] > 0.0 ? 1.0 : 0.0;
  return out;
}

double scale_of(const Transcoders& tc, std::size_t layer) {
  return layer < tc.input_scale.size() ? tc.input_scale[layer] : 1.0;
}

Var encode_scaled(Tape& t, const Transcoders& tc, std::size_t layer, const Var& hs) {
  const auto& L = tc.layers[layer];
  return ad::topk_mask(t, ad::relu(t, ad::add_bias(t, ad::matmul_t(t, hs, L.w_enc), L.b_enc)), tc.k);
}

Tensor scaled(const Tensor& h, double s) {
  Tensor out = h;
  if (s != 1.0)
    for (double& v : out.data()) v *= s;
  return out;
}

}  // namespace

void fit_input_scale(Transcoders& tc, const std::vector<Tensor>& hidden) {
  tc.input_scale.assign(tc.layers.size(), 1.0);
  for (std::size_t l = 0; l < hidden.size() && l < tc.layers.size(); ++l) {
    double sq = 0.0;
    for (double v : hidden[l].data()) sq += v * v;
    sq /= static_cast<double>(std::max<std::size_t>(1, hidden[l].rows()));
    if (sq > 0.0) tc.input_scale[l] = std::sqrt(static_cast<double>(tc.d) / sq);
  }
}

Var encode(Tape& t, const Transcoders& tc, std::size_t layer, const Var& h) {
  check_layer(tc, layer);
  const double s = scale_of(tc, layer);
  return encode_scaled(t, tc, layer, s == 1.0 ? h : ad::scale(t, h, s));
}

Var encode_frozen(Tape& t, const Transcoders& tc, std::size_t layer, const Var& h, const Tensor& mask) {
  check_layer(tc, layer);
  const double s = scale_of(tc, layer);
  const auto& L = tc.layers[layer];
  Var pre = ad::add_bias(t, ad::matmul_t(t, s == 1.0 ? h : ad::scale(t, h, s), L.w_enc), L.b_enc);
  return ad::mul_const(t, pre, mask);
}

Transcoders frozen(const Transcoders& tc) {
  Transcoders out = tc;
  auto freeze = [](Var& v) { v = Var::constant(v.value()); };
  for (auto& l : out.layers) {
    freeze(l.w_enc);
    freeze(l.b_enc);
    freeze(l.dec);
  }
  for (auto& h : out.heads) {
    freeze(h.w);
    freeze(h.b);
  }
  return out;
}

Var decode(Tape& t, const Transcoders& tc, std::size_t layer, const Var& f) {
  check_layer(tc, layer);
  const double s = scale_of(tc, layer);
  Var out = ad::matmul_t(t, f, tc.layers[layer].dec);
  return s == 1.0 ? out : ad::scale(t, out, 1.0 / s);
}

Var predict_next_layer(Tape& t, const Transcoders& tc, std::size_t layer, const Var& f) {
  check_head(tc, layer);
  const auto& H = tc.heads[layer];
  return ad::sigmoid(t, ad::add_bias(t, ad::matmul_t(t, f, H.w), H.b));
}

Tensor encode(const Transcoders& tc, std::size_t layer, const Tensor& h) {
  Tape t(false);
  return encode(t, tc, layer, Var::constant(h)).value();
}

Tensor decode(const Transcoders& tc, std::size_t layer, const Tensor& f) {
  Tape t(false);
  return decode(t, tc, layer, Var::constant(f)).value();
}

Tensor predict_next_layer(const Transcoders& tc, std::size_t layer, const Tensor& f) {
  Tape t(false);
  return predict_next_layer(t, tc, layer, Var::constant(f)).value();
}

TranscoderLoss transcoder_loss(Tape& t, const Transcoders& tc, const LossWeights& w,
                               const std::vector<Tensor>& hidden) {
  if (hidden.empty() || hidden.front().rows() == 0) throw InputError("transcoder_loss: empty traces");
  if (hidden.size() != tc.layers.size()) throw DimensionError("transcoder_loss: one trace per layer required");
  TranscoderLoss out;
  Var recon, sparse, pred;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    check_layer(tc, l);
    Var h = Var::constant(scaled(hidden[l], scale_of(tc, l)));
    Var f = encode_scaled(t, tc, l, h);
    Var r = mean_row_sum(t, ad::square(t, ad::sub(t, h, ad::matmul_t(t, f, tc.layers[l].dec))));
    Var s = mean_row_sum(t, f);
    recon = l == 0 ? r : ad::add(t, recon, r);
    sparse = l == 0 ? s : ad::add(t, sparse, s);
    out.features.push_back(f);
  }
  Tape side(false);
  for (std::size_t l = 0; l + 1 < hidden.size(); ++l) {
    const Var& next = out.features[l + 1];
    Var ind = Var::constant(indicator(next.value()));
    Var fhat = predict_next_layer(t, tc, l, out.features[l]);
    Var trained = mean_row_sum(t, ad::square(t, ad::sub(t, tc.literal_prediction ? next : ind, fhat)));
    // The other variant is only reported.
    Var other = mean_row_sum(side, ad::square(side, ad::sub(side, Var::constant(tc.literal_prediction
                                                                                   ? ind.value()
                                                                                   : next.value()),
                                                            Var::constant(fhat.value()))));
    const double tv = trained.value().item(), ov = other.value().item();
    out.breakdown.prediction_indicator += tc.literal_prediction ? ov : tv;
    out.breakdown.prediction_literal += tc.literal_prediction ? tv : ov;
    pred = l == 0 ? trained : ad::add(t, pred, trained);
  }
  Var total = ad::add(t, recon, ad::scale(t, sparse, w.lambda2));
  out.breakdown.reconstruction = recon.value().item();
  out.breakdown.sparsity = w.lambda2 * sparse.value().item();
  if (hidden.size() > 1) {
    total = ad::add(t, total, ad::scale(t, pred, w.lambda1));
    out.breakdown.prediction = w.lambda1 * pred.value().item();
  }
  out.breakdown.total = total.value().item();
  out.loss = total;
  return out;
}

void normalize_decoder(Transcoders& tc) {
  for (std::size_t l = 0; l < tc.layers.size(); ++l) {
    Tensor& dec = tc.layers[l].dec.mutable_value();
    Tensor& enc = tc.layers[l].w_enc.mutable_value();
    Tensor& bias = tc.layers[l].b_enc.mutable_value();
    Tensor* head = l < tc.heads.size() ? &tc.heads[l].w.mutable_value() : nullptr;
    for (std::size_t j = 0; j < tc.m; ++j) {
      double norm = 0.0;
      for (std::size_t r = 0; r < tc.d; ++r) norm += dec.at(r, j) * dec.at(r, j);
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (std::size_t r = 0; r < tc.d; ++r) dec.at(r, j) /= norm;
      for (std::size_t c = 0; c < tc.d; ++c) enc.at(j, c) *= norm;
      bias[j] *= norm;
      if (head)
        for (std::size_t r = 0; r < tc.m; ++r) head->at(r, j) /= norm;
    }
  }
}

std::vector<double> fraction_unexplained(const Transcoders& tc, const std::vector<Tensor>& hidden) {
  std::vector<double> out;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    const Tensor& h = hidden[l];
    Tensor hhat = decode(tc, l, encode(tc, l, h));
    std::vector<double> mean(h.cols(), 0.0);
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < h.cols(); ++c) mean[c] += h.at(r, c) / static_cast<double>(h.rows());
    double err = 0.0, var = 0.0;
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < h.cols(); ++c) {
        err += (h.at(r, c) - hhat.at(r, c)) * (h.at(r, c) - hhat.at(r, c));
        var += (h.at(r, c) - mean[c]) * (h.at(r, c) - mean[c]);
      }
    out.push_back(var > 0.0 ? err / var : (err > 0.0 ? 1.0 : 0.0));
  }
  return out;
}

double prediction_loss(const Transcoders& tc, const std::vector<Tensor>& hidden) {
  double total = 0.0;
  for (std::size_t l = 0; l + 1 < hidden.size(); ++l) {
    Tensor fhat = predict_next_layer(tc, l, encode(tc, l, hidden[l]));
    Tensor ind = indicator(encode(tc, l + 1, hidden[l + 1]));
    double s = 0.0;
    for (std::size_t i = 0; i < fhat.size(); ++i) s += (ind[i] - fhat[i]) * (ind[i] - fhat[i]);
    total += s / static_cast<double>(fhat.rows());
  }
  return total;
}

namespace {

Tensor gather(const Tensor& h, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), h.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(h.data().data() + rows[i] * h.cols(), h.cols(), out.data().data() + i * h.cols());
  return out;
}

// Re-aims features that never fired at the directions the dictionary
// reconstructs worst.
std::size_t resample_dead(Transcoders& tc, ad::AdamW& opt, const std::vector<Tensor>& hidden,
                          const std::vector<std::vector<bool>>& fired) {
  std::size_t count = 0;
  const std::size_t L = tc.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<std::size_t> dead;
    for (std::size_t j = 0; j < tc.m; ++j)
      if (!fired[l][j]) dead.push_back(j);
    if (dead.empty()) continue;
    const double sc = scale_of(tc, l);
    const Tensor h = scaled(hidden[l], sc);
    const Tensor hhat = scaled(decode(tc, l, encode(tc, l, hidden[l])), sc);
    std::vector<double> err(h.rows(), 0.0);
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < h.cols(); ++c) err[r] += (h.at(r, c) - hhat.at(r, c)) * (h.at(r, c) - hhat.at(r, c));
    std::vector<std::size_t> order(h.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });

    Tensor& enc = tc.layers[l].w_enc.mutable_value();
    Tensor& bias = tc.layers[l].b_enc.mutable_value();
    Tensor& dec = tc.layers[l].dec.mutable_value();
    double alive_norm = 0.0;
    std::size_t alive = 0;
    for (std::size_t j = 0; j < tc.m; ++j) {
      if (!fired[l][j]) continue;
      double n = 0.0;
      for (std::size_t c = 0; c < tc.d; ++c) n += enc.at(j, c) * enc.at(j, c);
      alive_norm += std::sqrt(n);
      ++alive;
    }
    alive_norm = alive ? alive_norm / static_cast<double>(alive) : 1.0;

    std::vector<std::size_t> touched;
    for (std::size_t q = 0; q < dead.size(); ++q) {
      const std::size_t row = order[q % order.size()];
      if (err[row] <= 0.0) break;
      const double norm = std::sqrt(err[row]);
      const std::size_t j = dead[q];
      for (std::size_t c = 0; c < tc.d; ++c) {
        const double u = (h.at(row, c) - hhat.at(row, c)) / norm;
        dec.at(c, j) = u;
        enc.at(j, c) = 0.2 * u * alive_norm;
      }
      bias[j] = 0.0;
      if (l < tc.heads.size()) {
        Tensor& w = tc.heads[l].w.mutable_value();
        for (std::size_t r = 0; r < tc.m; ++r) w.at(r, j) = 0.0;
      }
      if (l > 0) {
        Tensor& w = tc.heads[l - 1].w.mutable_value();
        for (std::size_t c = 0; c < tc.m; ++c) w.at(j, c) = 0.0;
        tc.heads[l - 1].b.mutable_value()[j] = 0.0;
      }
      touched.push_back(j);
    }
    if (touched.empty()) continue;
    count += touched.size();
    opt.reset_rows(3 * l, touched);
    opt.reset_cols(3 * l + 1, touched);
    opt.reset_cols(3 * l + 2, touched);
    const std::size_t heads0 = 3 * L;
    if (l < tc.heads.size()) opt.reset_cols(heads0 + 2 * l, touched);
    if (l > 0) {
      opt.reset_rows(heads0 + 2 * (l - 1), touched);
      opt.reset_cols(heads0 + 2 * (l - 1) + 1, touched);
    }
  }
  return count;
}

}  // namespace

TranscoderReport train_transcoders(Transcoders& tc, const std::vector<Tensor>& hidden, const TranscoderConfig& cfg) {
  validate(cfg, tc.d);
  if (hidden.size() != tc.layers.size()) throw DimensionError("train_transcoders: one trace per layer required");
  const std::size_t n = hidden.front().rows();
  if (n == 0) throw InputError("train_transcoders: empty traces");
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  if (cfg.normalize_inputs) fit_input_scale(tc, hidden);
  ad::AdamW opt(tc.parameters(), {.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8,
                                  .weight_decay = cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed ^ 0x7a5c0d3ULL);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  TranscoderReport report;
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (bs < n) std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<bool>> fired(tc.layers.size(), std::vector<bool>(tc.m, false));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      std::span<const std::size_t> rows(perm.data() + start, std::min(bs, n - start));
      std::vector<Tensor> batch;
      for (const auto& h : hidden) batch.push_back(bs == n ? h : gather(h, rows));
      opt.zero_grad();
      Tape t;
      TranscoderLoss tl = transcoder_loss(t, tc, cfg.weights, batch);
      const double lv = tl.breakdown.total;
      if (!std::isfinite(lv))
        throw TrainingError("train_transcoders: non-finite loss at epoch " + std::to_string(epoch), last_finite);
      last_finite = lv;
      for (std::size_t l = 0; l < tl.features.size(); ++l) {
        const Tensor& f = tl.features[l].value();
        for (std::size_t r = 0; r < f.rows(); ++r)
          for (std::size_t j = 0; j < tc.m; ++j)
            if (f.at(r, j) > 0.0) fired[l][j] = true;
      }
      t.backward(tl.loss);
      opt.step();
      normalize_decoder(tc);
      epoch_loss += lv;
      ++batches;
      ++report.steps;
    }
    report.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
    if (cfg.resample_dead && epoch + 1 < cfg.epochs) report.resampled += resample_dead(tc, opt, hidden, fired);
  }
  {
    Tape t(false);
    report.final_breakdown = transcoder_loss(t, tc, cfg.weights, hidden).breakdown;
  }
  report.fvu = fraction_unexplained(tc, hidden);
  tc.fvu = report.fvu;
  return report;
}

Transcoders train_transcoders(const Transformer& model, const std::vector<TaskInstance>& corpus,
                              const TranscoderConfig& cfg, TranscoderReport* report) {
  if (corpus.empty()) throw InputError("train_transcoders: empty corpus");
  auto hidden = collect_hidden(model, corpus);
  Transcoders tc = init_transcoders(model.config().n_layers, model.config().hidden_dim, cfg);
  auto r = train_transcoders(tc, hidden, cfg);
  if (report) *report = std::move(r);
  return tc;
}

}  // namespace hagd
