#include "hagd/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include "hagd/error.hpp"

namespace hagd {

using ad::Tape;
using ad::Tensor;
using ad::Var;

void validate(const ModelConfig& cfg) {
  if (cfg.n_layers < 2) throw ParameterError("model: n_layers must be >= 2");
  if (cfg.hidden_dim == 0 || cfg.n_heads == 0 || cfg.hidden_dim % cfg.n_heads != 0)
    throw ParameterError("model: hidden_dim must be divisible by n_heads");
  if (cfg.vocab_size < 2) throw ParameterError("model: vocab_size must be >= 2");
  if (cfg.max_seq_len < 1) throw ParameterError("model: max_seq_len must be >= 1");
  if (cfg.mlp_ratio < 1) throw ParameterError("model: mlp_ratio must be >= 1");
}

TokenBatch TokenBatch::single(const std::vector<std::size_t>& tokens) {
  return TokenBatch{tokens, 1, tokens.size()};
}

TokenBatch TokenBatch::from_tasks(std::span<const TaskInstance* const> tasks) {
  TokenBatch b;
  b.batch = tasks.size();
  b.seq_len = tasks.empty() ? 0 : tasks.front()->tokens.size();
  b.tokens.reserve(b.batch * b.seq_len);
  for (const TaskInstance* t : tasks) {
    if (t->tokens.size() != b.seq_len) throw InputError("token batch: sequences differ in length");
    b.tokens.insert(b.tokens.end(), t->tokens.begin(), t->tokens.end());
  }
  return b;
}

namespace {

Var normal_param(std::mt19937_64& rng, ad::Shape shape, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = n(rng);
  return Var::parameter(std::move(t));
}

Var const_param(ad::Shape shape, double v) { return Var::parameter(Tensor(std::move(shape), v)); }

}  // namespace

Transformer::Transformer(const ModelConfig& cfg) : cfg_(cfg) {
  validate(cfg_);
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.hidden_dim, r = cfg_.mlp_ratio * d;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  tok_embed_ = normal_param(rng, {cfg_.vocab_size, d}, sd);
  pos_embed_ = normal_param(rng, {cfg_.max_seq_len, d}, sd);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    Block b;
    b.ln1_gain = const_param({d}, 1.0);
    b.ln1_bias = const_param({d}, 0.0);
    b.w_qkv = normal_param(rng, {d, 3 * d}, sd);
    b.b_qkv = const_param({3 * d}, 0.0);
    b.w_out = normal_param(rng, {d, d}, sd);
    b.b_out = const_param({d}, 0.0);
    b.ln2_gain = const_param({d}, 1.0);
    b.ln2_bias = const_param({d}, 0.0);
    b.w_in = normal_param(rng, {d, r}, sd);
    b.b_in = const_param({r}, 0.0);
    b.w_mlp = normal_param(rng, {r, d}, 1.0 / std::sqrt(static_cast<double>(r)));
    b.b_mlp = const_param({d}, 0.0);
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = const_param({d}, 1.0);
  lnf_bias_ = const_param({d}, 0.0);
  w_unembed_ = normal_param(rng, {d, cfg_.vocab_size}, sd);
}

void Transformer::check_tokens(const TokenBatch& batch) const {
  if (batch.seq_len > cfg_.max_seq_len)
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  if (batch.seq_len == 0 || batch.tokens.size() != batch.batch * batch.seq_len)
    throw InputError("malformed token batch");
  for (std::size_t tok : batch.tokens)
    if (tok >= cfg_.vocab_size)
      throw InputError("token " + std::to_string(tok) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
}

Var Transformer::embed(Tape& t, const TokenBatch& batch) const {
  check_tokens(batch);
  std::vector<std::size_t> pos(batch.tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % batch.seq_len;
  return ad::add(t, ad::gather_rows(t, tok_embed_, batch.tokens), ad::gather_rows(t, pos_embed_, pos));
}

Var Transformer::block(Tape& t, std::size_t layer, const Var& x, std::size_t seq_len) const {
  const Block& b = blocks_.at(layer);
  Var a = ad::layer_norm(t, x, b.ln1_gain, b.ln1_bias);
  Var qkv = ad::add_bias(t, ad::matmul(t, a, b.w_qkv), b.b_qkv);
  Var att = ad::causal_attention(t, qkv, seq_len, cfg_.n_heads);
  Var h = ad::add(t, x, ad::add_bias(t, ad::matmul(t, att, b.w_out), b.b_out));
  Var m = ad::layer_norm(t, h, b.ln2_gain, b.ln2_bias);
  m = ad::relu(t, ad::add_bias(t, ad::matmul(t, m, b.w_in), b.b_in));
  return ad::add(t, h, ad::add_bias(t, ad::matmul(t, m, b.w_mlp), b.b_mlp));
}

Var Transformer::unembed(Tape& t, const Var& residual) const {
  return ad::matmul(t, ad::layer_norm(t, residual, lnf_gain_, lnf_bias_), w_unembed_);
}

Var Transformer::forward(Tape& t, const TokenBatch& batch, const ResidualHook& hook,
                         std::vector<Var>* hidden) const {
  Var x = embed(t, batch);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    x = block(t, l, x, batch.seq_len);
    if (hook) x = hook(t, l, x);
    if (hidden) hidden->push_back(x);
  }
  return unembed(t, x);
}

Var Transformer::forward_last(Tape& t, const TokenBatch& batch, const ResidualHook& hook) const {
  Var x = embed(t, batch);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    x = block(t, l, x, batch.seq_len);
    if (hook) x = hook(t, l, x);
  }
  std::vector<std::size_t> last(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) last[b] = batch.last_row(b);
  return unembed(t, ad::select_rows(t, x, last));
}

std::vector<std::pair<std::string, Var>> Transformer::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out{{"tok_embed", tok_embed_}, {"pos_embed", pos_embed_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const std::string p = "block" + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "ln1_gain", b.ln1_gain}, {p + "ln1_bias", b.ln1_bias}, {p + "w_qkv", b.w_qkv},
                           {p + "b_qkv", b.b_qkv},       {p + "w_out", b.w_out},       {p + "b_out", b.b_out},
                           {p + "ln2_gain", b.ln2_gain}, {p + "ln2_bias", b.ln2_bias}, {p + "w_in", b.w_in},
                           {p + "b_in", b.b_in},         {p + "w_mlp", b.w_mlp},       {p + "b_mlp", b.b_mlp}});
  }
  out.insert(out.end(), {{"lnf_gain", lnf_gain_}, {"lnf_bias", lnf_bias_}, {"w_unembed", w_unembed_}});
  return out;
}

Transformer Transformer::frozen() const {
  Transformer out = *this;
  auto freeze = [](Var& v) { v = Var::constant(v.value()); };
  freeze(out.tok_embed_);
  freeze(out.pos_embed_);
  for (auto& b : out.blocks_)
    for (Var* v : {&b.ln1_gain, &b.ln1_bias, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.ln2_gain, &b.ln2_bias,
                   &b.w_in, &b.b_in, &b.w_mlp, &b.b_mlp})
      freeze(*v);
  freeze(out.lnf_gain_);
  freeze(out.lnf_bias_);
  freeze(out.w_unembed_);
  return out;
}

std::vector<Var> Transformer::parameters() const {
  std::vector<Var> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value().size();
  return n;
}

ActivationTrace forward(const Transformer& model, const std::vector<std::size_t>& tokens) {
  Tape t(false);
  std::vector<Var> hidden;
  Var logits = model.forward(t, TokenBatch::single(tokens), {}, &hidden);
  ActivationTrace trace;
  for (const auto& h : hidden) trace.hidden.push_back(h.value());
  trace.logits = logits.value();
  return trace;
}

std::vector<std::vector<const TaskInstance*>> group_by_length(const std::vector<TaskInstance>& tasks) {
  std::map<std::size_t, std::vector<const TaskInstance*>> groups;
  for (const auto& t : tasks) groups[t.tokens.size()].push_back(&t);
  std::vector<std::vector<const TaskInstance*>> out;
  for (auto& [len, g] : groups) out.push_back(std::move(g));
  return out;
}

std::vector<Tensor> collect_hidden(const Transformer& model, const std::vector<TaskInstance>& tasks) {
  const std::size_t d = model.config().hidden_dim, layers = model.config().n_layers;
  std::vector<std::size_t> offset(tasks.size() + 1, 0);
  for (std::size_t i = 0; i < tasks.size(); ++i) offset[i + 1] = offset[i] + tasks[i].tokens.size();
  std::vector<Tensor> out(layers, Tensor(ad::Shape{offset.back(), d}));
  for (const auto& group : group_by_length(tasks)) {
    Tape t(false);
    std::vector<Var> hidden;
    TokenBatch batch = TokenBatch::from_tasks(group);
    model.forward(t, batch, {}, &hidden);
    for (std::size_t b = 0; b < group.size(); ++b) {
      const auto idx = static_cast<std::size_t>(group[b] - tasks.data());
      for (std::size_t l = 0; l < layers; ++l)
        std::copy_n(hidden[l].value().data().data() + b * batch.seq_len * d, batch.seq_len * d,
                    out[l].data().data() + offset[idx] * d);
    }
  }
  return out;
}

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.cols(); ++c)
    if (logits.at(r, c) > logits.at(r, best)) best = c;
  return best;
}

}  // namespace

std::vector<std::size_t> predict(const Transformer& model, const std::vector<TaskInstance>& tasks,
                                 const ResidualHook& hook) {
  std::vector<std::size_t> out(tasks.size(), 0);
  for (const auto& group : group_by_length(tasks)) {
    Tape t(false);
    Var logits = model.forward_last(t, TokenBatch::from_tasks(group), hook);
    for (std::size_t b = 0; b < group.size(); ++b)
      out[static_cast<std::size_t>(group[b] - tasks.data())] = argmax_row(logits.value(), b);
  }
  return out;
}

double accuracy(const Transformer& model, const std::vector<TaskInstance>& tasks, const ResidualHook& hook) {
  if (tasks.empty()) return 0.0;
  auto pred = predict(model, tasks, hook);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) correct += pred[i] == tasks[i].target;
  return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

ModelTrainReport train_model(Transformer& model, const std::vector<TaskInstance>& train,
                             const std::vector<TaskInstance>& heldout, const ModelTrainConfig& cfg) {
  if (train.empty()) throw ParameterError("train_model: empty task list");
  ad::AdamW opt(model.parameters(), {.lr = cfg.lr, .beta1 = 0.9, .beta2 = cfg.beta2, .eps = 1e-8,
                                     .weight_decay = cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed);
  auto groups = group_by_length(train);
  ModelTrainReport report;
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double scale = 1.0;
    if (cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs)
      scale = static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
    if (cfg.cosine_decay)
      scale *= 0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                             static_cast<double>(cfg.epochs)));
    opt.config().lr = cfg.lr * scale;
    double epoch_loss = 0.0;
    for (auto& group : groups) {
      std::vector<const TaskInstance*> order = group;
      const std::size_t bs = cfg.batch_size == 0 ? order.size() : cfg.batch_size;
      if (bs < order.size()) std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += bs) {
        std::span<const TaskInstance* const> chunk(order.data() + start, std::min(bs, order.size() - start));
        std::vector<std::size_t> targets;
        for (const TaskInstance* ti : chunk) targets.push_back(ti->target);
        opt.zero_grad();
        Tape t;
        Var loss = ad::cross_entropy(t, model.forward_last(t, TokenBatch::from_tasks(chunk)), targets);
        const double lv = loss.value().item();
        if (!std::isfinite(lv))
          throw TrainingError("train_model: non-finite loss at epoch " + std::to_string(epoch), last_finite);
        last_finite = lv;
        t.backward(loss);
        opt.step();
        epoch_loss += lv * static_cast<double>(chunk.size());
      }
    }
    report.loss_curve.push_back(epoch_loss / static_cast<double>(train.size()));
    report.epochs_run = epoch + 1;
  }
  report.train_accuracy = accuracy(model, train);
  report.heldout_accuracy = heldout.empty() ? 0.0 : accuracy(model, heldout);
  return report;
}

}  // namespace hagd
