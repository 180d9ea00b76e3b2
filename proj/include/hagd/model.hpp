#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hagd/optim.hpp"
#include "hagd/tasks.hpp"
#include "hagd/tensor.hpp"

namespace hagd {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 14;
  std::size_t max_seq_len = 3;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;
};

void validate(const ModelConfig& cfg);

// Hidden states are the residual stream after each block.
struct ActivationTrace {
  std::vector<ad::Tensor> hidden;  // n_layers tensors of shape [seq x d]
  ad::Tensor logits;               // [seq x vocab]
};

// A batch of equal-length token sequences, row-major [batch x seq].
struct TokenBatch {
  std::vector<std::size_t> tokens;
  std::size_t batch = 0;
  std::size_t seq_len = 0;

  static TokenBatch single(const std::vector<std::size_t>& tokens);
  static TokenBatch from_tasks(std::span<const TaskInstance* const> tasks);
  // Row index of the last position of sequence b in the flattened [batch*seq] layout.
  std::size_t last_row(std::size_t b) const { return b * seq_len + seq_len - 1; }
};

// Called after block `layer` with the residual stream [batch*seq x d]; the
// returned value replaces it for the rest of the forward pass.
using ResidualHook = std::function<ad::Var(ad::Tape&, std::size_t layer, const ad::Var& residual)>;

// Small decoder-only transformer: learned absolute positions, pre-norm blocks,
// causal multi-head attention, ReLU MLP, final layer norm and unembedding.
class Transformer {
 public:
  struct Block {
    ad::Var ln1_gain, ln1_bias;
    ad::Var w_qkv, b_qkv;  // [d x 3d], [3d]
    ad::Var w_out, b_out;  // [d x d], [d]
    ad::Var ln2_gain, ln2_bias;
    ad::Var w_in, b_in;    // [d x r*d], [r*d]
    ad::Var w_mlp, b_mlp;  // [r*d x d], [d]
  };

  explicit Transformer(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  ad::Var embed(ad::Tape& t, const TokenBatch& batch) const;
  ad::Var block(ad::Tape& t, std::size_t layer, const ad::Var& x, std::size_t seq_len) const;
  ad::Var unembed(ad::Tape& t, const ad::Var& residual) const;

  // Full forward; logits for every row. `hidden`, when given, receives the
  // (post-hook) residual after each block.
  ad::Var forward(ad::Tape& t, const TokenBatch& batch, const ResidualHook& hook = {},
                  std::vector<ad::Var>* hidden = nullptr) const;
  // Logits at the last position of each sequence, [batch x vocab].
  ad::Var forward_last(ad::Tape& t, const TokenBatch& batch, const ResidualHook& hook = {}) const;

  std::vector<ad::Var> parameters() const;
  std::size_t parameter_count() const;

  // Deep copy whose weights are constants, for passes that only need
  // gradients with respect to activations.
  Transformer frozen() const;

  // Named tensors in a fixed order, for checkpoints.
  std::vector<std::pair<std::string, ad::Var>> named_parameters() const;

 private:
  void check_tokens(const TokenBatch& batch) const;

  ModelConfig cfg_;
  ad::Var tok_embed_, pos_embed_;
  std::vector<Block> blocks_;
  ad::Var lnf_gain_, lnf_bias_;
  ad::Var w_unembed_;
};

// Single-sequence trace with all hidden states.
ActivationTrace forward(const Transformer& model, const std::vector<std::size_t>& tokens);

// Hidden states for many tasks at once: per layer, a [sum(seq) x d] matrix
// with rows grouped by task in input order.
std::vector<ad::Tensor> collect_hidden(const Transformer& model, const std::vector<TaskInstance>& tasks);

// Predicted token at the last position of every task.
std::vector<std::size_t> predict(const Transformer& model, const std::vector<TaskInstance>& tasks,
                                 const ResidualHook& hook = {});
double accuracy(const Transformer& model, const std::vector<TaskInstance>& tasks, const ResidualHook& hook = {});

// Groups tasks by sequence length, preserving input order within a group.
std::vector<std::vector<const TaskInstance*>> group_by_length(const std::vector<TaskInstance>& tasks);

struct ModelTrainConfig {
  std::size_t epochs = 2000;
  double lr = 1e-3;
  double weight_decay = 2.0;
  double beta2 = 0.98;
  std::size_t batch_size = 16;  // 0 = full batch
  std::size_t warmup_epochs = 50;
  bool cosine_decay = true;  // lr follows a half cosine down to 10% over the run
  std::uint64_t seed = 0;    // minibatch order
};

struct ModelTrainReport {
  std::vector<double> loss_curve;  // per epoch
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::size_t epochs_run = 0;
};

// Cross-entropy on the last position, AdamW updates. Throws TrainingError on a
// non-finite loss.
ModelTrainReport train_model(Transformer& model, const std::vector<TaskInstance>& train,
                             const std::vector<TaskInstance>& heldout, const ModelTrainConfig& cfg);

}  // namespace hagd
