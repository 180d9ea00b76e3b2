#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hagd/model.hpp"
#include "hagd/tensor.hpp"

namespace hagd {

struct LossWeights {
  double lambda1 = 1.0;   // cross-layer prediction
  double lambda2 = 3e-4;  // sparsity
};

struct TranscoderConfig {
  std::size_t dict_size = 0;  // 0 means 8 * d
  std::size_t k = 32;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;  // rows (positions) per step; 0 = full batch
  double lr = 1e-3;
  double weight_decay = 0.0;
  LossWeights weights;
  // Train the prediction head against raw next-layer activations instead of
  // their active-set indicator.
  bool literal_prediction = false;
  bool resample_dead = true;
  // Rescale each layer's inputs so that E||h||^2 = d before training.
  bool normalize_inputs = true;
  std::uint64_t seed = 0;
};

void validate(const TranscoderConfig& cfg, std::size_t hidden_dim);

// One sparse coder per layer. Rows of w_enc are features; columns of dec are
// their decoder directions.
struct TranscoderLayer {
  ad::Var w_enc;  // [m x d]
  ad::Var b_enc;  // [m]
  ad::Var dec;    // [d x m]
};

// Predicts which features of layer l+1 fire from the features of layer l.
struct PredictionHead {
  ad::Var w;  // [m x m]
  ad::Var b;  // [m]
};

struct Transcoders {
  std::size_t d = 0;
  std::size_t m = 0;
  std::size_t k = 0;
  LossWeights weights;
  bool literal_prediction = false;
  std::vector<TranscoderLayer> layers;
  std::vector<PredictionHead> heads;  // heads[l] maps layer l to l+1
  // Per-layer input scale: the coder sees s*h and decodes back to D f / s.
  std::vector<double> input_scale;
  std::vector<double> fvu;            // per layer, filled by training

  std::size_t n_layers() const { return layers.size(); }
  std::vector<ad::Var> parameters() const;
};

// Encoder ~ N(0, 0.01) (variance), decoder = encoder transpose, prediction
// heads random, biases zero.
Transcoders init_transcoders(std::size_t n_layers, std::size_t d, const TranscoderConfig& cfg);

// Sets input_scale from the traces so that mean ||s*h||^2 = d per layer.
void fit_input_scale(Transcoders& tc, const std::vector<ad::Tensor>& hidden);

// Batched helpers on [rows x d] / [rows x m] tensors, in model units.
ad::Var encode(ad::Tape& t, const Transcoders& tc, std::size_t layer, const ad::Var& h);
ad::Var decode(ad::Tape& t, const Transcoders& tc, std::size_t layer, const ad::Var& f);
ad::Var predict_next_layer(ad::Tape& t, const Transcoders& tc, std::size_t layer, const ad::Var& f);

// Encoder pre-activation times a fixed 0/1 mask. With mask = (encode(h) > 0)
// the value equals encode(h); the gradient treats the TopK/ReLU choice as frozen.
ad::Var encode_frozen(ad::Tape& t, const Transcoders& tc, std::size_t layer, const ad::Var& h,
                      const ad::Tensor& mask);

ad::Tensor encode(const Transcoders& tc, std::size_t layer, const ad::Tensor& h);
ad::Tensor decode(const Transcoders& tc, std::size_t layer, const ad::Tensor& f);
ad::Tensor predict_next_layer(const Transcoders& tc, std::size_t layer, const ad::Tensor& f);

// Copy with every weight turned into a constant.
Transcoders frozen(const Transcoders& tc);

struct LossBreakdown {
  double total = 0.0;
  double reconstruction = 0.0;
  double prediction = 0.0;          // the term actually trained (already weighted by lambda1)
  double prediction_indicator = 0.0;  // unweighted, against the active-set indicator
  double prediction_literal = 0.0;    // unweighted, against raw activations
  double sparsity = 0.0;            // weighted by lambda2
};

struct TranscoderLoss {
  ad::Var loss;
  LossBreakdown breakdown;
  std::vector<ad::Var> features;  // per layer, [rows x m]
};

// hidden[l] is [rows x d] with rows aligned across layers. All terms are
// averaged over rows; reconstruction is measured on the scaled inputs.
TranscoderLoss transcoder_loss(ad::Tape& t, const Transcoders& tc, const LossWeights& weights,
                               const std::vector<ad::Tensor>& hidden);

// Rescale decoder columns to unit norm, moving the scale into the encoder row,
// encoder bias and the prediction-head column reading that feature.
void normalize_decoder(Transcoders& tc);

// Sum ||h - D f||^2 / sum ||h - mean h||^2 per layer.
std::vector<double> fraction_unexplained(const Transcoders& tc, const std::vector<ad::Tensor>& hidden);

// Mean per-row indicator prediction loss summed over heads (unweighted).
double prediction_loss(const Transcoders& tc, const std::vector<ad::Tensor>& hidden);

struct TranscoderReport {
  std::vector<double> loss_curve;  // per epoch, mean over steps
  LossBreakdown final_breakdown;  // full batch, after training
  std::vector<double> fvu;
  std::size_t resampled = 0;
  std::size_t steps = 0;
};

TranscoderReport train_transcoders(Transcoders& tc, const std::vector<ad::Tensor>& hidden,
                                   const TranscoderConfig& cfg);

// Convenience: extract hidden states from the model on `corpus`, then train.
Transcoders train_transcoders(const Transformer& model, const std::vector<TaskInstance>& corpus,
                              const TranscoderConfig& cfg, TranscoderReport* report = nullptr);

}  // namespace hagd
