#pragma once

#include <cstdint>
#include <vector>

#include "hagd/tensor.hpp"

namespace hagd::ad {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with decoupled weight decay. Moments live alongside the parameter list
// in the order given at construction.
class AdamW {
 public:
  AdamW(std::vector<Var> params, AdamWConfig config);

  // Throws ContractError if any parameter has no gradient.
  void step();
  void zero_grad();
  // Clears moments for selected rows of a matrix parameter (dead-feature resets).
  void reset_rows(std::size_t param_index, const std::vector<std::size_t>& rows);
  void reset_cols(std::size_t param_index, const std::vector<std::size_t>& cols);

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  AdamWConfig& config() { return config_; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamWConfig config_;
  std::int64_t t_ = 0;
};

}  // namespace hagd::ad
