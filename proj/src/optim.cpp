#include "hagd/optim.hpp"

#include <cmath>

#include "hagd/error.hpp"

namespace hagd::ad {

AdamW::AdamW(std::vector<Var> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void AdamW::step() {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!params_[i].has_grad())
      throw ContractError("adamw_step: parameter " + std::to_string(i) + " has no gradient");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_value().data();
    auto g = params_[i].grad().data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      if (config_.weight_decay != 0.0) w[j] -= config_.lr * config_.weight_decay * w[j];
      w[j] -= config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::reset_rows(std::size_t param_index, const std::vector<std::size_t>& rows) {
  Tensor& m = m_.at(param_index);
  Tensor& v = v_.at(param_index);
  const std::size_t cols = m.cols();
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < cols; ++c) m.at(r, c) = v.at(r, c) = 0.0;
}

void AdamW::reset_cols(std::size_t param_index, const std::vector<std::size_t>& cols) {
  Tensor& m = m_.at(param_index);
  Tensor& v = v_.at(param_index);
  const std::size_t rows = m.rows(), width = m.cols();
  for (std::size_t c : cols)
    for (std::size_t r = 0; r < rows; ++r) m[r * width + c] = v[r * width + c] = 0.0;
}

}  // namespace hagd::ad
