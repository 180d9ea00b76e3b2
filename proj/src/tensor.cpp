#include "hagd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "hagd/error.hpp"

namespace hagd::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

#ifdef __GLIBC__
// Training allocates and frees the same multi-megabyte buffers every step;
// serving them from mmap costs a page-fault storm per step.
[[maybe_unused]] const bool malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

// Gradient buffer of `n`, allocated as zeros on first touch.
Tensor& grad_of(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 1 && t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
}

void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite input");
}

std::atomic<std::int64_t> next_tape_id{0};

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size())
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor(Shape{rows, cols}, std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return matrix(r, c, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape_[0];
  return 1;
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  return 1;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Node::accumulate(std::span<const double> g) {
  Tensor& dst = grad_of(*this);
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Tape::Tape(bool record) : record_(record), id_(next_tape_id.fetch_add(1)) {}

Var Tape::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->tape_id = id_;
  return Var(std::move(n));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, std::function<void(const Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->tape_id = id_;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  Var out(std::move(n));
  if (!record_ || !needs) return out;
  out.node()->requires_grad = true;
  records_.push_back(Record{std::move(inputs), out, std::move(backward)});
  return out;
}

void Tape::backward(const Var& loss) {
  if (loss.value().size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  run_backward(loss, Tensor(loss.shape(), 1.0));
}

void Tape::backward(const Var& output, const Tensor& seed) {
  if (seed.shape() != output.shape())
    throw DimensionError("backward: seed shape " + shape_string(seed.shape()) +
                         " does not match output " + shape_string(output.shape()));
  run_backward(output, seed);
}

void Tape::run_backward(const Var& output, const Tensor& seed) {
  if (output.tape_id() != id_) throw ContractError("backward: output was not produced on this tape");
  if (!output.requires_grad()) return;
  // Intermediate gradients are per-pass; only leaves accumulate across calls.
  for (auto& r : records_) r.output.zero_grad();
  output.node()->accumulate(seed.data());
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output.has_grad()) it->backward(*it->output.node());
  }
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  Tensor c(Shape{a.rows(), b.cols()});
  as_mat(c).noalias() = as_mat(a) * as_mat(b);
  return c;
}

Tensor matmul_t(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_t");
  require_matrix(b, "matmul_t");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_t: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and transpose of " + shape_string(b.shape()));
  Tensor c(Shape{a.rows(), b.rows()});
  as_mat(c).noalias() = as_mat(a) * as_mat(b).transpose();
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor c(Shape{a.cols(), a.rows()});
  as_mat(c) = as_mat(a).transpose();
  return c;
}

Var matmul(Tape& t, const Var& a, const Var& b) {
  Tensor out = matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](const Node& o) {
    auto g = as_mat(o.grad);
    if (a.requires_grad()) {
      Tensor& ga = grad_of(*a.node());
      MutMap(ga.data().data(), a.value().rows(), a.value().cols()).noalias() +=
          g * as_mat(b.value()).transpose();
    }
    if (b.requires_grad()) {
      Tensor& gb = grad_of(*b.node());
      MutMap(gb.data().data(), b.value().rows(), b.value().cols()).noalias() +=
          as_mat(a.value()).transpose() * g;
    }
  });
}

Var matmul_t(Tape& t, const Var& a, const Var& b) {
  Tensor out = matmul_t(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](const Node& o) {
    auto g = as_mat(o.grad);
    if (a.requires_grad()) {
      Tensor& ga = grad_of(*a.node());
      MutMap(ga.data().data(), a.value().rows(), a.value().cols()).noalias() += g * as_mat(b.value());
    }
    if (b.requires_grad()) {
      Tensor& gb = grad_of(*b.node());
      MutMap(gb.data().data(), b.value().rows(), b.value().cols()).noalias() +=
          g.transpose() * as_mat(a.value());
    }
  });
}

// ---------------------------------------------------------------- pointwise

Var add(Tape& t, const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return t.record(std::move(out), {a, b}, [a, b](const Node& n) {
    if (a.requires_grad()) a.node()->accumulate(n.grad.data());
    if (b.requires_grad()) b.node()->accumulate(n.grad.data());
  });
}

Var sub(Tape& t, const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](const Node& n) {
    if (a.requires_grad()) a.node()->accumulate(n.grad.data());
    if (b.requires_grad()) {
      auto gb = grad_of(*b.node()).data();
      auto g = n.grad.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Tape& t, const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](const Node& n) {
    auto g = n.grad.data();
    if (a.requires_grad()) {
      auto ga = grad_of(*a.node()).data();
      auto bv = b.value().data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(*b.node()).data();
      auto av = a.value().data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var mul_const(Tape& t, const Var& a, const Tensor& c) {
  if (a.value().size() != c.size())
    throw DimensionError("mul_const: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(c.shape()));
  Tensor out = a.value();
  auto o = out.data();
  auto cv = c.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= cv[i];
  return t.record(std::move(out), {a}, [a, c](const Node& n) {
    auto ga = grad_of(*a.node()).data();
    auto g = n.grad.data();
    auto cv = c.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * cv[i];
  });
}

Var add_const(Tape& t, const Var& a, const Tensor& c) {
  if (a.value().size() != c.size())
    throw DimensionError("add_const: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(c.shape()));
  Tensor out = a.value();
  auto o = out.data();
  auto cv = c.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += cv[i];
  return t.record(std::move(out), {a}, [a](const Node& n) { a.node()->accumulate(n.grad.data()); });
}

Var scale(Tape& t, const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return t.record(std::move(out), {a}, [a, s](const Node& n) {
    auto ga = grad_of(*a.node()).data();
    auto g = n.grad.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
  });
}

Var add_bias(Tape& t, const Var& x, const Var& bias) {
  require_matrix(x.value(), "add_bias");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (bias.value().size() != cols)
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not fit rows of " +
                         shape_string(x.shape()));
  Tensor out = x.value();
  auto bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  return t.record(std::move(out), {x, bias}, [x, bias, rows, cols](const Node& n) {
    if (x.requires_grad()) x.node()->accumulate(n.grad.data());
    if (bias.requires_grad()) {
      auto gb = grad_of(*bias.node()).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += n.grad.at(r, c);
    }
  });
}

Var sum(Tape& t, const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Tensor::scalar(s), {a}, [a](const Node& n) {
    const double g = n.grad[0];
    for (double& v : grad_of(*a.node()).data()) v += g;
  });
}

Var mean(Tape& t, const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(t, sum(t, a), 1.0 / count);
}

Var elementwise(Tape& t, Elementwise kind, const Var& x) {
  Tensor out = x.value();
  auto o = out.data();
  switch (kind) {
    case Elementwise::relu:
      for (double& v : o) v = v > 0.0 ? v : 0.0;
      break;
    case Elementwise::sigmoid:
      for (double& v : o) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      break;
    case Elementwise::exp:
      for (double& v : o) v = std::exp(v);
      break;
    case Elementwise::log:
      for (double& v : o) {
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
        v = std::log(v);
      }
      break;
    case Elementwise::square:
      for (double& v : o) v = v * v;
      break;
  }
  return t.record(std::move(out), {x}, [x, kind](const Node& n) {
    auto gx = grad_of(*x.node()).data();
    auto g = n.grad.data();
    auto xv = x.value().data();
    auto y = n.value.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      switch (kind) {
        case Elementwise::relu: gx[i] += xv[i] > 0.0 ? g[i] : 0.0; break;
        case Elementwise::sigmoid: gx[i] += g[i] * y[i] * (1.0 - y[i]); break;
        case Elementwise::exp: gx[i] += g[i] * y[i]; break;
        case Elementwise::log: gx[i] += g[i] / xv[i]; break;
        case Elementwise::square: gx[i] += 2.0 * xv[i] * g[i]; break;
      }
    }
  });
}

// ---------------------------------------------------------------- softmax

namespace {

void softmax_backward_row(std::span<const double> y, std::span<const double> g, std::span<double> gx) {
  double dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) dot += y[j] * g[j];
  for (std::size_t j = 0; j < y.size(); ++j) gx[j] += y[j] * (g[j] - dot);
}

}  // namespace

Var softmax_rows(Tape& t, const Var& x) {
  require_matrix(x.value(), "softmax_rows");
  require_finite(x.value(), "softmax_rows");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data().data() + r * cols;
    double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
  }
  return t.record(std::move(out), {x}, [x, rows, cols](const Node& n) {
    auto gx = grad_of(*x.node()).data();
    for (std::size_t r = 0; r < rows; ++r)
      softmax_backward_row(n.value.data().subspan(r * cols, cols), n.grad.data().subspan(r * cols, cols),
                           gx.subspan(r * cols, cols));
  });
}

Var masked_softmax_rows(Tape& t, const Var& x, const Tensor& mask) {
  require_matrix(x.value(), "masked_softmax_rows");
  if (mask.size() != x.value().size()) throw DimensionError("masked_softmax_rows: mask shape mismatch");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask.at(r, c) == 0.0) continue;
      double v = x.value().at(r, c);
      if (!std::isfinite(v)) throw DomainError("masked_softmax_rows: non-finite input");
      mx = std::max(mx, v);
    }
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (mask.at(r, c) != 0.0) z += (out.at(r, c) = std::exp(x.value().at(r, c) - mx));
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= z;
  }
  return t.record(std::move(out), {x}, [x, rows, cols](const Node& n) {
    auto gx = grad_of(*x.node()).data();
    // Masked entries have y = 0, so the unmasked formula leaves them untouched.
    for (std::size_t r = 0; r < rows; ++r)
      softmax_backward_row(n.value.data().subspan(r * cols, cols), n.grad.data().subspan(r * cols, cols),
                           gx.subspan(r * cols, cols));
  });
}

// ---------------------------------------------------------------- top-k

Tensor topk_indicator(const Tensor& x, std::size_t k) {
  require_matrix(x, "topk_mask");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (k < 1 || k > cols)
    throw ParameterError("topk_mask: k=" + std::to_string(k) + " outside [1, " + std::to_string(cols) + "]");
  Tensor mask(x.shape(), 0.0);
  std::vector<std::size_t> idx(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * cols;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (std::size_t i = 0; i < k; ++i) mask.at(r, idx[i]) = 1.0;
  }
  return mask;
}

Var topk_mask(Tape& t, const Var& x, std::size_t k) {
  Tensor mask = topk_indicator(x.value(), k);
  return mul_const(t, x, mask);
}

// ---------------------------------------------------------------- indexing

Var gather_rows(Tape& t, const Var& table, std::span<const std::size_t> ids) {
  require_matrix(table.value(), "gather_rows");
  const std::size_t vocab = table.value().rows(), width = table.value().cols();
  Tensor out(Shape{ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw DimensionError("gather_rows: row " + std::to_string(ids[i]) + " out of " + std::to_string(vocab));
    std::copy_n(table.value().data().data() + ids[i] * width, width, out.data().data() + i * width);
  }
  std::vector<std::size_t> keep(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, keep, width](const Node& n) {
    auto g = grad_of(*table.node()).data();
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) g[keep[i] * width + c] += n.grad[i * width + c];
  });
}

Var select_rows(Tape& t, const Var& x, std::span<const std::size_t> rows) {
  return gather_rows(t, x, rows);
}

Var pairwise_sum(Tape& t, const Var& a, const Var& b) {
  const std::size_t n = a.value().size(), m = b.value().size();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = a.value()[i] + b.value()[j];
  return t.record(std::move(out), {a, b}, [a, b, n, m](const Node& o) {
    if (a.requires_grad()) {
      auto ga = grad_of(*a.node()).data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i] += o.grad.at(i, j);
    }
    if (b.requires_grad()) {
      auto gb = grad_of(*b.node()).data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += o.grad.at(i, j);
    }
  });
}

// ---------------------------------------------------------------- fused blocks

Var layer_norm(Tape& t, const Var& x, const Var& gain, const Var& bias, double eps) {
  require_matrix(x.value(), "layer_norm");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (gain.value().size() != cols || bias.value().size() != cols)
    throw DimensionError("layer_norm: gain/bias width mismatch for " + shape_string(x.shape()));
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x.value().at(r, c);
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = x.value().at(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat.at(r, c) = (x.value().at(r, c) - mu) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](const Node& n) {
                    if (gain.requires_grad()) {
                      auto gg = grad_of(*gain.node()).data();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gg[c] += n.grad.at(r, c) * xhat.at(r, c);
                    }
                    if (bias.requires_grad()) {
                      auto gb = grad_of(*bias.node()).data();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += n.grad.at(r, c);
                    }
                    if (x.requires_grad()) {
                      Tensor& gx = grad_of(*x.node());
                      const double inv_n = 1.0 / static_cast<double>(cols);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                          double dxh = n.grad.at(r, c) * gain.value()[c];
                          m1 += dxh;
                          m2 += dxh * xhat.at(r, c);
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for (std::size_t c = 0; c < cols; ++c) {
                          double dxh = n.grad.at(r, c) * gain.value()[c];
                          gx.at(r, c) += inv_std[r] * (dxh - m1 - xhat.at(r, c) * m2);
                        }
                      }
                    }
                  });
}

Var causal_attention(Tape& t, const Var& qkv, std::size_t seq_len, std::size_t n_heads) {
  require_matrix(qkv.value(), "causal_attention");
  const std::size_t rows = qkv.value().rows(), width = qkv.value().cols();
  if (width % 3 != 0) throw DimensionError("causal_attention: width not divisible by 3");
  const std::size_t d = width / 3;
  if (seq_len == 0 || rows % seq_len != 0 || n_heads == 0 || d % n_heads != 0)
    throw DimensionError("causal_attention: incompatible seq_len/heads for " + shape_string(qkv.shape()));
  const std::size_t batch = rows / seq_len, hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor& in = qkv.value();
  // probs[b][h][i][j], j <= i
  std::vector<double> probs(batch * n_heads * seq_len * seq_len, 0.0);
  Tensor out(Shape{rows, d});
  std::vector<double> srow(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* q = &in.at(b * seq_len + i, h * hd);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* k = &in.at(b * seq_len + j, d + h * hd);
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += q[e] * k[e];
          srow[j] = s * inv_sqrt;
          mx = std::max(mx, srow[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += (srow[j] = std::exp(srow[j] - mx));
        double* p = &probs[((b * n_heads + h) * seq_len + i) * seq_len];
        double* o = &out.at(b * seq_len + i, h * hd);
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = srow[j] / z;
          const double* v = &in.at(b * seq_len + j, 2 * d + h * hd);
          for (std::size_t e = 0; e < hd; ++e) o[e] += p[j] * v[e];
        }
      }
    }
  }
  return t.record(std::move(out), {qkv},
                  [qkv, probs = std::move(probs), batch, seq_len, n_heads, d, hd, inv_sqrt](const Node& n) {
                    const Tensor& in = qkv.value();
                    Tensor& g = grad_of(*qkv.node());
                    std::vector<double> dp(seq_len);
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t h = 0; h < n_heads; ++h) {
                        for (std::size_t i = 0; i < seq_len; ++i) {
                          const std::size_t ri = b * seq_len + i;
                          const double* go = &n.grad.at(ri, h * hd);
                          const double* p = &probs[((b * n_heads + h) * seq_len + i) * seq_len];
                          double dot = 0.0;
                          for (std::size_t j = 0; j <= i; ++j) {
                            const std::size_t rj = b * seq_len + j;
                            const double* v = &in.at(rj, 2 * d + h * hd);
                            double* gv = &g.at(rj, 2 * d + h * hd);
                            double s = 0.0;
                            for (std::size_t e = 0; e < hd; ++e) {
                              s += go[e] * v[e];
                              gv[e] += p[j] * go[e];
                            }
                            dp[j] = s;
                            dot += p[j] * s;
                          }
                          const double* q = &in.at(ri, h * hd);
                          double* gq = &g.at(ri, h * hd);
                          for (std::size_t j = 0; j <= i; ++j) {
                            const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                            const std::size_t rj = b * seq_len + j;
                            const double* k = &in.at(rj, d + h * hd);
                            double* gk = &g.at(rj, d + h * hd);
                            for (std::size_t e = 0; e < hd; ++e) {
                              gq[e] += ds * k[e];
                              gk[e] += ds * q[e];
                            }
                          }
                        }
                      }
                    }
                  });
}

Var cross_entropy(Tape& t, const Var& logits, std::span<const std::size_t> targets) {
  require_matrix(logits.value(), "cross_entropy");
  const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
  if (targets.size() != rows) throw DimensionError("cross_entropy: target count does not match rows");
  Tensor probs(logits.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) throw DimensionError("cross_entropy: target out of range");
    const double* row = &logits.value().at(r, 0);
    double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (probs.at(r, c) = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) probs.at(r, c) /= z;
    loss += -(row[targets[r]] - mx - std::log(z));
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return t.record(Tensor::scalar(loss), {logits},
                  [logits, probs = std::move(probs), tg = std::move(tg), rows, cols](const Node& n) {
                    Tensor& g = grad_of(*logits.node());
                    const double s = n.grad[0] / static_cast<double>(rows);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c)
                        g.at(r, c) += s * (probs.at(r, c) - (c == tg[r] ? 1.0 : 0.0));
                  });
}

Var bce_with_logits(Tape& t, const Var& logits, const Tensor& targets) {
  if (targets.size() != logits.value().size()) throw DimensionError("bce_with_logits: target count mismatch");
  const std::size_t n = targets.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double x = logits.value()[i], y = targets[i];
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  return t.record(Tensor::scalar(loss), {logits}, [logits, targets, n](const Node& o) {
    auto g = grad_of(*logits.node()).data();
    const double s = o.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double x = logits.value()[i];
      double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += s * (p - targets[i]);
    }
  });
}

}  // namespace hagd::ad
