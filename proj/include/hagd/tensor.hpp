#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hagd::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 a vector and
// rank 2 a matrix; nothing in this project needs more.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-1 tensors are viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const double& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;
  Tensor reshaped(Shape shape) const;
  void fill(double v);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// One value on (or feeding into) a computation tape.
struct Node {
  Tensor value;
  Tensor grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::int64_t tape_id = -1;  // -1 for leaves created outside any tape

  bool has_grad() const { return !grad.empty(); }
  void accumulate(std::span<const double> g);
  void zero_grad() { grad = Tensor(); }
};

// Shared handle to a Node. Copies alias the same value and gradient.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  // Trainable leaf living outside any tape; gradients accumulate across tapes.
  static Var parameter(Tensor value);
  static Var constant(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() { node_->zero_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::int64_t tape_id() const { return node_->tape_id; }
  const Shape& shape() const { return node_->value.shape(); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of differentiable operations. Backward visits the records in
// exact reverse order. A non-recording tape evaluates the same ops without
// keeping any history, which gives inference the same numerics as training.
class Tape {
 public:
  explicit Tape(bool record = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::int64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }

  // Leaf tensor owned by this tape (e.g. an input we want gradients for).
  Var leaf(Tensor value, bool requires_grad = false);

  // Records an op producing `value` from `inputs`. `backward` receives the
  // output node and must accumulate into the inputs that require grad.
  Var record(Tensor value, std::vector<Var> inputs,
             std::function<void(const Node& out)> backward);

  // Seeds d(loss)/d(loss) = 1. Loss must be a scalar produced on this tape.
  void backward(const Var& loss);
  // Seeds an arbitrary same-shape cotangent on `output`.
  void backward(const Var& output, const Tensor& seed);

 private:
  struct Record {
    std::vector<Var> inputs;
    Var output;
    std::function<void(const Node&)> backward;
  };
  void run_backward(const Var& output, const Tensor& seed);

  bool record_;
  std::int64_t id_;
  std::vector<Record> records_;
};

enum class Elementwise { relu, sigmoid, exp, log, square };

Var matmul(Tape& t, const Var& a, const Var& b);
// a · bᵀ
Var matmul_t(Tape& t, const Var& a, const Var& b);
Var add(Tape& t, const Var& a, const Var& b);
Var sub(Tape& t, const Var& a, const Var& b);
Var mul(Tape& t, const Var& a, const Var& b);
// Hadamard product with a constant tensor (frozen masks, fixed weights).
Var mul_const(Tape& t, const Var& a, const Tensor& c);
Var add_const(Tape& t, const Var& a, const Tensor& c);
Var scale(Tape& t, const Var& a, double s);
// Adds a length-C bias to every row of an N×C matrix.
Var add_bias(Tape& t, const Var& x, const Var& bias);
Var sum(Tape& t, const Var& a);
Var mean(Tape& t, const Var& a);

Var elementwise(Tape& t, Elementwise kind, const Var& x);
inline Var relu(Tape& t, const Var& x) { return elementwise(t, Elementwise::relu, x); }
inline Var sigmoid(Tape& t, const Var& x) { return elementwise(t, Elementwise::sigmoid, x); }
inline Var exp(Tape& t, const Var& x) { return elementwise(t, Elementwise::exp, x); }
inline Var log(Tape& t, const Var& x) { return elementwise(t, Elementwise::log, x); }
inline Var square(Tape& t, const Var& x) { return elementwise(t, Elementwise::square, x); }

Var softmax_rows(Tape& t, const Var& x);
// Row softmax over entries where mask != 0; masked entries and rows with an
// empty mask come out as exact zeros.
Var masked_softmax_rows(Tape& t, const Var& x, const Tensor& mask);

// Keeps the k largest entries (per row for matrices), ties to lower index.
// Gradient flows through the retained entries only.
Var topk_mask(Tape& t, const Var& x, std::size_t k);
// Mask used by topk_mask, 1 for retained entries.
Tensor topk_indicator(const Tensor& x, std::size_t k);

Var gather_rows(Tape& t, const Var& table, std::span<const std::size_t> ids);
Var select_rows(Tape& t, const Var& x, std::span<const std::size_t> rows);
// out[i][j] = a[i] + b[j] for column vectors a (N×1) and b (M×1).
Var pairwise_sum(Tape& t, const Var& a, const Var& b);

Var layer_norm(Tape& t, const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// qkv rows are [q | k | v] per token; rows grouped in sequences of seq_len.
Var causal_attention(Tape& t, const Var& qkv, std::size_t seq_len, std::size_t n_heads);

// Mean softmax cross-entropy over rows.
Var cross_entropy(Tape& t, const Var& logits, std::span<const std::size_t> targets);
// Mean binary cross-entropy on logits against targets in [0, 1].
Var bce_with_logits(Tape& t, const Var& logits, const Tensor& targets);

// Plain (untaped) helpers.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_t(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace hagd::ad
