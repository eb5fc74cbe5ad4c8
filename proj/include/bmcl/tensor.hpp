#pragma once

// Dense float64 tensors and a tape-based reverse-mode autodiff engine.
//
// A Tape records primitive applications in creation order, so the node list
// is already topologically sorted; backward() walks it once in reverse.
// Only the primitives needed by MLP classification losses and the
// distillation / Fisher regularizers are provided. There is no broadcasting
// beyond the row-wise bias add.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bmcl {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return data_.size() == 1 && shape_.empty(); }

  /// Row/column counts of a rank-2 tensor; a rank-1 tensor is a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> mutable_data() noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * cols() + col]; }
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid as long as the tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of a backward pass: one gradient per tape node.
class Gradients {
 public:
  /// Gradient with respect to `v`; a zero tensor if `v` did not influence the output.
  const Tensor& wrt(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  /// Maps the upstream gradient to one gradient per input (same order as
  /// inputs). `input_grads` arrives zero-filled with the input shapes.
  using Pullback = std::function<void(std::span<const Tensor* const> inputs, const Tensor& output,
                                      const Tensor& upstream, std::vector<Tensor>& input_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Grad-enabled leaf (a parameter or an input we differentiate against).
  Var leaf(Tensor value);
  /// Leaf excluded from differentiation.
  Var constant(Tensor value);

  Var record(Tensor value, std::vector<Var> inputs, Pullback pullback);

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Gradients backward(const Var& output) const;

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Pullback pullback;
  };
  std::deque<Node> nodes_;  // append-only; references from value() stay valid
};

// Primitives. All operands must live on the same tape.

/// [m x k] . [k x n] -> [m x n]
Var matmul(const Var& a, const Var& b);
/// Adds a length-n bias to every row of an [m x n] matrix.
Var add_bias(const Var& x, const Var& bias);
/// max(0, x); the subgradient at 0 is 0.
Var relu(const Var& x);
/// Row-wise log(softmax(logits / temperature)).
Var log_softmax_temp(const Var& logits, double temperature);
/// out[i] = x[i, index[i]] for an [n x c] matrix.
Var pick(const Var& x, std::span<const int> index);
/// Selects rows of an [n x c] matrix.
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var square(const Var& x);
Var scale(const Var& x, double factor);
Var sum(const Var& x);
Var mean(const Var& x);

// Plain (untaped) helpers used where no gradient is needed.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor log_softmax_temp(const Tensor& logits, double temperature);
Tensor softmax_temp(const Tensor& logits, double temperature);

}  // namespace bmcl
