#include "bmcl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "bmcl/error.hpp"

namespace bmcl {

namespace {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

Tape& common_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw ContractError("operand is not recorded on a tape");
  if (&a.tape() != &b.tape()) throw ContractError("operands belong to different tapes");
  return a.tape();
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

Tensor map(const Tensor& x, auto&& fn) {
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(in[i]);
  return Tensor(x.shape(), std::move(out));
}

Tensor zip(const Tensor& a, const Tensor& b, auto&& fn) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

// c[m x n] = a[m x k] * b[k x n], with optional transposes on the operands.
Tensor gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  const std::size_t lda = a.cols();
  const std::size_t ldb = b.cols();
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = trans_a ? A[p * lda + i] : A[i * lda + p];
      if (aip == 0.0) continue;
      double* crow = c.data() + i * n;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * B[j * ldb + p];
      } else {
        const double* brow = B.data() + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  return Tensor({m, n}, std::move(c));
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// --- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape_));
  }
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("tensor of shape " + shape_to_string(shape_) + " needs " +
                         std::to_string(element_count(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape_[0];
  if (rank() <= 1) return 1;
  throw DimensionError("rows() on tensor of shape " + shape_to_string(shape_));
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  if (rank() == 0) return 1;
  throw DimensionError("cols() on tensor of shape " + shape_to_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// --- Tape -----------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(*this);
}

const Tensor& Gradients::wrt(const Var& v) const { return grads_.at(v.id()); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Pullback pullback) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ContractError("input recorded on a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.pullback = std::move(pullback);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& output) const {
  if (!output.valid() || &output.tape() != this) throw ContractError("backward on a Var from another tape");
  const Tensor& out = nodes_[output.id()].value;
  if (out.size() != 1) {
    throw ContractError("backward requires a scalar output, got shape " + shape_to_string(out.shape()));
  }
  Gradients result;
  result.grads_.reserve(nodes_.size());
  for (const auto& node : nodes_) result.grads_.push_back(Tensor::zeros(node.value.shape()));
  result.grads_[output.id()] = Tensor::full(out.shape(), 1.0);

  std::vector<const Tensor*> inputs;
  std::vector<Tensor> input_grads;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.requires_grad || !node.pullback) continue;
    inputs.clear();
    input_grads.clear();
    for (auto in : node.inputs) {
      inputs.push_back(&nodes_[in].value);
      input_grads.push_back(Tensor::zeros(nodes_[in].value.shape()));
    }
    node.pullback(inputs, node.value, result.grads_[id], input_grads);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const auto in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      auto dst = result.grads_[in].mutable_data();
      const auto src = input_grads[k].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return result;
}

// --- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " * " +
                         shape_to_string(b.shape()));
  }
  return gemm(a, false, b, false);
}

Var matmul(const Var& a, const Var& b) {
  Tape& tape = common_tape(a, b);
  return tape.record(matmul(a.value(), b.value()), {a, b},
                     [](auto in, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                       grads[0] = gemm(g, false, *in[1], true);   // dA = G B^T
                       grads[1] = gemm(*in[0], true, g, false);   // dB = A^T G
                     });
}

Var add_bias(const Var& x, const Var& bias) {
  Tape& tape = common_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  require_matrix(X, "add_bias");
  if (b.size() != X.cols() || b.rank() > 2 || (b.rank() == 2 && b.rows() != 1)) {
    throw DimensionError("add_bias: bias " + shape_to_string(b.shape()) + " does not match rows of " +
                         shape_to_string(X.shape()));
  }
  std::vector<double> out(X.data().begin(), X.data().end());
  const std::size_t n = X.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  return tape.record(Tensor(X.shape(), std::move(out)), {x, bias},
                     [n](auto, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                       grads[0] = g;
                       auto db = grads[1].mutable_data();
                       const auto gd = g.data();
                       for (std::size_t i = 0; i < gd.size(); ++i) db[i % n] += gd[i];
                     });
}

Var relu(const Var& x) {
  Tensor out = map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.tape().record(std::move(out), {x},
                         [](auto in, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                           grads[0] = zip(*in[0], g, [](double v, double gv) { return v > 0.0 ? gv : 0.0; });
                         });
}

Tensor log_softmax_temp(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive and finite, got " + std::to_string(temperature));
  }
  require_matrix(logits, "log_softmax_temp");
  const std::size_t n = logits.rows(), c = logits.cols();
  const auto in = logits.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = in.data() + i * c;
    double* dst = out.data() + i * c;
    double mx = row[0] / temperature;
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j] / temperature);
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = row[j] / temperature - mx;
      acc += std::exp(dst[j]);
    }
    const double lse = std::log(acc);
    for (std::size_t j = 0; j < c; ++j) dst[j] -= lse;
  }
  return Tensor(logits.shape(), std::move(out));
}

Tensor softmax_temp(const Tensor& logits, double temperature) {
  return map(log_softmax_temp(logits, temperature), [](double v) { return std::exp(v); });
}

Var log_softmax_temp(const Var& logits, double temperature) {
  Tensor out = log_softmax_temp(logits.value(), temperature);
  return logits.tape().record(
      std::move(out), {logits},
      [temperature](auto, const Tensor& y, const Tensor& g, std::vector<Tensor>& grads) {
        // d/dx: (g - softmax * rowsum(g)) / T
        const std::size_t n = y.rows(), c = y.cols();
        const auto yd = y.data();
        const auto gd = g.data();
        auto dx = grads[0].mutable_data();
        for (std::size_t i = 0; i < n; ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += gd[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            dx[i * c + j] = (gd[i * c + j] - std::exp(yd[i * c + j]) * gsum) / temperature;
          }
        }
      });
}

Var pick(const Var& x, std::span<const int> index) {
  const Tensor& X = x.value();
  require_matrix(X, "pick");
  const std::size_t n = X.rows(), c = X.cols();
  if (index.size() != n) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " + std::to_string(n) + " rows");
  }
  std::vector<std::size_t> cols(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw ParameterError("pick: index " + std::to_string(index[i]) + " out of range for " +
                           std::to_string(c) + " columns");
    }
    cols[i] = static_cast<std::size_t>(index[i]);
    out[i] = X.data()[i * c + cols[i]];
  }
  return x.tape().record(Tensor::vector(std::move(out)), {x},
                         [cols = std::move(cols), c](auto, const Tensor&, const Tensor& g,
                                                     std::vector<Tensor>& grads) {
                           auto dx = grads[0].mutable_data();
                           for (std::size_t i = 0; i < cols.size(); ++i) dx[i * c + cols[i]] += g[i];
                         });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const Tensor& X = x.value();
  require_matrix(X, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty row selection");
  const std::size_t c = X.cols();
  std::vector<std::size_t> sel(rows.begin(), rows.end());
  std::vector<double> out;
  out.reserve(sel.size() * c);
  for (auto r : sel) {
    if (r >= X.rows()) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range");
    const auto row = X.data().subspan(r * c, c);
    out.insert(out.end(), row.begin(), row.end());
  }
  Tensor value({sel.size(), c}, std::move(out));
  return x.tape().record(std::move(value), {x},
                         [sel = std::move(sel), c](auto, const Tensor&, const Tensor& g,
                                                   std::vector<Tensor>& grads) {
                           auto dx = grads[0].mutable_data();
                           const auto gd = g.data();
                           for (std::size_t k = 0; k < sel.size(); ++k) {
                             for (std::size_t j = 0; j < c; ++j) dx[sel[k] * c + j] += gd[k * c + j];
                           }
                         });
}

Var add(const Var& a, const Var& b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return tape.record(zip(a.value(), b.value(), std::plus<>{}), {a, b},
                     [](auto, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                       grads[0] = g;
                       grads[1] = g;
                     });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return tape.record(zip(a.value(), b.value(), std::minus<>{}), {a, b},
                     [](auto, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                       grads[0] = g;
                       grads[1] = map(g, std::negate<>{});
                     });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  return tape.record(zip(a.value(), b.value(), std::multiplies<>{}), {a, b},
                     [](auto in, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                       grads[0] = zip(g, *in[1], std::multiplies<>{});
                       grads[1] = zip(g, *in[0], std::multiplies<>{});
                     });
}

Var square(const Var& x) {
  return x.tape().record(map(x.value(), [](double v) { return v * v; }), {x},
                         [](auto in, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                           grads[0] = zip(g, *in[0], [](double gv, double v) { return 2.0 * v * gv; });
                         });
}

Var scale(const Var& x, double factor) {
  return x.tape().record(map(x.value(), [factor](double v) { return factor * v; }), {x},
                         [factor](auto, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                           grads[0] = map(g, [factor](double v) { return factor * v; });
                         });
}

Var sum(const Var& x) {
  const auto d = x.value().data();
  const double total = std::accumulate(d.begin(), d.end(), 0.0);
  return x.tape().record(Tensor::scalar(total), {x},
                         [](auto in, const Tensor&, const Tensor& g, std::vector<Tensor>& grads) {
                           grads[0] = Tensor::full(in[0]->shape(), g.item());
                         });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

}  // namespace bmcl
