#pragma once

// Dense tensors and a small reverse-mode autodiff engine.
//
// A Graph is an append-only list of primitive nodes whose shapes are fixed at
// construction. eval() binds named inputs, runs every node forward and keeps
// the forward values in an Evaluation; backward() walks the same nodes in
// reverse and returns gradients for every parameter input.
//
// Storage at the API boundary is 32-bit. Forward values, reductions and
// gradients are held in 64-bit internally.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "infodiff/errors.hpp"

namespace infodiff::nc {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_)) {
      throw DimensionError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
  }

  static BasicTensor scalar(Scalar v) { return BasicTensor({1}, std::vector<Scalar>{v}); }

  // Copies a matrix expression into a rank-2 tensor.
  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    BasicTensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    t.matrix() = m.template cast<Scalar>();
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? rank() + axis : axis)); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  std::vector<Scalar>& storage() noexcept { return data_; }
  const std::vector<Scalar>& storage() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  // Row-major view with the last axis as columns.
  Eigen::Map<RowMatrix> matrix() { return {data_.data(), rows(), cols()}; }
  Eigen::Map<const RowMatrix> matrix() const { return {data_.data(), rows(), cols()}; }

  BasicTensor reshaped(Shape shape) const {
    if (checked_size(shape) != data_.size()) {
      throw DimensionError("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  static std::size_t checked_size(const Shape& shape) {
    for (int d : shape) {
      if (d <= 0) throw DimensionError("tensor: non-positive dimension in " + shape_string(shape));
    }
    return shape_size(shape);
  }
  Eigen::Index cols() const { return shape_.empty() ? 1 : shape_.back(); }
  Eigen::Index rows() const {
    return shape_.empty() ? 0 : static_cast<Eigen::Index>(data_.size()) / cols();
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<float>;
using Bindings = std::map<std::string, Tensor>;

enum class Op : std::uint8_t {
  Input,       // data tensor bound by name
  Parameter,   // trainable tensor bound by name; receives a gradient
  IndexInput,  // integer-valued tensor bound by name (gather rows, NLL targets)
  Constant,
  Add,
  Sub,
  Mul,
  MatMul,
  Transpose,
  Reshape,
  GatherRows,
  Softmax,
  LayerNorm,
  Gelu,
  Relu,
  SumAll,
  MeanAll,
  SumLast,
  SquaredError,
  LogSoftmaxNll,
};

const char* op_name(Op op);

struct Var {
  int index = -1;
};

struct Node {
  Op op;
  std::vector<int> parents;
  Shape shape;
  std::string name;          // inputs only
  std::vector<int> perm;     // Transpose
  double epsilon = 0.0;      // LayerNorm
  std::vector<double> constant;
  // Precomputed offsets for broadcasting operands and transposition; empty
  // when the operand already matches the node's layout.
  std::vector<int> map_a;
  std::vector<int> map_b;
};

class Graph {
 public:
  Var input(const std::string& name, Shape shape);
  Var parameter(const std::string& name, Shape shape);
  Var index_input(const std::string& name, Shape shape);
  Var constant(const Tensor& value);
  Var constant(double value);

  // Elementwise with trailing-aligned broadcasting (dims equal or 1).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // a: [..., m, k]; b: [k, n] or [..., k, n] with identical leading dims.
  Var matmul(Var a, Var b);
  Var transpose(Var a, std::vector<int> perm);
  // Swaps the last two axes.
  Var transpose(Var a);
  Var reshape(Var a, Shape shape);
  // table: [V, d]; ids: index tensor of any shape -> ids.shape + [d].
  Var gather_rows(Var table, Var ids);
  Var softmax(Var a);
  Var layer_norm(Var a, double epsilon = 1e-5);
  Var gelu(Var a);
  Var relu(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var sum_last(Var a);
  // sum(weights * (a - b)^2); weights broadcast onto a's shape.
  Var squared_error(Var a, Var b, Var weights);
  // sum_i weights[i] * -log softmax(logits[i])[targets[i]]; logits [N, V].
  Var log_softmax_nll(Var logits, Var targets, Var weights);

  void mark_output(const std::string& name, Var v);

  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.index)); }
  const Shape& shape(Var v) const { return node(v).shape; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const std::map<std::string, int>& outputs() const noexcept { return outputs_; }
  // Name -> node index, for every bound input kind.
  const std::map<std::string, int>& inputs() const noexcept { return inputs_; }
  std::vector<std::string> parameter_names() const;

 private:
  Var push(Node n);
  Var named(Op op, const std::string& name, Shape shape);
  Var elementwise(Op op, Var a, Var b);
  Var unary(Op op, Var a);

  std::vector<Node> nodes_;
  std::map<std::string, int> inputs_;
  std::map<std::string, int> outputs_;
};

struct EvalOptions {
  // Scan every node for NaN/Inf. Off by default; costs one pass per node.
  bool check_finite = false;
};

// Forward values of every node, kept for backward().
class Evaluation {
 public:
  const std::vector<double>& value(Var v) const { return values_.at(static_cast<std::size_t>(v.index)); }
  double scalar(Var v) const { return value(v).at(0); }
  Tensor tensor(const Graph& g, Var v) const;
  const std::map<std::string, Tensor>& outputs() const noexcept { return outputs_; }

 private:
  friend Evaluation eval(const Graph&, const Bindings&, const EvalOptions&);
  friend std::map<std::string, Tensor> backward(const Graph&, const Evaluation&, Var);
  std::vector<std::vector<double>> values_;
  // LayerNorm: per-row inverse std; LogSoftmaxNll: probabilities.
  std::vector<std::vector<double>> aux_;
  std::map<std::string, Tensor> outputs_;
};

Evaluation eval(const Graph& graph, const Bindings& bindings, const EvalOptions& options = {});

// d(loss)/d(parameter) for every Parameter node. Unused parameters get zeros.
std::map<std::string, Tensor> backward(const Graph& graph, const Evaluation& evaluation, Var loss);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for the gradient of `loss` with respect to parameter `name`. All other
// bindings stay fixed.
double grad_check(const Graph& graph, Var loss, const Bindings& bindings, const std::string& name, double eps);

using GraphBuilder = std::function<Var(Graph&, Var)>;

// Builds a graph around a parameter "x" shaped like `point` and checks the
// gradient of the scalar the builder returns.
double grad_check(const GraphBuilder& function, const Tensor& point, double eps);

}  // namespace infodiff::nc
