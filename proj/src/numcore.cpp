#include "infodiff/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace infodiff::nc {

namespace {

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<RowMatrixD>;
using ConstMapD = Eigen::Map<const RowMatrixD>;

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(shape[static_cast<std::size_t>(i) + 1]);
  }
  return strides;
}

// For output element k, the linear offset into an operand broadcast onto
// `out`. Empty when the operand already has the output's shape.
std::vector<int> broadcast_map(const Shape& operand, const Shape& out) {
  if (operand == out) return {};
  const std::size_t total = shape_size(out);
  std::vector<int> map(total);
  const std::size_t rank = out.size();
  const std::size_t shift = rank - operand.size();
  Shape padded(rank, 1);
  std::copy(operand.begin(), operand.end(), padded.begin() + static_cast<std::ptrdiff_t>(shift));
  const auto op_strides = strides_of(padded);
  std::vector<int> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < total; ++k) {
    map[k] = static_cast<int>(offset);
    for (int axis = static_cast<int>(rank) - 1; axis >= 0; --axis) {
      const auto a = static_cast<std::size_t>(axis);
      ++counter[a];
      if (padded[a] != 1) offset += op_strides[a];
      if (counter[a] < out[a]) break;
      counter[a] = 0;
      if (padded[a] != 1) offset -= op_strides[a] * static_cast<std::size_t>(out[a]);
    }
  }
  return map;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<int> transpose_map(const Shape& in, const Shape& out, const std::vector<int>& perm) {
  const auto in_strides = strides_of(in);
  const std::size_t total = shape_size(out);
  const std::size_t rank = out.size();
  std::vector<int> map(total);
  std::vector<int> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < total; ++k) {
    map[k] = static_cast<int>(offset);
    for (int axis = static_cast<int>(rank) - 1; axis >= 0; --axis) {
      const auto ax = static_cast<std::size_t>(axis);
      const std::size_t src_stride = in_strides[static_cast<std::size_t>(perm[ax])];
      ++counter[ax];
      offset += src_stride;
      if (counter[ax] < out[ax]) break;
      counter[ax] = 0;
      offset -= src_stride * static_cast<std::size_t>(out[ax]);
    }
  }
  return map;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

int last_dim(const Shape& s) { return s.back(); }
std::size_t leading(const Shape& s) { return shape_size(s) / static_cast<std::size_t>(s.back()); }

void accumulate(std::vector<double>& grad, std::size_t n) {
  if (grad.empty()) grad.assign(n, 0.0);
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::IndexInput: return "index-input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::GatherRows: return "gather-rows";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layer-norm";
    case Op::Gelu: return "gelu";
    case Op::Relu: return "relu";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::SumLast: return "sum-last";
    case Op::SquaredError: return "squared-error";
    case Op::LogSoftmaxNll: return "log-softmax-nll";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::named(Op op, const std::string& name, Shape shape) {
  if (inputs_.count(name)) throw ContractError("graph: duplicate input name '" + name + "'");
  for (int d : shape) {
    if (d <= 0) throw DimensionError(std::string(op_name(op)) + ": non-positive dimension for '" + name + "'");
  }
  Node n{op, {}, std::move(shape), name, {}, 0.0, {}};
  Var v = push(std::move(n));
  inputs_[name] = v.index;
  return v;
}

Var Graph::input(const std::string& name, Shape shape) { return named(Op::Input, name, std::move(shape)); }
Var Graph::parameter(const std::string& name, Shape shape) { return named(Op::Parameter, name, std::move(shape)); }
Var Graph::index_input(const std::string& name, Shape shape) {
  return named(Op::IndexInput, name, std::move(shape));
}

Var Graph::constant(const Tensor& value) {
  Node n{Op::Constant, {}, value.shape(), {}, {}, 0.0, {}};
  n.constant.assign(value.data().begin(), value.data().end());
  return push(std::move(n));
}

Var Graph::constant(double value) {
  Node n{Op::Constant, {}, {1}, {}, {}, 0.0, {value}};
  return push(std::move(n));
}

Var Graph::elementwise(Op op, Var a, Var b) {
  Shape out = broadcast_shape(op_name(op), shape(a), shape(b));
  Node n{op, {a.index, b.index}, out, {}, {}, 0.0, {}, {}, {}};
  n.map_a = broadcast_map(shape(a), out);
  n.map_b = broadcast_map(shape(b), out);
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return elementwise(Op::Add, a, b); }
Var Graph::sub(Var a, Var b) { return elementwise(Op::Sub, a, b); }
Var Graph::mul(Var a, Var b) { return elementwise(Op::Mul, a, b); }

Var Graph::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_string(sa) + " x " + shape_string(sb));
  }
  const int k = sa.back();
  const int kb = sb[sb.size() - 2];
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ in " + shape_string(sa) + " x " + shape_string(sb));
  }
  if (sb.size() != 2) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      throw DimensionError("matmul: batch dimensions differ in " + shape_string(sa) + " x " + shape_string(sb));
    }
  }
  Shape out = sa;
  out.back() = sb.back();
  return push(Node{Op::MatMul, {a.index, b.index}, std::move(out), {}, {}, 0.0, {}});
}

Var Graph::transpose(Var a, std::vector<int> perm) {
  const Shape& sa = shape(a);
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expected(sa.size());
  std::iota(expected.begin(), expected.end(), 0);
  if (sorted != expected) throw DimensionError("transpose: invalid permutation for " + shape_string(sa));
  Shape out(sa.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = sa[static_cast<std::size_t>(perm[i])];
  Node n{Op::Transpose, {a.index}, out, {}, perm, 0.0, {}, {}, {}};
  n.map_a = transpose_map(sa, out, perm);
  return push(std::move(n));
}

Var Graph::transpose(Var a) {
  const int r = static_cast<int>(shape(a).size());
  if (r < 2) throw DimensionError("transpose: rank must be >= 2");
  std::vector<int> perm(static_cast<std::size_t>(r));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<std::size_t>(r - 1)], perm[static_cast<std::size_t>(r - 2)]);
  return transpose(a, std::move(perm));
}

Var Graph::reshape(Var a, Shape s) {
  for (int d : s) {
    if (d <= 0) throw DimensionError("reshape: non-positive dimension in " + shape_string(s));
  }
  if (shape_size(s) != shape_size(shape(a))) {
    throw DimensionError("reshape: cannot view " + shape_string(shape(a)) + " as " + shape_string(s));
  }
  return push(Node{Op::Reshape, {a.index}, std::move(s), {}, {}, 0.0, {}});
}

Var Graph::gather_rows(Var table, Var ids) {
  if (shape(table).size() != 2) throw DimensionError("gather-rows: table must be rank 2");
  if (node(ids).op != Op::IndexInput) throw DimensionError("gather-rows: ids must be an index input");
  Shape out = shape(ids);
  out.push_back(shape(table)[1]);
  return push(Node{Op::GatherRows, {table.index, ids.index}, std::move(out), {}, {}, 0.0, {}});
}

Var Graph::unary(Op op, Var a) { return push(Node{op, {a.index}, shape(a), {}, {}, 0.0, {}}); }

Var Graph::softmax(Var a) { return unary(Op::Softmax, a); }
Var Graph::layer_norm(Var a, double epsilon) {
  Var v = unary(Op::LayerNorm, a);
  nodes_.back().epsilon = epsilon;
  return v;
}
Var Graph::gelu(Var a) { return unary(Op::Gelu, a); }
Var Graph::relu(Var a) { return unary(Op::Relu, a); }
Var Graph::sum(Var a) { return push(Node{Op::SumAll, {a.index}, {1}, {}, {}, 0.0, {}}); }
Var Graph::mean(Var a) { return push(Node{Op::MeanAll, {a.index}, {1}, {}, {}, 0.0, {}}); }
Var Graph::sum_last(Var a) {
  Shape out = shape(a);
  out.back() = 1;
  return push(Node{Op::SumLast, {a.index}, std::move(out), {}, {}, 0.0, {}});
}

Var Graph::squared_error(Var a, Var b, Var weights) {
  if (shape(a) != shape(b)) {
    throw DimensionError("squared-error: operand shapes differ: " + shape_string(shape(a)) + " vs " +
                         shape_string(shape(b)));
  }
  if (broadcast_shape("squared-error", shape(a), shape(weights)) != shape(a)) {
    throw DimensionError("squared-error: weights " + shape_string(shape(weights)) + " do not broadcast onto " +
                         shape_string(shape(a)));
  }
  Node n{Op::SquaredError, {a.index, b.index, weights.index}, {1}, {}, {}, 0.0, {}, {}, {}};
  n.map_b = broadcast_map(shape(weights), shape(a));
  return push(std::move(n));
}

Var Graph::log_softmax_nll(Var logits, Var targets, Var weights) {
  const Shape& sl = shape(logits);
  if (sl.size() != 2) throw DimensionError("log-softmax-nll: logits must be [N, V]");
  if (node(targets).op != Op::IndexInput) throw DimensionError("log-softmax-nll: targets must be an index input");
  if (shape_size(shape(targets)) != static_cast<std::size_t>(sl[0]) ||
      shape_size(shape(weights)) != static_cast<std::size_t>(sl[0])) {
    throw DimensionError("log-softmax-nll: targets/weights must have N = " + std::to_string(sl[0]) + " entries");
  }
  return push(Node{Op::LogSoftmaxNll, {logits.index, targets.index, weights.index}, {1}, {}, {}, 0.0, {}});
}

void Graph::mark_output(const std::string& name, Var v) { outputs_[name] = v.index; }

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, idx] : inputs_) {
    if (nodes_[static_cast<std::size_t>(idx)].op == Op::Parameter) names.push_back(name);
  }
  return names;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

inline double at(const std::vector<double>& v, const std::vector<int>& map, std::size_t k) {
  return map.empty() ? v[k] : v[static_cast<std::size_t>(map[k])];
}

inline void add_at(std::vector<double>& v, const std::vector<int>& map, std::size_t k, double x) {
  if (map.empty()) {
    v[k] += x;
  } else {
    v[static_cast<std::size_t>(map[k])] += x;
  }
}

void matmul_forward(const Shape& sa, const Shape& sb, const std::vector<double>& a, const std::vector<double>& b,
                    std::vector<double>& out) {
  const int m = sa[sa.size() - 2];
  const int k = sa.back();
  const int n = sb.back();
  if (sb.size() == 2) {
    const auto rows = static_cast<Eigen::Index>(leading(sa));
    MapD(out.data(), rows, n).noalias() = ConstMapD(a.data(), rows, k) * ConstMapD(b.data(), k, n);
    return;
  }
  const std::size_t batches = shape_size(sa) / (static_cast<std::size_t>(m) * static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < batches; ++i) {
    MapD(out.data() + i * static_cast<std::size_t>(m * n), m, n).noalias() =
        ConstMapD(a.data() + i * static_cast<std::size_t>(m * k), m, k) *
        ConstMapD(b.data() + i * static_cast<std::size_t>(k * n), k, n);
  }
}

}  // namespace

Tensor Evaluation::tensor(const Graph& g, Var v) const {
  const auto& vals = value(v);
  Tensor t(g.shape(v));
  std::transform(vals.begin(), vals.end(), t.data().begin(), [](double x) { return static_cast<float>(x); });
  return t;
}

Evaluation eval(const Graph& graph, const Bindings& bindings, const EvalOptions& options) {
  Evaluation ev;
  const auto& nodes = graph.nodes();
  ev.values_.resize(nodes.size());
  ev.aux_.resize(nodes.size());

  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const Node& n = nodes[k];
    auto& out = ev.values_[k];
    auto parent = [&](int i) -> const std::vector<double>& {
      return ev.values_[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(i)])];
    };
    auto parent_shape = [&](int i) -> const Shape& {
      return nodes[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(i)])].shape;
    };
    const std::size_t size = shape_size(n.shape);

    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
      case Op::IndexInput: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) throw ContractError("eval: input '" + n.name + "' is not bound");
        if (it->second.shape() != n.shape) {
          throw DimensionError(std::string(op_name(n.op)) + ": binding '" + n.name + "' has shape " +
                               shape_string(it->second.shape()) + ", expected " + shape_string(n.shape));
        }
        out.assign(it->second.data().begin(), it->second.data().end());
        if (n.op == Op::IndexInput) {
          for (double x : out) {
            if (x < 0 || x != std::floor(x)) {
              throw ContractError("eval: index input '" + n.name + "' holds a non-index value");
            }
          }
        }
        break;
      }
      case Op::Constant:
        out = n.constant;
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Node& m = n;
        const auto& a = parent(0);
        const auto& b = parent(1);
        out.resize(size);
        if (n.op == Op::Add) {
          for (std::size_t i = 0; i < size; ++i) out[i] = at(a, m.map_a, i) + at(b, m.map_b, i);
        } else if (n.op == Op::Sub) {
          for (std::size_t i = 0; i < size; ++i) out[i] = at(a, m.map_a, i) - at(b, m.map_b, i);
        } else {
          for (std::size_t i = 0; i < size; ++i) out[i] = at(a, m.map_a, i) * at(b, m.map_b, i);
        }
        break;
      }
      case Op::MatMul:
        out.assign(size, 0.0);
        matmul_forward(parent_shape(0), parent_shape(1), parent(0), parent(1), out);
        break;
      case Op::Transpose: {
        const Node& m = n;
        const auto& a = parent(0);
        out.resize(size);
        for (std::size_t i = 0; i < size; ++i) out[i] = a[static_cast<std::size_t>(m.map_a[i])];
        break;
      }
      case Op::Reshape:
        out = parent(0);
        break;
      case Op::GatherRows: {
        const auto& table = parent(0);
        const auto& ids = parent(1);
        const int rows = parent_shape(0)[0];
        const int d = parent_shape(0)[1];
        out.resize(size);
        for (std::size_t r = 0; r < ids.size(); ++r) {
          const auto id = static_cast<int>(ids[r]);
          if (id >= rows) {
            throw ContractError("gather-rows: id " + std::to_string(id) + " out of range for " +
                                std::to_string(rows) + " rows");
          }
          std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(id) * d, d,
                      out.begin() + static_cast<std::ptrdiff_t>(r) * d);
        }
        break;
      }
      case Op::Softmax: {
        const auto& a = parent(0);
        const int cols = last_dim(n.shape);
        const std::size_t rows = leading(n.shape);
        out.resize(size);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* x = a.data() + r * static_cast<std::size_t>(cols);
          double* y = out.data() + r * static_cast<std::size_t>(cols);
          const double mx = *std::max_element(x, x + cols);
          double total = 0.0;
          for (int c = 0; c < cols; ++c) total += (y[c] = std::exp(x[c] - mx));
          for (int c = 0; c < cols; ++c) y[c] /= total;
        }
        break;
      }
      case Op::LayerNorm: {
        const auto& a = parent(0);
        const int cols = last_dim(n.shape);
        const std::size_t rows = leading(n.shape);
        out.resize(size);
        auto& rstd = ev.aux_[k];
        rstd.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* x = a.data() + r * static_cast<std::size_t>(cols);
          double* y = out.data() + r * static_cast<std::size_t>(cols);
          double mu = 0.0;
          for (int c = 0; c < cols; ++c) mu += x[c];
          mu /= cols;
          double var = 0.0;
          for (int c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
          var /= cols;
          rstd[r] = 1.0 / std::sqrt(var + n.epsilon);
          for (int c = 0; c < cols; ++c) y[c] = (x[c] - mu) * rstd[r];
        }
        break;
      }
      case Op::Gelu: {
        const auto& a = parent(0);
        out.resize(size);
        for (std::size_t i = 0; i < size; ++i) out[i] = gelu(a[i]);
        break;
      }
      case Op::Relu: {
        const auto& a = parent(0);
        out.resize(size);
        for (std::size_t i = 0; i < size; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
        break;
      }
      case Op::SumAll:
      case Op::MeanAll: {
        const auto& a = parent(0);
        double total = std::accumulate(a.begin(), a.end(), 0.0);
        if (n.op == Op::MeanAll) total /= static_cast<double>(a.size());
        out.assign(1, total);
        break;
      }
      case Op::SumLast: {
        const auto& a = parent(0);
        const int cols = last_dim(parent_shape(0));
        out.assign(size, 0.0);
        for (std::size_t r = 0; r < size; ++r) {
          const double* x = a.data() + r * static_cast<std::size_t>(cols);
          out[r] = std::accumulate(x, x + cols, 0.0);
        }
        break;
      }
      case Op::SquaredError: {
        const Node& m = n;
        const auto& a = parent(0);
        const auto& b = parent(1);
        const auto& w = parent(2);
        double total = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double diff = a[i] - b[i];
          total += at(w, m.map_b, i) * diff * diff;
        }
        out.assign(1, total);
        break;
      }
      case Op::LogSoftmaxNll: {
        const auto& logits = parent(0);
        const auto& targets = parent(1);
        const auto& w = parent(2);
        const int cols = parent_shape(0)[1];
        const std::size_t rows = static_cast<std::size_t>(parent_shape(0)[0]);
        auto& probs = ev.aux_[k];
        probs.resize(logits.size());
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const auto target = static_cast<int>(targets[r]);
          if (target >= cols) throw ContractError("log-softmax-nll: target id out of range");
          const double* x = logits.data() + r * static_cast<std::size_t>(cols);
          double* p = probs.data() + r * static_cast<std::size_t>(cols);
          const double mx = *std::max_element(x, x + cols);
          double z = 0.0;
          for (int c = 0; c < cols; ++c) z += (p[c] = std::exp(x[c] - mx));
          for (int c = 0; c < cols; ++c) p[c] /= z;
          const double log_z = mx + std::log(z);
          total += w[r] * (log_z - x[target]);
        }
        out.assign(1, total);
        break;
      }
    }

    if (options.check_finite) {
      for (double x : out) {
        if (!std::isfinite(x)) {
          throw NumericError("eval: non-finite value produced at node " + std::to_string(k) + " (" +
                             op_name(n.op) + ")");
        }
      }
    }
  }

  for (const auto& [name, idx] : graph.outputs()) ev.outputs_[name] = ev.tensor(graph, Var{idx});
  return ev;
}

// ---------------------------------------------------------------------------
// Backward

std::map<std::string, Tensor> backward(const Graph& graph, const Evaluation& ev, Var loss) {
  const auto& nodes = graph.nodes();
  if (loss.index < 0 || static_cast<std::size_t>(loss.index) >= nodes.size()) {
    throw ContractError("backward: loss node out of range");
  }
  if (shape_size(graph.shape(loss)) != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_string(graph.shape(loss)));
  }

  // Which nodes sit on a path from some parameter.
  std::vector<bool> needs(nodes.size(), false);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    if (nodes[k].op == Op::Parameter) {
      needs[k] = true;
      continue;
    }
    for (int p : nodes[k].parents) needs[k] = needs[k] || needs[static_cast<std::size_t>(p)];
  }

  std::vector<std::vector<double>> grads(nodes.size());
  grads[static_cast<std::size_t>(loss.index)].assign(1, 1.0);

  for (int ki = loss.index; ki >= 0; --ki) {
    const auto k = static_cast<std::size_t>(ki);
    const Node& n = nodes[k];
    if (grads[k].empty() || !needs[k]) continue;
    const auto& g = grads[k];
    auto want = [&](int i) {
      const auto p = static_cast<std::size_t>(n.parents[static_cast<std::size_t>(i)]);
      return needs[p];
    };
    auto grad_of = [&](int i) -> std::vector<double>& {
      const auto p = static_cast<std::size_t>(n.parents[static_cast<std::size_t>(i)]);
      accumulate(grads[p], shape_size(nodes[p].shape));
      return grads[p];
    };
    auto value_of = [&](int i) -> const std::vector<double>& {
      return ev.values_[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(i)])];
    };
    auto shape_of = [&](int i) -> const Shape& {
      return nodes[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(i)])].shape;
    };
    const std::size_t size = g.size();

    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
      case Op::IndexInput:
      case Op::Constant:
        break;
      case Op::Add:
      case Op::Sub: {
        const Node& m = n;
        if (want(0)) {
          auto& ga = grad_of(0);
          for (std::size_t i = 0; i < size; ++i) add_at(ga, m.map_a, i, g[i]);
        }
        if (want(1)) {
          auto& gb = grad_of(1);
          const double sign = n.op == Op::Add ? 1.0 : -1.0;
          for (std::size_t i = 0; i < size; ++i) add_at(gb, m.map_b, i, sign * g[i]);
        }
        break;
      }
      case Op::Mul: {
        const Node& m = n;
        const auto& a = value_of(0);
        const auto& b = value_of(1);
        if (want(0)) {
          auto& ga = grad_of(0);
          for (std::size_t i = 0; i < size; ++i) add_at(ga, m.map_a, i, g[i] * at(b, m.map_b, i));
        }
        if (want(1)) {
          auto& gb = grad_of(1);
          for (std::size_t i = 0; i < size; ++i) add_at(gb, m.map_b, i, g[i] * at(a, m.map_a, i));
        }
        break;
      }
      case Op::MatMul: {
        const Shape& sa = shape_of(0);
        const Shape& sb = shape_of(1);
        const int mm = sa[sa.size() - 2];
        const int kk = sa.back();
        const int nn = sb.back();
        const auto& a = value_of(0);
        const auto& b = value_of(1);
        if (sb.size() == 2) {
          const auto rows = static_cast<Eigen::Index>(leading(sa));
          ConstMapD G(g.data(), rows, nn);
          if (want(0)) MapD(grad_of(0).data(), rows, kk).noalias() += G * ConstMapD(b.data(), kk, nn).transpose();
          if (want(1)) MapD(grad_of(1).data(), kk, nn).noalias() += ConstMapD(a.data(), rows, kk).transpose() * G;
        } else {
          const std::size_t batches = shape_size(sa) / (static_cast<std::size_t>(mm) * static_cast<std::size_t>(kk));
          const auto sa_step = static_cast<std::size_t>(mm * kk);
          const auto sb_step = static_cast<std::size_t>(kk * nn);
          const auto sg_step = static_cast<std::size_t>(mm * nn);
          std::vector<double>* ga = want(0) ? &grad_of(0) : nullptr;
          std::vector<double>* gb = want(1) ? &grad_of(1) : nullptr;
          for (std::size_t i = 0; i < batches; ++i) {
            ConstMapD G(g.data() + i * sg_step, mm, nn);
            if (ga) {
              MapD(ga->data() + i * sa_step, mm, kk).noalias() +=
                  G * ConstMapD(b.data() + i * sb_step, kk, nn).transpose();
            }
            if (gb) {
              MapD(gb->data() + i * sb_step, kk, nn).noalias() +=
                  ConstMapD(a.data() + i * sa_step, mm, kk).transpose() * G;
            }
          }
        }
        break;
      }
      case Op::Transpose: {
        if (!want(0)) break;
        const Node& m = n;
        auto& ga = grad_of(0);
        for (std::size_t i = 0; i < size; ++i) ga[static_cast<std::size_t>(m.map_a[i])] += g[i];
        break;
      }
      case Op::Reshape: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        for (std::size_t i = 0; i < size; ++i) ga[i] += g[i];
        break;
      }
      case Op::GatherRows: {
        if (!want(0)) break;
        auto& gt = grad_of(0);
        const auto& ids = value_of(1);
        const int d = shape_of(0)[1];
        for (std::size_t r = 0; r < ids.size(); ++r) {
          const auto id = static_cast<std::size_t>(ids[r]);
          for (int c = 0; c < d; ++c) gt[id * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] +=
              g[r * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)];
        }
        break;
      }
      case Op::Softmax: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        const auto& y = ev.values_[k];
        const int cols = last_dim(n.shape);
        const std::size_t rows = leading(n.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t off = r * static_cast<std::size_t>(cols);
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += g[off + static_cast<std::size_t>(c)] * y[off + static_cast<std::size_t>(c)];
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = off + static_cast<std::size_t>(c);
            ga[i] += y[i] * (g[i] - dot);
          }
        }
        break;
      }
      case Op::LayerNorm: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        const auto& y = ev.values_[k];
        const auto& rstd = ev.aux_[k];
        const int cols = last_dim(n.shape);
        const std::size_t rows = leading(n.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t off = r * static_cast<std::size_t>(cols);
          double mean_g = 0.0;
          double mean_gy = 0.0;
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = off + static_cast<std::size_t>(c);
            mean_g += g[i];
            mean_gy += g[i] * y[i];
          }
          mean_g /= cols;
          mean_gy /= cols;
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = off + static_cast<std::size_t>(c);
            ga[i] += rstd[r] * (g[i] - mean_g - y[i] * mean_gy);
          }
        }
        break;
      }
      case Op::Gelu: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        const auto& a = value_of(0);
        for (std::size_t i = 0; i < size; ++i) ga[i] += g[i] * gelu_grad(a[i]);
        break;
      }
      case Op::Relu: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        const auto& a = value_of(0);
        for (std::size_t i = 0; i < size; ++i) ga[i] += a[i] > 0.0 ? g[i] : 0.0;
        break;
      }
      case Op::SumAll:
      case Op::MeanAll: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        const double scale = n.op == Op::MeanAll ? g[0] / static_cast<double>(ga.size()) : g[0];
        for (double& x : ga) x += scale;
        break;
      }
      case Op::SumLast: {
        if (!want(0)) break;
        auto& ga = grad_of(0);
        const int cols = last_dim(shape_of(0));
        for (std::size_t r = 0; r < size; ++r) {
          for (int c = 0; c < cols; ++c) ga[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] += g[r];
        }
        break;
      }
      case Op::SquaredError: {
        const Node& m = n;
        const auto& a = value_of(0);
        const auto& b = value_of(1);
        const auto& w = value_of(2);
        std::vector<double>* ga = want(0) ? &grad_of(0) : nullptr;
        std::vector<double>* gb = want(1) ? &grad_of(1) : nullptr;
        std::vector<double>* gw = want(2) ? &grad_of(2) : nullptr;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double diff = a[i] - b[i];
          const double d = 2.0 * g[0] * at(w, m.map_b, i) * diff;
          if (ga) (*ga)[i] += d;
          if (gb) (*gb)[i] -= d;
          if (gw) add_at(*gw, m.map_b, i, g[0] * diff * diff);
        }
        break;
      }
      case Op::LogSoftmaxNll: {
        const auto& probs = ev.aux_[k];
        const auto& targets = value_of(1);
        const auto& w = value_of(2);
        const int cols = shape_of(0)[1];
        const std::size_t rows = static_cast<std::size_t>(shape_of(0)[0]);
        std::vector<double>* gl = want(0) ? &grad_of(0) : nullptr;
        std::vector<double>* gw = want(2) ? &grad_of(2) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t off = r * static_cast<std::size_t>(cols);
          const auto target = static_cast<std::size_t>(targets[r]);
          if (gl) {
            const double scale = g[0] * w[r];
            if (scale != 0.0) {
              for (int c = 0; c < cols; ++c) (*gl)[off + static_cast<std::size_t>(c)] += scale * probs[off + static_cast<std::size_t>(c)];
              (*gl)[off + target] -= scale;
            }
          }
          if (gw) (*gw)[r] += g[0] * -std::log(probs[off + target]);
        }
        break;
      }
    }
  }

  std::map<std::string, Tensor> result;
  for (const auto& [name, idx] : graph.inputs()) {
    const Node& n = nodes[static_cast<std::size_t>(idx)];
    if (n.op != Op::Parameter) continue;
    Tensor t(n.shape);
    const auto& gv = grads[static_cast<std::size_t>(idx)];
    if (!gv.empty()) std::transform(gv.begin(), gv.end(), t.data().begin(), [](double x) { return static_cast<float>(x); });
    result.emplace(name, std::move(t));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite differences

double grad_check(const Graph& graph, Var loss, const Bindings& bindings, const std::string& name, double eps) {
  if (!(eps > 0.0 && eps <= 0.1)) throw ContractError("grad_check: eps must lie in (0, 0.1]");
  const auto analytic = backward(graph, eval(graph, bindings), loss);
  auto it = analytic.find(name);
  if (it == analytic.end()) throw ContractError("grad_check: '" + name + "' is not a parameter");
  const Tensor& grad = it->second;

  Bindings probe = bindings;
  Tensor& x = probe.at(name);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float original = x[i];
    const auto up = static_cast<float>(original + eps);
    const auto down = static_cast<float>(original - eps);
    x[i] = up;
    const double f_up = eval(graph, probe).scalar(loss);
    x[i] = down;
    const double f_down = eval(graph, probe).scalar(loss);
    x[i] = original;
    // Divide by the step actually taken after rounding to float storage.
    const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
    const double a = grad[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

double grad_check(const GraphBuilder& function, const Tensor& point, double eps) {
  Graph g;
  Var x = g.parameter("x", point.shape());
  Var loss = function(g, x);
  return grad_check(g, loss, Bindings{{"x", point}}, "x", eps);
}

}  // namespace infodiff::nc
