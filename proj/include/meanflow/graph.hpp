#pragma once

// Dense double-precision arrays with a small closed operation set, built as a
// dynamic graph. Supports reverse-mode gradients, forward-mode directional
// derivatives (JVP), and a stop-gradient marker. The JVP pass emits ordinary
// graph nodes, so a reverse pass can differentiate through a JVP result when
// it is not frozen.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "meanflow/common.hpp"

namespace meanflow {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  MatMul,
  Tanh,
  Sigmoid,
  Sin,
  Cos,
  Sum,
  Mean,
  SqNorm,
  Dot,
  Concat,
  TakeRows,
  Reshape,
  StopGrad,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SqNorm: return "sqnorm";
    case Op::Dot: return "dot";
    case Op::Concat: return "concat";
    case Op::TakeRows: return "take_rows";
    case Op::Reshape: return "reshape";
    case Op::StopGrad: return "stop_gradient";
  }
  return "?";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Op op = Op::Leaf;
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<NodePtr> inputs;
  double scalar = 0.0;        // Scale payload
  std::vector<int> indices;   // TakeRows payload

  std::size_t numel() const { return data.size(); }
};

namespace detail {

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline void check_finite(const std::vector<double>& data, Op op) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name(op)) + ": non-finite value");
    }
  }
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace detail

/// Handle to an immutable dense array in the computation graph.
class Value {
 public:
  Value() = default;
  explicit Value(NodePtr node) : node_(std::move(node)) {}

  /// A differentiable leaf holding the given data.
  static Value leaf(std::vector<int> shape, std::vector<double> data) {
    if (detail::shape_numel(shape) != data.size()) {
      throw std::invalid_argument("leaf: shape/data size mismatch");
    }
    detail::check_finite(data, Op::Leaf);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Value(std::move(n));
  }

  static Value scalar(double v) { return leaf({}, {v}); }

  static Value zeros(const std::vector<int>& shape) {
    return leaf(shape, std::vector<double>(detail::shape_numel(shape), 0.0));
  }

  static Value full(const std::vector<int>& shape, double v) {
    return leaf(shape, std::vector<double>(detail::shape_numel(shape), v));
  }

  bool defined() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }
  const std::vector<int>& shape() const { return node_->shape; }
  const std::vector<double>& data() const { return node_->data; }
  std::size_t numel() const { return node_->numel(); }

  /// The single entry of a one-element array.
  double item() const {
    if (numel() != 1) throw std::invalid_argument("item: not a scalar");
    return node_->data[0];
  }

  /// In-place access to a leaf's storage. Graphs built later see the new
  /// contents; graphs built earlier hold stale derived values, so only the
  /// trainer mutates parameters, between steps.
  std::vector<double>& mutable_data() {
    if (node_->op != Op::Leaf) {
      throw std::invalid_argument("mutable_data: only leaves are mutable");
    }
    return node_->data;
  }

 private:
  NodePtr node_;
};

namespace detail {

inline Value wrap(Op op, std::vector<int> shape, std::vector<double> data,
                  std::vector<NodePtr> inputs, double scalar = 0.0,
                  std::vector<int> indices = {}) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument(std::string(op_name(op)) + ": internal shape mismatch");
  }
  check_finite(data, op);
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->inputs = std::move(inputs);
  n->scalar = scalar;
  n->indices = std::move(indices);
  return Value(std::move(n));
}

// Arrays are at most rank 2; a rank-<=1 array is viewed as a single row.
struct Shape2 {
  int r = 1, c = 1;
  bool rank2 = false;
};

inline Shape2 as2(const std::vector<int>& s) {
  if (s.empty()) return {1, 1, false};
  if (s.size() == 1) return {1, s[0], false};
  if (s.size() == 2) return {s[0], s[1], true};
  throw std::invalid_argument("rank > 2 arrays are not supported");
}

// Broadcast plan for elementwise binaries. Covers equal shapes plus the
// patterns the network needs: scalar op any, [B,d] op [1,d], [B,d] op [B,1].
struct Bcast {
  int rows = 1, cols = 1;
  int ar = 0, ac = 0, br = 0, bc = 0;  // input strides
  std::vector<int> out_shape;
};

inline Bcast plan_bcast(Op op, const std::vector<int>& sa, const std::vector<int>& sb) {
  const Shape2 a = as2(sa), b = as2(sb);
  auto axis = [&](int da, int db) {
    if (da == db) return da;
    if (da == 1) return db;
    if (db == 1) return da;
    throw std::invalid_argument(std::string(op_name(op)) + ": incompatible shapes " +
                                shape_str(sa) + " vs " + shape_str(sb));
  };
  Bcast p;
  p.rows = axis(a.r, b.r);
  p.cols = axis(a.c, b.c);
  p.ar = (a.r == 1) ? 0 : a.c;
  p.ac = (a.c == 1) ? 0 : 1;
  p.br = (b.r == 1) ? 0 : b.c;
  p.bc = (b.c == 1) ? 0 : 1;
  if (a.rank2 || b.rank2) {
    p.out_shape = {p.rows, p.cols};
  } else if (sa.size() == 1 || sb.size() == 1) {
    p.out_shape = {p.cols};
  } else {
    p.out_shape = {};
  }
  return p;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

// Dimensions of a matrix product, allowing rank-1 operands: a rank-1 left
// operand is a row vector, a rank-1 right operand is a column vector.
struct MatDims {
  int m, k, n;
  std::vector<int> out_shape;
};

inline MatDims matmul_dims(const std::vector<int>& sa, const std::vector<int>& sb) {
  if (sa.empty() || sb.empty() || sa.size() > 2 || sb.size() > 2) {
    throw std::invalid_argument("matmul: operands must be rank 1 or 2");
  }
  const int m = sa.size() == 2 ? sa[0] : 1;
  const int k = sa.size() == 2 ? sa[1] : sa[0];
  const int kb = sb.size() == 2 ? sb[0] : sb[0];
  const int n = sb.size() == 2 ? sb[1] : 1;
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(sa) +
                                " vs " + shape_str(sb));
  }
  MatDims d{m, k, n, {}};
  if (sa.size() == 2 && sb.size() == 2) {
    d.out_shape = {m, n};
  } else if (sa.size() == 2) {
    d.out_shape = {m};
  } else if (sb.size() == 2) {
    d.out_shape = {n};
  } else {
    throw std::invalid_argument("matmul: use dot for two rank-1 operands");
  }
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
  auto p = detail::plan_bcast(Op::Add, a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(p.rows) * p.cols);
  const auto& da = a.data();
  const auto& db = b.data();
  std::size_t o = 0;
  for (int r = 0; r < p.rows; ++r) {
    for (int c = 0; c < p.cols; ++c, ++o) {
      out[o] = da[r * p.ar + c * p.ac] + db[r * p.br + c * p.bc];
    }
  }
  return detail::wrap(Op::Add, std::move(p.out_shape), std::move(out), {a.node(), b.node()});
}

inline Value sub(const Value& a, const Value& b) {
  auto p = detail::plan_bcast(Op::Sub, a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(p.rows) * p.cols);
  const auto& da = a.data();
  const auto& db = b.data();
  std::size_t o = 0;
  for (int r = 0; r < p.rows; ++r) {
    for (int c = 0; c < p.cols; ++c, ++o) {
      out[o] = da[r * p.ar + c * p.ac] - db[r * p.br + c * p.bc];
    }
  }
  return detail::wrap(Op::Sub, std::move(p.out_shape), std::move(out), {a.node(), b.node()});
}

inline Value mul(const Value& a, const Value& b) {
  auto p = detail::plan_bcast(Op::Mul, a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(p.rows) * p.cols);
  const auto& da = a.data();
  const auto& db = b.data();
  std::size_t o = 0;
  for (int r = 0; r < p.rows; ++r) {
    for (int c = 0; c < p.cols; ++c, ++o) {
      out[o] = da[r * p.ar + c * p.ac] * db[r * p.br + c * p.bc];
    }
  }
  return detail::wrap(Op::Mul, std::move(p.out_shape), std::move(out), {a.node(), b.node()});
}

inline Value scale(const Value& a, double s) {
  if (!std::isfinite(s)) throw NumericError("scale: non-finite factor");
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  return detail::wrap(Op::Scale, a.shape(), std::move(out), {a.node()}, s);
}

inline Value matmul(const Value& a, const Value& b) {
  auto d = detail::matmul_dims(a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(d.m) * d.n);
  detail::CMatMap ma(a.data().data(), d.m, d.k);
  detail::CMatMap mb(b.data().data(), d.k, d.n);
  detail::MatMap mo(out.data(), d.m, d.n);
  mo.noalias() = ma * mb;
  return detail::wrap(Op::MatMul, std::move(d.out_shape), std::move(out), {a.node(), b.node()});
}

namespace detail {

template <class Fn>
Value elementwise(Op op, const Value& a, Fn&& fn) {
  std::vector<double> out(a.data());
  for (double& v : out) v = fn(v);
  return wrap(op, a.shape(), std::move(out), {a.node()});
}

}  // namespace detail

inline Value tanh(const Value& a) {
  return detail::elementwise(Op::Tanh, a, [](double v) { return std::tanh(v); });
}

inline Value sigmoid(const Value& a) {
  return detail::elementwise(Op::Sigmoid, a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline Value sin(const Value& a) {
  return detail::elementwise(Op::Sin, a, [](double v) { return std::sin(v); });
}

inline Value cos(const Value& a) {
  return detail::elementwise(Op::Cos, a, [](double v) { return std::cos(v); });
}

inline Value sum(const Value& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::wrap(Op::Sum, {}, {s}, {a.node()});
}

inline Value mean(const Value& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty array");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::wrap(Op::Mean, {}, {s / static_cast<double>(a.numel())}, {a.node()});
}

/// Squared L2 norm over all entries.
inline Value sqnorm(const Value& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return detail::wrap(Op::SqNorm, {}, {s}, {a.node()});
}

/// Full contraction of two equally sized arrays.
inline Value dot(const Value& a, const Value& b) {
  if (a.numel() != b.numel()) {
    throw std::invalid_argument("dot: size mismatch, " + detail::shape_str(a.shape()) +
                                " vs " + detail::shape_str(b.shape()));
  }
  double s = 0.0;
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) s += da[i] * db[i];
  return detail::wrap(Op::Dot, {}, {s}, {a.node(), b.node()});
}

/// Concatenate along the last axis. Rank-2 inputs must share the row count.
inline Value concat(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const bool rank2 = parts[0].shape().size() == 2;
  const int rows = rank2 ? parts[0].shape()[0] : 1;
  int total_cols = 0;
  std::vector<NodePtr> ins;
  ins.reserve(parts.size());
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if ((s.size() == 2) != rank2 || (rank2 && s[0] != rows) || s.empty()) {
      throw std::invalid_argument("concat: incompatible part shapes");
    }
    total_cols += rank2 ? s[1] : s[0];
    ins.push_back(p.node());
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * total_cols);
  int col0 = 0;
  for (const auto& p : parts) {
    const int c = rank2 ? p.shape()[1] : p.shape()[0];
    const auto& d = p.data();
    for (int r = 0; r < rows; ++r) {
      std::copy(d.begin() + static_cast<std::size_t>(r) * c,
                d.begin() + static_cast<std::size_t>(r + 1) * c,
                out.begin() + static_cast<std::size_t>(r) * total_cols + col0);
    }
    col0 += c;
  }
  std::vector<int> shape = rank2 ? std::vector<int>{rows, total_cols}
                                 : std::vector<int>{total_cols};
  return detail::wrap(Op::Concat, std::move(shape), std::move(out), std::move(ins));
}

/// Gather rows of a rank-2 table. Used for condition-embedding lookups.
inline Value take_rows(const Value& table, std::vector<int> indices) {
  const auto& s = table.shape();
  if (s.size() != 2) throw std::invalid_argument("take_rows: table must be rank 2");
  const int rows = s[0], cols = s[1];
  std::vector<double> out(indices.size() * static_cast<std::size_t>(cols));
  const auto& d = table.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const int i = indices[b];
    if (i < 0 || i >= rows) throw std::invalid_argument("take_rows: index out of range");
    std::copy(d.begin() + static_cast<std::size_t>(i) * cols,
              d.begin() + static_cast<std::size_t>(i + 1) * cols,
              out.begin() + b * static_cast<std::size_t>(cols));
  }
  std::vector<int> shape{static_cast<int>(indices.size()), cols};
  return detail::wrap(Op::TakeRows, std::move(shape), std::move(out), {table.node()}, 0.0,
                      std::move(indices));
}

inline Value reshape(const Value& a, std::vector<int> shape) {
  if (detail::shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  return detail::wrap(Op::Reshape, std::move(shape), a.data(), {a.node()});
}

/// Identity on the value; a constant for both jvp and grad.
inline Value stop_gradient(const Value& a) {
  return detail::wrap(Op::StopGrad, a.shape(), a.data(), {a.node()});
}

// Composites.
inline Value silu(const Value& a) { return mul(a, sigmoid(a)); }

/// x @ w + b with b broadcast across rows.
inline Value affine(const Value& x, const Value& w, const Value& b) {
  return add(matmul(x, w), b);
}

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }
inline Value operator*(const Value& a, double s) { return scale(a, s); }
inline Value operator*(double s, const Value& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

namespace detail {

// Deterministic postorder (inputs before users). Nodes in `cut` are treated
// as leaves: emitted, not traversed.
inline std::vector<NodePtr> topo_order(const NodePtr& out,
                                       const std::unordered_set<const Node*>* cut = nullptr) {
  std::vector<NodePtr> topo;
  std::unordered_set<const Node*> visited{out.get()};
  struct Frame {
    NodePtr node;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({out});
  while (!stack.empty()) {
    Frame& f = stack.back();
    const bool is_cut = cut && cut->count(f.node.get());
    if (is_cut || f.next >= f.node->inputs.size()) {
      topo.push_back(f.node);
      stack.pop_back();
      continue;
    }
    NodePtr child = f.node->inputs[f.next++];
    if (visited.insert(child.get()).second) {
      stack.push_back({std::move(child)});
    }
  }
  return topo;
}

using TangentMap = std::unordered_map<const Node*, Value>;

inline Value vadd(const Value& a, const Value& b) {
  if (!a.defined()) return b;
  if (!b.defined()) return a;
  return add(a, b);
}

// Tangent of one node given its inputs' tangents, emitted as graph nodes so
// the result itself is differentiable.
inline Value jvp_rule(const NodePtr& n, const TangentMap& tan) {
  auto tin = [&](std::size_t i) -> Value {
    auto it = tan.find(n->inputs[i].get());
    return it == tan.end() ? Value{} : it->second;
  };
  auto in = [&](std::size_t i) { return Value(n->inputs[i]); };
  auto normalize = [&](Value t) {
    if (t.defined() && t.shape() != n->shape) t = add(Value::zeros(n->shape), t);
    return t;
  };

  switch (n->op) {
    case Op::Leaf:
    case Op::StopGrad:
      return {};
    case Op::Add:
      return normalize(vadd(tin(0), tin(1)));
    case Op::Sub: {
      Value ta = tin(0), tb = tin(1);
      if (ta.defined() && tb.defined()) return normalize(sub(ta, tb));
      if (ta.defined()) return normalize(ta);
      if (tb.defined()) return normalize(scale(tb, -1.0));
      return {};
    }
    case Op::Mul: {
      Value ta = tin(0), tb = tin(1);
      Value lhs = ta.defined() ? mul(ta, in(1)) : Value{};
      Value rhs = tb.defined() ? mul(in(0), tb) : Value{};
      return normalize(vadd(lhs, rhs));
    }
    case Op::Scale: {
      Value t = tin(0);
      return t.defined() ? scale(t, n->scalar) : Value{};
    }
    case Op::MatMul: {
      Value ta = tin(0), tb = tin(1);
      Value lhs = ta.defined() ? matmul(ta, in(1)) : Value{};
      Value rhs = tb.defined() ? matmul(in(0), tb) : Value{};
      return vadd(lhs, rhs);
    }
    case Op::Tanh: {
      Value t = tin(0);
      if (!t.defined()) return {};
      Value y(n);
      return mul(t, sub(Value::full(n->shape, 1.0), mul(y, y)));
    }
    case Op::Sigmoid: {
      Value t = tin(0);
      if (!t.defined()) return {};
      Value y(n);
      return mul(t, mul(y, sub(Value::full(n->shape, 1.0), y)));
    }
    case Op::Sin: {
      Value t = tin(0);
      return t.defined() ? mul(t, cos(in(0))) : Value{};
    }
    case Op::Cos: {
      Value t = tin(0);
      return t.defined() ? mul(t, scale(sin(in(0)), -1.0)) : Value{};
    }
    case Op::Sum: {
      Value t = tin(0);
      return t.defined() ? sum(t) : Value{};
    }
    case Op::Mean: {
      Value t = tin(0);
      return t.defined() ? mean(t) : Value{};
    }
    case Op::SqNorm: {
      Value t = tin(0);
      return t.defined() ? scale(dot(in(0), t), 2.0) : Value{};
    }
    case Op::Dot: {
      Value ta = tin(0), tb = tin(1);
      Value lhs = ta.defined() ? dot(ta, in(1)) : Value{};
      Value rhs = tb.defined() ? dot(in(0), tb) : Value{};
      return vadd(lhs, rhs);
    }
    case Op::Concat: {
      bool any = false;
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        if (tin(i).defined()) any = true;
      }
      if (!any) return {};
      std::vector<Value> parts;
      parts.reserve(n->inputs.size());
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        Value t = tin(i);
        parts.push_back(t.defined() ? t : Value::zeros(n->inputs[i]->shape));
      }
      return concat(parts);
    }
    case Op::TakeRows: {
      Value t = tin(0);
      return t.defined() ? take_rows(t, n->indices) : Value{};
    }
    case Op::Reshape: {
      Value t = tin(0);
      return t.defined() ? reshape(t, n->shape) : Value{};
    }
  }
  return {};
}

using AdjointMap = std::unordered_map<const Node*, std::vector<double>>;

// Reverse sweep from `out`, accumulating adjoints only for nodes that can
// reach one of `wrt`.
inline AdjointMap backward(const Value& out, const std::vector<Value>& wrt) {
  auto topo = topo_order(out.node());

  std::unordered_set<const Node*> needed;
  for (const auto& w : wrt) {
    if (w.defined()) needed.insert(w.node().get());
  }
  for (const auto& n : topo) {  // postorder: inputs first
    if (needed.count(n.get())) continue;
    for (const auto& in : n->inputs) {
      if (needed.count(in.get())) {
        needed.insert(n.get());
        break;
      }
    }
  }

  AdjointMap adj;
  adj[out.node().get()] = std::vector<double>(out.numel(), 1.0);

  auto buf = [&adj](const Node* n) -> std::vector<double>& {
    auto it = adj.find(n);
    if (it == adj.end()) {
      it = adj.emplace(n, std::vector<double>(n->numel(), 0.0)).first;
    }
    return it->second;
  };
  auto want = [&](const NodePtr& n) { return needed.count(n.get()) != 0; };

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const NodePtr& n = *it;
    if (!needed.count(n.get())) continue;
    auto found = adj.find(n.get());
    if (found == adj.end()) continue;  // not reached from out
    const std::vector<double> w = found->second;

    switch (n->op) {
      case Op::Leaf:
      case Op::StopGrad:
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const auto& a = n->inputs[0];
        const auto& b = n->inputs[1];
        auto p = plan_bcast(n->op, a->shape, b->shape);
        const bool wa = want(a), wb = want(b);
        std::vector<double>* da = wa ? &buf(a.get()) : nullptr;
        std::vector<double>* db = wb ? &buf(b.get()) : nullptr;
        std::size_t o = 0;
        for (int r = 0; r < p.rows; ++r) {
          for (int c = 0; c < p.cols; ++c, ++o) {
            const double g = w[o];
            if (n->op == Op::Mul) {
              if (wa) (*da)[r * p.ar + c * p.ac] += g * b->data[r * p.br + c * p.bc];
              if (wb) (*db)[r * p.br + c * p.bc] += g * a->data[r * p.ar + c * p.ac];
            } else {
              if (wa) (*da)[r * p.ar + c * p.ac] += g;
              if (wb) (*db)[r * p.br + c * p.bc] += n->op == Op::Sub ? -g : g;
            }
          }
        }
        break;
      }
      case Op::Scale:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          for (std::size_t i = 0; i < w.size(); ++i) d[i] += n->scalar * w[i];
        }
        break;
      case Op::MatMul: {
        const auto& a = n->inputs[0];
        const auto& b = n->inputs[1];
        auto dm = matmul_dims(a->shape, b->shape);
        CMatMap ma(a->data.data(), dm.m, dm.k);
        CMatMap mb(b->data.data(), dm.k, dm.n);
        CMatMap mw(w.data(), dm.m, dm.n);
        if (want(a)) {
          MatMap(buf(a.get()).data(), dm.m, dm.k).noalias() += mw * mb.transpose();
        }
        if (want(b)) {
          MatMap(buf(b.get()).data(), dm.k, dm.n).noalias() += ma.transpose() * mw;
        }
        break;
      }
      case Op::Tanh:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          for (std::size_t i = 0; i < w.size(); ++i) {
            d[i] += w[i] * (1.0 - n->data[i] * n->data[i]);
          }
        }
        break;
      case Op::Sigmoid:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          for (std::size_t i = 0; i < w.size(); ++i) {
            d[i] += w[i] * n->data[i] * (1.0 - n->data[i]);
          }
        }
        break;
      case Op::Sin:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          const auto& x = n->inputs[0]->data;
          for (std::size_t i = 0; i < w.size(); ++i) d[i] += w[i] * std::cos(x[i]);
        }
        break;
      case Op::Cos:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          const auto& x = n->inputs[0]->data;
          for (std::size_t i = 0; i < w.size(); ++i) d[i] -= w[i] * std::sin(x[i]);
        }
        break;
      case Op::Sum:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          for (double& v : d) v += w[0];
        }
        break;
      case Op::Mean:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          const double g = w[0] / static_cast<double>(d.size());
          for (double& v : d) v += g;
        }
        break;
      case Op::SqNorm:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          const auto& x = n->inputs[0]->data;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * w[0] * x[i];
        }
        break;
      case Op::Dot: {
        const auto& a = n->inputs[0];
        const auto& b = n->inputs[1];
        if (want(a)) {
          auto& d = buf(a.get());
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += w[0] * b->data[i];
        }
        if (want(b)) {
          auto& d = buf(b.get());
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += w[0] * a->data[i];
        }
        break;
      }
      case Op::Concat: {
        const bool rank2 = n->shape.size() == 2;
        const int rows = rank2 ? n->shape[0] : 1;
        const int total = rank2 ? n->shape[1] : n->shape[0];
        int col0 = 0;
        for (const auto& in : n->inputs) {
          const int c = rank2 ? in->shape[1] : in->shape[0];
          if (want(in)) {
            auto& d = buf(in.get());
            for (int r = 0; r < rows; ++r) {
              for (int j = 0; j < c; ++j) {
                d[static_cast<std::size_t>(r) * c + j] +=
                    w[static_cast<std::size_t>(r) * total + col0 + j];
              }
            }
          }
          col0 += c;
        }
        break;
      }
      case Op::TakeRows:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          const int cols = n->inputs[0]->shape[1];
          for (std::size_t b = 0; b < n->indices.size(); ++b) {
            const std::size_t src = b * static_cast<std::size_t>(cols);
            const std::size_t dst = static_cast<std::size_t>(n->indices[b]) * cols;
            for (int j = 0; j < cols; ++j) d[dst + j] += w[src + j];
          }
        }
        break;
      case Op::Reshape:
        if (want(n->inputs[0])) {
          auto& d = buf(n->inputs[0].get());
          for (std::size_t i = 0; i < w.size(); ++i) d[i] += w[i];
        }
        break;
    }
  }
  return adj;
}

}  // namespace detail

/// Value and exact directional derivative of `f` at `inputs` along
/// `tangents`, both as graph values, in one forward sweep.
template <class F>
std::pair<Value, Value> jvp(F&& f, const std::vector<Value>& inputs,
                            const std::vector<Value>& tangents) {
  if (inputs.size() != tangents.size()) {
    throw std::invalid_argument("jvp: inputs/tangents count mismatch");
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].defined() || !tangents[i].defined()) {
      throw std::invalid_argument("jvp: undefined input or tangent");
    }
    if (inputs[i].shape() != tangents[i].shape()) {
      throw std::invalid_argument("jvp: tangent shape mismatch at position " + std::to_string(i));
    }
  }
  Value out = f(inputs);

  std::unordered_set<const Node*> cut;
  detail::TangentMap tan;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    cut.insert(inputs[i].node().get());
    tan[inputs[i].node().get()] = tangents[i];
  }
  auto topo = detail::topo_order(out.node(), &cut);
  for (const auto& n : topo) {
    if (tan.count(n.get())) continue;
    Value t = detail::jvp_rule(n, tan);
    if (t.defined()) tan.emplace(n.get(), std::move(t));
  }
  auto it = tan.find(out.node().get());
  Value dd = it == tan.end() ? Value::zeros(out.shape()) : it->second;
  return {std::move(out), std::move(dd)};
}

/// Scalar value of `f` plus its exact gradient with respect to each entry of
/// `params`, as one reverse pass.
template <class F>
std::pair<Value, std::vector<Value>> value_and_grad(F&& f, const std::vector<Value>& params) {
  Value out = f(params);
  if (out.numel() != 1) {
    throw std::invalid_argument("value_and_grad: output must be a scalar");
  }
  auto adj = detail::backward(out, params);
  std::vector<Value> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    auto it = adj.find(p.node().get());
    if (it == adj.end()) {
      grads.push_back(Value::zeros(p.shape()));
    } else {
      grads.push_back(Value::leaf(p.shape(), std::move(it->second)));
    }
  }
  return {std::move(out), std::move(grads)};
}

template <class F>
std::vector<Value> grad(F&& f, const std::vector<Value>& params) {
  return value_and_grad(std::forward<F>(f), params).second;
}

}  // namespace meanflow
