// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over a recorded list of dense primitives.
// Values are computed eagerly while recording; backward walks the records in
// exact reverse order. Every reduction runs in ascending index order, so a
// given set of inputs always yields bitwise-identical values and gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "asmg/error.hpp"
#include "asmg/tensor.hpp"

namespace asmg {

using Index = std::uint32_t;
using IndexList = std::shared_ptr<const std::vector<Index>>;

inline IndexList make_index(std::vector<Index> v) {
  return std::make_shared<const std::vector<Index>>(std::move(v));
}

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

enum class Op {
  kLeaf,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kAffine,
  kScalarMul,
  kConcatCols,
  kSlice,
  kGatherRows,
  kGatherMean,
  kScatterOverwrite,
  kGroupedMatVec,
  kSigmoid,
  kTanh,
  kRelu,
  kLog,
  kClip,
  kSum,
  kMean,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kScalarMul: return "scalar_mul";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSlice: return "slice";
    case Op::kGatherRows: return "gather_rows";
    case Op::kGatherMean: return "gather_mean";
    case Op::kScatterOverwrite: return "scatter_overwrite";
    case Op::kGroupedMatVec: return "grouped_matvec";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kLog: return "log";
    case Op::kClip: return "clip";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
  }
  return "?";
}

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Column count when a tensor is viewed as a matrix with `rows` rows.
inline std::size_t cols_of(const Tensor& t) {
  return t.rank() == 1 ? 1 : t.dim(1);
}

}  // namespace detail

class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    Tensor value;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    double a = 0.0;
    double b = 0.0;
    std::size_t offset = 0;
    Shape out_shape;
    IndexList index;
    IndexList offsets;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Differentiable input.
  Var leaf(Tensor value) { return push_source(Op::kLeaf, std::move(value), true); }
  /// Non-differentiable input.
  Var constant(Tensor value) { return push_source(Op::kConstant, std::move(value), false); }

  const Tensor& value(Var v) const { return node(v).value; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw Error("tape: unknown variable");
    return nodes_[v.id];
  }

  // ---- primitives -------------------------------------------------------

  /// [m,k] x [k,n] -> [m,n]; [m,k] x [k] -> [m].
  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || (B.rank() != 1 && B.rank() != 2) || A.dim(1) != B.dim(0)) {
      throw ShapeError("matmul: shape mismatch " + shape_str(A.shape) + " x " +
                       shape_str(B.shape));
    }
    Node n;
    n.op = Op::kMatMul;
    n.inputs = {a.id, b.id};
    return push(std::move(n));
  }

  /// Elementwise sum; also [m,n] + [n] with the vector broadcast over rows.
  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    const bool row_broadcast = A.rank() == 2 && B.rank() == 1 && A.dim(1) == B.dim(0);
    if (A.shape != B.shape && !row_broadcast) {
      throw ShapeError("add: shape mismatch " + shape_str(A.shape) + " + " +
                       shape_str(B.shape));
    }
    Node n;
    n.op = Op::kAdd;
    n.inputs = {a.id, b.id};
    return push(std::move(n));
  }

  Var sub(Var a, Var b) { return same_shape_binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return same_shape_binary(Op::kMul, a, b); }

  /// alpha * a + beta, elementwise.
  Var affine(Var a, double alpha, double beta) {
    Node n;
    n.op = Op::kAffine;
    n.inputs = {a.id};
    n.a = alpha;
    n.b = beta;
    return push(std::move(n));
  }

  /// Scalar (one-element tensor) times tensor.
  Var scalar_mul(Var s, Var v) {
    if (value(s).size() != 1) {
      throw ShapeError("scalar_mul: first operand must hold one value, got " +
                       shape_str(value(s).shape));
    }
    Node n;
    n.op = Op::kScalarMul;
    n.inputs = {s.id, v.id};
    return push(std::move(n));
  }

  /// Column-wise concatenation of [m,p_i] (or [m], treated as [m,1]) operands.
  Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::span<const Var>(parts.begin(), parts.size())); }
  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    const std::size_t rows = value(parts[0]).shape.empty() ? 0 : value(parts[0]).dim(0);
    Node n;
    n.op = Op::kConcatCols;
    for (Var p : parts) {
      const Tensor& t = value(p);
      if ((t.rank() != 1 && t.rank() != 2) || t.dim(0) != rows) {
        throw ShapeError("concat_cols: operand " + shape_str(t.shape) +
                         " does not have " + std::to_string(rows) + " rows");
      }
      n.inputs.push_back(p.id);
    }
    return push(std::move(n));
  }

  /// Contiguous flat range [offset, offset + size(shape)) reshaped to `shape`.
  Var slice(Var a, std::size_t offset, Shape shape) {
    const std::size_t len = shape_size(shape);
    if (offset + len > value(a).size()) {
      throw ShapeError("slice: range [" + std::to_string(offset) + "," +
                       std::to_string(offset + len) + ") exceeds tensor " +
                       shape_str(value(a).shape));
    }
    Node n;
    n.op = Op::kSlice;
    n.inputs = {a.id};
    n.offset = offset;
    n.out_shape = std::move(shape);
    return push(std::move(n));
  }

  /// Rows of a [V,c] matrix selected by index -> [L,c].
  Var gather_rows(Var table, IndexList idx) {
    check_table("gather_rows", value(table), *idx);
    Node n;
    n.op = Op::kGatherRows;
    n.inputs = {table.id};
    n.index = std::move(idx);
    return push(std::move(n));
  }

  /// Mean of table rows per bag; bag b spans idx[offsets[b] .. offsets[b+1]).
  /// Empty bags produce a zero row.
  Var gather_mean(Var table, IndexList offsets, IndexList idx) {
    check_table("gather_mean", value(table), *idx);
    if (offsets->empty() || offsets->back() != idx->size()) {
      throw ShapeError("gather_mean: bag offsets do not cover the index list");
    }
    Node n;
    n.op = Op::kGatherMean;
    n.inputs = {table.id};
    n.index = std::move(idx);
    n.offsets = std::move(offsets);
    return push(std::move(n));
  }

  /// Copy of `base` with flat positions idx[j] replaced by values[j].
  /// Positions must be distinct.
  Var scatter_overwrite(Var base, Var values, IndexList idx) {
    if (value(values).size() != idx->size()) {
      throw ShapeError("scatter_overwrite: " + std::to_string(value(values).size()) +
                       " values for " + std::to_string(idx->size()) + " positions");
    }
    for (Index i : *idx) {
      if (i >= value(base).size()) {
        throw ShapeError("scatter_overwrite: position " + std::to_string(i) +
                         " out of range for " + shape_str(value(base).shape));
      }
    }
    Node n;
    n.op = Op::kScatterOverwrite;
    n.inputs = {base.id, values.id};
    n.index = std::move(idx);
    return push(std::move(n));
  }

  /// Per-row matrix-vector product with a row-selected weight matrix:
  /// out[i] = W[groups[i]] * x[i], W: [G,r,c], x: [N,c], out: [N,r].
  Var grouped_matvec(Var weights, IndexList groups, Var x) {
    const Tensor& W = value(weights);
    const Tensor& X = value(x);
    if (W.rank() != 3 || X.rank() != 2 || W.dim(2) != X.dim(1) || groups->size() != X.dim(0)) {
      throw ShapeError("grouped_matvec: shape mismatch W" + shape_str(W.shape) + " x" +
                       shape_str(X.shape) + " with " + std::to_string(groups->size()) +
                       " group ids");
    }
    for (Index g : *groups) {
      if (g >= W.dim(0)) {
        throw ShapeError("grouped_matvec: group id " + std::to_string(g) + " out of range for W" +
                         shape_str(W.shape));
      }
    }
    Node n;
    n.op = Op::kGroupedMatVec;
    n.inputs = {weights.id, x.id};
    n.index = std::move(groups);
    return push(std::move(n));
  }

  Var sigmoid(Var a) { return unary(Op::kSigmoid, a); }
  Var tanh(Var a) { return unary(Op::kTanh, a); }
  Var relu(Var a) { return unary(Op::kRelu, a); }
  Var log(Var a) { return unary(Op::kLog, a); }

  Var clip(Var a, double lo, double hi) {
    Node n;
    n.op = Op::kClip;
    n.inputs = {a.id};
    n.a = lo;
    n.b = hi;
    return push(std::move(n));
  }

  /// Sum of all entries, rank-0 result.
  Var sum(Var a) { return unary(Op::kSum, a); }
  /// Mean of all entries, rank-0 result.
  Var mean(Var a) {
    if (value(a).size() == 0) throw ShapeError("mean: empty operand");
    return unary(Op::kMean, a);
  }

  // ---- differentiation ---------------------------------------------------

  /// Propagates `seed` (shaped like the output) back through every record.
  void backward(Var output, const Tensor& seed) {
    if (output.id >= nodes_.size()) {
      throw Error("backward: output was never recorded (run forward first)");
    }
    if (seed.shape != nodes_[output.id].value.shape) {
      throw ShapeError("backward: seed " + shape_str(seed.shape) + " does not match output " +
                       shape_str(nodes_[output.id].value.shape));
    }
    grads_.assign(nodes_.size(), Tensor{});
    grads_[output.id] = seed;
    for (std::size_t id = output.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || grads_[id].data.empty() || n.inputs.empty()) continue;
      propagate(id);
    }
    backward_done_ = true;
  }

  /// Scalar-output convenience: seed of 1.
  void backward(Var output) {
    if (output.id >= nodes_.size()) {
      throw Error("backward: output was never recorded (run forward first)");
    }
    Tensor seed(nodes_[output.id].value.shape);
    std::fill(seed.data.begin(), seed.data.end(), 1.0);
    backward(output, seed);
  }

  /// Gradient of the last backward pass w.r.t. `v`; zeros when unreached.
  Tensor grad(Var v) const {
    if (!backward_done_) throw Error("grad: backward has not been run");
    const Node& n = node(v);
    if (v.id < grads_.size() && !grads_[v.id].data.empty()) return grads_[v.id];
    return Tensor(n.value.shape);
  }

  /// Recomputes every record from the current source values, in order.
  std::vector<Tensor> replay() const {
    std::vector<Tensor> vals(nodes_.size());
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.op == Op::kLeaf || n.op == Op::kConstant) {
        vals[id] = n.value;
      } else {
        vals[id] = eval(n, [&](std::size_t k) -> const Tensor& { return vals[n.inputs[k]]; });
      }
    }
    return vals;
  }

 private:
  Var push_source(Op op, Tensor value, bool needs_grad) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push(Node n) {
    for (std::size_t in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    n.value = eval(n, [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; });
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.inputs = {a.id};
    return push(std::move(n));
  }

  Var same_shape_binary(Op op, Var a, Var b) {
    if (value(a).shape != value(b).shape) {
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " +
                       shape_str(value(a).shape) + " vs " + shape_str(value(b).shape));
    }
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    return push(std::move(n));
  }

  static void check_table(const char* what, const Tensor& t, const std::vector<Index>& idx) {
    if (t.rank() != 2) {
      throw ShapeError(std::string(what) + ": table must be rank 2, got " + shape_str(t.shape));
    }
    for (Index i : idx) {
      if (i >= t.dim(0)) {
        throw ShapeError(std::string(what) + ": index " + std::to_string(i) +
                         " out of range for table " + shape_str(t.shape));
      }
    }
  }

  template <typename In>
  static Tensor eval(const Node& n, In in) {
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        return n.value;
      case Op::kMatMul: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        const std::size_t m = A.dim(0), k = A.dim(1), c = detail::cols_of(B);
        Tensor out(B.rank() == 1 ? Shape{m} : Shape{m, c});
        for (std::size_t i = 0; i < m; ++i) {
          double* o = &out.data[i * c];
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A.data[i * k + p];
            const double* brow = &B.data[p * c];
            for (std::size_t j = 0; j < c; ++j) o[j] += aip * brow[j];
          }
        }
        return out;
      }
      case Op::kAdd: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        Tensor out = A;
        if (A.shape == B.shape) {
          for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
        } else {
          const std::size_t c = B.size();
          for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i % c];
        }
        return out;
      }
      case Op::kSub: {
        Tensor out = in(0);
        const Tensor& B = in(1);
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
        return out;
      }
      case Op::kMul: {
        Tensor out = in(0);
        const Tensor& B = in(1);
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
        return out;
      }
      case Op::kAffine: {
        Tensor out = in(0);
        for (double& x : out.data) x = n.a * x + n.b;
        return out;
      }
      case Op::kScalarMul: {
        const double s = in(0).data[0];
        Tensor out = in(1);
        for (double& x : out.data) x *= s;
        return out;
      }
      case Op::kConcatCols: {
        const std::size_t rows = in(0).dim(0);
        std::size_t total = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) total += detail::cols_of(in(k));
        Tensor out(Shape{rows, total});
        std::size_t col = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& t = in(k);
          const std::size_t c = detail::cols_of(t);
          for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(&t.data[r * c], c, &out.data[r * total + col]);
          }
          col += c;
        }
        return out;
      }
      case Op::kSlice: {
        const Tensor& A = in(0);
        Tensor out(n.out_shape);
        std::copy_n(A.data.begin() + static_cast<std::ptrdiff_t>(n.offset), out.size(),
                    out.data.begin());
        return out;
      }
      case Op::kGatherRows: {
        const Tensor& E = in(0);
        const std::size_t c = E.dim(1);
        const auto& idx = *n.index;
        Tensor out(Shape{idx.size(), c});
        for (std::size_t r = 0; r < idx.size(); ++r) {
          std::copy_n(&E.data[idx[r] * c], c, &out.data[r * c]);
        }
        return out;
      }
      case Op::kGatherMean: {
        const Tensor& E = in(0);
        const std::size_t c = E.dim(1);
        const auto& idx = *n.index;
        const auto& off = *n.offsets;
        const std::size_t bags = off.size() - 1;
        Tensor out(Shape{bags, c});
        for (std::size_t b = 0; b < bags; ++b) {
          const std::size_t len = off[b + 1] - off[b];
          if (len == 0) continue;
          double* o = &out.data[b * c];
          for (std::size_t p = off[b]; p < off[b + 1]; ++p) {
            const double* row = &E.data[idx[p] * c];
            for (std::size_t j = 0; j < c; ++j) o[j] += row[j];
          }
          const double inv = 1.0 / static_cast<double>(len);
          for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
        }
        return out;
      }
      case Op::kScatterOverwrite: {
        Tensor out = in(0);
        const Tensor& V = in(1);
        const auto& idx = *n.index;
        for (std::size_t j = 0; j < idx.size(); ++j) out.data[idx[j]] = V.data[j];
        return out;
      }
      case Op::kGroupedMatVec: {
        const Tensor& W = in(0);
        const Tensor& X = in(1);
        const std::size_t r = W.dim(1), c = W.dim(2), rows = X.dim(0);
        const auto& groups = *n.index;
        Tensor out(Shape{rows, r});
        for (std::size_t i = 0; i < rows; ++i) {
          const double* w = &W.data[groups[i] * r * c];
          const double* x = &X.data[i * c];
          double* o = &out.data[i * r];
          for (std::size_t a = 0; a < r; ++a) {
            double acc = 0.0;
            for (std::size_t b = 0; b < c; ++b) acc += w[a * c + b] * x[b];
            o[a] = acc;
          }
        }
        return out;
      }
      case Op::kSigmoid: {
        Tensor out = in(0);
        for (double& x : out.data) x = detail::stable_sigmoid(x);
        return out;
      }
      case Op::kTanh: {
        Tensor out = in(0);
        for (double& x : out.data) x = std::tanh(x);
        return out;
      }
      case Op::kRelu: {
        Tensor out = in(0);
        for (double& x : out.data) x = x > 0.0 ? x : 0.0;
        return out;
      }
      case Op::kLog: {
        Tensor out = in(0);
        for (double& x : out.data) x = std::log(x);
        return out;
      }
      case Op::kClip: {
        Tensor out = in(0);
        for (double& x : out.data) x = std::clamp(x, n.a, n.b);
        return out;
      }
      case Op::kSum: {
        double acc = 0.0;
        for (double x : in(0).data) acc += x;
        return Tensor::scalar(acc);
      }
      case Op::kMean: {
        double acc = 0.0;
        for (double x : in(0).data) acc += x;
        return Tensor::scalar(acc / static_cast<double>(in(0).size()));
      }
    }
    throw Error("tape: unknown primitive");
  }

  Tensor& grad_slot(std::size_t id) {
    if (grads_[id].data.empty()) grads_[id] = Tensor(nodes_[id].value.shape);
    return grads_[id];
  }

  bool wants(std::size_t input) const { return nodes_[input].needs_grad; }

  void propagate(std::size_t id) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    const Tensor& y = n.value;
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        return;
      case Op::kMatMul: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        const std::size_t m = A.dim(0), k = A.dim(1), c = detail::cols_of(B);
        if (wants(n.inputs[0])) {
          Tensor& dA = grad_slot(n.inputs[0]);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < c; ++j) acc += g.data[i * c + j] * B.data[p * c + j];
              dA.data[i * k + p] += acc;
            }
          }
        }
        if (wants(n.inputs[1])) {
          Tensor& dB = grad_slot(n.inputs[1]);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A.data[i * k + p];
              for (std::size_t j = 0; j < c; ++j) dB.data[p * c + j] += aip * g.data[i * c + j];
            }
          }
        }
        return;
      }
      case Op::kAdd: {
        if (wants(n.inputs[0])) {
          Tensor& dA = grad_slot(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += g.data[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& dB = grad_slot(n.inputs[1]);
          const std::size_t c = dB.size();
          for (std::size_t i = 0; i < g.size(); ++i) dB.data[i % c] += g.data[i];
        }
        return;
      }
      case Op::kSub: {
        if (wants(n.inputs[0])) {
          Tensor& dA = grad_slot(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += g.data[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& dB = grad_slot(n.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) dB.data[i] -= g.data[i];
        }
        return;
      }
      case Op::kMul: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        if (wants(n.inputs[0])) {
          Tensor& dA = grad_slot(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += g.data[i] * B.data[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& dB = grad_slot(n.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) dB.data[i] += g.data[i] * A.data[i];
        }
        return;
      }
      case Op::kAffine: {
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += n.a * g.data[i];
        return;
      }
      case Op::kScalarMul: {
        const Tensor& S = in(0);
        const Tensor& V = in(1);
        if (wants(n.inputs[0])) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g.data[i] * V.data[i];
          grad_slot(n.inputs[0]).data[0] += acc;
        }
        if (wants(n.inputs[1])) {
          Tensor& dV = grad_slot(n.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) dV.data[i] += S.data[0] * g.data[i];
        }
        return;
      }
      case Op::kConcatCols: {
        const std::size_t rows = y.dim(0), total = y.dim(1);
        std::size_t col = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t c = detail::cols_of(in(k));
          if (wants(n.inputs[k])) {
            Tensor& d = grad_slot(n.inputs[k]);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < c; ++j) d.data[r * c + j] += g.data[r * total + col + j];
            }
          }
          col += c;
        }
        return;
      }
      case Op::kSlice: {
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA.data[n.offset + i] += g.data[i];
        return;
      }
      case Op::kGatherRows: {
        Tensor& dE = grad_slot(n.inputs[0]);
        const std::size_t c = dE.dim(1);
        const auto& idx = *n.index;
        for (std::size_t r = 0; r < idx.size(); ++r) {
          for (std::size_t j = 0; j < c; ++j) dE.data[idx[r] * c + j] += g.data[r * c + j];
        }
        return;
      }
      case Op::kGatherMean: {
        Tensor& dE = grad_slot(n.inputs[0]);
        const std::size_t c = dE.dim(1);
        const auto& idx = *n.index;
        const auto& off = *n.offsets;
        for (std::size_t b = 0; b + 1 < off.size(); ++b) {
          const std::size_t len = off[b + 1] - off[b];
          if (len == 0) continue;
          const double inv = 1.0 / static_cast<double>(len);
          for (std::size_t p = off[b]; p < off[b + 1]; ++p) {
            for (std::size_t j = 0; j < c; ++j) dE.data[idx[p] * c + j] += g.data[b * c + j] * inv;
          }
        }
        return;
      }
      case Op::kScatterOverwrite: {
        const auto& idx = *n.index;
        if (wants(n.inputs[0])) {
          Tensor& dBase = grad_slot(n.inputs[0]);
          std::vector<char> overwritten(g.size(), 0);
          for (Index i : idx) overwritten[i] = 1;
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (!overwritten[i]) dBase.data[i] += g.data[i];
          }
        }
        if (wants(n.inputs[1])) {
          Tensor& dV = grad_slot(n.inputs[1]);
          for (std::size_t j = 0; j < idx.size(); ++j) dV.data[j] += g.data[idx[j]];
        }
        return;
      }
      case Op::kGroupedMatVec: {
        const Tensor& W = in(0);
        const Tensor& X = in(1);
        const std::size_t r = W.dim(1), c = W.dim(2), rows = X.dim(0);
        const auto& groups = *n.index;
        if (wants(n.inputs[0])) {
          Tensor& dW = grad_slot(n.inputs[0]);
          for (std::size_t i = 0; i < rows; ++i) {
            double* dw = &dW.data[groups[i] * r * c];
            const double* x = &X.data[i * c];
            const double* go = &g.data[i * r];
            for (std::size_t a = 0; a < r; ++a) {
              for (std::size_t b = 0; b < c; ++b) dw[a * c + b] += go[a] * x[b];
            }
          }
        }
        if (wants(n.inputs[1])) {
          Tensor& dX = grad_slot(n.inputs[1]);
          for (std::size_t i = 0; i < rows; ++i) {
            const double* w = &W.data[groups[i] * r * c];
            const double* go = &g.data[i * r];
            double* dx = &dX.data[i * c];
            for (std::size_t a = 0; a < r; ++a) {
              for (std::size_t b = 0; b < c; ++b) dx[b] += w[a * c + b] * go[a];
            }
          }
        }
        return;
      }
      case Op::kSigmoid: {
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
        return;
      }
      case Op::kTanh: {
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
        return;
      }
      case Op::kRelu: {
        const Tensor& A = in(0);
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (A.data[i] > 0.0) dA.data[i] += g.data[i];
        }
        return;
      }
      case Op::kLog: {
        const Tensor& A = in(0);
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA.data[i] += g.data[i] / A.data[i];
        return;
      }
      case Op::kClip: {
        const Tensor& A = in(0);
        Tensor& dA = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (A.data[i] >= n.a && A.data[i] <= n.b) dA.data[i] += g.data[i];
        }
        return;
      }
      case Op::kSum: {
        Tensor& dA = grad_slot(n.inputs[0]);
        for (double& x : dA.data) x += g.data[0];
        return;
      }
      case Op::kMean: {
        Tensor& dA = grad_slot(n.inputs[0]);
        const double s = g.data[0] / static_cast<double>(dA.size());
        for (double& x : dA.data) x += s;
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool backward_done_ = false;
};

}  // namespace asmg
