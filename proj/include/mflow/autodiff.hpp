#pragma once

// Reverse-mode tape plus forward-mode (dual number) propagation.
//
// A Var is an immutable value that is either an untracked constant or a node on
// a recording Tape. Any Var may additionally carry a tangent Var; every op that
// sees a tangent on an input emits the output tangent by composing other ops.
// When the tape is recording those tangent ops are recorded too, which is what
// a JVP costs in retained memory.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mflow/tensor.hpp"

namespace mflow::ad {

using NodeId = std::int64_t;
inline constexpr NodeId kUntracked = -1;

enum class Op : std::uint8_t {
  Leaf,
  Detach,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddScalar,
  MatMul,
  Transpose,
  Reshape,
  Sum,
  Mean,
  Relu,
  Step,
  Gelu,
  GeluGrad,
  Sin,
  Cos,
  Exp,
  Log,
  Sqrt,
  Square,
  Concat,
  Slice,
  BroadcastRows,
  RowNorm,
  RowDot,
  FloorMin,
  Clamp,
  PairwiseSqDist,
  OffDiagLogMeanExp,
};

std::string_view op_name(Op op);

/// Raised when forward-mode propagation reaches an op without a tangent rule.
class UnsupportedOpError : public std::logic_error {
 public:
  explicit UnsupportedOpError(Op op);
  Op op() const { return op_; }

 private:
  Op op_;
};

struct Node {
  NodeId id = 0;
  Op op = Op::Leaf;
  /// One entry per operand; kUntracked marks an operand that was a constant.
  std::vector<NodeId> parents;
  /// Forward values the backward rule reads.
  std::vector<std::shared_ptr<const Tensor>> saved;
  std::vector<double> attrs;
  Shape shape;
  bool is_param = false;
};

class Var;
using GradientMap = std::map<NodeId, Tensor>;

class Tape {
 public:
  enum class Mode { Recording, Frozen };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool is_param = false);
  Var parameter(Tensor value);

  void freeze() { mode_ = Mode::Frozen; }
  Mode mode() const { return mode_; }

  std::size_t node_count() const { return nodes_.size(); }
  /// Elements held by distinct saved tensors across all nodes.
  std::size_t saved_element_count() const;
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Gradient of a scalar root with respect to every parameter leaf.
  /// Parameters the root does not depend on get a zero tensor.
  GradientMap backward(const Var& root) const;

  // Used by the op implementations.
  NodeId record(Op op, std::vector<NodeId> parents, std::vector<std::shared_ptr<const Tensor>> saved,
                std::vector<double> attrs, Shape shape);

 private:
  std::vector<Node> nodes_;
  Mode mode_ = Mode::Recording;
};

/// Handle to a value, optionally recorded and optionally carrying a tangent.
class Var {
 public:
  Var() : Var(Tensor::scalar(0.0)) {}
  explicit Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

  static Var constant(Tensor value) { return Var(std::move(value)); }

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId id() const { return id_; }

  bool has_tangent() const { return tangent_ != nullptr; }
  const Var& tangent() const;
  /// Same value and node, with `tangent` attached. Shapes must agree.
  Var with_tangent(Var tangent) const;
  /// Same value and node with the tangent dropped.
  Var primal() const;

 private:
  friend class Tape;
  friend struct VarAccess;

  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  NodeId id_ = kUntracked;
  std::shared_ptr<const Var> tangent_;
};

/// Value and tangent of a forward-mode evaluation.
struct DualTensor {
  Tensor primal;
  Tensor tangent;
};

// Elementwise (same shape).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var add_scalar(const Var& a, double k);
Var neg(const Var& a);
Var square(const Var& a);
Var relu(const Var& a);
/// Heaviside step (a > 0); zero derivative everywhere.
Var step(const Var& a);
/// Exact GELU, x * Phi(x).
Var gelu(const Var& a);
/// d gelu / dx.
Var gelu_grad(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
/// max(a, floor); gradient passes where a >= floor.
Var floor_min(const Var& a, double floor);
Var clamp(const Var& a, double lo, double hi);

// Contractions and reductions.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var sum(const Var& a);
Var mean(const Var& a);
/// [B x d] -> [B], Euclidean norm of each row.
Var row_norm(const Var& a);
/// [B x d], [B x d] -> [B].
Var row_dot(const Var& a, const Var& b);

// Layout.
/// Column-wise concatenation of [B x d_i] blocks.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
/// Columns [start, start + width) of a [B x d] matrix.
Var slice(const Var& a, std::size_t start, std::size_t width);
/// [n] -> [rows x n].
Var broadcast_rows(const Var& a, std::size_t rows);

// Batch-pair terms.
/// [B x h] -> [B x B] squared Euclidean distances.
Var pairwise_sqdist(const Var& a);
/// [B x B] -> scalar log of the mean of exp over off-diagonal entries.
Var offdiag_log_mean_exp(const Var& a);

/// Copies the value into a fresh non-parameter leaf; no gradient or tangent crosses it.
Var detach(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

using Function = std::function<Var(std::span<const Var>)>;

/// Forward-mode derivative of `f` at `primals` along `tangents`.
DualTensor jvp(const Function& f, std::span<const Tensor> primals, std::span<const Tensor> tangents);

}  // namespace mflow::ad
