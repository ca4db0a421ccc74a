#include "mflow/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <unordered_set>

namespace mflow::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double phi(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
double big_phi(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

void require_same_shape(std::string_view op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op), a.shape(), b.shape());
}

void require_matrix(std::string_view op, const Var& a) {
  if (a.value().rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
}

Tensor map_values(const Tensor& a, auto&& f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return Tensor::unchecked(a.shape(), std::move(out));
}

Tensor zip_values(const Tensor& a, const Tensor& b, auto&& f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor::unchecked(a.shape(), std::move(out));
}

Tensor matmul_values(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  const ConstMap am(a.data().data(), a.rows(), a.cols());
  const ConstMap bm(b.data().data(), b.rows(), b.cols());
  const std::size_t m = transpose_a ? a.cols() : a.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  std::vector<double> out(m * n);
  MutMap cm(out.data(), m, n);
  if (!transpose_a && !transpose_b) {
    cm.noalias() = am * bm;
  } else if (!transpose_a) {
    cm.noalias() = am * bm.transpose();
  } else if (!transpose_b) {
    cm.noalias() = am.transpose() * bm;
  } else {
    cm.noalias() = am.transpose() * bm.transpose();
  }
  return Tensor::unchecked({m, n}, std::move(out));
}

Tensor transpose_values(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return Tensor::unchecked({c, r}, std::move(out));
}

std::shared_ptr<const Tensor> share(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

// Sums tangent contributions, treating an absent tangent as a symbolic zero.
class TangentSum {
 public:
  void add(Var term) { acc_ = acc_ ? ad::add(*acc_, term) : std::move(term); }
  void sub(Var term) { acc_ = acc_ ? ad::sub(*acc_, term) : neg(term); }
  Var take() && { return std::move(*acc_); }

 private:
  std::optional<Var> acc_;
};

}  // namespace

// Grants the op implementations write access to a Var's tracking fields.
struct VarAccess {
  static Var make(Op op, std::initializer_list<const Var*> inputs, Tensor out,
                  std::vector<std::shared_ptr<const Tensor>> saved = {}, std::vector<double> attrs = {}) {
    return make(op, std::vector<const Var*>(inputs), std::move(out), std::move(saved), std::move(attrs));
  }

  static Var make(Op op, const std::vector<const Var*>& inputs, Tensor out,
                  std::vector<std::shared_ptr<const Tensor>> saved = {}, std::vector<double> attrs = {}) {
    Tape* tape = nullptr;
    for (const Var* in : inputs) {
      if (!in->tracked()) continue;
      if (tape && tape != in->tape()) throw std::logic_error(std::string(op_name(op)) + ": operands live on different tapes");
      tape = in->tape();
    }
    Var result(std::move(out));
    if (!tape) return result;
    std::vector<NodeId> parents;
    parents.reserve(inputs.size());
    for (const Var* in : inputs) parents.push_back(in->tracked() ? in->id() : kUntracked);
    result.tape_ = tape;
    result.id_ = tape->record(op, std::move(parents), std::move(saved), std::move(attrs), result.shape());
    return result;
  }

  static Var leaf(Tape* tape, NodeId id, std::shared_ptr<const Tensor> value) {
    Var v;
    v.value_ = std::move(value);
    v.tape_ = tape;
    v.id_ = id;
    return v;
  }
};

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Detach: return "detach";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::Gelu: return "gelu";
    case Op::GeluGrad: return "gelu_grad";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Square: return "square";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::RowNorm: return "row_norm";
    case Op::RowDot: return "row_dot";
    case Op::FloorMin: return "floor_min";
    case Op::Clamp: return "clamp";
    case Op::PairwiseSqDist: return "pairwise_sqdist";
    case Op::OffDiagLogMeanExp: return "offdiag_log_mean_exp";
  }
  return "unknown";
}

UnsupportedOpError::UnsupportedOpError(Op op)
    : std::logic_error("jvp: op '" + std::string(op_name(op)) + "' has no forward-mode rule"), op_(op) {}

// ---------------------------------------------------------------------------
// Var

const Var& Var::tangent() const {
  if (!tangent_) throw std::logic_error("Var::tangent: no tangent attached");
  return *tangent_;
}

Var Var::with_tangent(Var tangent) const {
  if (tangent.shape() != shape()) throw ShapeError("with_tangent", shape(), tangent.shape());
  Var out = *this;
  out.tangent_ = std::make_shared<const Var>(tangent.primal());
  return out;
}

Var Var::primal() const {
  Var out = *this;
  out.tangent_.reset();
  return out;
}

// ---------------------------------------------------------------------------
// Tape

NodeId Tape::record(Op op, std::vector<NodeId> parents, std::vector<std::shared_ptr<const Tensor>> saved,
                    std::vector<double> attrs, Shape shape) {
  if (mode_ != Mode::Recording) {
    throw std::logic_error(std::string(op_name(op)) + ": tape is frozen");
  }
  Node node;
  node.id = static_cast<NodeId>(nodes_.size());
  node.op = op;
  node.parents = std::move(parents);
  node.saved = std::move(saved);
  node.attrs = std::move(attrs);
  node.shape = std::move(shape);
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

Var Tape::leaf(Tensor value, bool is_param) {
  auto stored = share(std::move(value));
  const NodeId id = record(Op::Leaf, {}, {stored}, {}, stored->shape());
  nodes_.back().is_param = is_param;
  return VarAccess::leaf(this, id, std::move(stored));
}

Var Tape::parameter(Tensor value) { return leaf(std::move(value), true); }

std::size_t Tape::saved_element_count() const {
  std::unordered_set<const Tensor*> seen;
  std::size_t total = 0;
  for (const Node& node : nodes_) {
    for (const auto& t : node.saved) {
      if (seen.insert(t.get()).second) total += t->size();
    }
  }
  return total;
}

namespace {

void accumulate(std::vector<std::optional<Tensor>>& grads, NodeId target, Tensor g) {
  if (target == kUntracked) return;
  auto& slot = grads[static_cast<std::size_t>(target)];
  if (!slot) {
    slot = std::move(g);
    return;
  }
  auto dst = slot->data();
  const auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

GradientMap Tape::backward(const Var& root) const {
  if (mode_ != Mode::Frozen) throw std::logic_error("backward: tape must be frozen first");
  if (root.tape() != this) throw std::logic_error("backward: root is not recorded on this tape");
  if (root.value().size() != 1) throw ShapeError("backward: root must be scalar, got " + to_string(root.shape()));

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[static_cast<std::size_t>(root.id())] = Tensor::filled(root.shape(), 1.0);

  for (NodeId id = root.id(); id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    auto& slot = grads[static_cast<std::size_t>(id)];
    if (!slot || node.op == Op::Leaf || node.op == Op::Detach) continue;
    const Tensor& g = *slot;
    const auto& p = node.parents;
    const auto& s = node.saved;
    auto in = [&](std::size_t i) -> const Tensor& { return *s[i]; };

    switch (node.op) {
      case Op::Leaf:
      case Op::Detach:
      case Op::Step:
        break;
      case Op::Add:
        accumulate(grads, p[0], g);
        accumulate(grads, p[1], g);
        break;
      case Op::Sub:
        accumulate(grads, p[0], g);
        accumulate(grads, p[1], map_values(g, [](double x) { return -x; }));
        break;
      case Op::Mul:
        accumulate(grads, p[0], zip_values(g, in(1), std::multiplies<>{}));
        accumulate(grads, p[1], zip_values(g, in(0), std::multiplies<>{}));
        break;
      case Op::Div: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        accumulate(grads, p[0], zip_values(g, b, std::divides<>{}));
        std::vector<double> gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i] * a[i] / (b[i] * b[i]);
        accumulate(grads, p[1], Tensor::unchecked(b.shape(), std::move(gb)));
        break;
      }
      case Op::Scale: {
        const double k = node.attrs[0];
        accumulate(grads, p[0], map_values(g, [k](double x) { return k * x; }));
        break;
      }
      case Op::AddScalar:
        accumulate(grads, p[0], g);
        break;
      case Op::MatMul:
        accumulate(grads, p[0], matmul_values(g, in(1), false, true));
        accumulate(grads, p[1], matmul_values(in(0), g, true, false));
        break;
      case Op::Transpose:
        accumulate(grads, p[0], transpose_values(g));
        break;
      case Op::Reshape: {
        Shape original;
        for (double d : node.attrs) original.push_back(static_cast<std::size_t>(d));
        accumulate(grads, p[0], g.reshaped(std::move(original)));
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        Shape original;
        for (double d : node.attrs) original.push_back(static_cast<std::size_t>(d));
        const double n = static_cast<double>(element_count(original));
        const double v = node.op == Op::Sum ? g.item() : g.item() / n;
        accumulate(grads, p[0], Tensor::unchecked(original, std::vector<double>(element_count(original), v)));
        break;
      }
      case Op::Relu:
        accumulate(grads, p[0], zip_values(g, in(0), [](double gi, double x) { return x > 0.0 ? gi : 0.0; }));
        break;
      case Op::Gelu:
        accumulate(grads, p[0],
                   zip_values(g, in(0), [](double gi, double x) { return gi * (big_phi(x) + x * phi(x)); }));
        break;
      case Op::GeluGrad:
        accumulate(grads, p[0], zip_values(g, in(0), [](double gi, double x) { return gi * phi(x) * (2.0 - x * x); }));
        break;
      case Op::Sin:
        accumulate(grads, p[0], zip_values(g, in(0), [](double gi, double x) { return gi * std::cos(x); }));
        break;
      case Op::Cos:
        accumulate(grads, p[0], zip_values(g, in(0), [](double gi, double x) { return -gi * std::sin(x); }));
        break;
      case Op::Exp:
        accumulate(grads, p[0], zip_values(g, in(0), std::multiplies<>{}));
        break;
      case Op::Log:
        accumulate(grads, p[0], zip_values(g, in(0), std::divides<>{}));
        break;
      case Op::Sqrt:
        accumulate(grads, p[0], zip_values(g, in(0), [](double gi, double y) { return gi / (2.0 * y); }));
        break;
      case Op::Square:
        accumulate(grads, p[0], zip_values(g, in(0), [](double gi, double x) { return 2.0 * x * gi; }));
        break;
      case Op::Concat: {
        const std::size_t rows = g.rows(), total = g.cols();
        std::size_t offset = 0;
        for (std::size_t part = 0; part < p.size(); ++part) {
          const auto width = static_cast<std::size_t>(node.attrs[part]);
          if (p[part] != kUntracked) {
            std::vector<double> out(rows * width);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < width; ++c) out[r * width + c] = g[r * total + offset + c];
            accumulate(grads, p[part], Tensor::unchecked({rows, width}, std::move(out)));
          }
          offset += width;
        }
        break;
      }
      case Op::Slice: {
        const auto start = static_cast<std::size_t>(node.attrs[0]);
        const auto total = static_cast<std::size_t>(node.attrs[1]);
        const std::size_t rows = g.rows(), width = g.cols();
        std::vector<double> out(rows * total, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < width; ++c) out[r * total + start + c] = g[r * width + c];
        accumulate(grads, p[0], Tensor::unchecked({rows, total}, std::move(out)));
        break;
      }
      case Op::BroadcastRows: {
        const std::size_t rows = g.rows(), n = g.cols();
        std::vector<double> out(n, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < n; ++c) out[c] += g[r * n + c];
        accumulate(grads, p[0], Tensor::unchecked({n}, std::move(out)));
        break;
      }
      case Op::RowNorm: {
        const Tensor& a = in(0);
        const Tensor& norms = in(1);
        const std::size_t rows = a.rows(), d = a.cols();
        std::vector<double> out(rows * d, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] == 0.0) continue;  // subgradient 0 at the origin
          const double k = g[r] / norms[r];
          for (std::size_t c = 0; c < d; ++c) out[r * d + c] = k * a[r * d + c];
        }
        accumulate(grads, p[0], Tensor::unchecked(a.shape(), std::move(out)));
        break;
      }
      case Op::RowDot: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t rows = a.rows(), d = a.cols();
        std::vector<double> ga(rows * d), gb(rows * d);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < d; ++c) {
            ga[r * d + c] = g[r] * b[r * d + c];
            gb[r * d + c] = g[r] * a[r * d + c];
          }
        }
        accumulate(grads, p[0], Tensor::unchecked(a.shape(), std::move(ga)));
        accumulate(grads, p[1], Tensor::unchecked(b.shape(), std::move(gb)));
        break;
      }
      case Op::FloorMin: {
        const double floor = node.attrs[0];
        accumulate(grads, p[0], zip_values(g, in(0), [floor](double gi, double x) { return x >= floor ? gi : 0.0; }));
        break;
      }
      case Op::Clamp: {
        const double lo = node.attrs[0], hi = node.attrs[1];
        accumulate(grads, p[0],
                   zip_values(g, in(0), [lo, hi](double gi, double x) { return (x >= lo && x <= hi) ? gi : 0.0; }));
        break;
      }
      case Op::PairwiseSqDist: {
        const Tensor& h = in(0);
        const std::size_t b = h.rows(), d = h.cols();
        std::vector<double> out(b * d, 0.0);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < b; ++j) {
            if (i == j) continue;
            const double w = 2.0 * (g[i * b + j] + g[j * b + i]);
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += w * (h[i * d + c] - h[j * d + c]);
          }
        }
        accumulate(grads, p[0], Tensor::unchecked(h.shape(), std::move(out)));
        break;
      }
      case Op::OffDiagLogMeanExp: {
        // Saved: softmax weights over the off-diagonal entries.
        const Tensor& w = in(0);
        accumulate(grads, p[0], map_values(w, [gi = g.item()](double x) { return gi * x; }));
        break;
      }
    }
  }

  GradientMap result;
  for (const Node& node : nodes_) {
    if (!node.is_param) continue;
    const auto& slot = grads[static_cast<std::size_t>(node.id)];
    result.emplace(node.id, slot ? *slot : Tensor::zeros(node.shape));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Var out = VarAccess::make(Op::Add, {&a, &b}, zip_values(a.value(), b.value(), std::plus<>{}));
  if (!a.has_tangent() && !b.has_tangent()) return out;
  TangentSum t;
  if (a.has_tangent()) t.add(a.tangent());
  if (b.has_tangent()) t.add(b.tangent());
  return out.with_tangent(std::move(t).take());
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Var out = VarAccess::make(Op::Sub, {&a, &b}, zip_values(a.value(), b.value(), std::minus<>{}));
  if (!a.has_tangent() && !b.has_tangent()) return out;
  TangentSum t;
  if (a.has_tangent()) t.add(a.tangent());
  if (b.has_tangent()) t.sub(b.tangent());
  return out.with_tangent(std::move(t).take());
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Var out = VarAccess::make(Op::Mul, {&a, &b}, zip_values(a.value(), b.value(), std::multiplies<>{}),
                            {a.value_ptr(), b.value_ptr()});
  if (!a.has_tangent() && !b.has_tangent()) return out;
  TangentSum t;
  if (a.has_tangent()) t.add(mul(a.tangent(), b.primal()));
  if (b.has_tangent()) t.add(mul(a.primal(), b.tangent()));
  return out.with_tangent(std::move(t).take());
}

Var div(const Var& a, const Var& b) {
  require_same_shape("div", a, b);
  Var out = VarAccess::make(Op::Div, {&a, &b}, zip_values(a.value(), b.value(), std::divides<>{}),
                            {a.value_ptr(), b.value_ptr()});
  if (!a.has_tangent() && !b.has_tangent()) return out;
  // d(a/b) = da/b - (a/b) db/b
  TangentSum t;
  if (a.has_tangent()) t.add(div(a.tangent(), b.primal()));
  if (b.has_tangent()) t.sub(div(mul(out.primal(), b.tangent()), b.primal()));
  return out.with_tangent(std::move(t).take());
}

Var scale(const Var& a, double k) {
  Var out = VarAccess::make(Op::Scale, {&a}, map_values(a.value(), [k](double x) { return k * x; }), {}, {k});
  if (!a.has_tangent()) return out;
  return out.with_tangent(scale(a.tangent(), k));
}

Var add_scalar(const Var& a, double k) {
  Var out = VarAccess::make(Op::AddScalar, {&a}, map_values(a.value(), [k](double x) { return x + k; }), {}, {k});
  if (!a.has_tangent()) return out;
  return out.with_tangent(a.tangent());
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
  Var out = VarAccess::make(Op::Square, {&a}, map_values(a.value(), [](double x) { return x * x; }), {a.value_ptr()});
  if (!a.has_tangent()) return out;
  return out.with_tangent(mul(scale(a.primal(), 2.0), a.tangent()));
}

Var relu(const Var& a) {
  Var out =
      VarAccess::make(Op::Relu, {&a}, map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a.value_ptr()});
  if (!a.has_tangent()) return out;
  return out.with_tangent(mul(step(a.primal()), a.tangent()));
}

Var step(const Var& a) {
  return VarAccess::make(Op::Step, {&a}, map_values(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
}

Var gelu(const Var& a) {
  Var out =
      VarAccess::make(Op::Gelu, {&a}, map_values(a.value(), [](double x) { return x * big_phi(x); }), {a.value_ptr()});
  if (!a.has_tangent()) return out;
  return out.with_tangent(mul(gelu_grad(a.primal()), a.tangent()));
}

Var gelu_grad(const Var& a) {
  if (a.has_tangent()) throw UnsupportedOpError(Op::GeluGrad);
  return VarAccess::make(Op::GeluGrad, {&a}, map_values(a.value(), [](double x) { return big_phi(x) + x * phi(x); }),
                         {a.value_ptr()});
}

Var sin(const Var& a) {
  Var out = VarAccess::make(Op::Sin, {&a}, map_values(a.value(), [](double x) { return std::sin(x); }), {a.value_ptr()});
  if (!a.has_tangent()) return out;
  return out.with_tangent(mul(cos(a.primal()), a.tangent()));
}

Var cos(const Var& a) {
  Var out = VarAccess::make(Op::Cos, {&a}, map_values(a.value(), [](double x) { return std::cos(x); }), {a.value_ptr()});
  if (!a.has_tangent()) return out;
  return out.with_tangent(mul(neg(sin(a.primal())), a.tangent()));
}

Var exp(const Var& a) {
  Tensor value = map_values(a.value(), [](double x) { return std::exp(x); });
  auto saved = share(value);
  Var out = VarAccess::make(Op::Exp, {&a}, std::move(value), {saved});
  if (!a.has_tangent()) return out;
  return out.with_tangent(mul(out.primal(), a.tangent()));
}

Var log(const Var& a) {
  Var out = VarAccess::make(Op::Log, {&a}, map_values(a.value(), [](double x) { return std::log(x); }), {a.value_ptr()});
  if (!a.has_tangent()) return out;
  return out.with_tangent(div(a.tangent(), a.primal()));
}

Var sqrt(const Var& a) {
  Tensor value = map_values(a.value(), [](double x) { return std::sqrt(x); });
  auto saved = share(value);
  Var out = VarAccess::make(Op::Sqrt, {&a}, std::move(value), {saved});
  if (!a.has_tangent()) return out;
  return out.with_tangent(div(a.tangent(), scale(out.primal(), 2.0)));
}

Var floor_min(const Var& a, double floor) {
  if (a.has_tangent()) throw UnsupportedOpError(Op::FloorMin);
  return VarAccess::make(Op::FloorMin, {&a}, map_values(a.value(), [floor](double x) { return std::max(x, floor); }),
                         {a.value_ptr()}, {floor});
}

Var clamp(const Var& a, double lo, double hi) {
  if (a.has_tangent()) throw UnsupportedOpError(Op::Clamp);
  return VarAccess::make(Op::Clamp, {&a}, map_values(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); }),
                         {a.value_ptr()}, {lo, hi});
}

// ---------------------------------------------------------------------------
// Contractions and reductions

Var matmul(const Var& a, const Var& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  if (a.value().cols() != b.value().rows()) throw ShapeError("matmul", a.shape(), b.shape());
  Var out = VarAccess::make(Op::MatMul, {&a, &b}, matmul_values(a.value(), b.value(), false, false),
                            {a.value_ptr(), b.value_ptr()});
  if (!a.has_tangent() && !b.has_tangent()) return out;
  TangentSum t;
  if (a.has_tangent()) t.add(matmul(a.tangent(), b.primal()));
  if (b.has_tangent()) t.add(matmul(a.primal(), b.tangent()));
  return out.with_tangent(std::move(t).take());
}

Var transpose(const Var& a) {
  require_matrix("transpose", a);
  Var out = VarAccess::make(Op::Transpose, {&a}, transpose_values(a.value()));
  if (!a.has_tangent()) return out;
  return out.with_tangent(transpose(a.tangent()));
}

Var reshape(const Var& a, Shape shape) {
  std::vector<double> original(a.shape().begin(), a.shape().end());
  Var out = VarAccess::make(Op::Reshape, {&a}, a.value().reshaped(shape), {}, std::move(original));
  if (!a.has_tangent()) return out;
  return out.with_tangent(reshape(a.tangent(), std::move(shape)));
}

namespace {

std::vector<double> shape_attrs(const Shape& shape) { return {shape.begin(), shape.end()}; }

}  // namespace

Var sum(const Var& a) {
  double total = 0.0;
  for (double x : a.value().data()) total += x;
  Var out = VarAccess::make(Op::Sum, {&a}, Tensor::unchecked({1}, {total}), {}, shape_attrs(a.shape()));
  if (!a.has_tangent()) return out;
  return out.with_tangent(sum(a.tangent()));
}

Var mean(const Var& a) {
  double total = 0.0;
  for (double x : a.value().data()) total += x;
  const double n = static_cast<double>(a.value().size());
  Var out = VarAccess::make(Op::Mean, {&a}, Tensor::unchecked({1}, {total / n}), {}, shape_attrs(a.shape()));
  if (!a.has_tangent()) return out;
  return out.with_tangent(mean(a.tangent()));
}

Var row_norm(const Var& a) {
  require_matrix("row_norm", a);
  const Tensor& v = a.value();
  const std::size_t rows = v.rows(), d = v.cols();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += v[r * d + c] * v[r * d + c];
    norms[r] = std::sqrt(s);
  }
  Tensor value = Tensor::unchecked({rows}, std::move(norms));
  auto saved = share(value);
  Var out = VarAccess::make(Op::RowNorm, {&a}, std::move(value), {a.value_ptr(), saved});
  if (!a.has_tangent()) return out;
  // d|a| = <a, da> / |a|
  return out.with_tangent(div(row_dot(a.primal(), a.tangent()), out.primal()));
}

Var row_dot(const Var& a, const Var& b) {
  require_matrix("row_dot", a);
  require_same_shape("row_dot", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t rows = x.rows(), d = x.cols();
  std::vector<double> dots(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += x[r * d + c] * y[r * d + c];
    dots[r] = s;
  }
  Var out = VarAccess::make(Op::RowDot, {&a, &b}, Tensor::unchecked({rows}, std::move(dots)),
                            {a.value_ptr(), b.value_ptr()});
  if (!a.has_tangent() && !b.has_tangent()) return out;
  TangentSum t;
  if (a.has_tangent()) t.add(row_dot(a.tangent(), b.primal()));
  if (b.has_tangent()) t.add(row_dot(a.primal(), b.tangent()));
  return out.with_tangent(std::move(t).take());
}

// ---------------------------------------------------------------------------
// Layout

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  std::size_t rows = 0, total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require_matrix("concat", parts[i]);
    if (i == 0) rows = parts[i].value().rows();
    if (parts[i].value().rows() != rows) throw ShapeError("concat", parts[0].shape(), parts[i].shape());
    total += parts[i].value().cols();
  }
  std::vector<double> out(rows * total);
  std::vector<double> widths;
  std::vector<const Var*> inputs;
  std::size_t offset = 0;
  for (const Var& part : parts) {
    const Tensor& v = part.value();
    const std::size_t w = v.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * total + offset + c] = v[r * w + c];
    offset += w;
    widths.push_back(static_cast<double>(w));
    inputs.push_back(&part);
  }
  Var result = VarAccess::make(Op::Concat, inputs, Tensor::unchecked({rows, total}, std::move(out)), {}, widths);
  const bool any_tangent = std::any_of(parts.begin(), parts.end(), [](const Var& p) { return p.has_tangent(); });
  if (!any_tangent) return result;
  std::vector<Var> tangents;
  tangents.reserve(parts.size());
  for (const Var& part : parts) tangents.push_back(part.has_tangent() ? part.tangent() : Var(Tensor::zeros(part.shape())));
  return result.with_tangent(concat(std::span<const Var>(tangents)));
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var slice(const Var& a, std::size_t start, std::size_t width) {
  require_matrix("slice", a);
  const Tensor& v = a.value();
  const std::size_t rows = v.rows(), total = v.cols();
  if (start + width > total) {
    throw ShapeError("slice: columns [" + std::to_string(start) + ", " + std::to_string(start + width) +
                     ") out of range for " + to_string(a.shape()));
  }
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = v[r * total + start + c];
  Var result = VarAccess::make(Op::Slice, {&a}, Tensor::unchecked({rows, width}, std::move(out)), {},
                               {static_cast<double>(start), static_cast<double>(total)});
  if (!a.has_tangent()) return result;
  return result.with_tangent(slice(a.tangent(), start, width));
}

Var broadcast_rows(const Var& a, std::size_t rows) {
  if (a.value().rank() != 1) throw ShapeError("broadcast_rows: expected a vector, got " + to_string(a.shape()));
  const std::size_t n = a.value().size();
  std::vector<double> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.value().data().begin(), n, out.begin() + r * n);
  Var result = VarAccess::make(Op::BroadcastRows, {&a}, Tensor::unchecked({rows, n}, std::move(out)));
  if (!a.has_tangent()) return result;
  return result.with_tangent(broadcast_rows(a.tangent(), rows));
}

// ---------------------------------------------------------------------------
// Batch-pair terms

Var pairwise_sqdist(const Var& a) {
  require_matrix("pairwise_sqdist", a);
  if (a.has_tangent()) throw UnsupportedOpError(Op::PairwiseSqDist);
  const Tensor& h = a.value();
  const std::size_t b = h.rows(), d = h.cols();
  std::vector<double> out(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = h[i * d + c] - h[j * d + c];
        s += diff * diff;
      }
      out[i * b + j] = s;
      out[j * b + i] = s;
    }
  }
  return VarAccess::make(Op::PairwiseSqDist, {&a}, Tensor::unchecked({b, b}, std::move(out)), {a.value_ptr()});
}

Var offdiag_log_mean_exp(const Var& a) {
  require_matrix("offdiag_log_mean_exp", a);
  if (a.has_tangent()) throw UnsupportedOpError(Op::OffDiagLogMeanExp);
  const Tensor& x = a.value();
  const std::size_t b = x.rows();
  if (b != x.cols() || b < 2) throw ShapeError("offdiag_log_mean_exp: expected a square matrix with at least 2 rows, got " +
                                               to_string(a.shape()));
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      if (i != j) peak = std::max(peak, x[i * b + j]);
  std::vector<double> weights(b * b, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      if (i == j) continue;
      weights[i * b + j] = std::exp(x[i * b + j] - peak);
      total += weights[i * b + j];
    }
  }
  for (double& w : weights) w /= total;
  const double pairs = static_cast<double>(b * (b - 1));
  const double value = peak + std::log(total) - std::log(pairs);
  return VarAccess::make(Op::OffDiagLogMeanExp, {&a}, Tensor::unchecked({1}, {value}),
                         {share(Tensor::unchecked({b, b}, std::move(weights)))});
}

Var detach(const Var& a) {
  if (a.tracked() && a.tape()->mode() == Tape::Mode::Recording) {
    auto stored = share(a.value());
    const NodeId id = a.tape()->record(Op::Detach, {}, {stored}, {}, stored->shape());
    return VarAccess::leaf(a.tape(), id, std::move(stored));
  }
  return Var(a.value());
}

// ---------------------------------------------------------------------------

DualTensor jvp(const Function& f, std::span<const Tensor> primals, std::span<const Tensor> tangents) {
  if (primals.size() != tangents.size()) {
    throw std::invalid_argument("jvp: " + std::to_string(primals.size()) + " primals but " +
                                std::to_string(tangents.size()) + " tangents");
  }
  std::vector<Var> inputs;
  inputs.reserve(primals.size());
  for (std::size_t i = 0; i < primals.size(); ++i) {
    if (primals[i].shape() != tangents[i].shape()) throw ShapeError("jvp", primals[i].shape(), tangents[i].shape());
    inputs.push_back(Var(primals[i]).with_tangent(Var(tangents[i])));
  }
  const Var out = f(inputs);
  Tensor tangent = out.has_tangent() ? out.tangent().value() : Tensor::zeros(out.shape());
  return {out.value(), std::move(tangent)};
}

}  // namespace mflow::ad
