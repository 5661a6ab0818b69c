#pragma once

// Matrix-valued reverse-mode differentiation.
//
// A Tape records every operation of one forward pass as a node holding its
// value and a closure that pushes the node's adjoint into its inputs. Nodes
// are appended in evaluation order, so walking them backwards is a valid
// topological order. One tape per bag per step; tapes are not shared between
// threads.

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace semamil::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// A named trainable tensor. Column vectors are stored as n x 1 matrices.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Tags used for fault injection in gradient-check negative controls.
enum class OpKind {
  Leaf,
  MatMul,
  Add,
  Scale,
  Hadamard,
  RowScale,
  ColScale,
  Gelu,
  Relu,
  Sigmoid,
  Softplus,
  AddScalar,
  RowSoftmax,
  GatherRows,
  ScatterRows,
  ConcatRows,
  MeanOverRows,
  MaxOverRows,
  LayerNorm,
  CrossEntropy,
  Dot,
  Custom,
  ZohAd,
  ZohBd,
  Scan,
  StraightThrough,
  RouterAux,
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  /// Adjoint after Tape::backward; empty if no gradient reached the node.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Called with the node's output adjoint; must route it into inputs via
  /// Tape::accumulate.
  using BackwardFn = std::function<void(const Matrix& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable input.
  Var constant(Matrix value);
  /// Differentiable free input (its gradient is readable after backward).
  Var leaf(Matrix value);
  /// Differentiable input bound to a Parameter; backward adds into p.grad.
  Var parameter(Parameter& p);

  /// Appends a derived node. `inputs` decides whether the node needs a
  /// gradient at all.
  Var push(Matrix value, std::span<const Var> inputs, BackwardFn backward,
           OpKind kind);

  /// Adds `g` into the adjoint of `target` (no-op for constants).
  void accumulate(const Var& target, const Matrix& g);

  /// Reverse sweep from a 1x1 node. Parameter gradients are accumulated, not
  /// overwritten.
  void backward(const Var& loss);

  bool requires_grad(const Var& v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Test hook: every gradient an op of `kind` pushes is multiplied by
  /// `factor`. Used to prove the gradient checker can fail.
  void inject_backward_fault(OpKind kind, double factor);

 private:
  friend class Var;

  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    OpKind kind = OpKind::Leaf;
    bool requires_grad = false;
  };

  Var add_node(Node node);

  std::deque<Node> nodes_;
  bool has_fault_ = false;
  OpKind fault_kind_ = OpKind::Leaf;
  double fault_factor_ = 1.0;
  OpKind current_kind_ = OpKind::Leaf;
};

// Generic operations. All shapes are checked; mismatches throw ShapeError.

Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var hadamard(const Var& a, const Var& b);
/// Row i of `a` times s(i); s is m x 1.
Var row_scale(const Var& a, const Var& s);
/// Column j of `a` times s(j); s is n x 1.
Var col_scale(const Var& a, const Var& s);
Var add_scalar(const Var& a, double c);

/// Exact Gaussian-error-function GELU.
Var gelu(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var row_softmax(const Var& a);

/// Output row j = a row idx[j].
Var gather_rows(const Var& a, std::span<const Index> idx);
/// Output has `rows` rows; row idx[j] = a row j, other rows zero.
Var scatter_rows(const Var& a, std::span<const Index> idx, Index rows);
Var concat_rows(const Var& a, const Var& b);
/// Mean over rows of an m x n matrix as an n x 1 column.
Var mean_over_rows(const Var& a);
/// Max over rows as an n x 1 column; ties route the gradient to the lowest row.
Var max_over_rows(const Var& a);
/// Per-row standardisation without affine parameters.
Var layer_norm_rows(const Var& a, double eps = 1e-5);
/// -log softmax(logits)[label] for an n x 1 logit column.
Var cross_entropy(const Var& logits, int label);
/// Frobenius inner product with a constant matrix, 1x1 result.
Var dot(const Var& a, const Matrix& w);

// Scalar helpers shared with tests and other modules.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);
double sigmoid_scalar(double x);
double softplus_scalar(double x);

}  // namespace semamil::ad
