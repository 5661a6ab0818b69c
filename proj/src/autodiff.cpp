#include "semamil/autodiff.hpp"

#include "semamil/error.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace semamil::ad {

namespace {

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("variables live on different tapes");
}

void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a) +
                     " vs " + shape_of(b));
  }
}

}  // namespace

const Matrix& Var::value() const { return tape_->nodes_[id_].value; }
const Matrix& Var::grad() const { return tape_->nodes_[id_].grad; }

Var Tape::add_node(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return add_node(std::move(n));
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return add_node(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return add_node(std::move(n));
}

Var Tape::push(Matrix value, std::span<const Var> inputs, BackwardFn backward,
               OpKind kind) {
  Node n;
  n.value = std::move(value);
  n.kind = kind;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error("input variable from another tape");
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return add_node(std::move(n));
}

bool Tape::requires_grad(const Var& v) const {
  return nodes_[v.id()].requires_grad;
}

void Tape::accumulate(const Var& target, const Matrix& g) {
  Node& n = nodes_[target.id()];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    throw ShapeError("gradient shape " + shape_of(g) + " does not match value " +
                     shape_of(n.value));
  }
  const double f =
      (has_fault_ && current_kind_ == fault_kind_) ? fault_factor_ : 1.0;
  if (n.grad.size() == 0) {
    n.grad = f * g;
  } else {
    n.grad += f * g;
  }
}

void Tape::inject_backward_fault(OpKind kind, double factor) {
  has_fault_ = true;
  fault_kind_ = kind;
  fault_factor_ = factor;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw Error("loss lives on another tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a 1x1 loss, got " + shape_of(loss.value()));
  }
  Node& root = nodes_[loss.id()];
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    current_kind_ = n.kind;
    const Matrix g = n.grad;  // the closure may not alias its own adjoint
    n.backward(g, *this);
  }
  current_kind_ = OpKind::Leaf;
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.size() == 0) continue;
    if (n.param->grad.size() == 0) n.param->zero_grad();
    n.param->grad += n.grad;
  }
}

// ---------------------------------------------------------------------------

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul", a.value(), b.value());
  Matrix out = a.value() * b.value();
  const Var ins[] = {a, b};
  return a.tape()->push(
      std::move(out), ins,
      [a, b](const Matrix& g, Tape& t) {
        t.accumulate(a, g * b.value().transpose());
        t.accumulate(b, a.value().transpose() * g);
      },
      OpKind::MatMul);
}

Var matmul_nt(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.cols(), "matmul_nt", a.value(), b.value());
  Matrix out = a.value() * b.value().transpose();
  const Var ins[] = {a, b};
  return a.tape()->push(
      std::move(out), ins,
      [a, b](const Matrix& g, Tape& t) {
        t.accumulate(a, g * b.value());
        t.accumulate(b, g.transpose() * a.value());
      },
      OpKind::MatMul);
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a.value(),
                b.value());
  Matrix out = a.value() + b.value();
  const Var ins[] = {a, b};
  return a.tape()->push(
      std::move(out), ins,
      [a, b](const Matrix& g, Tape& t) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      },
      OpKind::Add);
}

Var scale(const Var& a, double s) {
  const Var ins[] = {a};
  return a.tape()->push(
      a.value() * s, ins,
      [a, s](const Matrix& g, Tape& t) { t.accumulate(a, g * s); },
      OpKind::Scale);
}

Var add_scalar(const Var& a, double c) {
  const Var ins[] = {a};
  return a.tape()->push(
      (a.value().array() + c).matrix(), ins,
      [a](const Matrix& g, Tape& t) { t.accumulate(a, g); }, OpKind::AddScalar);
}

Var hadamard(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard",
                a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  const Var ins[] = {a, b};
  return a.tape()->push(
      std::move(out), ins,
      [a, b](const Matrix& g, Tape& t) {
        t.accumulate(a, g.cwiseProduct(b.value()));
        t.accumulate(b, g.cwiseProduct(a.value()));
      },
      OpKind::Hadamard);
}

Var row_scale(const Var& a, const Var& s) {
  require_same_tape(a, s);
  require_shape(s.cols() == 1 && s.rows() == a.rows(), "row_scale", a.value(),
                s.value());
  Matrix out = s.value().col(0).asDiagonal() * a.value();
  const Var ins[] = {a, s};
  return a.tape()->push(
      std::move(out), ins,
      [a, s](const Matrix& g, Tape& t) {
        t.accumulate(a, s.value().col(0).asDiagonal() * g);
        t.accumulate(s, g.cwiseProduct(a.value()).rowwise().sum());
      },
      OpKind::RowScale);
}

Var col_scale(const Var& a, const Var& s) {
  require_same_tape(a, s);
  require_shape(s.cols() == 1 && s.rows() == a.cols(), "col_scale", a.value(),
                s.value());
  Matrix out = a.value() * s.value().col(0).asDiagonal();
  const Var ins[] = {a, s};
  return a.tape()->push(
      std::move(out), ins,
      [a, s](const Matrix& g, Tape& t) {
        t.accumulate(a, g * s.value().col(0).asDiagonal());
        t.accumulate(s, g.cwiseProduct(a.value()).colwise().sum().transpose());
      },
      OpKind::ColScale);
}

Var gelu(const Var& a) {
  const Var ins[] = {a};
  return a.tape()->push(
      a.value().unaryExpr([](double x) { return gelu_scalar(x); }), ins,
      [a](const Matrix& g, Tape& t) {
        t.accumulate(a, g.cwiseProduct(a.value().unaryExpr(
                            [](double x) { return gelu_grad_scalar(x); })));
      },
      OpKind::Gelu);
}

Var relu(const Var& a) {
  const Var ins[] = {a};
  return a.tape()->push(
      a.value().cwiseMax(0.0), ins,
      [a](const Matrix& g, Tape& t) {
        t.accumulate(a, g.cwiseProduct(a.value().unaryExpr(
                            [](double x) { return x > 0 ? 1.0 : 0.0; })));
      },
      OpKind::Relu);
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return sigmoid_scalar(x); });
  const Var ins[] = {a};
  return a.tape()->push(
      out, ins,
      [a, y = out](const Matrix& g, Tape& t) {
        t.accumulate(a, g.cwiseProduct(
                            (y.array() * (1.0 - y.array())).matrix()));
      },
      OpKind::Sigmoid);
}

Var softplus(const Var& a) {
  const Var ins[] = {a};
  return a.tape()->push(
      a.value().unaryExpr([](double x) { return softplus_scalar(x); }), ins,
      [a](const Matrix& g, Tape& t) {
        t.accumulate(a, g.cwiseProduct(a.value().unaryExpr(
                            [](double x) { return sigmoid_scalar(x); })));
      },
      OpKind::Softplus);
}

Var row_softmax(const Var& a) {
  Matrix p(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const double m = a.value().row(i).maxCoeff();
    p.row(i) = (a.value().row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  const Var ins[] = {a};
  return a.tape()->push(
      p, ins,
      [a, p](const Matrix& g, Tape& t) {
        // dZ = P .* (G - rowsum(G .* P))
        const Eigen::VectorXd inner = g.cwiseProduct(p).rowwise().sum();
        Matrix dz = p.cwiseProduct(g - inner.replicate(1, g.cols()));
        t.accumulate(a, dz);
      },
      OpKind::RowSoftmax);
}

Var gather_rows(const Var& a, std::span<const Index> idx) {
  for (Index i : idx) {
    if (i < 0 || i >= a.rows()) throw ShapeError("gather_rows: index out of range");
  }
  // Column by column: storage is column-major and idx is often a permutation.
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (Index c = 0; c < a.cols(); ++c) {
    const double* src = a.value().col(c).data();
    double* dst = out.col(c).data();
    for (std::size_t j = 0; j < idx.size(); ++j) dst[j] = src[idx[j]];
  }
  const Var ins[] = {a};
  std::vector<Index> ids(idx.begin(), idx.end());
  return a.tape()->push(
      std::move(out), ins,
      [a, ids = std::move(ids)](const Matrix& g, Tape& t) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        for (Index c = 0; c < ga.cols(); ++c) {
          const double* src = g.col(c).data();
          double* dst = ga.col(c).data();
          for (std::size_t j = 0; j < ids.size(); ++j) dst[ids[j]] += src[j];
        }
        t.accumulate(a, ga);
      },
      OpKind::GatherRows);
}

Var scatter_rows(const Var& a, std::span<const Index> idx, Index rows) {
  if (static_cast<Index>(idx.size()) != a.rows()) {
    throw ShapeError("scatter_rows: index count differs from row count");
  }
  for (Index i : idx) {
    if (i < 0 || i >= rows) throw ShapeError("scatter_rows: index out of range");
  }
  Matrix out = Matrix::Zero(rows, a.cols());
  for (Index c = 0; c < a.cols(); ++c) {
    const double* src = a.value().col(c).data();
    double* dst = out.col(c).data();
    for (std::size_t j = 0; j < idx.size(); ++j) dst[idx[j]] += src[j];
  }
  const Var ins[] = {a};
  std::vector<Index> ids(idx.begin(), idx.end());
  return a.tape()->push(
      std::move(out), ins,
      [a, ids = std::move(ids)](const Matrix& g, Tape& t) {
        Matrix ga(a.rows(), a.cols());
        for (Index c = 0; c < ga.cols(); ++c) {
          const double* src = g.col(c).data();
          double* dst = ga.col(c).data();
          for (std::size_t j = 0; j < ids.size(); ++j) dst[j] = src[ids[j]];
        }
        t.accumulate(a, ga);
      },
      OpKind::ScatterRows);
}

Var concat_rows(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.cols(), "concat_rows", a.value(), b.value());
  Matrix out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  const Var ins[] = {a, b};
  return a.tape()->push(
      std::move(out), ins,
      [a, b](const Matrix& g, Tape& t) {
        t.accumulate(a, g.topRows(a.rows()));
        t.accumulate(b, g.bottomRows(b.rows()));
      },
      OpKind::ConcatRows);
}

Var mean_over_rows(const Var& a) {
  if (a.rows() == 0) throw ShapeError("mean_over_rows: empty matrix");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Matrix out = a.value().colwise().sum().transpose() * inv;
  const Var ins[] = {a};
  return a.tape()->push(
      std::move(out), ins,
      [a, inv](const Matrix& g, Tape& t) {
        t.accumulate(a, (g.transpose() * inv).replicate(a.rows(), 1));
      },
      OpKind::MeanOverRows);
}

Var max_over_rows(const Var& a) {
  if (a.rows() == 0) throw ShapeError("max_over_rows: empty matrix");
  Matrix out(a.cols(), 1);
  std::vector<Index> arg(static_cast<std::size_t>(a.cols()));
  for (Index j = 0; j < a.cols(); ++j) {
    Index best = 0;
    for (Index i = 1; i < a.rows(); ++i) {
      if (a.value()(i, j) > a.value()(best, j)) best = i;
    }
    arg[static_cast<std::size_t>(j)] = best;
    out(j, 0) = a.value()(best, j);
  }
  const Var ins[] = {a};
  return a.tape()->push(
      std::move(out), ins,
      [a, arg = std::move(arg)](const Matrix& g, Tape& t) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t j = 0; j < arg.size(); ++j) {
          ga(arg[j], static_cast<Index>(j)) = g(static_cast<Index>(j), 0);
        }
        t.accumulate(a, ga);
      },
      OpKind::MaxOverRows);
}

Var layer_norm_rows(const Var& a, double eps) {
  const Index n = a.cols();
  Matrix xhat(a.rows(), n);
  Eigen::VectorXd inv_std(a.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    const double mu = a.value().row(i).mean();
    const auto centered = (a.value().row(i).array() - mu).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(n);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  const Var ins[] = {a};
  return a.tape()->push(
      xhat, ins,
      [a, xhat, inv_std](const Matrix& g, Tape& t) {
        Matrix ga(a.rows(), a.cols());
        for (Index i = 0; i < a.rows(); ++i) {
          const double mg = g.row(i).mean();
          const double mgx = g.row(i).dot(xhat.row(i)) /
                             static_cast<double>(xhat.cols());
          ga.row(i) = inv_std(i) * ((g.row(i).array() - mg).matrix() -
                                    xhat.row(i) * mgx);
        }
        t.accumulate(a, ga);
      },
      OpKind::LayerNorm);
}

Var cross_entropy(const Var& logits, int label) {
  if (logits.cols() != 1) throw ShapeError("cross_entropy: logits must be n x 1");
  if (label < 0 || label >= logits.rows()) {
    throw ValidationError("cross_entropy: label out of range");
  }
  const auto z = logits.value().col(0);
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  Matrix out(1, 1);
  out(0, 0) = lse - z(label);
  Matrix p = (z.array() - lse).exp().matrix();
  const Var ins[] = {logits};
  return logits.tape()->push(
      std::move(out), ins,
      [logits, p = std::move(p), label](const Matrix& g, Tape& t) {
        Matrix d = p;
        d(label, 0) -= 1.0;
        t.accumulate(logits, d * g(0, 0));
      },
      OpKind::CrossEntropy);
}

Var dot(const Var& a, const Matrix& w) {
  if (a.rows() != w.rows() || a.cols() != w.cols()) {
    throw ShapeError("dot: shape mismatch " + shape_of(a.value()) + " vs " +
                     shape_of(w));
  }
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(w).sum();
  const Var ins[] = {a};
  return a.tape()->push(
      std::move(out), ins,
      [a, w](const Matrix& g, Tape& t) { t.accumulate(a, w * g(0, 0)); },
      OpKind::Dot);
}

}  // namespace semamil::ad
