#include "semamil/reorder.hpp"

#include "semamil/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace semamil::reorder {

void RouterParams::validate() const {
  if (W1.value.size() == 0 || W2.value.size() == 0) {
    throw ValidationError("router: empty weights");
  }
  if (W2.value.cols() != W1.value.rows()) {
    throw ShapeError("router: W2 columns must equal W1 rows");
  }
  if (n_clusters() < 2) throw ValidationError("router: n_clusters must be >= 2");
  if (!W1.value.allFinite() || !W2.value.allFinite()) {
    throw ValidationError("router: non-finite weights");
  }
}

Matrix router_forward(const RouterParams& params, const Matrix& X) {
  if (X.cols() != params.input_dim()) {
    throw ShapeError("router_forward: input width " + std::to_string(X.cols()) +
                     " but W1 expects " + std::to_string(params.input_dim()));
  }
  const Matrix H = (X * params.W1.value.transpose()).unaryExpr([](double v) {
    return ad::gelu_scalar(v);
  });
  return H * params.W2.value.transpose();
}

ad::Var router_forward(const ad::Var& W1, const ad::Var& W2, const ad::Var& X) {
  return ad::matmul_nt(ad::gelu(ad::matmul_nt(X, W1)), W2);
}

Matrix gumbel_noise(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(
      std::numeric_limits<double>::min(), 1.0);
  Matrix G(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) G(i, j) = -std::log(-std::log(uni(rng)));
  }
  return G;
}

std::vector<int> row_argmax(const Matrix& M) {
  std::vector<int> c(static_cast<std::size_t>(M.rows()));
  for (Index i = 0; i < M.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < M.cols(); ++j) {
      if (M(i, j) > M(i, best)) best = j;
    }
    c[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return c;
}

Assignment assign(const Matrix& Z, const AssignMode& mode) {
  if (!Z.allFinite()) throw ValidationError("assign: non-finite logits");
  ad::Tape tape;
  std::vector<int> c;
  const ad::Var P = assign(tape.constant(Z), mode, c);
  return {P.value(), std::move(c)};
}

ad::Var assign(const ad::Var& Z, const AssignMode& mode, std::vector<int>& c) {
  ad::Var logits = Z;
  if (mode.kind == AssignMode::Kind::Gumbel) {
    if (!(mode.tau > 0)) throw ValidationError("assign: tau must be > 0");
    if (mode.noise_seed) {
      logits = ad::add(logits, Z.tape()->constant(gumbel_noise(
                                   Z.rows(), Z.cols(), *mode.noise_seed)));
    }
    logits = ad::scale(logits, 1.0 / mode.tau);
  }
  ad::Var P = ad::row_softmax(logits);
  c = row_argmax(P.value());
  return P;
}

Permutation Permutation::identity(std::size_t n) {
  Permutation p;
  p.pi.resize(n);
  std::iota(p.pi.begin(), p.pi.end(), Index{0});
  p.pi_inv = p.pi;
  return p;
}

bool is_bijection(std::span<const Index> pi) {
  std::vector<char> seen(pi.size(), 0);
  for (Index v : pi) {
    if (v < 0 || static_cast<std::size_t>(v) >= pi.size()) return false;
    if (seen[static_cast<std::size_t>(v)]) return false;
    seen[static_cast<std::size_t>(v)] = 1;
  }
  return true;
}

Permutation Permutation::from_order(std::vector<Index> pi) {
  if (!is_bijection(pi)) throw ValidationError("permutation is not a bijection");
  Permutation p;
  p.pi_inv.resize(pi.size());
  for (std::size_t j = 0; j < pi.size(); ++j) {
    p.pi_inv[static_cast<std::size_t>(pi[j])] = static_cast<Index>(j);
  }
  p.pi = std::move(pi);
  return p;
}

Permutation build_permutation(std::span<const int> c) {
  std::vector<Index> pi(c.size());
  std::iota(pi.begin(), pi.end(), Index{0});
  std::stable_sort(pi.begin(), pi.end(), [&](Index a, Index b) {
    return c[static_cast<std::size_t>(a)] < c[static_cast<std::size_t>(b)];
  });
  return Permutation::from_order(std::move(pi));
}

Matrix apply_permutation(const Matrix& X, std::span<const Index> pi) {
  if (static_cast<Index>(pi.size()) != X.rows() || !is_bijection(pi)) {
    throw ValidationError("apply_permutation: pi is not a bijection on the rows");
  }
  Matrix out(X.rows(), X.cols());
  for (std::size_t j = 0; j < pi.size(); ++j) {
    out.row(static_cast<Index>(j)) = X.row(pi[j]);
  }
  return out;
}

Matrix restore_order(const Matrix& Y, const Permutation& perm) {
  return apply_permutation(Y, perm.pi_inv);
}

ad::Var apply_permutation(const ad::Var& X, std::span<const Index> pi) {
  if (static_cast<Index>(pi.size()) != X.rows() || !is_bijection(pi)) {
    throw ValidationError("apply_permutation: pi is not a bijection on the rows");
  }
  return ad::gather_rows(X, pi);
}

ad::Var restore_order(const ad::Var& Y, const Permutation& perm) {
  return apply_permutation(Y, perm.pi_inv);
}

ad::Var straight_through_gate(const ad::Var& P, std::span<const int> c) {
  if (static_cast<Index>(c.size()) != P.rows()) {
    throw ShapeError("straight_through_gate: label count differs from rows");
  }
  std::vector<int> labels(c.begin(), c.end());
  const ad::Var ins[] = {P};
  return P.tape()->push(
      Matrix::Ones(P.rows(), 1), ins,
      [P, labels = std::move(labels)](const Matrix& g, ad::Tape& t) {
        Matrix gp = Matrix::Zero(P.rows(), P.cols());
        for (Index i = 0; i < P.rows(); ++i) {
          const int k = labels[static_cast<std::size_t>(i)];
          gp(i, k) = g(i, 0) / P.value()(i, k);
        }
        t.accumulate(P, gp);
      },
      ad::OpKind::StraightThrough);
}

namespace {

// log clamped away from zero so that p log p -> 0 at p = 0.
double safe_log(double p) {
  return std::log(std::max(p, std::numeric_limits<double>::min()));
}

}  // namespace

double router_aux_loss(const Matrix& P) {
  const double L = static_cast<double>(P.rows());
  const double K = static_cast<double>(P.cols());
  double entropy = 0.0;
  for (Index i = 0; i < P.rows(); ++i) {
    for (Index k = 0; k < P.cols(); ++k) entropy -= P(i, k) * safe_log(P(i, k));
  }
  entropy /= L;
  const Eigen::RowVectorXd mean = P.colwise().mean();
  double kl = 0.0;
  for (Index k = 0; k < P.cols(); ++k) kl += mean(k) * safe_log(mean(k) * K);
  return entropy + kl;
}

ad::Var router_aux_loss(const ad::Var& P) {
  Matrix out(1, 1);
  out(0, 0) = router_aux_loss(P.value());
  const ad::Var ins[] = {P};
  return P.tape()->push(
      std::move(out), ins,
      [P](const Matrix& g, ad::Tape& t) {
        const Matrix& p = P.value();
        const double L = static_cast<double>(p.rows());
        const double K = static_cast<double>(p.cols());
        const Eigen::RowVectorXd mean = p.colwise().mean();
        Matrix gp(p.rows(), p.cols());
        for (Index i = 0; i < p.rows(); ++i) {
          for (Index k = 0; k < p.cols(); ++k) {
            gp(i, k) = (-(safe_log(p(i, k)) + 1.0) +
                        (safe_log(mean(k) * K) + 1.0)) /
                       L;
          }
        }
        t.accumulate(P, gp * g(0, 0));
      },
      ad::OpKind::RouterAux);
}

}  // namespace semamil::reorder
