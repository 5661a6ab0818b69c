#pragma once

#include "semamil/autodiff.hpp"

#include <functional>
#include <random>

namespace testsupport {

using semamil::ad::Index;
using semamil::ad::Matrix;
using semamil::ad::Tape;
using semamil::ad::Var;

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

using VarFn = std::function<Var(const Var&)>;

// Scalar probe: sum(f(x) .* W), with W fixed per output shape.
inline Var probe(const VarFn& f, const Var& x, std::uint64_t seed) {
  const Var y = f(x);
  if (y.rows() == 1 && y.cols() == 1) return y;
  return semamil::ad::dot(y, random_matrix(y.rows(), y.cols(), seed));
}

inline Matrix analytic_grad(const VarFn& f, const Matrix& x, std::uint64_t seed = 99) {
  Tape t;
  const Var v = t.leaf(x);
  t.backward(probe(f, v, seed));
  return v.grad();
}

inline Matrix numeric_grad(const VarFn& f, Matrix x, std::uint64_t seed = 99, double eps = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + eps;
    double plus = 0.0;
    {
      Tape t;
      plus = probe(f, t.constant(x), seed).scalar();
    }
    x.data()[i] = saved - eps;
    double minus = 0.0;
    {
      Tape t;
      minus = probe(f, t.constant(x), seed).scalar();
    }
    x.data()[i] = saved;
    g.data()[i] = (plus - minus) / (2 * eps);
  }
  return g;
}

// max |a-n| / max(|a|, |n|, floor)
inline double rel_err(const Matrix& a, const Matrix& n, double floor = 1e-6) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = std::max({std::abs(a.data()[i]), std::abs(n.data()[i]), floor});
    worst = std::max(worst, std::abs(a.data()[i] - n.data()[i]) / d);
  }
  return worst;
}

inline Matrix run(const VarFn& f, const Matrix& x) {
  Tape t;
  return f(t.constant(x)).value();
}

}  // namespace testsupport
