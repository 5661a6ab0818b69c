#include "semamil/error.hpp"
#include "semamil/reorder.hpp"

#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

#include <random>

using namespace semamil;
using namespace semamil::reorder;
using namespace testsupport;

namespace {

RouterParams identity_router(Index d) {
  RouterParams r;
  r.W1.value = Matrix::Identity(d, d);
  r.W2.value = Matrix::Identity(d, d);
  return r;
}

}  // namespace

TEST_CASE("router forward") {
  const RouterParams r = identity_router(2);
  CHECK(router_forward(r, Matrix::Zero(4, 2)).isZero());
  Matrix x(1, 2);
  x << 1.0, -1.0;
  const Matrix z = router_forward(r, x);
  CHECK(z.rows() == 1);
  CHECK(z(0, 0) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(z(0, 1) == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
  CHECK_THROWS_AS(router_forward(r, Matrix::Zero(2, 3)), ShapeError);

  RouterParams bad = r;
  bad.W2.value = Matrix::Identity(1, 2);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("router forward: Var and Matrix paths agree, gradients match") {
  RouterParams r;
  r.W1.value = random_matrix(5, 3, 1);
  r.W2.value = random_matrix(4, 5, 2);
  const Matrix x = random_matrix(6, 3, 3);
  ad::Tape t;
  const Matrix zv = router_forward(t.constant(r.W1.value), t.constant(r.W2.value), t.constant(x)).value();
  CHECK((zv - router_forward(r, x)).cwiseAbs().maxCoeff() < 1e-14);

  const VarFn f = [&](const Var& v) {
    return router_forward(v.tape()->constant(r.W1.value), v.tape()->constant(r.W2.value), v);
  };
  CHECK(rel_err(analytic_grad(f, x), numeric_grad(f, x), 1e-7) < 1e-6);
}

TEST_CASE("assign: hard mode") {
  Matrix z(3, 2);
  z << 0, 0, 10, 0, -1, 2;
  const Assignment a = assign(z, AssignMode::hard());
  CHECK(a.P(0, 0) == doctest::Approx(0.5));
  CHECK(a.P(0, 1) == doctest::Approx(0.5));
  CHECK(a.c[0] == 0);
  CHECK(a.P(1, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-14));
  CHECK(a.P(1, 0) == doctest::Approx(0.99995).epsilon(1e-5));
  CHECK(a.c[1] == 0);
  CHECK(a.c[2] == 1);
  for (Index i = 0; i < 3; ++i) CHECK(std::abs(a.P.row(i).sum() - 1.0) < 1e-6);
  Matrix inf = z;
  inf(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(assign(inf, AssignMode::hard()), ValidationError);
}

TEST_CASE("assign: gumbel mode") {
  const Matrix z = random_matrix(20, 4, 4);
  const Assignment a = assign(z, AssignMode::gumbel(0.7, 11));
  const Assignment b = assign(z, AssignMode::gumbel(0.7, 11));
  CHECK(a.P == b.P);
  CHECK(a.c == b.c);
  const Assignment other = assign(z, AssignMode::gumbel(0.7, 12));
  CHECK(other.P != a.P);

  const Matrix g = gumbel_noise(20, 4, 11);
  const Matrix expected = run([](const Var& v) { return ad::row_softmax(v); }, (z + g) / 0.7);
  CHECK((a.P - expected).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(a.c == row_argmax(z + g));
  for (Index i = 0; i < 20; ++i) CHECK(std::abs(a.P.row(i).sum() - 1.0) < 1e-6);

  CHECK_THROWS_AS(assign(z, AssignMode::gumbel(0.0, 1)), ValidationError);

  // dP/dZ against central differences.
  const VarFn f = [](const Var& v) {
    std::vector<int> c;
    return assign(v, AssignMode::gumbel(0.7, 11), c);
  };
  const Matrix zs = random_matrix(5, 3, 5);
  CHECK(rel_err(analytic_grad(f, zs), numeric_grad(f, zs), 1e-8) < 1e-5);
}

TEST_CASE("build permutation examples") {
  const std::vector<int> c{2, 0, 1, 0};
  const Permutation p = build_permutation(c);
  CHECK(p.pi == std::vector<Index>{1, 3, 2, 0});
  CHECK(p.pi_inv == std::vector<Index>{3, 0, 2, 1});
  const std::vector<int> same(7, 3);
  CHECK(build_permutation(same).pi == Permutation::identity(7).pi);
  const std::vector<int> two{1, 0};
  const Permutation q = build_permutation(two);
  CHECK(q.pi == std::vector<Index>{1, 0});
  CHECK(q.pi_inv == q.pi);
}

TEST_CASE("apply and restore") {
  Matrix x(3, 2);
  x << 1, 2, 3, 4, 5, 6;
  const std::vector<Index> pi{2, 0, 1};
  const Matrix y = apply_permutation(x, pi);
  CHECK(y.row(0) == x.row(2));
  CHECK(y.row(1) == x.row(0));
  CHECK(y.row(2) == x.row(1));
  CHECK(apply_permutation(x, Permutation::identity(3).pi) == x);
  const Permutation p = Permutation::from_order(pi);
  CHECK(restore_order(y, p) == x);
  CHECK(restore_order(y, p) == apply_permutation(y, p.pi_inv));

  const std::vector<Index> dup{0, 0, 1};
  CHECK_THROWS_AS(apply_permutation(x, dup), ValidationError);
  CHECK_THROWS_AS(Permutation::from_order(dup), ValidationError);
  CHECK_FALSE(is_bijection(std::vector<Index>{0, 3, 1}));
}

TEST_CASE("permutation property sweep") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const int L = std::uniform_int_distribution<int>(1, 512)(rng);
    const int nc = std::uniform_int_distribution<int>(1, 12)(rng);
    std::vector<int> c(static_cast<std::size_t>(L));
    for (int& v : c) v = std::uniform_int_distribution<int>(0, nc - 1)(rng);
    const Permutation p = build_permutation(c);
    CHECK(is_bijection(p.pi));
    const std::vector<long> oracle = oracles::stable_argsort(c);
    CHECK(std::equal(p.pi.begin(), p.pi.end(), oracle.begin(), oracle.end()));
    const std::vector<int> grouped = permute<int>(c, p.pi);
    CHECK(std::is_sorted(grouped.begin(), grouped.end()));
    for (std::size_t j = 0; j < p.pi.size(); ++j) {
      CHECK(p.pi_inv[static_cast<std::size_t>(p.pi[j])] == static_cast<Index>(j));
    }
    const Matrix x = random_matrix(L, 3, static_cast<std::uint64_t>(trial));
    CHECK(restore_order(apply_permutation(x, p.pi), p) == x);
  }
}

TEST_CASE("hard-mode permutation routes gradients back by pi_inv") {
  const std::vector<Index> pi{2, 0, 3, 1};
  const Permutation p = Permutation::from_order(pi);
  const Matrix x = random_matrix(4, 2, 6);
  const Matrix w = random_matrix(4, 2, 7);
  ad::Tape t;
  const Var v = t.leaf(x);
  t.backward(ad::dot(apply_permutation(v, pi), w));
  CHECK(v.grad() == apply_permutation(w, p.pi_inv));

  const VarFn f = [&](const Var& a) { return restore_order(ad::scale(apply_permutation(a, pi), 2.0), p); };
  CHECK(rel_err(analytic_grad(f, x), numeric_grad(f, x), 1e-8) < 1e-8);
}

TEST_CASE("router auxiliary loss") {
  // Uniform rows: entropy ln K, balanced mean, KL 0.
  const Matrix uni = Matrix::Constant(4, 3, 1.0 / 3.0);
  CHECK(router_aux_loss(uni) == doctest::Approx(std::log(3.0)));
  // One-hot rows spread over all clusters: entropy 0, KL 0.
  Matrix onehot = Matrix::Zero(3, 3);
  onehot(0, 0) = onehot(1, 1) = onehot(2, 2) = 1.0;
  CHECK(std::abs(router_aux_loss(onehot)) < 1e-12);
  // All rows on one cluster: KL = ln K.
  Matrix collapsed = Matrix::Zero(3, 3);
  collapsed.col(0).setOnes();
  CHECK(router_aux_loss(collapsed) == doctest::Approx(std::log(3.0)));

  const VarFn f = [](const Var& z) { return router_aux_loss(ad::row_softmax(z)); };
  const Matrix z = random_matrix(6, 4, 8);
  CHECK(rel_err(analytic_grad(f, z), numeric_grad(f, z), 1e-8) < 1e-6);
}

TEST_CASE("straight-through gate has unit value and d log P gradient") {
  const Matrix z = random_matrix(5, 3, 9);
  const std::vector<int> c{0, 2, 1, 1, 0};
  const VarFn f = [&](const Var& v) { return straight_through_gate(ad::row_softmax(v), c); };
  CHECK(run(f, z).isOnes());
  // Its gradient equals that of log P[i, c_i].
  ad::Tape t;
  const Var v = t.leaf(z);
  const Matrix w = random_matrix(5, 1, 10);
  t.backward(ad::dot(straight_through_gate(ad::row_softmax(v), c), w));
  const Matrix a = v.grad();
  Matrix n(5, 3);
  const double eps = 1e-6;
  for (Index i = 0; i < z.size(); ++i) {
    Matrix zp = z;
    Matrix zm = z;
    zp.data()[i] += eps;
    zm.data()[i] -= eps;
    const Matrix pp = run([](const Var& x) { return ad::row_softmax(x); }, zp);
    const Matrix pm = run([](const Var& x) { return ad::row_softmax(x); }, zm);
    double s = 0.0;
    for (Index r = 0; r < 5; ++r) {
      const int k = c[static_cast<std::size_t>(r)];
      s += w(r, 0) * (std::log(pp(r, k)) - std::log(pm(r, k)));
    }
    n.data()[i] = s / (2 * eps);
  }
  CHECK(rel_err(a, n, 1e-8) < 1e-6);
}
