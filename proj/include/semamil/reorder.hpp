#pragma once

// Semantic reordering: a two-layer GELU router scores every patch against
// n_clusters semantic clusters, patches are grouped by their hard cluster
// label with a stable argsort, and the inverse permutation restores the
// original order after sequence processing.

#include "semamil/autodiff.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace semamil::reorder {

using ad::Index;
using ad::Matrix;

/// W1: hidden x d, W2: n_clusters x hidden. No biases.
struct RouterParams {
  ad::Parameter W1{"router.W1", {}, {}, true};
  ad::Parameter W2{"router.W2", {}, {}, true};

  Index hidden() const { return W1.value.rows(); }
  Index input_dim() const { return W1.value.cols(); }
  Index n_clusters() const { return W2.value.rows(); }
  void validate() const;
};

/// Row i of the result is W2 * GELU(W1 * x_i).
Matrix router_forward(const RouterParams& params, const Matrix& X);
ad::Var router_forward(const ad::Var& W1, const ad::Var& W2, const ad::Var& X);

struct AssignMode {
  enum class Kind { Hard, Gumbel };
  Kind kind = Kind::Hard;
  double tau = 1.0;
  /// Gumbel noise is drawn only when a seed is given.
  std::optional<std::uint64_t> noise_seed;

  static AssignMode hard() { return {}; }
  static AssignMode gumbel(double tau, std::optional<std::uint64_t> seed) {
    return {Kind::Gumbel, tau, seed};
  }
};

struct Assignment {
  Matrix P;            ///< L x n_clusters, rows sum to 1
  std::vector<int> c;  ///< hard labels, argmax of each row, lowest index on ties
};

/// Standard Gumbel(0, 1) noise of the given shape.
Matrix gumbel_noise(Index rows, Index cols, std::uint64_t seed);

Assignment assign(const Matrix& Z, const AssignMode& mode);

/// Differentiable counterpart: returns P on the tape and writes labels to c.
ad::Var assign(const ad::Var& Z, const AssignMode& mode, std::vector<int>& c);

/// Row argmax with lowest-index tie breaking.
std::vector<int> row_argmax(const Matrix& M);

struct Permutation {
  std::vector<Index> pi;      ///< output position j holds input row pi[j]
  std::vector<Index> pi_inv;  ///< pi_inv[pi[j]] == j

  std::size_t size() const { return pi.size(); }
  static Permutation identity(std::size_t n);
  /// Builds pi_inv from pi; throws ValidationError if pi is not a bijection.
  static Permutation from_order(std::vector<Index> pi);
};

/// True iff `pi` is a bijection on {0..n-1}.
bool is_bijection(std::span<const Index> pi);

/// Stable ascending argsort of the labels.
Permutation build_permutation(std::span<const int> c);

/// Row j of the output is row pi[j] of X.
Matrix apply_permutation(const Matrix& X, std::span<const Index> pi);
/// Row i of the output is row pi_inv[i] of Y.
Matrix restore_order(const Matrix& Y, const Permutation& perm);

ad::Var apply_permutation(const ad::Var& X, std::span<const Index> pi);
ad::Var restore_order(const ad::Var& Y, const Permutation& perm);

template <typename T>
std::vector<T> permute(std::span<const T> items, std::span<const Index> pi) {
  std::vector<T> out;
  out.reserve(pi.size());
  for (Index i : pi) out.push_back(items[static_cast<std::size_t>(i)]);
  return out;
}

/// L x 1 column whose value is exactly 1 but whose gradient reaches
/// P(i, c_i) as g_i / P(i, c_i) (straight-through estimator).
ad::Var straight_through_gate(const ad::Var& P, std::span<const int> c);

/// Mean per-row entropy of P plus KL(mean row of P || uniform).
double router_aux_loss(const Matrix& P);
ad::Var router_aux_loss(const ad::Var& P);

}  // namespace semamil::reorder
