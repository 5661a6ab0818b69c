#pragma once

// Query-conditioned state-space block.
//
// The K highest-scoring patches form a gated query set Q. Their column mean
// conditions a per-channel step size Delta and a shared input gain B'. A
// diagonal base transition A0 is discretised by zero-order hold and the
// remaining context rows are scanned causally along several traversal orders
// whose outputs are averaged. Query rows receive no update; the block output
// is LayerNorm(X + update).

#include "semamil/autodiff.hpp"
#include "semamil/bagdata.hpp"

#include <span>
#include <string>
#include <vector>

namespace semamil::srsm {

using ad::Index;
using ad::Matrix;
using bagdata::GridCoord;

/// Lower bound added after softplus so that Delta stays strictly positive.
inline constexpr double kDeltaFloor = 1e-4;
/// Below this |z| the series 1 + z/2 + z^2/6 replaces (e^z - 1)/z.
inline constexpr double kPhiSeriesThreshold = 1e-6;

struct SelectorParams {
  ad::Parameter w_score{"selector.w_score", {}, {}, true};  ///< d x 1
};

struct SSMChannelParams {
  ad::Parameter A0{"ssm.A0", {}, {}, false};       ///< n_state x 1, < 0
  ad::Parameter Cout{"ssm.Cout", {}, {}, true};     ///< d x n_state
  ad::Parameter Dskip{"ssm.Dskip", {}, {}, true};   ///< d x 1
  ad::Parameter W_delta{"ssm.W_delta", {}, {}, true};  ///< d x d
  ad::Parameter b_delta{"ssm.b_delta", {}, {}, true};  ///< d x 1
  ad::Parameter W_B{"ssm.W_B", {}, {}, true};       ///< n_state x d
  ad::Parameter b_B{"ssm.b_B", {}, {}, true};       ///< n_state x 1

  Index channels() const { return Cout.value.rows(); }
  Index n_state() const { return A0.value.rows(); }
  void validate() const;
};

struct BlockParams {
  SelectorParams selector;
  SSMChannelParams ssm;

  /// Declaration order: w_score, A0, Cout, Dskip, W_delta, b_delta, W_B, b_B.
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  /// Prefixes every parameter name, e.g. "blocks.0.".
  void set_prefix(const std::string& prefix);
};

enum class Direction {
  SemanticForward,
  SemanticBackward,
  SpatialForward,
  SpatialBackward,
};

std::string to_string(Direction d);
/// Accepts the names produced by to_string; throws ValidationError otherwise.
Direction direction_from_string(const std::string& s);
std::vector<Direction> all_directions();

struct BlockConfig {
  int K = 8;
  bool srsm_enabled = true;
  std::vector<Direction> directions = all_directions();
  double ln_eps = 1e-5;
};

// ---------------------------------------------------------------------------
// Patch selector

struct QuerySplit {
  std::vector<Index> query_idx;    ///< ascending positions
  std::vector<Index> context_idx;  ///< ascending positions
  Matrix Q;                        ///< K x d, gated
  Matrix Cseq;                     ///< (N-K) x d
  Eigen::VectorXd gates;           ///< sigmoid(score) of each query
  Eigen::VectorXd scores;          ///< all N scores
};

/// Indices of the K largest scores (lower index wins ties), ascending.
std::vector<Index> top_k_indices(std::span<const double> scores, int K);

QuerySplit select_queries(const Matrix& X, const SelectorParams& sel, int K);

// ---------------------------------------------------------------------------
// Query conditioning and zero-order hold

struct StepParams {
  Eigen::VectorXd Delta;   ///< d
  Eigen::VectorXd Bprime;  ///< n_state
};

StepParams derive_step_params(const QuerySplit& split, const SSMChannelParams& p);

/// Per channel c and state s: Ad = exp(z), Bd = (e^z - 1)/z * B'[s] with
/// z = Delta[c] * A0[s].
struct DiscreteStep {
  Matrix Ad;  ///< d x n_state
  Matrix Bd;  ///< d x n_state
};

/// (e^z - 1)/z, continuous at 0.
double zoh_phi(double z);
/// d/dz of zoh_phi.
double zoh_phi_derivative(double z);

DiscreteStep discretize_zoh(const Eigen::VectorXd& A0,
                            const Eigen::VectorXd& Delta,
                            const Eigen::VectorXd& Bprime);

// ---------------------------------------------------------------------------
// Scans

/// Runs the recurrence along `order` (a permutation of the M input rows);
/// outputs land at the rows they were read from.
Matrix scan_causal(const DiscreteStep& step, const SSMChannelParams& p,
                   const Matrix& inputs, std::span<const Index> order);

struct DirectionSet {
  std::vector<Direction> tags;
  std::vector<std::vector<Index>> orders;

  /// Orders over the context rows; `coords` are the context rows' grid cells
  /// in sequence order.
  static DirectionSet build(std::span<const Direction> tags,
                            std::span<const GridCoord> coords);
};

Matrix multi_direction_fuse(const DiscreteStep& step, const SSMChannelParams& p,
                            const Matrix& Cseq, const DirectionSet& directions);

// ---------------------------------------------------------------------------
// Block

struct BlockTrace {
  std::vector<Index> query_idx;
  std::vector<Index> context_idx;
  bool conditioned = false;  ///< Delta and B' were computed
  Eigen::VectorXd Delta;
  Eigen::VectorXd Bprime;
};

/// Parameters of one block bound to a tape.
struct BlockVars {
  ad::Var w_score, A0, Cout, Dskip, W_delta, b_delta, W_B, b_B;

  static BlockVars bind(ad::Tape& tape, BlockParams& params);
  static BlockVars constants(ad::Tape& tape, const BlockParams& params);
};

struct BlockOutput {
  ad::Var out;      ///< N x d
  ad::Var queries;  ///< K x d gated queries; invalid when SRSM is disabled
  std::vector<Index> query_idx;
  std::vector<Index> context_idx;
};

BlockOutput srsm_block(const ad::Var& X, std::span<const GridCoord> coords,
                       const BlockVars& params, const BlockConfig& config,
                       BlockTrace* trace = nullptr);

Matrix srsm_block(const Matrix& X, std::span<const GridCoord> coords,
                  const BlockParams& params, const BlockConfig& config,
                  BlockTrace* trace = nullptr);

// Differentiable pieces, exposed for gradient tests.

/// Gated queries and the context split, as tape variables.
struct QueryVars {
  ad::Var Q;
  ad::Var Cseq;
  std::vector<Index> query_idx;
  std::vector<Index> context_idx;
};
QueryVars select_queries(const ad::Var& X, const ad::Var& w_score, int K);

/// Returns {Delta, Bprime} as d x 1 and n_state x 1 columns.
std::pair<ad::Var, ad::Var> derive_step_params(const ad::Var& Q,
                                               const BlockVars& p);
ad::Var zoh_ad(const ad::Var& A0, const ad::Var& Delta);
ad::Var zoh_bd(const ad::Var& A0, const ad::Var& Delta, const ad::Var& Bprime);
ad::Var scan_causal(const ad::Var& Ad, const ad::Var& Bd, const ad::Var& Cout,
                    const ad::Var& Dskip, const ad::Var& U,
                    std::span<const Index> order);

}  // namespace semamil::srsm
