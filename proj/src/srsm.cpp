#include "semamil/srsm.hpp"

#include "semamil/error.hpp"
#include "semamil/reorder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace semamil::srsm {

void SSMChannelParams::validate() const {
  const Index d = channels();
  const Index n = n_state();
  if (d < 1 || n < 1) throw ValidationError("ssm: empty parameters");
  if (A0.value.cols() != 1 || Cout.value.cols() != n || Dskip.value.rows() != d ||
      W_delta.value.rows() != d || W_delta.value.cols() != d ||
      b_delta.value.rows() != d || W_B.value.rows() != n ||
      W_B.value.cols() != d || b_B.value.rows() != n) {
    throw ShapeError("ssm: inconsistent parameter shapes");
  }
  if ((A0.value.array() >= 0).any()) {
    throw ValidationError("ssm: A0 entries must be strictly negative");
  }
}

std::vector<ad::Parameter*> BlockParams::parameters() {
  return {&selector.w_score, &ssm.A0,      &ssm.Cout, &ssm.Dskip,
          &ssm.W_delta,      &ssm.b_delta, &ssm.W_B,  &ssm.b_B};
}

std::vector<const ad::Parameter*> BlockParams::parameters() const {
  return {&selector.w_score, &ssm.A0,      &ssm.Cout, &ssm.Dskip,
          &ssm.W_delta,      &ssm.b_delta, &ssm.W_B,  &ssm.b_B};
}

void BlockParams::set_prefix(const std::string& prefix) {
  const char* base[] = {"selector.w_score", "ssm.A0",      "ssm.Cout",
                        "ssm.Dskip",        "ssm.W_delta", "ssm.b_delta",
                        "ssm.W_B",          "ssm.b_B"};
  auto params = parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->name = prefix + base[i];
  }
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::SemanticForward: return "semantic_forward";
    case Direction::SemanticBackward: return "semantic_backward";
    case Direction::SpatialForward: return "spatial_forward";
    case Direction::SpatialBackward: return "spatial_backward";
  }
  return "?";
}

Direction direction_from_string(const std::string& s) {
  for (Direction d : all_directions()) {
    if (to_string(d) == s) return d;
  }
  throw ValidationError("unknown scan direction '" + s + "'");
}

std::vector<Direction> all_directions() {
  return {Direction::SemanticForward, Direction::SemanticBackward,
          Direction::SpatialForward, Direction::SpatialBackward};
}

// ---------------------------------------------------------------------------

std::vector<Index> top_k_indices(std::span<const double> scores, int K) {
  const auto N = static_cast<Index>(scores.size());
  if (K < 1 || K >= N) {
    throw ValidationError("query set exhausts context (K=" + std::to_string(K) +
                          ", N=" + std::to_string(N) + ")");
  }
  std::vector<Index> idx(scores.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::partial_sort(idx.begin(), idx.begin() + K, idx.end(), [&](Index a, Index b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  });
  idx.resize(static_cast<std::size_t>(K));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

std::vector<Index> complement(const std::vector<Index>& chosen, Index n) {
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  for (Index i : chosen) taken[static_cast<std::size_t>(i)] = 1;
  std::vector<Index> rest;
  rest.reserve(static_cast<std::size_t>(n) - chosen.size());
  for (Index i = 0; i < n; ++i) {
    if (!taken[static_cast<std::size_t>(i)]) rest.push_back(i);
  }
  return rest;
}

}  // namespace

QueryVars select_queries(const ad::Var& X, const ad::Var& w_score, int K) {
  if (w_score.rows() != X.cols() || w_score.cols() != 1) {
    throw ShapeError("select_queries: w_score must be d x 1");
  }
  const ad::Var scores = ad::matmul(X, w_score);
  const Matrix& s = scores.value();
  QueryVars out;
  out.query_idx =
      top_k_indices(std::span<const double>(s.data(), static_cast<std::size_t>(s.rows())), K);
  out.context_idx = complement(out.query_idx, X.rows());
  const ad::Var gates = ad::sigmoid(ad::gather_rows(scores, out.query_idx));
  out.Q = ad::row_scale(ad::gather_rows(X, out.query_idx), gates);
  out.Cseq = ad::gather_rows(X, out.context_idx);
  return out;
}

QuerySplit select_queries(const Matrix& X, const SelectorParams& sel, int K) {
  ad::Tape tape;
  const ad::Var x = tape.constant(X);
  const ad::Var w = tape.constant(sel.w_score.value);
  const QueryVars qv = select_queries(x, w, K);
  QuerySplit split;
  split.query_idx = qv.query_idx;
  split.context_idx = qv.context_idx;
  split.Q = qv.Q.value();
  split.Cseq = qv.Cseq.value();
  split.scores = X * sel.w_score.value;
  split.gates.resize(static_cast<Index>(split.query_idx.size()));
  for (std::size_t j = 0; j < split.query_idx.size(); ++j) {
    split.gates(static_cast<Index>(j)) =
        ad::sigmoid_scalar(split.scores(split.query_idx[j]));
  }
  return split;
}

// ---------------------------------------------------------------------------

std::pair<ad::Var, ad::Var> derive_step_params(const ad::Var& Q,
                                               const BlockVars& p) {
  if (Q.rows() < 1) throw ValidationError("derive_step_params: empty query set");
  const ad::Var qbar = ad::mean_over_rows(Q);
  const ad::Var raw = ad::add(ad::matmul(p.W_delta, qbar), p.b_delta);
  const ad::Var delta = ad::add_scalar(ad::softplus(raw), kDeltaFloor);
  const ad::Var bprime = ad::add(ad::matmul(p.W_B, qbar), p.b_B);
  return {delta, bprime};
}

StepParams derive_step_params(const QuerySplit& split, const SSMChannelParams& p) {
  ad::Tape tape;
  BlockParams holder;
  holder.ssm = p;
  holder.selector.w_score.value = Matrix::Zero(p.channels(), 1);
  const BlockVars vars = BlockVars::constants(tape, holder);
  const auto [delta, bprime] = derive_step_params(tape.constant(split.Q), vars);
  return {delta.value().col(0), bprime.value().col(0)};
}

double zoh_phi(double z) {
  if (std::abs(z) < kPhiSeriesThreshold) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

double zoh_phi_derivative(double z) {
  if (std::abs(z) < 1e-3) {
    return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
  }
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

namespace {

void check_zoh_inputs(const Matrix& A0, const Matrix& Delta, const Matrix& Bprime) {
  if (A0.cols() != 1 || Delta.cols() != 1 || Bprime.cols() != 1) {
    throw ShapeError("discretize_zoh: A0, Delta and B' must be column vectors");
  }
  if (Bprime.rows() != A0.rows()) {
    throw ShapeError("discretize_zoh: B' length must equal n_state");
  }
  if ((Delta.array() <= 0).any() || !Delta.allFinite()) {
    throw ValidationError("discretize_zoh: Delta must be positive");
  }
  if ((A0.array() >= 0).any()) {
    throw ValidationError("discretize_zoh: A0 must be strictly negative");
  }
}

}  // namespace

ad::Var zoh_ad(const ad::Var& A0, const ad::Var& Delta) {
  const Matrix& a = A0.value();
  const Matrix& dl = Delta.value();
  check_zoh_inputs(a, dl, a);
  const Matrix Ad = (dl * a.transpose()).array().exp().matrix();
  const ad::Var ins[] = {A0, Delta};
  return A0.tape()->push(
      Ad, ins,
      [A0, Delta, Ad](const Matrix& g, ad::Tape& t) {
        const Matrix ga = g.cwiseProduct(Ad);  // dAd/dz = Ad
        t.accumulate(Delta, ga * A0.value());
        t.accumulate(A0, ga.transpose() * Delta.value());
      },
      ad::OpKind::ZohAd);
}

ad::Var zoh_bd(const ad::Var& A0, const ad::Var& Delta, const ad::Var& Bprime) {
  const Matrix& a = A0.value();
  const Matrix& dl = Delta.value();
  const Matrix& bp = Bprime.value();
  check_zoh_inputs(a, dl, bp);
  const Index d = dl.rows();
  const Index n = a.rows();
  Matrix Bd(d, n);
  for (Index c = 0; c < d; ++c) {
    for (Index s = 0; s < n; ++s) Bd(c, s) = zoh_phi(dl(c, 0) * a(s, 0)) * bp(s, 0);
  }
  const ad::Var ins[] = {A0, Delta, Bprime};
  return A0.tape()->push(
      std::move(Bd), ins,
      [A0, Delta, Bprime](const Matrix& g, ad::Tape& t) {
        const Matrix& a = A0.value();
        const Matrix& dl = Delta.value();
        const Matrix& bp = Bprime.value();
        Matrix gA = Matrix::Zero(a.rows(), 1);
        Matrix gD = Matrix::Zero(dl.rows(), 1);
        Matrix gB = Matrix::Zero(bp.rows(), 1);
        for (Index c = 0; c < dl.rows(); ++c) {
          for (Index s = 0; s < a.rows(); ++s) {
            const double z = dl(c, 0) * a(s, 0);
            const double dphi = zoh_phi_derivative(z) * bp(s, 0) * g(c, s);
            gD(c, 0) += dphi * a(s, 0);
            gA(s, 0) += dphi * dl(c, 0);
            gB(s, 0) += zoh_phi(z) * g(c, s);
          }
        }
        t.accumulate(A0, gA);
        t.accumulate(Delta, gD);
        t.accumulate(Bprime, gB);
      },
      ad::OpKind::ZohBd);
}

DiscreteStep discretize_zoh(const Eigen::VectorXd& A0, const Eigen::VectorXd& Delta,
                            const Eigen::VectorXd& Bprime) {
  ad::Tape tape;
  const ad::Var a = tape.constant(A0);
  const ad::Var dl = tape.constant(Delta);
  const ad::Var bp = tape.constant(Bprime);
  return {zoh_ad(a, dl).value(), zoh_bd(a, dl, bp).value()};
}

// ---------------------------------------------------------------------------

namespace {

void check_scan_shapes(const Matrix& Ad, const Matrix& Bd, const Matrix& C,
                       const Matrix& D, const Matrix& U,
                       std::span<const Index> order) {
  const Index d = Ad.rows();
  const Index n = Ad.cols();
  if (Bd.rows() != d || Bd.cols() != n || C.rows() != d || C.cols() != n ||
      D.rows() != d || D.cols() != 1 || U.cols() != d) {
    throw ShapeError("scan_causal: inconsistent shapes");
  }
  if (static_cast<Index>(order.size()) != U.rows()) {
    throw ShapeError("scan_causal: order length differs from input rows");
  }
  if (!reorder::is_bijection(order)) {
    throw ValidationError("scan_causal: order is not a permutation of the rows");
  }
}

}  // namespace

ad::Var scan_causal(const ad::Var& Ad, const ad::Var& Bd, const ad::Var& Cout,
                    const ad::Var& Dskip, const ad::Var& U,
                    std::span<const Index> order) {
  const Matrix& a = Ad.value();
  const Matrix& b = Bd.value();
  const Matrix& C = Cout.value();
  const Matrix& D = Dskip.value();
  const Matrix& u = U.value();
  check_scan_shapes(a, b, C, D, u, order);
  const Index d = a.rows();
  const Index n = a.cols();
  const Index M = u.rows();

  ad::Tape& tape = *Ad.tape();
  const bool keep_states = tape.requires_grad(Ad) || tape.requires_grad(Bd) ||
                           tape.requires_grad(Cout) || tape.requires_grad(Dskip) ||
                           tape.requires_grad(U);
  // Rows are visited in scan order, so work on transposed copies to keep
  // each step's reads and writes contiguous.
  const Matrix ut = u.transpose();
  Matrix yt(d, M);
  // states.col(k) holds h after step k, flattened channel-major.
  Matrix states(keep_states ? d * n : 0, keep_states ? M : 0);
  Matrix h = Matrix::Zero(d, n);
  for (Index k = 0; k < M; ++k) {
    const Index r = order[static_cast<std::size_t>(k)];
    for (Index c = 0; c < d; ++c) {
      const double uc = ut(c, r);
      double y = D(c, 0) * uc;
      for (Index s = 0; s < n; ++s) {
        h(c, s) = a(c, s) * h(c, s) + b(c, s) * uc;
        y += C(c, s) * h(c, s);
      }
      yt(c, r) = y;
    }
    if (keep_states) {
      for (Index c = 0; c < d; ++c) {
        for (Index s = 0; s < n; ++s) states(c * n + s, k) = h(c, s);
      }
    }
  }
  Matrix Y = yt.transpose();

  std::vector<Index> ord(order.begin(), order.end());
  const ad::Var ins[] = {Ad, Bd, Cout, Dskip, U};
  return Ad.tape()->push(
      std::move(Y), ins,
      [Ad, Bd, Cout, Dskip, U, ord = std::move(ord),
       states = std::move(states)](const Matrix& g, ad::Tape& t) {
        const Matrix& a = Ad.value();
        const Matrix& b = Bd.value();
        const Matrix& C = Cout.value();
        const Matrix& D = Dskip.value();
        const Matrix& u = U.value();
        const Index d = a.rows();
        const Index n = a.cols();
        const auto M = static_cast<Index>(ord.size());
        Matrix ga = Matrix::Zero(d, n);
        Matrix gb = Matrix::Zero(d, n);
        Matrix gC = Matrix::Zero(d, n);
        Matrix gD = Matrix::Zero(d, 1);
        Matrix gu = Matrix::Zero(M, d);
        Matrix lambda = Matrix::Zero(d, n);  // adjoint of the state
        for (Index k = M - 1; k >= 0; --k) {
          const Index r = ord[static_cast<std::size_t>(k)];
          for (Index c = 0; c < d; ++c) {
            const double gy = g(r, c);
            const double uc = u(r, c);
            double gin = D(c, 0) * gy;
            gD(c, 0) += gy * uc;
            for (Index s = 0; s < n; ++s) {
              const double hk = states(c * n + s, k);
              const double hprev = k > 0 ? states(c * n + s, k - 1) : 0.0;
              gC(c, s) += gy * hk;
              lambda(c, s) = gy * C(c, s) + a(c, s) * lambda(c, s);
              gin += b(c, s) * lambda(c, s);
              gb(c, s) += lambda(c, s) * uc;
              ga(c, s) += lambda(c, s) * hprev;
            }
            gu(r, c) = gin;
          }
        }
        t.accumulate(Ad, ga);
        t.accumulate(Bd, gb);
        t.accumulate(Cout, gC);
        t.accumulate(Dskip, gD);
        t.accumulate(U, gu);
      },
      ad::OpKind::Scan);
}

Matrix scan_causal(const DiscreteStep& step, const SSMChannelParams& p,
                   const Matrix& inputs, std::span<const Index> order) {
  ad::Tape tape;
  return scan_causal(tape.constant(step.Ad), tape.constant(step.Bd),
                     tape.constant(p.Cout.value), tape.constant(p.Dskip.value),
                     tape.constant(inputs), order)
      .value();
}

// ---------------------------------------------------------------------------

DirectionSet DirectionSet::build(std::span<const Direction> tags,
                                 std::span<const GridCoord> coords) {
  if (tags.empty()) throw ValidationError("direction set must not be empty");
  std::vector<Index> forward(coords.size());
  std::iota(forward.begin(), forward.end(), Index{0});
  std::vector<Index> spatial = forward;
  std::stable_sort(spatial.begin(), spatial.end(), [&](Index a, Index b) {
    return coords[static_cast<std::size_t>(a)] < coords[static_cast<std::size_t>(b)];
  });

  DirectionSet set;
  set.tags.assign(tags.begin(), tags.end());
  for (Direction tag : tags) {
    std::vector<Index> order;
    switch (tag) {
      case Direction::SemanticForward: order = forward; break;
      case Direction::SemanticBackward: order.assign(forward.rbegin(), forward.rend()); break;
      case Direction::SpatialForward: order = spatial; break;
      case Direction::SpatialBackward: order.assign(spatial.rbegin(), spatial.rend()); break;
    }
    set.orders.push_back(std::move(order));
  }
  return set;
}

namespace {

ad::Var fuse(const ad::Var& Ad, const ad::Var& Bd, const ad::Var& Cout,
             const ad::Var& Dskip, const ad::Var& U, const DirectionSet& dirs) {
  if (dirs.orders.empty()) throw ValidationError("direction set must not be empty");
  ad::Var sum = scan_causal(Ad, Bd, Cout, Dskip, U, dirs.orders[0]);
  for (std::size_t i = 1; i < dirs.orders.size(); ++i) {
    sum = ad::add(sum, scan_causal(Ad, Bd, Cout, Dskip, U, dirs.orders[i]));
  }
  return ad::scale(sum, 1.0 / static_cast<double>(dirs.orders.size()));
}

}  // namespace

Matrix multi_direction_fuse(const DiscreteStep& step, const SSMChannelParams& p,
                            const Matrix& Cseq, const DirectionSet& directions) {
  ad::Tape tape;
  return fuse(tape.constant(step.Ad), tape.constant(step.Bd),
              tape.constant(p.Cout.value), tape.constant(p.Dskip.value),
              tape.constant(Cseq), directions)
      .value();
}

// ---------------------------------------------------------------------------

BlockVars BlockVars::bind(ad::Tape& tape, BlockParams& params) {
  auto& s = params.ssm;
  return {tape.parameter(params.selector.w_score),
          tape.parameter(s.A0),
          tape.parameter(s.Cout),
          tape.parameter(s.Dskip),
          tape.parameter(s.W_delta),
          tape.parameter(s.b_delta),
          tape.parameter(s.W_B),
          tape.parameter(s.b_B)};
}

BlockVars BlockVars::constants(ad::Tape& tape, const BlockParams& params) {
  const auto& s = params.ssm;
  return {tape.constant(params.selector.w_score.value),
          tape.constant(s.A0.value),
          tape.constant(s.Cout.value),
          tape.constant(s.Dskip.value),
          tape.constant(s.W_delta.value),
          tape.constant(s.b_delta.value),
          tape.constant(s.W_B.value),
          tape.constant(s.b_B.value)};
}

BlockOutput srsm_block(const ad::Var& X, std::span<const GridCoord> coords,
                       const BlockVars& p, const BlockConfig& config,
                       BlockTrace* trace) {
  const Index N = X.rows();
  if (static_cast<Index>(coords.size()) != N) {
    throw ShapeError("srsm_block: coordinate count differs from sequence length");
  }
  if (p.Cout.rows() != X.cols()) {
    throw ShapeError("srsm_block: input width " + std::to_string(X.cols()) +
                     " but block has " + std::to_string(p.Cout.rows()) +
                     " channels");
  }
  BlockOutput out;
  if (!config.srsm_enabled) {
    // Pure skip path: no selection, no conditioning, no scan.
    out.out = ad::layer_norm_rows(ad::add(X, ad::col_scale(X, p.Dskip)),
                                  config.ln_eps);
    out.context_idx.resize(static_cast<std::size_t>(N));
    std::iota(out.context_idx.begin(), out.context_idx.end(), Index{0});
    if (trace) {
      *trace = {};
      trace->context_idx = out.context_idx;
    }
    return out;
  }

  QueryVars qv = select_queries(X, p.w_score, config.K);
  const auto [delta, bprime] = derive_step_params(qv.Q, p);
  const ad::Var Ad = zoh_ad(p.A0, delta);
  const ad::Var Bd = zoh_bd(p.A0, delta, bprime);

  std::vector<GridCoord> ctx_coords;
  ctx_coords.reserve(qv.context_idx.size());
  for (Index i : qv.context_idx) ctx_coords.push_back(coords[static_cast<std::size_t>(i)]);
  const DirectionSet dirs = DirectionSet::build(config.directions, ctx_coords);

  const ad::Var fused = fuse(Ad, Bd, p.Cout, p.Dskip, qv.Cseq, dirs);
  const ad::Var merged = ad::scatter_rows(fused, qv.context_idx, N);
  out.out = ad::layer_norm_rows(ad::add(X, merged), config.ln_eps);
  out.queries = qv.Q;
  out.query_idx = qv.query_idx;
  out.context_idx = qv.context_idx;
  if (trace) {
    trace->query_idx = qv.query_idx;
    trace->context_idx = qv.context_idx;
    trace->conditioned = true;
    trace->Delta = delta.value().col(0);
    trace->Bprime = bprime.value().col(0);
  }
  return out;
}

Matrix srsm_block(const Matrix& X, std::span<const GridCoord> coords,
                  const BlockParams& params, const BlockConfig& config,
                  BlockTrace* trace) {
  ad::Tape tape;
  const BlockVars vars = BlockVars::constants(tape, params);
  return srsm_block(tape.constant(X), coords, vars, config, trace).out.value();
}

}  // namespace semamil::srsm
