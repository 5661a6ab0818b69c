#include "semamil/model.hpp"

#include "semamil/error.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <type_traits>

namespace semamil::model {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::SemaMIL: return "semamil";
    case ModelKind::MeanPool: return "meanpool";
    case ModelKind::MaxPool: return "maxpool";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (ModelKind k : {ModelKind::SemaMIL, ModelKind::MeanPool, ModelKind::MaxPool}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown model kind '" + s + "'");
}

void ModelConfig::validate() const {
  if (D_in < 1 || d < 1 || n_classes < 1) {
    throw ValidationError("model: D_in, d and n_classes must be positive");
  }
  if (kind != ModelKind::SemaMIL) return;
  if (hidden < 1 || K < 1 || n_state < 1 || n_layers < 0) {
    throw ValidationError("model: hidden, K, n_state must be positive, n_layers >= 0");
  }
  if (sr_enabled && n_clusters < 2) {
    throw ValidationError("model: n_clusters must be >= 2");
  }
  if (!(gumbel_tau > 0)) throw ValidationError("model: gumbel_tau must be > 0");
  if (directions.empty()) throw ValidationError("model: directions must not be empty");
}

json to_json(const ModelConfig& c) {
  json dirs = json::array();
  for (srsm::Direction d : c.directions) dirs.push_back(srsm::to_string(d));
  return json{{"kind", to_string(c.kind)},
              {"D_in", c.D_in},
              {"d", c.d},
              {"hidden", c.hidden},
              {"n_clusters", c.n_clusters},
              {"K", c.K},
              {"n_state", c.n_state},
              {"n_layers", c.n_layers},
              {"n_classes", c.n_classes},
              {"assign_mode",
               c.assign_mode == reorder::AssignMode::Kind::Hard ? "hard" : "gumbel"},
              {"gumbel_tau", c.gumbel_tau},
              {"directions", dirs},
              {"sr_enabled", c.sr_enabled},
              {"srsm_enabled", c.srsm_enabled}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "kind") c.kind = model_kind_from_string(v.get<std::string>());
      else if (key == "D_in") c.D_in = v.get<int>();
      else if (key == "d") c.d = v.get<int>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "n_clusters") c.n_clusters = v.get<int>();
      else if (key == "K") c.K = v.get<int>();
      else if (key == "n_state") c.n_state = v.get<int>();
      else if (key == "n_layers") c.n_layers = v.get<int>();
      else if (key == "n_classes") c.n_classes = v.get<int>();
      else if (key == "assign_mode") {
        const auto s = v.get<std::string>();
        if (s == "hard") c.assign_mode = reorder::AssignMode::Kind::Hard;
        else if (s == "gumbel") c.assign_mode = reorder::AssignMode::Kind::Gumbel;
        else throw ValidationError("model.assign_mode must be 'hard' or 'gumbel'");
      } else if (key == "gumbel_tau") c.gumbel_tau = v.get<double>();
      else if (key == "directions") {
        c.directions.clear();
        for (const json& s : v) c.directions.push_back(srsm::direction_from_string(s.get<std::string>()));
      } else if (key == "sr_enabled") c.sr_enabled = v.get<bool>();
      else if (key == "srsm_enabled") c.srsm_enabled = v.get<bool>();
      else throw ValidationError("unknown key 'model." + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  return c;
}

BagTensor to_tensor(const bagdata::Bag& bag) {
  return {bag.bag_id, bag.label, bag.X.cast<double>(), bag.coords};
}

std::vector<BagTensor> to_tensors(const bagdata::Dataset& dataset) {
  std::vector<BagTensor> out;
  out.reserve(dataset.bags.size());
  for (const auto& b : dataset.bags) out.push_back(to_tensor(b));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Matrix uniform(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  // Fill row by row so the draw order does not depend on storage order.
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  }
  return m;
}

Matrix fixed_A0(int n_state) {
  Matrix a(n_state, 1);
  for (int s = 0; s < n_state; ++s) a(s, 0) = -(s + 1.0);
  return a;
}


}  // namespace

Model Model::zeros(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  const int d = config.d;
  m.Wproj_.value = Matrix::Zero(d, config.D_in);
  m.Whead_.value = Matrix::Zero(config.n_classes, d);
  m.bhead_.value = Matrix::Zero(config.n_classes, 1);
  if (config.kind == ModelKind::SemaMIL) {
    if (config.has_router()) {
      m.router_.W1.value = Matrix::Zero(config.hidden, d);
      m.router_.W2.value = Matrix::Zero(config.n_clusters, config.hidden);
    }
    const int n = config.n_state;
    m.blocks_.resize(static_cast<std::size_t>(config.n_layers));
    for (std::size_t i = 0; i < m.blocks_.size(); ++i) {
      auto& b = m.blocks_[i];
      b.set_prefix("blocks." + std::to_string(i) + ".");
      b.selector.w_score.value = Matrix::Zero(d, 1);
      b.ssm.A0.value = fixed_A0(n);
      b.ssm.Cout.value = Matrix::Zero(d, n);
      b.ssm.Dskip.value = Matrix::Zero(d, 1);
      b.ssm.W_delta.value = Matrix::Zero(d, d);
      b.ssm.b_delta.value = Matrix::Zero(d, 1);
      b.ssm.W_B.value = Matrix::Zero(n, d);
      b.ssm.b_B.value = Matrix::Zero(n, 1);
    }
    m.Wpool_.value = Matrix::Zero(d, 2 * d);
  }
  for (ad::Parameter* p : m.parameters()) p->zero_grad();
  return m;
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  Model m = zeros(config);
  std::mt19937_64 rng(seed);
  const int d = config.d;
  const auto inv_sqrt = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  m.Wproj_.value = uniform(d, config.D_in, inv_sqrt(config.D_in), rng);
  if (config.kind == ModelKind::SemaMIL) {
    if (config.has_router()) {
      m.router_.W1.value = uniform(config.hidden, d, inv_sqrt(d), rng);
      m.router_.W2.value = uniform(config.n_clusters, config.hidden, inv_sqrt(config.hidden), rng);
    }
    const int n = config.n_state;
    std::uniform_real_distribution<double> log_delta(std::log(0.05), std::log(0.5));
    for (auto& b : m.blocks_) {
      b.selector.w_score.value = uniform(d, 1, inv_sqrt(d), rng);
      b.ssm.Cout.value = uniform(d, n, inv_sqrt(n), rng);
      b.ssm.Dskip.value = Matrix::Ones(d, 1);
      b.ssm.W_delta.value = uniform(d, d, 0.1 * inv_sqrt(d), rng);
      for (int c = 0; c < d; ++c) {
        // softplus^{-1}(delta0) so the initial step sizes spread over a decade.
        const double delta0 = std::exp(log_delta(rng));
        b.ssm.b_delta.value(c, 0) = std::log(std::expm1(delta0));
      }
      b.ssm.W_B.value = uniform(n, d, 0.1 * inv_sqrt(d), rng);
      b.ssm.b_B.value = Matrix::Constant(n, 1, 0.1);
    }
    m.Wpool_.value = uniform(d, 2 * d, inv_sqrt(2 * d), rng);
  }
  m.Whead_.value = uniform(config.n_classes, d, inv_sqrt(d), rng);
  return m;
}

std::vector<ad::Parameter*> Model::parameters() {
  std::vector<ad::Parameter*> out{&Wproj_};
  if (config_.kind == ModelKind::SemaMIL) {
    if (config_.has_router()) {
      out.push_back(&router_.W1);
      out.push_back(&router_.W2);
    }
    for (auto& b : blocks_) {
      for (ad::Parameter* p : b.parameters()) out.push_back(p);
    }
    out.push_back(&Wpool_);
  }
  out.push_back(&Whead_);
  out.push_back(&bhead_);
  return out;
}

std::vector<const ad::Parameter*> Model::parameters() const {
  std::vector<const ad::Parameter*> out;
  for (ad::Parameter* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

ad::Parameter& Model::parameter(const std::string& name) {
  for (ad::Parameter* p : parameters()) {
    if (p->name == name) return *p;
  }
  throw ValidationError("no parameter named '" + name + "'");
}

std::int64_t Model::stored_scalars() const {
  std::int64_t n = 0;
  for (const ad::Parameter* p : parameters()) n += p->value.size();
  return n;
}

template <typename Self>
ForwardResult Model::forward_impl(Self& self, ad::Tape& tape, const BagTensor& bag,
                                  const ForwardOptions& options) {
  const auto bind = [&tape](auto& p) -> ad::Var {
    if constexpr (std::is_const_v<std::remove_reference_t<decltype(p)>>) {
      return tape.constant(p.value);
    } else {
      return tape.parameter(p);
    }
  };
  const ModelConfig& cfg = self.config_;
  if (bag.X.cols() != cfg.D_in) {
    throw ShapeError("bag " + bag.bag_id + " has width " + std::to_string(bag.X.cols()) +
                     " but the model expects D_in=" + std::to_string(cfg.D_in));
  }
  if (static_cast<Index>(bag.coords.size()) != bag.X.rows()) {
    throw ShapeError("bag " + bag.bag_id + ": coordinate count differs from L");
  }
  const Index L = bag.X.rows();
  ForwardResult res;
  const ad::Var X = tape.constant(bag.X);
  const ad::Var Wproj = bind(self.Wproj_);
  const ad::Var Whead = bind(self.Whead_);
  const ad::Var bhead = bind(self.bhead_);

  if (cfg.kind != ModelKind::SemaMIL) {
    const ad::Var H = ad::relu(ad::matmul_nt(X, Wproj));
    const ad::Var pooled =
        cfg.kind == ModelKind::MeanPool ? ad::mean_over_rows(H) : ad::max_over_rows(H);
    res.logits = ad::add(ad::matmul(Whead, pooled), bhead);
    res.trace.perm = reorder::Permutation::identity(static_cast<std::size_t>(L));
    return res;
  }

  ad::Var seq = ad::matmul_nt(X, Wproj);
  reorder::Permutation perm = reorder::Permutation::identity(static_cast<std::size_t>(L));
  if (cfg.has_router()) {
    const ad::Var Z = reorder::router_forward(bind(self.router_.W1), bind(self.router_.W2), seq);
    reorder::AssignMode mode;
    mode.kind = cfg.assign_mode;
    mode.tau = cfg.gumbel_tau;
    mode.noise_seed = options.noise_seed;
    std::vector<int> labels;
    res.P = reorder::assign(Z, mode, labels);
    res.aux = reorder::router_aux_loss(res.P);
    perm = reorder::build_permutation(labels);
    if (cfg.assign_mode == reorder::AssignMode::Kind::Gumbel) {
      seq = ad::row_scale(seq, reorder::straight_through_gate(res.P, labels));
    }
    seq = reorder::apply_permutation(seq, perm.pi);
    res.trace.labels = std::move(labels);
  }
  const std::vector<bagdata::GridCoord> coords =
      reorder::permute<bagdata::GridCoord>(bag.coords, perm.pi);

  srsm::BlockConfig bcfg;
  bcfg.K = cfg.K;
  bcfg.srsm_enabled = cfg.srsm_enabled;
  bcfg.directions = cfg.directions;

  ad::Var queries;
  std::vector<Index> context(static_cast<std::size_t>(L));
  for (Index i = 0; i < L; ++i) context[static_cast<std::size_t>(i)] = i;
  for (auto& block : self.blocks_) {
    srsm::BlockVars vars{bind(block.selector.w_score), bind(block.ssm.A0),
                         bind(block.ssm.Cout),         bind(block.ssm.Dskip),
                         bind(block.ssm.W_delta),      bind(block.ssm.b_delta),
                         bind(block.ssm.W_B),          bind(block.ssm.b_B)};
    srsm::BlockTrace bt;
    srsm::BlockOutput out = srsm::srsm_block(seq, coords, vars, bcfg, &bt);
    seq = out.out;
    queries = out.queries;
    context = out.context_idx;
    res.trace.blocks.push_back(std::move(bt));
  }

  const ad::Var restored = reorder::restore_order(seq, perm);
  // Context rows of the last block, as positions in the original order.
  std::vector<Index> context_orig;
  context_orig.reserve(context.size());
  for (Index j : context) context_orig.push_back(perm.pi[static_cast<std::size_t>(j)]);
  const ad::Var ctx_mean = ad::mean_over_rows(ad::gather_rows(restored, context_orig));
  const ad::Var q_mean = queries.valid() ? ad::mean_over_rows(queries)
                                         : tape.constant(Matrix::Zero(cfg.d, 1));
  const ad::Var v = ad::matmul(bind(self.Wpool_), ad::concat_rows(ctx_mean, q_mean));
  res.logits = ad::add(ad::matmul(Whead, v), bhead);
  res.trace.perm = std::move(perm);
  return res;
}

ForwardResult Model::forward(ad::Tape& tape, const BagTensor& bag,
                             const ForwardOptions& options) {
  return forward_impl(*this, tape, bag, options);
}

ForwardResult Model::forward_const(ad::Tape& tape, const BagTensor& bag,
                                   const ForwardOptions& options) const {
  return forward_impl(*this, tape, bag, options);
}

Eigen::VectorXd Model::logits(const BagTensor& bag, ForwardTrace* trace) const {
  ad::Tape tape;
  ForwardResult r = forward_const(tape, bag);
  if (trace) *trace = std::move(r.trace);
  return r.logits.value().col(0);
}

// ---------------------------------------------------------------------------

ParamBreakdown param_breakdown(const ModelConfig& c) {
  const std::int64_t d = c.d;
  const std::int64_t n = c.n_state;
  ParamBreakdown b;
  b.projection = d * c.D_in;
  b.head = static_cast<std::int64_t>(c.n_classes) * d + c.n_classes;
  if (c.kind != ModelKind::SemaMIL) return b;
  if (c.has_router()) {
    b.router = static_cast<std::int64_t>(c.hidden) * d +
               static_cast<std::int64_t>(c.n_clusters) * c.hidden;
  }
  // w_score + A0 + Cout + Dskip + W_delta + b_delta + W_B + b_B
  b.per_block = d + n + d * n + d + d * d + d + n * d + n;
  b.blocks = b.per_block * c.n_layers;
  b.pooling = d * 2 * d;
  return b;
}

std::int64_t count_params(const ModelConfig& config) {
  return param_breakdown(config).total();
}

FlopBreakdown flop_breakdown(const ModelConfig& c, std::int64_t L) {
  const std::int64_t d = c.d;
  const std::int64_t n = c.n_state;
  const std::int64_t classes = c.n_classes;
  FlopBreakdown f;
  f.projection = 2 * L * c.D_in * d;
  f.head = 2 * classes * d + classes;
  if (c.kind != ModelKind::SemaMIL) {
    f.pooling = L * d /* activation */ + L * d /* pooling */;
    return f;
  }
  if (c.has_router()) {
    f.router = 2 * L * (d * c.hidden + static_cast<std::int64_t>(c.hidden) * c.n_clusters);
  }
  const std::int64_t N = L;
  if (c.srsm_enabled) {
    const std::int64_t M = N - c.K;
    const auto dirs = static_cast<std::int64_t>(c.directions.size());
    const std::int64_t selector = 2 * N * d;
    const std::int64_t conditioning = 2 * (d * d + d * n);
    const std::int64_t discretization = 6 * d * n;
    // Per channel and step: Ad*h (n MACs), Bd*u (n MACs), Cout*h (n MACs),
    // Dskip*u (1 MAC).
    const std::int64_t scans = dirs * M * d * 2 * (3 * n + 1);
    const std::int64_t fusion = dirs * M * d;
    const std::int64_t residual = N * d;
    const std::int64_t norm = 5 * N * d;
    f.per_block = selector + conditioning + discretization + scans + fusion + residual + norm;
  } else {
    // skip scaling + residual + norm
    f.per_block = N * d + N * d + 5 * N * d;
  }
  f.blocks = f.per_block * c.n_layers;
  f.pooling = N * d + 2 * d * (2 * d);
  return f;
}

std::int64_t count_flops(const ModelConfig& config, std::int64_t L) {
  return flop_breakdown(config, L).total();
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& buf, std::string where)
      : buf_(buf), where_(std::move(where)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IoError(where_ + ": truncated checkpoint");
  }
  const std::vector<unsigned char>& buf_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const fs::path& path) {
  std::vector<unsigned char> buf = {'S', 'E', 'M', 'M'};
  put_u32(buf, kCheckpointVersion);
  const std::string cfg = to_json(model.config()).dump();
  put_u32(buf, static_cast<std::uint32_t>(cfg.size()));
  buf.insert(buf.end(), cfg.begin(), cfg.end());
  for (const ad::Parameter* p : model.parameters()) {
    put_u32(buf, static_cast<std::uint32_t>(p->value.rows()));
    put_u32(buf, static_cast<std::uint32_t>(p->value.cols()));
    for (Index i = 0; i < p->value.rows(); ++i) {
      for (Index j = 0; j < p->value.cols(); ++j) {
        put_u64(buf, std::bit_cast<std::uint64_t>(p->value(i, j)));
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Model load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
  const std::string where = path.string();
  Reader r(buf, where);
  if (r.bytes(4) != "SEMM") throw IoError(where + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError(where + ": checkpoint version mismatch (got " + std::to_string(version) + ")");
  }
  const std::uint32_t len = r.u32();
  ModelConfig config;
  try {
    config = model_config_from_json(json::parse(r.bytes(len)));
  } catch (const json::exception& e) {
    throw IoError(where + ": malformed config: " + e.what());
  } catch (const ValidationError& e) {
    throw IoError(where + ": " + e.what());
  }
  Model model = Model::zeros(config);
  for (ad::Parameter* p : model.parameters()) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw IoError(where + ": parameter " + p->name + " stored as " +
                    std::to_string(rows) + "x" + std::to_string(cols) +
                    " but config implies " + std::to_string(p->value.rows()) + "x" +
                    std::to_string(p->value.cols()));
    }
    for (Index i = 0; i < p->value.rows(); ++i) {
      for (Index j = 0; j < p->value.cols(); ++j) p->value(i, j) = r.f64();
    }
    if (!p->value.allFinite()) throw IoError(where + ": non-finite parameter " + p->name);
  }
  if (!r.done()) throw IoError(where + ": trailing bytes in checkpoint");
  return model;
}

}  // namespace semamil::model
