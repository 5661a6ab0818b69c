#include "semamil/harness.hpp"

#include "semamil/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace semamil::harness {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ValidationError("train.lr must be >= 0");
  if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
  if (early_stop_patience < 1) throw ValidationError("train.early_stop_patience must be >= 1");
  if (n_folds < 1) throw ValidationError("train.n_folds must be >= 1");
  if (!(lambda_router >= 0)) throw ValidationError("train.lambda_router must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0)) {
    throw ValidationError("train: invalid Adam hyperparameters");
  }
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"epochs", c.epochs},
              {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"seed", c.seed},
              {"lambda_router", c.lambda_router},
              {"early_stop_patience", c.early_stop_patience},
              {"n_folds", c.n_folds},
              {"split_seed", c.split_seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "optimizer") {
        const auto s = v.get<std::string>();
        if (s == "adam") c.optimizer = OptimizerKind::Adam;
        else if (s == "sgd") c.optimizer = OptimizerKind::Sgd;
        else throw ValidationError("train.optimizer must be 'adam' or 'sgd'");
      } else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "lambda_router") c.lambda_router = v.get<double>();
      else if (key == "early_stop_patience") c.early_stop_patience = v.get<int>();
      else if (key == "n_folds") c.n_folds = v.get<int>();
      else if (key == "split_seed") c.split_seed = v.get<std::uint64_t>();
      else throw ValidationError("unknown key 'train." + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

double cross_entropy(const Eigen::VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw ValidationError("cross_entropy: label out of range");
  }
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return lse - logits(label);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

double auc_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks (1-based) over tie groups.
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        pos_rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ValidationError("auc: need both positive and negative samples");
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

double auc_score(const Matrix& scores, std::span<const int> labels) {
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) {
    throw ShapeError("auc_score: row count differs from label count");
  }
  const Index C = scores.cols();
  if (C < 2) throw ValidationError("auc_score: need at least two classes");
  std::vector<double> col(labels.size());
  std::vector<int> bin(labels.size());
  const auto one_vs_rest = [&](Index k) -> std::optional<double> {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores(static_cast<Index>(i), k);
      bin[i] = labels[i] == k ? 1 : 0;
      pos += static_cast<std::size_t>(bin[i]);
    }
    if (pos == 0 || pos == labels.size()) return std::nullopt;
    return auc_binary(col, bin);
  };
  if (C == 2) {
    const auto a = one_vs_rest(1);
    if (!a) throw ValidationError("auc_score: only one class present");
    return *a;
  }
  double sum = 0.0;
  int used = 0;
  for (Index k = 0; k < C; ++k) {
    if (const auto a = one_vs_rest(k)) {
      sum += *a;
      ++used;
    }
  }
  if (used == 0) throw ValidationError("auc_score: no class has both positives and negatives");
  return sum / used;
}

EvalResult evaluate(const Model& model, std::span<const BagTensor> bags) {
  EvalResult r;
  const int C = model.config().n_classes;
  r.probs.resize(static_cast<Index>(bags.size()), C);
  std::vector<int> labels;
  labels.reserve(bags.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const Eigen::VectorXd z = model.logits(bags[i]);
    Index best = 0;
    for (Index k = 1; k < z.size(); ++k) {
      if (z(k) > z(best)) best = k;
    }
    if (best == bags[i].label) ++correct;
    r.probs.row(static_cast<Index>(i)) = softmax(z).transpose();
    labels.push_back(bags[i].label);
  }
  r.acc = bags.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(bags.size());
  try {
    r.auc = auc_score(r.probs, labels);
  } catch (const ValidationError&) {
    r.auc = std::numeric_limits<double>::quiet_NaN();
  }
  return r;
}

// ---------------------------------------------------------------------------

void Optimizer::step(std::span<ad::Parameter* const> params) {
  if (m_.empty()) {
    for (const ad::Parameter* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw Error("optimizer: parameter list changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Parameter& p = *params[i];
    if (p.grad.size() == 0) p.zero_grad();
    if (p.trainable) {
      if (cfg_.optimizer == OptimizerKind::Sgd) {
        p.value -= cfg_.lr * p.grad;
      } else {
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
        const auto mhat = m_[i].array() / bc1;
        const auto vhat = v_[i].array() / bc2;
        p.value.array() -= cfg_.lr * mhat / (vhat.sqrt() + cfg_.adam_eps);
      }
    }
    p.zero_grad();
  }
}

ad::Var bag_loss(Model& model, ad::Tape& tape, const BagTensor& bag,
                 double lambda_router, std::optional<std::uint64_t> noise_seed) {
  model::ForwardOptions opts;
  opts.noise_seed = noise_seed;
  const model::ForwardResult r = model.forward(tape, bag, opts);
  ad::Var loss = ad::cross_entropy(r.logits, bag.label);
  if (r.aux.valid() && lambda_router > 0) {
    loss = ad::add(loss, ad::scale(r.aux, lambda_router));
  }
  return loss;
}

namespace {

double selection_score(const EvalResult& e) {
  return std::isnan(e.auc) ? e.acc : e.auc;
}

}  // namespace

TrainResult train_fold(Model model, std::span<const BagTensor> train,
                       std::span<const BagTensor> val, const TrainConfig& cfg,
                       std::uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw ValidationError("train_fold: empty training set");
  const bool gumbel = model.config().kind == model::ModelKind::SemaMIL &&
                      model.config().has_router() &&
                      model.config().assign_mode == reorder::AssignMode::Kind::Gumbel;
  Optimizer opt(cfg);
  const std::vector<ad::Parameter*> params = model.parameters();
  for (ad::Parameter* p : params) p->zero_grad();

  TrainResult result;
  result.model = model;
  result.best_val_score = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const BagTensor& bag = train[order[step]];
      std::optional<std::uint64_t> noise;
      if (gumbel) noise = seed ^ (static_cast<std::uint64_t>(epoch) << 32) ^ step;
      ad::Tape tape;
      const ad::Var loss = bag_loss(model, tape, bag, cfg.lambda_router, noise);
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) +
                              " on bag " + bag.bag_id);
      }
      total += value;
      tape.backward(loss);
      opt.step(params);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(order.size());
    double score = 0.0;
    if (!val.empty()) {
      const EvalResult ev = evaluate(model, val);
      rec.val_auc = ev.auc;
      rec.val_acc = ev.acc;
      score = selection_score(ev);
    } else {
      score = -rec.train_loss;
    }
    result.history.push_back(rec);

    if (score > result.best_val_score) {
      result.best_val_score = score;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

std::size_t Metrics::n_ok() const {
  return static_cast<std::size_t>(
      std::count_if(per_fold.begin(), per_fold.end(), [](const FoldResult& f) { return f.ok; }));
}

Metrics summarize(std::vector<FoldResult> folds) {
  Metrics m;
  m.per_fold = std::move(folds);
  std::vector<double> aucs;
  std::vector<double> accs;
  for (const FoldResult& f : m.per_fold) {
    if (!f.ok) continue;
    aucs.push_back(f.auc);
    accs.push_back(f.acc);
  }
  const auto mean_std = [](const std::vector<double>& v) -> std::pair<double, double> {
    if (v.empty()) {
      return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    }
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
  };
  std::tie(m.auc_mean, m.auc_std) = mean_std(aucs);
  std::tie(m.acc_mean, m.acc_std) = mean_std(accs);
  return m;
}

std::uint64_t fold_train_seed(const TrainConfig& cfg, int fold) {
  return cfg.seed * 1000003ull + static_cast<std::uint64_t>(fold) * 7919ull + 1ull;
}

std::vector<std::size_t> indices_of(std::span<const BagTensor> bags,
                                    std::span<const std::string> ids) {
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < bags.size(); ++i) where.emplace(bags[i].bag_id, i);
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const std::string& id : ids) {
    const auto it = where.find(id);
    if (it == where.end()) throw ValidationError("unknown bag id '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

namespace {

std::vector<BagTensor> pick(std::span<const BagTensor> bags, std::span<const std::string> ids) {
  std::vector<BagTensor> out;
  for (std::size_t i : indices_of(bags, ids)) out.push_back(bags[i]);
  return out;
}

FoldResult run_fold(std::span<const BagTensor> bags, const ModelConfig& mcfg,
                    const TrainConfig& tcfg, const bagdata::Fold& fold, int index,
                    const ProtocolOptions& options) {
  FoldResult r;
  r.fold = index;
  try {
    const std::vector<BagTensor> train = pick(bags, fold.train);
    const std::vector<BagTensor> val = pick(bags, fold.val);
    const std::vector<BagTensor> test = pick(bags, fold.test);
    const std::uint64_t seed = fold_train_seed(tcfg, index);
    TrainResult tr = train_fold(Model::create(mcfg, seed), train, val, tcfg, seed);
    const EvalResult ev = evaluate(tr.model, test);
    r.auc = ev.auc;
    r.acc = ev.acc;
    r.best_epoch = tr.best_epoch;
    r.epochs_run = static_cast<int>(tr.history.size());
    if (std::isnan(r.auc)) {
      r.ok = false;
      r.error = "test AUC undefined (single-class test set)";
    }
    if (options.on_fold_model) options.on_fold_model(index, tr.model);
  } catch (const DivergenceError& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

}  // namespace

Metrics run_protocol(std::span<const BagTensor> bags, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, const bagdata::SplitPlan& plan,
                     const ProtocolOptions& options) {
  mcfg.validate();
  tcfg.validate();
  const int n = static_cast<int>(plan.folds.size());
  std::vector<FoldResult> results(static_cast<std::size_t>(n));
  const int jobs = std::max(1, std::min(options.jobs, n));
  if (jobs == 1) {
    for (int f = 0; f < n; ++f) {
      results[static_cast<std::size_t>(f)] =
          run_fold(bags, mcfg, tcfg, plan.folds[static_cast<std::size_t>(f)], f, options);
    }
  } else {
    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (int f = next++; f < n; f = next++) {
          try {
            results[static_cast<std::size_t>(f)] =
                run_fold(bags, mcfg, tcfg, plan.folds[static_cast<std::size_t>(f)], f, options);
          } catch (...) {
            const std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  return summarize(std::move(results));
}

std::vector<AblationRow> run_ablation(std::span<const BagTensor> bags,
                                      const ModelConfig& mcfg, const TrainConfig& tcfg,
                                      const bagdata::SplitPlan& plan,
                                      const ProtocolOptions& options) {
  std::vector<AblationRow> rows;
  for (bool sr : {false, true}) {
    for (bool srsm : {false, true}) {
      ModelConfig cfg = mcfg;
      cfg.kind = model::ModelKind::SemaMIL;
      cfg.sr_enabled = sr;
      cfg.srsm_enabled = srsm;
      rows.push_back({sr, srsm, run_protocol(bags, cfg, tcfg, plan, options)});
    }
  }
  // Table order: (off,off), (off,on), (on,off), (on,on).
  return rows;
}

json metrics_to_json(const Metrics& m) {
  json folds = json::array();
  for (const FoldResult& f : m.per_fold) {
    json j{{"fold", f.fold},
           {"status", f.ok ? "ok" : "failed"},
           {"auc", f.ok ? json(f.auc) : json(nullptr)},
           {"acc", f.ok ? json(f.acc) : json(nullptr)},
           {"best_epoch", f.best_epoch},
           {"epochs_run", f.epochs_run}};
    if (!f.ok) j["error"] = f.error;
    folds.push_back(std::move(j));
  }
  const auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  return json{{"per_fold", folds},
              {"summary",
               {{"n_folds", m.per_fold.size()},
                {"n_ok", m.n_ok()},
                {"auc_mean", num(m.auc_mean)},
                {"auc_std", num(m.auc_std)},
                {"acc_mean", num(m.acc_mean)},
                {"acc_std", num(m.acc_std)}}}};
}

namespace {

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

}  // namespace

std::string metrics_to_csv(const Metrics& m) {
  std::ostringstream os;
  os << "fold,auc,acc\n";
  for (const FoldResult& f : m.per_fold) {
    if (f.ok) {
      os << f.fold << "," << fmt(f.auc) << "," << fmt(f.acc) << "\n";
    } else {
      os << f.fold << ",,\n";
    }
  }
  os << "mean," << fmt(m.auc_mean) << "," << fmt(m.acc_mean) << "\n";
  os << "std," << fmt(m.auc_std) << "," << fmt(m.acc_std) << "\n";
  return os.str();
}

std::string ablation_to_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "sr,srsm,auc_mean,auc_std,acc_mean,acc_std\n";
  for (const AblationRow& r : rows) {
    os << (r.sr ? 1 : 0) << "," << (r.srsm ? 1 : 0) << "," << fmt(r.metrics.auc_mean) << ","
       << fmt(r.metrics.auc_std) << "," << fmt(r.metrics.acc_mean) << ","
       << fmt(r.metrics.acc_std) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------

double relative_error(const Matrix& analytic, const Matrix& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols()) {
    throw ShapeError("relative_error: shape mismatch");
  }
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-6});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

std::vector<TensorCheck> check_gradients(std::span<ad::Parameter* const> params,
                                         const std::function<ad::Var(ad::Tape&)>& loss,
                                         double eps, std::optional<ad::OpKind> fault) {
  for (ad::Parameter* p : params) p->zero_grad();
  {
    ad::Tape tape;
    if (fault) tape.inject_backward_fault(*fault, 1.25);
    const ad::Var l = loss(tape);
    tape.backward(l);
  }
  std::vector<TensorCheck> out;
  for (ad::Parameter* p : params) {
    const Matrix analytic = p->grad;
    Matrix numeric(p->value.rows(), p->value.cols());
    for (Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + eps;
      double plus = 0.0;
      {
        ad::Tape tape;
        plus = loss(tape).scalar();
      }
      x = saved - eps;
      double minus = 0.0;
      {
        ad::Tape tape;
        minus = loss(tape).scalar();
      }
      x = saved;
      numeric.data()[i] = (plus - minus) / (2.0 * eps);
    }
    out.push_back({p->name, p->value.size(), analytic.cwiseAbs().maxCoeff(),
                   relative_error(analytic, numeric)});
  }
  for (ad::Parameter* p : params) p->zero_grad();
  return out;
}

ModelConfig tiny_gradcheck_config() {
  ModelConfig c;
  c.D_in = 5;
  c.d = 4;
  c.hidden = 4;
  c.n_clusters = 3;
  c.K = 2;
  c.n_state = 3;
  c.n_layers = 2;
  c.n_classes = 3;
  return c;
}

bool GradcheckReport::passed() const {
  if (tensors.empty()) return false;
  return std::all_of(tensors.begin(), tensors.end(),
                     [&](const TensorCheck& t) { return t.max_rel_err < tolerance; });
}

namespace {

BagTensor tiny_bag(const ModelConfig& c, std::uint64_t seed) {
  const int N = 8;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  BagTensor bag;
  bag.bag_id = "gradcheck";
  bag.label = static_cast<int>(seed % static_cast<std::uint64_t>(c.n_classes));
  bag.X.resize(N, c.D_in);
  for (Index i = 0; i < bag.X.rows(); ++i) {
    for (Index j = 0; j < bag.X.cols(); ++j) bag.X(i, j) = normal(rng);
  }
  std::vector<int> cells(16);
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  for (int i = 0; i < N; ++i) {
    bag.coords.push_back({static_cast<std::uint32_t>(cells[static_cast<std::size_t>(i)] / 4),
                          static_cast<std::uint32_t>(cells[static_cast<std::size_t>(i)] % 4)});
  }
  return bag;
}

std::vector<std::vector<Index>> signature(const model::ForwardTrace& t) {
  std::vector<std::vector<Index>> sig;
  sig.emplace_back(t.labels.begin(), t.labels.end());
  for (const auto& b : t.blocks) sig.push_back(b.query_idx);
  return sig;
}

}  // namespace

GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed,
                                double tolerance, std::optional<ad::OpKind> fault) {
  config.validate();
  constexpr double kLambda = 0.1;
  for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
    const std::uint64_t s = seed + attempt;
    Model m = Model::create(config, s);
    // Non-zero head bias and skip terms so every path carries gradient.
    const BagTensor bag = tiny_bag(config, s ^ 0x9e3779b97f4a7c15ull);
    const auto base = signature([&] {
      model::ForwardTrace t;
      m.logits(bag, &t);
      return t;
    }());
    bool stable = true;
    const auto loss = [&](ad::Tape& tape) {
      model::ForwardResult r = m.forward(tape, bag);
      if (signature(r.trace) != base) stable = false;
      ad::Var l = ad::cross_entropy(r.logits, bag.label);
      if (r.aux.valid()) l = ad::add(l, ad::scale(r.aux, kLambda));
      return l;
    };
    const std::vector<ad::Parameter*> params = m.parameters();
    GradcheckReport report;
    report.tolerance = tolerance;
    report.seed_used = s;
    report.tensors = check_gradients(params, loss, 1e-5, fault);
    if (stable) return report;
  }
  throw ValidationError("gradcheck: could not find an instance with stable discrete choices");
}

}  // namespace semamil::harness
