#include "semamil/config.hpp"
#include "semamil/error.hpp"
#include "semamil/harness.hpp"

#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

#include <random>

using namespace semamil;
using namespace semamil::harness;
using namespace testsupport;

namespace {

std::vector<BagTensor> toy_bags(int n, std::uint64_t seed, int L = 24) {
  bagdata::SynthConfig c;
  c.n_bags = n;
  c.L_min = L;
  c.L_max = L + 8;
  c.D = 8;
  c.seed = seed;
  return model::to_tensors(bagdata::generate_synthetic(c));
}

ModelConfig toy_model() {
  ModelConfig c;
  c.D_in = 8;
  c.d = 6;
  c.hidden = 8;
  c.n_clusters = 4;
  c.K = 4;
  c.n_state = 2;
  c.n_layers = 1;
  return c;
}

}  // namespace

TEST_CASE("cross entropy examples") {
  Eigen::VectorXd z(2);
  z << 0, 0;
  CHECK(cross_entropy(z, 0) == doctest::Approx(std::log(2.0)));
  z << 10, -10;
  CHECK(cross_entropy(z, 0) == doctest::Approx(2.0611536e-9).epsilon(1e-6));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 5);
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd r(3);
    r << n(rng), n(rng), n(rng);
    CHECK(cross_entropy(r, i % 3) >= 0.0);
  }
  z << 1000, -1000;
  CHECK(std::isfinite(cross_entropy(z, 1)));
  CHECK_THROWS_AS(cross_entropy(z, 2), ValidationError);
}

TEST_CASE("AUC examples") {
  CHECK(auc_binary(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(auc_binary(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{0, 1, 0, 1}) == 0.5);
  CHECK(auc_binary(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == 0.75);
  CHECK_THROWS_AS(auc_binary(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), ValidationError);
}

TEST_CASE("AUC equals the pairwise oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 200)(rng);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    const int levels = std::uniform_int_distribution<int>(1, 10)(rng);
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = std::uniform_int_distribution<int>(0, levels)(rng) / 7.0;
      y[static_cast<std::size_t>(i)] = std::uniform_int_distribution<int>(0, 1)(rng);
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(std::abs(auc_binary(s, y) - oracles::auc_pairwise(s, y)) <= 1e-12);
  }
}

TEST_CASE("multiclass AUC is the macro one-vs-rest mean") {
  Matrix p(6, 3);
  p << 0.8, 0.1, 0.1,  //
      0.2, 0.7, 0.1,   //
      0.1, 0.2, 0.7,   //
      0.5, 0.4, 0.1,   //
      0.3, 0.3, 0.4,   //
      0.1, 0.8, 0.1;
  const std::vector<int> y{0, 1, 2, 0, 2, 1};
  double expected = 0.0;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> s;
    std::vector<int> b;
    for (int i = 0; i < 6; ++i) {
      s.push_back(p(i, k));
      b.push_back(y[static_cast<std::size_t>(i)] == k ? 1 : 0);
    }
    expected += oracles::auc_pairwise(s, b) / 3.0;
  }
  CHECK(auc_score(p, y) == doctest::Approx(expected).epsilon(1e-14));

  // A class without positives is skipped.
  const std::vector<int> y2{0, 1, 0, 0, 1, 1};
  double two = 0.0;
  for (int k = 0; k < 2; ++k) {
    std::vector<double> s;
    std::vector<int> b;
    for (int i = 0; i < 6; ++i) {
      s.push_back(p(i, k));
      b.push_back(y2[static_cast<std::size_t>(i)] == k ? 1 : 0);
    }
    two += oracles::auc_pairwise(s, b) / 2.0;
  }
  CHECK(auc_score(p, y2) == doctest::Approx(two).epsilon(1e-14));
  CHECK_THROWS_AS(auc_score(p, std::vector<int>(6, 1)), ValidationError);

  // Binary uses the positive-class column.
  Matrix q(4, 2);
  q << 0.9, 0.1, 0.6, 0.4, 0.65, 0.35, 0.2, 0.8;
  CHECK(auc_score(q, std::vector<int>{0, 0, 1, 1}) == 0.75);
}

TEST_CASE("evaluate: zero head and oracle logits") {
  const std::vector<BagTensor> bags = toy_bags(20, 3);
  Model zero = Model::create(toy_model(), 4);
  zero.parameter("Whead").value.setZero();
  zero.parameter("bhead").value.setZero();
  const EvalResult r = evaluate(zero, bags);
  CHECK(r.auc == 0.5);
  CHECK(r.acc == 0.5);  // ties go to class 0, labels alternate

  // Oracle: head reads a feature that equals the label.
  ModelConfig mc;
  mc.kind = model::ModelKind::MeanPool;
  mc.D_in = 1;
  mc.d = 1;
  Model oracle = Model::zeros(mc);
  oracle.parameter("Wproj").value(0, 0) = 1.0;
  oracle.parameter("Whead").value(1, 0) = 10.0;
  oracle.parameter("bhead").value(0, 0) = 5.0;
  std::vector<BagTensor> lab;
  for (int i = 0; i < 10; ++i) {
    BagTensor b;
    b.bag_id = std::to_string(i);
    b.label = i % 2;
    b.X = Matrix::Constant(3, 1, b.label);
    b.coords = {{0, 0}, {0, 1}, {0, 2}};
    lab.push_back(b);
  }
  const EvalResult o = evaluate(oracle, lab);
  CHECK(o.acc == 1.0);
  CHECK(o.auc == 1.0);
  const EvalResult o2 = evaluate(oracle, lab);
  CHECK(o2.probs == o.probs);
}

TEST_CASE("optimizer: lr = 0 leaves parameters unchanged and A0 is frozen") {
  const std::vector<BagTensor> bags = toy_bags(16, 5);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 2;
  const Model init = Model::create(toy_model(), 6);
  const TrainResult r = train_fold(init, std::span(bags).subspan(0, 12), std::span(bags).subspan(12), cfg, 7);
  Model a = init;
  Model b = r.model;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i]->value == b.parameters()[i]->value);
  }

  cfg.lr = 1e-2;
  const TrainResult moved = train_fold(init, std::span(bags).subspan(0, 12), std::span(bags).subspan(12), cfg, 7);
  Model c = moved.model;
  CHECK(c.parameter("blocks.0.ssm.A0").value == a.parameter("blocks.0.ssm.A0").value);
  CHECK(c.parameter("Whead").value != a.parameter("Whead").value);
}

TEST_CASE("Adam step matches the closed form for one scalar") {
  ad::Parameter p{"x", Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 0.5), true};
  TrainConfig cfg;
  cfg.lr = 0.1;
  Optimizer opt(cfg);
  std::vector<ad::Parameter*> ps{&p};
  opt.step(ps);
  // First step: mhat = g, vhat = g^2, update = lr * g / (|g| + eps).
  CHECK(p.value(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(p.grad(0, 0) == 0.0);
  cfg.optimizer = OptimizerKind::Sgd;
  Optimizer sgd(cfg);
  p.grad(0, 0) = 2.0;
  const double before = p.value(0, 0);
  sgd.step(ps);
  CHECK(p.value(0, 0) == doctest::Approx(before - 0.2));
}

TEST_CASE("training is deterministic and lowers the loss") {
  const std::vector<BagTensor> bags = toy_bags(60, 8);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.early_stop_patience = 10;
  const Model init = Model::create(toy_model(), 9);
  const auto train = std::span(bags).subspan(0, 46);
  const auto val = std::span(bags).subspan(46);
  const TrainResult a = train_fold(init, train, val, cfg, 10);
  const TrainResult b = train_fold(init, train, val, cfg, 10);
  REQUIRE(a.history.size() == 5);
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].train_loss == b.history[e].train_loss);
    CHECK(a.history[e].val_auc == b.history[e].val_auc);
  }
  for (std::size_t e = 1; e < a.history.size(); ++e) {
    CHECK(a.history[e].train_loss < a.history[e - 1].train_loss);
  }
}

TEST_CASE("early stopping and best checkpoint") {
  const std::vector<BagTensor> bags = toy_bags(40, 11);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.early_stop_patience = 2;
  cfg.lr = 1e-3;
  const TrainResult r = train_fold(Model::create(toy_model(), 12), std::span(bags).subspan(0, 30),
                                   std::span(bags).subspan(30), cfg, 13);
  CHECK(r.best_epoch >= 0);
  CHECK(static_cast<int>(r.history.size()) <= r.best_epoch + 1 + cfg.early_stop_patience);
  const EvalResult ev = evaluate(r.model, std::span(bags).subspan(30));
  CHECK(ev.auc == doctest::Approx(r.history[static_cast<std::size_t>(r.best_epoch)].val_auc));
}

TEST_CASE("divergence is reported") {
  const std::vector<BagTensor> bags = toy_bags(12, 14);
  Model m = Model::create(toy_model(), 15);
  m.parameter("bhead").value(0, 0) = std::numeric_limits<double>::infinity();
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_fold(m, bags, {}, cfg, 1), DivergenceError);
}

TEST_CASE("summary statistics") {
  std::vector<FoldResult> folds;
  for (int f = 0; f < 10; ++f) folds.push_back({f, true, "", 0.8, 0.7, 1, 2});
  Metrics m = summarize(folds);
  CHECK(m.auc_std < 1e-15);
  CHECK(m.acc_mean == doctest::Approx(0.7).epsilon(1e-15));

  std::vector<double> accs{0.5, 0.9, 0.75, 1.0, 0.6, 0.85, 0.7, 0.95, 0.8, 0.65};
  folds.clear();
  for (int f = 0; f < 10; ++f) folds.push_back({f, true, "", accs[static_cast<std::size_t>(f)], accs[static_cast<std::size_t>(f)], 0, 1});
  folds.push_back({10, false, "diverged", 0, 0, -1, 0});
  m = summarize(folds);
  double mean = 0;
  for (double a : accs) mean += a;
  mean /= 10;
  double ss = 0;
  for (double a : accs) ss += (a - mean) * (a - mean);
  CHECK(std::abs(m.acc_mean - mean) < 1e-12);
  CHECK(std::abs(m.acc_std - std::sqrt(ss / 10)) < 1e-12);
  CHECK(m.n_ok() == 10);

  const nlohmann::json j = metrics_to_json(m);
  CHECK(j["per_fold"].size() == 11);
  CHECK(j["per_fold"][10]["status"] == "failed");
  CHECK(j["summary"]["n_ok"] == 10);
  const std::string csv = metrics_to_csv(m);
  CHECK(csv.rfind("fold,auc,acc\n", 0) == 0);
  CHECK(csv.find("\nmean,") != std::string::npos);
  CHECK(csv.find("\nstd,") != std::string::npos);
}

TEST_CASE("protocol: determinism, threads and ablation shape") {
  bagdata::SynthConfig sc;
  sc.n_bags = 40;
  sc.L_min = 20;
  sc.L_max = 28;
  sc.D = 8;
  const bagdata::Dataset ds = bagdata::generate_synthetic(sc);
  const std::vector<BagTensor> bags = model::to_tensors(ds);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.n_folds = 3;
  cfg.lr = 1e-3;
  const bagdata::SplitPlan plan = bagdata::split_monte_carlo(ds, cfg.n_folds, cfg.split_seed);
  const Metrics a = run_protocol(bags, toy_model(), cfg, plan);
  ProtocolOptions opts;
  opts.jobs = 3;
  int seen = 0;
  std::mutex mu;
  opts.on_fold_model = [&](int, const Model&) {
    const std::lock_guard lock(mu);
    ++seen;
  };
  const Metrics b = run_protocol(bags, toy_model(), cfg, plan, opts);
  CHECK(seen == 3);
  CHECK(metrics_to_json(a).dump() == metrics_to_json(b).dump());
  REQUIRE(a.per_fold.size() == 3);
  for (int f = 0; f < 3; ++f) CHECK(a.per_fold[static_cast<std::size_t>(f)].fold == f);

  cfg.n_folds = 2;
  const auto rows = run_ablation(bags, toy_model(), cfg, bagdata::split_monte_carlo(ds, 2, 1));
  REQUIRE(rows.size() == 4);
  CHECK((!rows[0].sr && !rows[0].srsm));
  CHECK((!rows[1].sr && rows[1].srsm));
  CHECK((rows[2].sr && !rows[2].srsm));
  CHECK((rows[3].sr && rows[3].srsm));
  const std::string csv = ablation_to_csv(rows);
  CHECK(csv.rfind("sr,srsm,auc_mean,auc_std,acc_mean,acc_std\n0,0,", 0) == 0);
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.lr = 1e-3;
  c.optimizer = OptimizerKind::Sgd;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_WITH_AS(train_config_from_json(nlohmann::json{{"learning_rate", 1}}),
                       doctest::Contains("unknown key 'train.learning_rate'"), ValidationError);
  TrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("relative error helper") {
  Matrix a(1, 3);
  Matrix n(1, 3);
  a << 1.0, 0.0, 1e-9;
  n << 1.1, 0.0, 0.0;
  CHECK(relative_error(a, n) == doctest::Approx(0.1 / 1.1));
  a << 1.0, 0.0, 1e-9;
  n << 1.0, 0.0, 0.0;
  CHECK(relative_error(a, n) == doctest::Approx(1e-3));
}

TEST_CASE("run config: shipped defaults, overrides and cross checks") {
  const config::RunConfig shipped =
      config::load_run_config(std::string(SEMAMIL_SOURCE_DIR) + "/configs/default.json");
  CHECK(config::to_json(shipped) == config::to_json(config::RunConfig{}));

  const config::RunConfig o = config::apply_overrides(
      config::RunConfig{}, {"model.d=24", "model.assign_mode=gumbel", "train.lr=0.001", "data.noise_sigma=0.25"});
  CHECK(o.model.d == 24);
  CHECK(o.model.assign_mode == reorder::AssignMode::Kind::Gumbel);
  CHECK(o.train.lr == 0.001);
  CHECK(o.data.noise_sigma == 0.25);
  CHECK_THROWS_WITH_AS(config::apply_overrides(config::RunConfig{}, {"model.width=3"}),
                       doctest::Contains("width"), ValidationError);
  CHECK_THROWS_AS(config::apply_overrides(config::RunConfig{}, {"nosection=3"}), ValidationError);
  CHECK_THROWS_AS(config::apply_overrides(config::RunConfig{}, {"model.d=\"x\""}), ValidationError);

  config::RunConfig bad;
  bad.model.D_in = 8;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(config::load_run_config("/nonexistent/semamil.json"), IoError);
}
