#pragma once

// Training, evaluation and verification: cross-entropy, ROC AUC, accuracy,
// Adam/SGD, per-fold training with early stopping on validation AUC, the
// Monte Carlo protocol, the SR/SRSM ablation grid, and finite-difference
// gradient checking.

#include "semamil/bagdata.hpp"
#include "semamil/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace semamil::harness {

using ad::Index;
using ad::Matrix;
using model::BagTensor;
using model::Model;
using model::ModelConfig;

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  double lr = 5e-5;
  int epochs = 30;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  double lambda_router = 0.01;
  int early_stop_patience = 5;
  int n_folds = 10;
  std::uint64_t split_seed = 2024;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// ---------------------------------------------------------------------------
// Losses and metrics

/// -log softmax(logits)[label], log-sum-exp shifted.
double cross_entropy(const Eigen::VectorXd& logits, int label);
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Mann-Whitney AUC of `scores` for labels in {0, 1}; tied pairs count 0.5.
/// Throws ValidationError when either class is absent.
double auc_binary(std::span<const double> scores, std::span<const int> labels);

/// Binary (two columns): AUC of column 1. Multiclass: macro one-vs-rest over
/// classes that have both positives and negatives.
double auc_score(const Matrix& scores, std::span<const int> labels);

struct EvalResult {
  double auc = 0.0;
  double acc = 0.0;
  Matrix probs;  ///< n x n_classes softmax outputs
};

/// Accuracy of argmax (lowest class on ties) and AUC of softmax outputs.
EvalResult evaluate(const Model& model, std::span<const BagTensor> bags);

// ---------------------------------------------------------------------------
// Optimisation

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  /// Applies one update from p->grad to every trainable parameter, then
  /// zeroes the gradients.
  void step(std::span<ad::Parameter* const> params);

 private:
  TrainConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  Model model;  ///< best-validation checkpoint
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_score = 0.0;
};

/// Total loss of one bag: cross-entropy plus lambda_router times the router
/// auxiliary term. Records onto `tape`.
ad::Var bag_loss(Model& model, ad::Tape& tape, const BagTensor& bag,
                 double lambda_router, std::optional<std::uint64_t> noise_seed);

/// One bag per step, seeded shuffle per epoch, early stopping when validation
/// AUC has not improved for `early_stop_patience` epochs. Throws
/// DivergenceError on a non-finite loss.
TrainResult train_fold(Model model, std::span<const BagTensor> train,
                       std::span<const BagTensor> val, const TrainConfig& cfg,
                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Protocol

struct FoldResult {
  int fold = 0;
  bool ok = true;
  std::string error;
  double auc = 0.0;
  double acc = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
};

struct Metrics {
  std::vector<FoldResult> per_fold;
  double auc_mean = 0.0;
  double auc_std = 0.0;
  double acc_mean = 0.0;
  double acc_std = 0.0;

  std::size_t n_ok() const;
};

/// Mean and population standard deviation over successful folds.
Metrics summarize(std::vector<FoldResult> folds);

/// Seeds for fold f: model init and shuffling derive from cfg.seed and f.
std::uint64_t fold_train_seed(const TrainConfig& cfg, int fold);

struct ProtocolOptions {
  int jobs = 1;
  /// Called (from the worker thread) with each fold's selected model.
  std::function<void(int fold, const Model&)> on_fold_model;
};

/// Looks up bag indices for a list of ids.
std::vector<std::size_t> indices_of(std::span<const BagTensor> bags,
                                    std::span<const std::string> ids);

Metrics run_protocol(std::span<const BagTensor> bags, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, const bagdata::SplitPlan& plan,
                     const ProtocolOptions& options = {});

struct AblationRow {
  bool sr = false;
  bool srsm = false;
  Metrics metrics;
};

/// Rows in the order (off, off), (off, on), (on, off), (on, on), sharing the
/// split plan and training seeds.
std::vector<AblationRow> run_ablation(std::span<const BagTensor> bags,
                                      const ModelConfig& mcfg,
                                      const TrainConfig& tcfg,
                                      const bagdata::SplitPlan& plan,
                                      const ProtocolOptions& options = {});

nlohmann::json metrics_to_json(const Metrics& m);
/// Columns fold,auc,acc plus a trailing "mean" and "std" row.
std::string metrics_to_csv(const Metrics& m);
/// Columns sr,srsm,auc_mean,auc_std,acc_mean,acc_std.
std::string ablation_to_csv(std::span<const AblationRow> rows);

// ---------------------------------------------------------------------------
// Gradient checking

struct TensorCheck {
  std::string name;
  Index size = 0;
  double max_abs_grad = 0.0;
  double max_rel_err = 0.0;
};

/// Elementwise |a - n| / max(|a|, |n|, 1e-6), maximised per tensor.
double relative_error(const Matrix& analytic, const Matrix& numeric);

/// Compares analytic gradients against central differences for every tensor
/// in `params`. `loss` must rebuild the computation on the given tape and
/// bind the parameters with Tape::parameter.
std::vector<TensorCheck> check_gradients(std::span<ad::Parameter* const> params,
                                         const std::function<ad::Var(ad::Tape&)>& loss,
                                         double eps = 1e-5,
                                         std::optional<ad::OpKind> fault = std::nullopt);

/// Default tiny configuration used by the gradcheck command.
ModelConfig tiny_gradcheck_config();

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 1e-3;
  std::uint64_t seed_used = 0;
  bool passed() const;
};

/// Builds a tiny model and bag whose discrete choices (cluster labels, top-K)
/// have margins far above eps, then checks every parameter tensor of the
/// full loss (cross-entropy + router term).
GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed,
                                double tolerance = 1e-3,
                                std::optional<ad::OpKind> fault = std::nullopt);

}  // namespace semamil::harness
