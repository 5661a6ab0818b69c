#pragma once

// The full bag classifier: linear projection, semantic reordering, a stack
// of query-conditioned state-space blocks, order restoration, a two-part
// pooling head, and the mean/max pooling baselines. Also parameter and FLOP
// accounting and the SEMM checkpoint format.

#include "semamil/autodiff.hpp"
#include "semamil/bagdata.hpp"
#include "semamil/reorder.hpp"
#include "semamil/srsm.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace semamil::model {

using ad::Index;
using ad::Matrix;

enum class ModelKind { SemaMIL, MeanPool, MaxPool };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

struct ModelConfig {
  ModelKind kind = ModelKind::SemaMIL;
  int D_in = 32;
  int d = 16;
  int hidden = 32;
  int n_clusters = 8;
  int K = 8;
  int n_state = 4;
  int n_layers = 2;
  int n_classes = 2;
  reorder::AssignMode::Kind assign_mode = reorder::AssignMode::Kind::Hard;
  double gumbel_tau = 1.0;
  std::vector<srsm::Direction> directions = srsm::all_directions();
  bool sr_enabled = true;
  bool srsm_enabled = true;

  void validate() const;
  /// Whether the model stores a router (SemaMIL with reordering enabled).
  bool has_router() const { return kind == ModelKind::SemaMIL && sr_enabled; }
};

nlohmann::json to_json(const ModelConfig& c);
/// Strict: unknown keys throw ValidationError; missing keys keep defaults.
ModelConfig model_config_from_json(const nlohmann::json& j,
                                   ModelConfig base = {});

/// Double-precision view of a bag as the model consumes it.
struct BagTensor {
  std::string bag_id;
  int label = 0;
  Matrix X;  ///< L x D_in
  std::vector<bagdata::GridCoord> coords;
};

BagTensor to_tensor(const bagdata::Bag& bag);
std::vector<BagTensor> to_tensors(const bagdata::Dataset& dataset);

struct ForwardOptions {
  /// Gumbel noise seed; without one, gumbel mode uses the tempered softmax.
  std::optional<std::uint64_t> noise_seed;
};

/// Diagnostic record of the discrete decisions a forward pass made.
struct ForwardTrace {
  std::vector<int> labels;
  reorder::Permutation perm;
  std::vector<srsm::BlockTrace> blocks;
};

struct ForwardResult {
  ad::Var logits;  ///< n_classes x 1
  ad::Var P;       ///< router probabilities; invalid without a router
  ad::Var aux;     ///< router auxiliary loss (1x1); invalid without a router
  ForwardTrace trace;
};

class Model {
 public:
  Model() = default;
  /// Randomly initialised model; deterministic in `seed`.
  static Model create(const ModelConfig& config, std::uint64_t seed);
  /// Model with every parameter zero (A0 keeps its fixed -(s+1) values).
  static Model zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Declaration order: Wproj, router.W1, router.W2, blocks.i.*, Wpool,
  /// Whead, bhead. Router and block entries exist only for SemaMIL.
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  ad::Parameter& parameter(const std::string& name);

  /// Records the forward pass on `tape` with parameters as differentiable
  /// leaves.
  ForwardResult forward(ad::Tape& tape, const BagTensor& bag,
                        const ForwardOptions& options = {});
  /// Same computation with parameters as constants.
  ForwardResult forward_const(ad::Tape& tape, const BagTensor& bag,
                              const ForwardOptions& options = {}) const;

  /// Inference helper returning logits and, optionally, the trace.
  Eigen::VectorXd logits(const BagTensor& bag, ForwardTrace* trace = nullptr) const;

  /// Number of stored scalars, by walking the parameters.
  std::int64_t stored_scalars() const;

 private:
  template <typename Self>
  static ForwardResult forward_impl(Self& self, ad::Tape& tape,
                                    const BagTensor& bag,
                                    const ForwardOptions& options);

  ModelConfig config_;
  ad::Parameter Wproj_{"Wproj", {}, {}, true};
  reorder::RouterParams router_;
  std::vector<srsm::BlockParams> blocks_;
  ad::Parameter Wpool_{"Wpool", {}, {}, true};
  ad::Parameter Whead_{"Whead", {}, {}, true};
  ad::Parameter bhead_{"bhead", {}, {}, true};
};

// ---------------------------------------------------------------------------
// Accounting

struct ParamBreakdown {
  std::int64_t projection = 0;
  std::int64_t router = 0;
  std::int64_t per_block = 0;
  std::int64_t blocks = 0;
  std::int64_t pooling = 0;
  std::int64_t head = 0;
  std::int64_t total() const { return projection + router + blocks + pooling + head; }
};

ParamBreakdown param_breakdown(const ModelConfig& config);
std::int64_t count_params(const ModelConfig& config);

struct FlopBreakdown {
  std::int64_t projection = 0;
  std::int64_t router = 0;
  std::int64_t per_block = 0;
  std::int64_t blocks = 0;
  std::int64_t pooling = 0;
  std::int64_t head = 0;
  std::int64_t total() const { return projection + router + blocks + pooling + head; }
};

/// Forward-pass FLOPs for a bag of length L, multiply-accumulate = 2 FLOPs.
FlopBreakdown flop_breakdown(const ModelConfig& config, std::int64_t L);
std::int64_t count_flops(const ModelConfig& config, std::int64_t L);

// ---------------------------------------------------------------------------
// Checkpoint: "SEMM", u32 version, u32 json length, config JSON, then every
// parameter in declaration order as u32 rows, u32 cols, rows*cols float64
// (row-major). Little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace semamil::model
