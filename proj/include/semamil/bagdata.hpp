#pragma once

// Bags of patch embeddings, their on-disk format, a planted-cluster
// synthetic generator, and Monte Carlo train/val/test splitting.

#include "semamil/error.hpp"

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace semamil::bagdata {

/// Grid cell of a patch on the slide.
struct GridCoord {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  friend auto operator<=>(const GridCoord&, const GridCoord&) = default;
};

/// L x D embeddings, row-major so one row is one patch.
using EmbeddingMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Bag {
  std::string bag_id;
  int label = 0;
  std::vector<GridCoord> coords;
  EmbeddingMatrix X;

  Eigen::Index length() const { return X.rows(); }
  Eigen::Index width() const { return X.cols(); }

  /// Throws ValidationError unless L >= 1, coords match L and are distinct,
  /// and every embedding is finite.
  void validate() const;

  /// Bitwise equality of ids, labels, coordinates and embeddings.
  friend bool operator==(const Bag& a, const Bag& b);
};

struct Dataset {
  std::string name;
  int n_classes = 0;
  std::vector<Bag> bags;

  /// Labels in range and every class present.
  void validate() const;
};

struct SynthConfig {
  int n_bags = 400;
  int n_classes = 2;
  int L_min = 64;
  int L_max = 128;
  int D = 32;
  int n_clusters_true = 12;
  double signal_cluster_fraction = 0.1;
  double noise_sigma = 0.5;
  int grid_side = 16;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Gaussian cluster centers (n_clusters_true x D). Clusters [0, n_classes)
/// are the per-class signal clusters, the rest are shared background.
/// Throws ValidationError("cluster centers inseparable") after 1000 draws.
Eigen::MatrixXf generate_cluster_centers(const SynthConfig& config);

/// Deterministic in config.seed; each bag draws from seed ^ fnv1a(bag_id), so
/// bags may be generated in any order.
Dataset generate_synthetic(const SynthConfig& config);

/// Stable 64-bit FNV-1a string hash.
std::uint64_t fnv1a64(std::string_view s);

// ---------------------------------------------------------------------------
// SEMB embedding file: "SEMB", u32 version = 1, u32 L, u32 D, L*D float32
// row-major, then L (u32 row, u32 col). Little-endian throughout.

inline constexpr std::uint32_t kBagFileVersion = 1;
inline constexpr std::size_t kBagHeaderBytes = 16;

enum class BagFileErrc {
  Open,
  BadMagic,
  VersionMismatch,
  Truncated,
  NonFinite,
  TrailingData,
  Invalid,
};

class BagFileError : public IoError {
 public:
  BagFileError(BagFileErrc code, const std::string& what)
      : IoError(what), code_(code) {}
  BagFileErrc code() const { return code_; }

 private:
  BagFileErrc code_;
};

/// Expected size in bytes of a SEMB file for an L x D bag.
std::uintmax_t bag_file_size(std::size_t L, std::size_t D);

void save_bag(const Bag& bag, const std::filesystem::path& path);
/// The file carries no id or label; they come from the manifest. An empty id
/// defaults to the file stem.
Bag load_bag(const std::filesystem::path& path, std::string bag_id = {},
             int label = 0);

// ---------------------------------------------------------------------------
// Manifest: {"name", "n_classes", "bags": [{"bag_id", "path", "label"}]} with
// paths relative to the manifest's directory.

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
/// Accepts the manifest file or the directory containing manifest.json.
Dataset read_dataset(const std::filesystem::path& manifest_or_dir);

// ---------------------------------------------------------------------------

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// train = round(0.765 n), test = round(0.10 n), val = the rest.
SplitSizes split_sizes(std::size_t n);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct SplitPlan {
  std::vector<std::uint64_t> fold_seeds;
  double train_ratio = 0.765;
  double val_ratio = 0.135;
  double test_ratio = 0.10;
  std::vector<Fold> folds;
};

/// Independent shuffle per fold with fold_seed = seed + fold index. Test sets
/// of different folds may overlap.
SplitPlan split_monte_carlo(const Dataset& dataset, int n_folds,
                            std::uint64_t seed);

}  // namespace semamil::bagdata
