#include "semamil/bagdata.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>

namespace semamil::bagdata {

namespace fs = std::filesystem;
using json = nlohmann::json;

bool operator==(const Bag& a, const Bag& b) {
  if (a.bag_id != b.bag_id || a.label != b.label || a.coords != b.coords) {
    return false;
  }
  if (a.X.rows() != b.X.rows() || a.X.cols() != b.X.cols()) return false;
  for (Eigen::Index i = 0; i < a.X.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a.X.data()[i]) !=
        std::bit_cast<std::uint32_t>(b.X.data()[i])) {
      return false;
    }
  }
  return true;
}

void Bag::validate() const {
  if (X.rows() < 1) throw ValidationError("bag " + bag_id + ": L must be >= 1");
  if (X.cols() < 1) throw ValidationError("bag " + bag_id + ": D must be >= 1");
  if (static_cast<Eigen::Index>(coords.size()) != X.rows()) {
    throw ValidationError("bag " + bag_id + ": coordinate count differs from L");
  }
  std::vector<GridCoord> sorted = coords;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ValidationError("bag " + bag_id + ": duplicate coordinates");
  }
  if (!X.allFinite()) {
    throw ValidationError("bag " + bag_id + ": non-finite embedding");
  }
}

void Dataset::validate() const {
  if (n_classes < 1) throw ValidationError("dataset: n_classes must be >= 1");
  std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
  for (const Bag& b : bags) {
    if (b.label < 0 || b.label >= n_classes) {
      throw ValidationError("dataset: bag " + b.bag_id + " label out of range");
    }
    seen[static_cast<std::size_t>(b.label)] = 1;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw ValidationError("dataset: some class has no bags");
  }
}

void SynthConfig::validate() const {
  if (n_bags < 1 || n_classes < 1 || L_min < 1 || L_max < 1 || D < 1 ||
      n_clusters_true < 1 || grid_side < 1) {
    throw ValidationError("synth: all sizes must be positive");
  }
  if (L_min > L_max) throw ValidationError("synth: L_min > L_max");
  if (static_cast<long long>(L_max) >
      static_cast<long long>(grid_side) * grid_side) {
    throw ValidationError("synth: L_max exceeds grid_side^2");
  }
  if (n_clusters_true < n_classes) {
    throw ValidationError("synth: n_clusters_true < n_classes");
  }
  if (n_bags < n_classes) {
    throw ValidationError("synth: fewer bags than classes");
  }
  if (!(signal_cluster_fraction > 0.0 && signal_cluster_fraction < 1.0)) {
    throw ValidationError("synth: signal_cluster_fraction must be in (0,1)");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ValidationError("synth: noise_sigma must be finite and >= 0");
  }
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Eigen::MatrixXf generate_cluster_centers(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double min_dist = 4.0 * config.noise_sigma;

  Eigen::MatrixXd centers(config.n_clusters_true, config.D);
  int accepted = 0;
  int draws = 0;
  while (accepted < config.n_clusters_true) {
    if (++draws > 1000) throw ValidationError("cluster centers inseparable");
    Eigen::RowVectorXd c(config.D);
    for (int j = 0; j < config.D; ++j) c(j) = normal(rng);
    bool ok = true;
    for (int k = 0; k < accepted && ok; ++k) {
      ok = (centers.row(k) - c).norm() >= min_dist;
    }
    if (ok) centers.row(accepted++) = c;
  }
  return centers.cast<float>();
}

namespace {

std::string bag_name(int b) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag_%05d", b);
  return buf;
}

Bag generate_bag(const SynthConfig& config, const Eigen::MatrixXf& centers,
                 int index) {
  Bag bag;
  bag.bag_id = bag_name(index);
  bag.label = index % config.n_classes;
  std::mt19937_64 rng(config.seed ^ fnv1a64(bag.bag_id));

  std::uniform_int_distribution<int> length_dist(config.L_min, config.L_max);
  const int L = length_dist(rng);
  const int n_signal = std::min(
      L, static_cast<int>(std::lround(config.signal_cluster_fraction * L)));

  // Background clusters are the non-signal ones; when every cluster is a
  // signal cluster the other classes' clusters stand in.
  std::vector<int> background;
  for (int k = config.n_classes; k < config.n_clusters_true; ++k) {
    background.push_back(k);
  }
  if (background.empty()) {
    for (int k = 0; k < config.n_clusters_true; ++k) {
      if (k != bag.label) background.push_back(k);
    }
  }
  if (background.empty()) background.push_back(bag.label);

  std::vector<int> cluster_of(static_cast<std::size_t>(L));
  std::uniform_int_distribution<std::size_t> pick(0, background.size() - 1);
  for (int i = 0; i < L; ++i) {
    cluster_of[static_cast<std::size_t>(i)] =
        i < n_signal ? bag.label : background[pick(rng)];
  }
  std::shuffle(cluster_of.begin(), cluster_of.end(), rng);

  // Distinct cells, kept in row-major order so storage order is spatial.
  const int cells = config.grid_side * config.grid_side;
  std::vector<int> all(static_cast<std::size_t>(cells));
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(L));
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), L, rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  bag.X.resize(L, config.D);
  bag.coords.resize(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) {
    const auto cell = chosen[static_cast<std::size_t>(i)];
    bag.coords[static_cast<std::size_t>(i)] = {
        static_cast<std::uint32_t>(cell / config.grid_side),
        static_cast<std::uint32_t>(cell % config.grid_side)};
    const int k = cluster_of[static_cast<std::size_t>(i)];
    for (int j = 0; j < config.D; ++j) {
      const double eps = config.noise_sigma > 0 ? noise(rng) : 0.0;
      bag.X(i, j) = static_cast<float>(static_cast<double>(centers(k, j)) +
                                       config.noise_sigma * eps);
    }
  }
  return bag;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& config) {
  const Eigen::MatrixXf centers = generate_cluster_centers(config);
  Dataset ds;
  ds.name = "planted";
  ds.n_classes = config.n_classes;
  ds.bags.reserve(static_cast<std::size_t>(config.n_bags));
  for (int b = 0; b < config.n_bags; ++b) {
    ds.bags.push_back(generate_bag(config, centers, b));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

constexpr std::array<char, 4> kMagic = {'S', 'E', 'M', 'B'};

}  // namespace

std::uintmax_t bag_file_size(std::size_t L, std::size_t D) {
  return kBagHeaderBytes + 4 * L * D + 8 * L;
}

void save_bag(const Bag& bag, const fs::path& path) {
  bag.validate();
  std::vector<unsigned char> buf;
  buf.reserve(bag_file_size(static_cast<std::size_t>(bag.length()),
                            static_cast<std::size_t>(bag.width())));
  buf.insert(buf.end(), kMagic.begin(), kMagic.end());
  put_u32(buf, kBagFileVersion);
  put_u32(buf, static_cast<std::uint32_t>(bag.length()));
  put_u32(buf, static_cast<std::uint32_t>(bag.width()));
  for (Eigen::Index i = 0; i < bag.X.size(); ++i) {
    put_u32(buf, std::bit_cast<std::uint32_t>(bag.X.data()[i]));
  }
  for (const GridCoord& c : bag.coords) {
    put_u32(buf, c.row);
    put_u32(buf, c.col);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw BagFileError(BagFileErrc::Open, "cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) {
    throw BagFileError(BagFileErrc::Open, "write failed for " + path.string());
  }
}

Bag load_bag(const fs::path& path, std::string bag_id, int label) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw BagFileError(BagFileErrc::Open, "cannot open " + path.string());
  }
  const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (buf.size() < kBagHeaderBytes) {
    if (buf.size() >= 4 && !std::equal(kMagic.begin(), kMagic.end(), buf.begin())) {
      throw BagFileError(BagFileErrc::BadMagic, where + "bad magic");
    }
    throw BagFileError(BagFileErrc::Truncated, where + "truncated header");
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), buf.begin())) {
    throw BagFileError(BagFileErrc::BadMagic, where + "bad magic");
  }
  const std::uint32_t version = get_u32(&buf[4]);
  if (version != kBagFileVersion) {
    throw BagFileError(BagFileErrc::VersionMismatch,
                       where + "version mismatch (got " +
                           std::to_string(version) + ")");
  }
  const std::size_t L = get_u32(&buf[8]);
  const std::size_t D = get_u32(&buf[12]);
  if (L == 0 || D == 0) {
    throw BagFileError(BagFileErrc::Invalid, where + "empty bag");
  }
  const std::uintmax_t expected = bag_file_size(L, D);
  if (buf.size() < expected) {
    throw BagFileError(BagFileErrc::Truncated, where + "truncated payload");
  }
  if (buf.size() > expected) {
    throw BagFileError(BagFileErrc::TrailingData, where + "trailing bytes");
  }

  Bag bag;
  bag.bag_id = bag_id.empty() ? path.stem().string() : std::move(bag_id);
  bag.label = label;
  bag.X.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(D));
  const unsigned char* p = buf.data() + kBagHeaderBytes;
  for (std::size_t i = 0; i < L * D; ++i, p += 4) {
    const float v = std::bit_cast<float>(get_u32(p));
    if (!std::isfinite(v)) {
      throw BagFileError(BagFileErrc::NonFinite, where + "non-finite embedding");
    }
    bag.X.data()[i] = v;
  }
  bag.coords.resize(L);
  for (std::size_t i = 0; i < L; ++i, p += 8) {
    bag.coords[i] = {get_u32(p), get_u32(p + 4)};
  }
  try {
    bag.validate();
  } catch (const ValidationError& e) {
    throw BagFileError(BagFileErrc::Invalid, where + e.what());
  }
  return bag;
}

// ---------------------------------------------------------------------------

void write_dataset(const Dataset& dataset, const fs::path& dir) {
  dataset.validate();
  fs::create_directories(dir / "bags");
  json manifest;
  manifest["name"] = dataset.name;
  manifest["n_classes"] = dataset.n_classes;
  manifest["bags"] = json::array();
  for (const Bag& b : dataset.bags) {
    const fs::path rel = fs::path("bags") / (b.bag_id + ".semb");
    save_bag(b, dir / rel);
    manifest["bags"].push_back(
        {{"bag_id", b.bag_id}, {"path", rel.generic_string()}, {"label", b.label}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

Dataset read_dataset(const fs::path& manifest_or_dir) {
  const fs::path manifest_path = fs::is_directory(manifest_or_dir)
                                     ? manifest_or_dir / "manifest.json"
                                     : manifest_or_dir;
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
    Dataset ds;
    ds.name = manifest.at("name").get<std::string>();
    ds.n_classes = manifest.at("n_classes").get<int>();
    const fs::path base = manifest_path.parent_path();
    for (const json& entry : manifest.at("bags")) {
      const fs::path rel = entry.at("path").get<std::string>();
      ds.bags.push_back(load_bag(rel.is_absolute() ? rel : base / rel,
                                 entry.at("bag_id").get<std::string>(),
                                 entry.at("label").get<int>()));
    }
    try {
      ds.validate();
    } catch (const ValidationError& e) {
      throw IoError(manifest_path.string() + ": " + e.what());
    }
    return ds;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

SplitSizes split_sizes(std::size_t n) {
  SplitSizes s;
  // Integer half-up rounding of 0.765 n and 0.10 n.
  s.train = (765 * n + 500) / 1000;
  s.test = (n + 5) / 10;
  s.val = n - s.train - s.test;
  return s;
}

SplitPlan split_monte_carlo(const Dataset& dataset, int n_folds,
                            std::uint64_t seed) {
  const std::size_t n = dataset.bags.size();
  if (n < 10) {
    throw ValidationError("split: need at least 10 bags, got " + std::to_string(n));
  }
  if (n_folds < 1) throw ValidationError("split: n_folds must be >= 1");
  const SplitSizes sizes = split_sizes(n);
  if (sizes.test == 0 || sizes.val == 0) {
    throw ValidationError("split: dataset too small for non-empty splits");
  }

  SplitPlan plan;
  for (int f = 0; f < n_folds; ++f) {
    const std::uint64_t fold_seed = seed + static_cast<std::uint64_t>(f);
    plan.fold_seeds.push_back(fold_seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(fold_seed);
    std::shuffle(order.begin(), order.end(), rng);

    Fold fold;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string& id = dataset.bags[order[i]].bag_id;
      if (i < sizes.train) {
        fold.train.push_back(id);
      } else if (i < sizes.train + sizes.val) {
        fold.val.push_back(id);
      } else {
        fold.test.push_back(id);
      }
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

}  // namespace semamil::bagdata
