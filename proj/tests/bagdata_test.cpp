#include "semamil/bagdata.hpp"
#include "semamil/error.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

using namespace semamil;
using namespace semamil::bagdata;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("semamil_bagdata_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig small_config() {
  SynthConfig c;
  c.n_bags = 12;
  c.L_min = 10;
  c.L_max = 20;
  c.D = 6;
  c.grid_side = 8;
  return c;
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

BagFileErrc load_error(const fs::path& p) {
  try {
    load_bag(p);
  } catch (const BagFileError& e) {
    return e.code();
  }
  FAIL("expected a BagFileError");
  return BagFileErrc::Invalid;
}

}  // namespace

TEST_CASE("generator: small config has both labels") {
  SynthConfig c = small_config();
  c.n_bags = 4;
  const Dataset ds = generate_synthetic(c);
  REQUIRE(ds.bags.size() == 4);
  std::set<int> labels;
  for (const Bag& b : ds.bags) labels.insert(b.label);
  CHECK(labels == std::set<int>{0, 1});
}

TEST_CASE("generator: deterministic and per-bag invariants") {
  const SynthConfig c = small_config();
  const Dataset a = generate_synthetic(c);
  const Dataset b = generate_synthetic(c);
  REQUIRE(a.bags.size() == b.bags.size());
  for (std::size_t i = 0; i < a.bags.size(); ++i) {
    CHECK(a.bags[i] == b.bags[i]);
    const Bag& bag = a.bags[i];
    CHECK(bag.length() >= c.L_min);
    CHECK(bag.length() <= c.L_max);
    CHECK(bag.width() == c.D);
    CHECK_NOTHROW(bag.validate());
    for (const GridCoord& g : bag.coords) {
      CHECK(g.row < static_cast<std::uint32_t>(c.grid_side));
      CHECK(g.col < static_cast<std::uint32_t>(c.grid_side));
    }
  }
  SynthConfig other = c;
  other.seed = c.seed + 1;
  CHECK_FALSE(generate_synthetic(other).bags[0] == a.bags[0]);
}

TEST_CASE("generator: exact signal patch count without noise") {
  SynthConfig c;
  c.n_bags = 6;
  c.L_min = 64;
  c.L_max = 64;
  c.D = 8;
  c.noise_sigma = 0.0;
  c.signal_cluster_fraction = 0.25;
  const Eigen::MatrixXf centers = generate_cluster_centers(c);
  const Dataset ds = generate_synthetic(c);
  for (const Bag& bag : ds.bags) {
    int hits = 0;
    for (Eigen::Index i = 0; i < bag.X.rows(); ++i) {
      if ((bag.X.row(i).array() == centers.row(bag.label).array()).all()) ++hits;
    }
    CHECK(hits == 16);
  }
}

TEST_CASE("generator: nearest-center oracle recovers every label") {
  SynthConfig c = small_config();
  c.noise_sigma = 0.0;
  c.n_bags = 30;
  c.n_classes = 3;
  const Eigen::MatrixXf centers = generate_cluster_centers(c);
  const Dataset ds = generate_synthetic(c);
  for (const Bag& bag : ds.bags) {
    Eigen::RowVectorXf sum = Eigen::RowVectorXf::Zero(c.D);
    int n = 0;
    for (Eigen::Index i = 0; i < bag.X.rows(); ++i) {
      for (int k = 0; k < c.n_classes; ++k) {
        if ((bag.X.row(i).array() == centers.row(k).array()).all()) {
          sum += bag.X.row(i);
          ++n;
        }
      }
    }
    REQUIRE(n > 0);
    const Eigen::RowVectorXf mean = sum / static_cast<float>(n);
    int best = 0;
    for (int k = 1; k < c.n_classes; ++k) {
      if ((centers.row(k) - mean).norm() < (centers.row(best) - mean).norm()) best = k;
    }
    CHECK(best == bag.label);
  }
}

TEST_CASE("generator: center separation is enforced") {
  SynthConfig c;
  const Eigen::MatrixXf centers = generate_cluster_centers(c);
  for (int a = 0; a < c.n_clusters_true; ++a) {
    for (int b = a + 1; b < c.n_clusters_true; ++b) {
      CHECK((centers.row(a) - centers.row(b)).norm() >= 4.0 * c.noise_sigma - 1e-5);
    }
  }
  SynthConfig impossible;
  impossible.D = 1;
  impossible.noise_sigma = 5.0;
  impossible.n_clusters_true = 12;
  CHECK_THROWS_WITH_AS(generate_cluster_centers(impossible), "cluster centers inseparable",
                       ValidationError);
}

TEST_CASE("synth config validation") {
  SynthConfig c;
  c.L_max = 300;  // 16 x 16 grid
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = SynthConfig{};
  c.n_clusters_true = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = SynthConfig{};
  c.signal_cluster_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("bag file: round trip and layout") {
  const fs::path dir = scratch("roundtrip");
  Bag one;
  one.bag_id = "one";
  one.X = EmbeddingMatrix::Zero(1, 1);
  one.coords = {{0, 0}};
  save_bag(one, dir / "one.semb");
  CHECK(load_bag(dir / "one.semb") == one);

  Bag b;
  b.bag_id = "b";
  b.label = 1;
  b.X.resize(3, 2);
  b.X << 1.5f, -0.0f, 3.25e-20f, 7.0f, -1e30f, 0.1f;
  b.coords = {{0, 1}, {5, 2}, {1, 1}};
  save_bag(b, dir / "b.semb");
  CHECK(fs::file_size(dir / "b.semb") == 16 + 24 + 24);
  CHECK(bag_file_size(3, 2) == 64);
  CHECK(load_bag(dir / "b.semb", "b", 1) == b);
  const auto bytes = read_bytes(dir / "b.semb");
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SEMB");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 2);
}

TEST_CASE("bag file: round trip on generated bags") {
  const fs::path dir = scratch("generated");
  for (const Bag& b : generate_synthetic(small_config()).bags) {
    save_bag(b, dir / "x.semb");
    CHECK(load_bag(dir / "x.semb", b.bag_id, b.label) == b);
  }
}

TEST_CASE("bag file: distinct error codes") {
  const fs::path dir = scratch("errors");
  Bag b;
  b.bag_id = "b";
  b.X = EmbeddingMatrix::Ones(2, 2);
  b.coords = {{0, 0}, {0, 1}};
  save_bag(b, dir / "good.semb");
  const auto good = read_bytes(dir / "good.semb");

  auto bad = good;
  bad[0] = 'X';
  bad[1] = 'X';
  bad[2] = 'X';
  bad[3] = 'X';
  write_bytes(dir / "magic.semb", bad);
  CHECK(load_error(dir / "magic.semb") == BagFileErrc::BadMagic);
  CHECK_THROWS_WITH(load_bag(dir / "magic.semb"), doctest::Contains("bad magic"));

  bad = good;
  bad[4] = 2;
  write_bytes(dir / "version.semb", bad);
  CHECK(load_error(dir / "version.semb") == BagFileErrc::VersionMismatch);

  bad = good;
  bad.resize(bad.size() - 3);
  write_bytes(dir / "short.semb", bad);
  CHECK(load_error(dir / "short.semb") == BagFileErrc::Truncated);

  bad = good;
  bad.push_back(0);
  write_bytes(dir / "long.semb", bad);
  CHECK(load_error(dir / "long.semb") == BagFileErrc::TrailingData);

  bad = good;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(&bad[16], &nan, 4);
  write_bytes(dir / "nan.semb", bad);
  CHECK(load_error(dir / "nan.semb") == BagFileErrc::NonFinite);

  bad = good;
  bad[16 + 16 + 8 + 4] = 0;  // second coord becomes (0, 0)
  write_bytes(dir / "dup.semb", bad);
  CHECK(load_error(dir / "dup.semb") == BagFileErrc::Invalid);

  CHECK(load_error(dir / "missing.semb") == BagFileErrc::Open);
}

TEST_CASE("bag validation") {
  Bag b;
  b.bag_id = "v";
  b.X = EmbeddingMatrix::Ones(2, 2);
  b.coords = {{1, 1}, {1, 1}};
  CHECK_THROWS_AS(b.validate(), ValidationError);
  b.coords = {{1, 1}};
  CHECK_THROWS_AS(b.validate(), ValidationError);
  b.coords = {{1, 1}, {0, 1}};
  b.X(0, 0) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(b.validate(), ValidationError);
}

TEST_CASE("dataset directory round trip") {
  const fs::path dir = scratch("dataset");
  const Dataset ds = generate_synthetic(small_config());
  write_dataset(ds, dir);
  const Dataset back = read_dataset(dir);
  CHECK(back.name == ds.name);
  CHECK(back.n_classes == ds.n_classes);
  REQUIRE(back.bags.size() == ds.bags.size());
  for (std::size_t i = 0; i < ds.bags.size(); ++i) CHECK(back.bags[i] == ds.bags[i]);
  CHECK(read_dataset(dir / "manifest.json").bags.size() == ds.bags.size());
  CHECK_THROWS_AS(read_dataset(dir / "nope"), IoError);
}

TEST_CASE("split sizes") {
  const SplitSizes s = split_sizes(100);
  CHECK(s.train == 77);
  CHECK(s.test == 10);
  CHECK(s.val == 13);
  const SplitSizes t = split_sizes(400);
  CHECK(t.train == 306);
  CHECK(t.test == 40);
  CHECK(t.val == 54);
  for (std::size_t n = 10; n < 500; ++n) {
    const SplitSizes z = split_sizes(n);
    CHECK(z.train + z.val + z.test == n);
    CHECK(std::abs(static_cast<double>(z.train) - 0.765 * static_cast<double>(n)) <= 1.0);
  }
}

TEST_CASE("monte carlo splits") {
  SynthConfig c = small_config();
  c.n_bags = 100;
  const Dataset ds = generate_synthetic(c);
  const SplitPlan plan = split_monte_carlo(ds, 10, 5);
  REQUIRE(plan.folds.size() == 10);
  std::set<std::string> all;
  for (const Bag& b : ds.bags) all.insert(b.bag_id);
  std::set<std::set<std::string>> distinct_tests;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const Fold& fold = plan.folds[f];
    CHECK(plan.fold_seeds[f] == 5 + f);
    CHECK((fold.train.size() == 76 || fold.train.size() == 77));
    CHECK(fold.test.size() == 10);
    std::set<std::string> u(fold.train.begin(), fold.train.end());
    u.insert(fold.val.begin(), fold.val.end());
    u.insert(fold.test.begin(), fold.test.end());
    CHECK(u == all);
    CHECK(u.size() == fold.train.size() + fold.val.size() + fold.test.size());
    distinct_tests.insert(std::set<std::string>(fold.test.begin(), fold.test.end()));
  }
  CHECK(distinct_tests.size() > 1);

  const SplitPlan again = split_monte_carlo(ds, 10, 5);
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    CHECK(again.folds[f].train == plan.folds[f].train);
    CHECK(again.folds[f].test == plan.folds[f].test);
  }

  Dataset tiny = ds;
  tiny.bags.resize(9);
  CHECK_THROWS_AS(split_monte_carlo(tiny, 10, 5), ValidationError);
}
