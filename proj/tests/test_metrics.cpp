#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "rishgen/metrics.hpp"
#include "rishgen/phantom.hpp"

using namespace rishgen;

namespace {

Volume3 ones_mask(std::array<int, 3> dims) {
  return Volume3(dims, {1, 1, 1}, 1.0);
}

Volume3 random_vol(std::array<int, 3> dims, std::uint64_t seed, double lo = 0.0,
                   double hi = 1.0) {
  Volume3 v(dims, {1, 1, 1});
  Rng rng(seed);
  for (double& x : v.data) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("nmse identities") {
  Volume3 truth = random_vol({6, 6, 6}, 1, 0.5, 2.0);
  Volume3 mask = ones_mask(truth.dims);
  CHECK(metrics::nmse(truth, truth, mask) == 0.0);

  Volume3 zero(truth.dims, {1, 1, 1}, 0.0);
  CHECK(metrics::nmse(zero, truth, mask) == doctest::Approx(1.0).epsilon(1e-12));

  Volume3 scaled = truth;
  for (double& v : scaled.data) v *= 1.1;
  CHECK(std::abs(metrics::nmse(scaled, truth, mask) - 0.01) < 1e-12);
}

TEST_CASE("nmse scale relation (k-1)^2") {
  Volume3 truth = random_vol({5, 5, 5}, 2, 0.1, 1.0);
  Volume3 mask = ones_mask(truth.dims);
  for (double k : {0.5, 1.3, 2.0}) {
    Volume3 scaled = truth;
    for (double& v : scaled.data) v *= k;
    CHECK(metrics::nmse(scaled, truth, mask) ==
          doctest::Approx((k - 1) * (k - 1)).epsilon(1e-12));
  }
}

TEST_CASE("nmse guards") {
  Volume3 truth({4, 4, 4}, {1, 1, 1}, 0.0);
  Volume3 mask = ones_mask(truth.dims);
  Volume3 pred = truth;
  CHECK_THROWS_AS(metrics::nmse(pred, truth, mask), ArgumentError);  // zero energy
  Volume3 empty_mask(truth.dims, {1, 1, 1}, 0.0);
  CHECK_THROWS_AS(metrics::nmse(pred, truth, empty_mask), ArgumentError);
}

TEST_CASE("ssim of a volume with itself is 1") {
  Volume3 v = random_vol({10, 10, 10}, 3);
  CHECK(metrics::ssim(v, v, ones_mask(v.dims)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("a large constant offset collapses the luminance term") {
  // Offset far beyond the dynamic range: 2 mu_a mu_b / (mu_a^2 + mu_b^2)
  // evaluated at mu_b = mu_a + 50 with range ~1 is below 0.5, and the
  // structure term stays 1, so SSIM < 0.5.
  Volume3 truth = random_vol({8, 8, 8}, 4);
  Volume3 pred = truth;
  for (double& v : pred.data) v += 50.0;
  CHECK(metrics::ssim(pred, truth, ones_mask(truth.dims)) < 0.5);
}

TEST_CASE("ssim is symmetric when both inputs share the dynamic range") {
  Volume3 a = random_vol({9, 9, 9}, 5);
  Volume3 b = random_vol({9, 9, 9}, 6);
  // Pin identical ranges over the mask so the range convention cancels.
  a.data[0] = 0.0;
  a.data[1] = 1.0;
  b.data[0] = 0.0;
  b.data[1] = 1.0;
  const Volume3 mask = ones_mask(a.dims);
  CHECK(metrics::ssim(a, b, mask) == doctest::Approx(metrics::ssim(b, a, mask)).epsilon(1e-9));
}

TEST_CASE("ssim is invariant under a shared positive rescale") {
  // Scale invariance holds exactly once the dynamic range is recomputed
  // (every term is degree-balanced in the scale). A shared *shift* is not an
  // invariance: the luminance term compares raw means.
  Volume3 a = random_vol({8, 8, 8}, 7);
  Volume3 b = random_vol({8, 8, 8}, 8);
  const Volume3 mask = ones_mask(a.dims);
  const double base = metrics::ssim(a, b, mask);
  Volume3 a2 = a, b2 = b;
  for (double& v : a2.data) v *= 3.0;
  for (double& v : b2.data) v *= 3.0;
  CHECK(metrics::ssim(a2, b2, mask) == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("fa of an isotropic signal is below 1e-6") {
  phantom::TensorField field;
  field.dims = {2, 2, 2};
  field.voxel_size = {1, 1, 1};
  phantom::VoxelCompartments v;
  v.fraction = {1.0, 0.0, 0.0};
  v.tensor[0] = {1e-3, 1e-3, 1e-3, 0, 0, 0};
  field.voxels.assign(8, v);
  GradientTable gtab = phantom::make_scheme(20, 2, 1000.0);
  Volume4 dwi = phantom::simulate_signal(field, gtab);
  Volume3 fa = metrics::fa_map(dwi, gtab);
  for (double x : fa.data) CHECK(x < 1e-6);
}

TEST_CASE("fa of the (1.7,0.3,0.3)e-3 tensor matches the closed form") {
  // Closed form from the eigenvalues:
  //   FA = sqrt(3/2 * sum (l - mean)^2 / sum l^2).
  const double l1 = 1.7e-3, l2 = 0.3e-3, l3 = 0.3e-3;
  const double mean = (l1 + l2 + l3) / 3.0;
  const double dev2 = (l1 - mean) * (l1 - mean) + (l2 - mean) * (l2 - mean) +
                      (l3 - mean) * (l3 - mean);
  const double expected = std::sqrt(1.5 * dev2 / (l1 * l1 + l2 * l2 + l3 * l3));
  CHECK(expected == doctest::Approx(0.79903).epsilon(1e-4));  // oracle value

  phantom::TensorField field;
  field.dims = {1, 1, 1};
  field.voxel_size = {1, 1, 1};
  phantom::VoxelCompartments v;
  v.fraction = {1.0, 0.0, 0.0};
  v.tensor[0] = {l1, l2, l3, 0, 0, 0};
  field.voxels.push_back(v);
  GradientTable gtab = phantom::make_scheme(30, 2, 1000.0);
  Volume4 dwi = phantom::simulate_signal(field, gtab);
  Volume3 fa = metrics::fa_map(dwi, gtab);
  CHECK(std::abs(fa.data[0] - expected) < 1e-3);
}

TEST_CASE("fa matches the ground-truth tensor on noiseless single-tensor voxels") {
  // Log-linear fitting is exact on a noiseless mono-exponential signal, so
  // the fitted FA must match the eigendecomposition of the generating tensor.
  const Eigen::Vector3d axis = Eigen::Vector3d(0.3, 0.8, -0.52).normalized();
  const double lpar = 1.6e-3, lperp = 0.35e-3;
  phantom::TensorField field;
  field.dims = {1, 1, 1};
  field.voxel_size = {1, 1, 1};
  phantom::VoxelCompartments vox;
  vox.fraction = {1.0, 0.0, 0.0};
  vox.tensor[0] = {lperp + (lpar - lperp) * axis[0] * axis[0],
                   lperp + (lpar - lperp) * axis[1] * axis[1],
                   lperp + (lpar - lperp) * axis[2] * axis[2],
                   (lpar - lperp) * axis[0] * axis[1],
                   (lpar - lperp) * axis[0] * axis[2],
                   (lpar - lperp) * axis[1] * axis[2]};
  field.voxels.push_back(vox);
  GradientTable gtab = phantom::make_scheme(40, 2, 1000.0);
  Volume4 dwi = phantom::simulate_signal(field, gtab);
  Volume3 fa = metrics::fa_map(dwi, gtab);

  const double mean = (lpar + 2 * lperp) / 3.0;
  const double dev2 = (lpar - mean) * (lpar - mean) + 2 * (lperp - mean) * (lperp - mean);
  const double expected =
      std::sqrt(1.5 * dev2 / (lpar * lpar + 2 * lperp * lperp));
  CHECK(std::abs(fa.data[0] - expected) < 1e-6);
}

TEST_CASE("fa stays in [0, 1] under noise") {
  phantom::PhantomConfig cfg;
  cfg.source_dims = {12, 12, 12};
  cfg.target_dims = {12, 12, 12};
  cfg.target_voxel = cfg.source_voxel = 1.25;
  cfg.source_dirs = 30;
  cfg.target_dirs = 30;
  cfg.num_baselines = 2;
  cfg.snr_source = 8.0;
  phantom::PhantomPair pair = phantom::generate_pair(cfg, 2);
  Volume3 fa = metrics::fa_map(pair.source_dwi, pair.source_gtab);
  for (double v : fa.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("difference map identities and cross-metric sanity") {
  Volume3 truth = random_vol({6, 6, 6}, 9);
  Volume3 same = metrics::difference_map(truth, truth);
  for (double v : same.data) CHECK(v == 0.0);

  Volume3 shifted = truth;
  for (double& v : shifted.data) v += 0.1;
  Volume3 diff = metrics::difference_map(shifted, truth);
  for (double v : diff.data) CHECK(v == doctest::Approx(0.1).epsilon(1e-12));

  // Two predictors: the one with lower NMSE also has lower mean |difference|.
  Volume3 good = truth, bad = truth;
  Rng rng(12);
  for (double& v : good.data) v += 0.01 * rng.normal();
  for (double& v : bad.data) v += 0.2 * rng.normal();
  const Volume3 mask = ones_mask(truth.dims);
  auto mean_abs = [](const Volume3& v) {
    double acc = 0.0;
    for (double x : v.data) acc += std::abs(x);
    return acc / static_cast<double>(v.data.size());
  };
  const bool nmse_order = metrics::nmse(good, truth, mask) < metrics::nmse(bad, truth, mask);
  const bool diff_order = mean_abs(metrics::difference_map(good, truth)) <
                          mean_abs(metrics::difference_map(bad, truth));
  CHECK(nmse_order == diff_order);
}

TEST_CASE("metric report aggregates and serializes") {
  metrics::MetricReport report;
  report.add("s0", "FA", "NMSE", 0.10);
  report.add("s1", "FA", "NMSE", 0.20);
  report.add("s0", "FA", "SSIM", 0.95);
  metrics::MetricStats stats = report.stats("FA", "NMSE");
  CHECK(stats.count == 2);
  CHECK(stats.mean == doctest::Approx(0.15));
  CHECK(stats.stddev == doctest::Approx(0.05));

  const auto path = std::filesystem::temp_directory_path() / "rishgen_metrics_test.csv";
  report.write_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "subject,quantity,metric,value");
  int rows = 0;
  while (std::getline(in, line)) rows += !line.empty();
  CHECK(rows == 3);

  const std::string table = report.summary_table({"FA"});
  CHECK(table.find("FA") != std::string::npos);
  CHECK(table.find("NMSE") != std::string::npos);
}

}  // TEST_SUITE
