#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rishgen/pipeline.hpp"

using namespace rishgen;
namespace fs = std::filesystem;
using pipeline::Config;

namespace {

// A configuration small enough to run every stage in seconds.
Config mini_config() {
  Config cfg = Config::defaults();
  cfg.set("seed", "7");
  cfg.set("data.train3t", "2");
  cfg.set("data.paired", "2");
  cfg.set("data.test", "1");
  cfg.set("phantom.source_dim", "16");
  cfg.set("phantom.target_dim", "18");
  cfg.set("phantom.target_voxel", "1.11");
  cfg.set("phantom.source_dirs", "30");
  cfg.set("phantom.target_dirs", "32");
  cfg.set("phantom.baselines", "2");
  cfg.set("vqvae.embed_dim", "8");
  cfg.set("vqvae.num_codes", "32");
  cfg.set("vqvae.downsample", "2");
  cfg.set("vqvae.base_channels", "6");
  cfg.set("vqvae.epochs", "2");
  cfg.set("vqvae.finetune_epochs", "1");
  cfg.set("vqvae.finetune_lr", "5e-5");
  cfg.set("ldm.timesteps", "50");
  cfg.set("ldm.stride", "10");
  cfg.set("ldm.epochs", "2");
  cfg.set("ldm.t_enc_frac", "0.2 0.4 0.6");
  cfg.set("ldm.widths", "8 8 8 8");
  cfg.set("ldm.context_dim", "8");
  cfg.set("ldm.heads", "2");
  cfg.set("sr.features", "6");
  cfg.set("sr.blocks", "1");
  cfg.set("sr.epochs", "1");
  cfg.set("sr.patch", "8");
  cfg.set("sr.patches_per_sample", "2");
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("rishgen_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void run_all_stages(const Config& cfg, const fs::path& root) {
  pipeline::cmd_phantom(cfg, root);
  pipeline::cmd_fit_rish(cfg, root);
  pipeline::cmd_train("vqvae3t", cfg, root);
  pipeline::cmd_train("vqvae7t-finetune", cfg, root);
  pipeline::cmd_train("ldm", cfg, root);
  pipeline::cmd_train("sr", cfg, root);
  pipeline::cmd_infer(cfg, root);
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config parsing, unknown keys and typed getters") {
  Config cfg = Config::defaults();
  CHECK(cfg.get_int("vqvae.embed_dim") == 32);
  CHECK(cfg.get_double("sh.tau") == doctest::Approx(1e-8));
  CHECK(cfg.get_doubles("ldm.omega") == std::vector<double>{1.0, 2.0, 3.0});
  CHECK_THROWS_AS(cfg.set("no.such_key", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.get("nokey"), ConfigError);

  const fs::path p = fs::temp_directory_path() / "rishgen_cfg_test.cfg";
  std::ofstream(p) << "# comment\n seed = 99 \nvqvae.epochs = 3 # trailing\n";
  Config loaded = Config::load(p);
  CHECK(loaded.seed() == 99);
  CHECK(loaded.get_int("vqvae.epochs") == 3);

  std::ofstream(p) << "bogus_key = 1\n";
  CHECK_THROWS_AS(Config::load(p), ConfigError);
}

TEST_CASE("stage fingerprints track their sections and ignore epoch counts") {
  Config a = Config::defaults();
  Config b = Config::defaults();
  CHECK(Config::stage_fingerprint(a, "vqvae3t") == Config::stage_fingerprint(b, "vqvae3t"));

  b.set("vqvae.epochs", "999");  // training length is resume state, not identity
  CHECK(Config::stage_fingerprint(a, "vqvae3t") == Config::stage_fingerprint(b, "vqvae3t"));

  b.set("vqvae.num_codes", "128");
  CHECK(Config::stage_fingerprint(a, "vqvae3t") != Config::stage_fingerprint(b, "vqvae3t"));

  Config c = Config::defaults();
  c.set("ldm.omega", "0 0 0");
  CHECK(Config::stage_fingerprint(a, "vqvae3t") == Config::stage_fingerprint(c, "vqvae3t"));
  CHECK(Config::stage_fingerprint(a, "ldm") != Config::stage_fingerprint(c, "ldm"));

  Config d = Config::defaults();
  d.set("seed", "43");
  CHECK(Config::stage_fingerprint(a, "dataset") != Config::stage_fingerprint(d, "dataset"));
}

TEST_CASE("phantom stage writes a deterministic manifest") {
  Config cfg = mini_config();
  const fs::path root = fresh_dir("manifest");
  pipeline::cmd_phantom(cfg, root);
  auto subjects = pipeline::read_manifest(root);
  CHECK(subjects.size() == 5);
  CHECK(subjects[0].kind == "train3t");
  CHECK(subjects[2].kind == "paired");
  CHECK(subjects[4].kind == "test");
  const std::uint64_t h1 = pipeline::manifest_hash(root);

  const fs::path root2 = fresh_dir("manifest2");
  pipeline::cmd_phantom(cfg, root2);
  CHECK(pipeline::manifest_hash(root2) == h1);

  Config zero = mini_config();
  zero.set("data.train3t", "0");
  zero.set("data.paired", "0");
  zero.set("data.test", "0");
  CHECK_THROWS_AS(pipeline::cmd_phantom(zero, fresh_dir("manifest3")), ArgumentError);
}

TEST_CASE("fit-rish emits two files per subject and domain, all non-negative") {
  Config cfg = mini_config();
  const fs::path root = fresh_dir("fitrish");
  pipeline::cmd_phantom(cfg, root);
  pipeline::cmd_fit_rish(cfg, root);

  int count = 0;
  for (const auto& entry : fs::directory_iterator(root / "rish")) {
    if (entry.path().extension() == ".rgvl") ++count;
  }
  // 5 subjects with a source domain, 3 with a target domain, coeffs + rish each.
  CHECK(count == 2 * (5 + 3));

  Volume4 rish = load_volume4(root / "rish" / "subj002_source_rish.rgvl");
  for (double v : rish.data) CHECK(v >= 0.0);
}

TEST_CASE("training stages require their upstream artifacts") {
  Config cfg = mini_config();
  const fs::path root = fresh_dir("deps");
  CHECK_THROWS_AS(pipeline::cmd_train("vqvae3t", cfg, root), DependencyError);
  pipeline::cmd_phantom(cfg, root);
  CHECK_THROWS_AS(pipeline::cmd_train("ldm", cfg, root), DependencyError);
  pipeline::cmd_fit_rish(cfg, root);
  CHECK_THROWS_AS(pipeline::cmd_train("ldm", cfg, root), DependencyError);
  CHECK_THROWS_AS(pipeline::cmd_infer(cfg, root), DependencyError);
  CHECK_THROWS_AS(pipeline::cmd_train("bogus", cfg, root), ConfigError);
}

TEST_CASE("full mini pipeline is bit-deterministic across runs") {
  Config cfg = mini_config();
  const fs::path a = fresh_dir("deta");
  const fs::path b = fresh_dir("detb");
  run_all_stages(cfg, a);
  run_all_stages(cfg, b);

  auto subjects = pipeline::read_manifest(a);
  for (const auto& entry : subjects) {
    if (entry.kind != "test") continue;
    for (const char* file : {"predicted_dwi.rgvl", "predicted_rish.rgvl",
                             "baseline_dwi.rgvl", "sampling_log.csv"}) {
      CHECK(file_bytes(a / "infer" / entry.name / file) ==
            file_bytes(b / "infer" / entry.name / file));
    }
  }
  for (const char* csv : {"vqvae3t_loss.csv", "ldm_loss.csv", "sr_loss.csv"}) {
    CHECK(file_bytes(a / "checkpoints" / csv) == file_bytes(b / "checkpoints" / csv));
  }

  // Loss CSVs carry exactly one row per step.
  std::ifstream in(a / "checkpoints" / "vqvae3t_loss.csv");
  std::string line;
  int rows = -1;  // header
  while (std::getline(in, line)) rows += !line.empty();
  CHECK(rows == 2 * 4);  // epochs * (train3t + paired)

  // Evaluation works and produces one row set per test subject.
  metrics::MetricReport report = pipeline::cmd_evaluate(cfg, a, "predicted");
  CHECK(report.stats("FA", "NMSE").count == 1);
  CHECK(report.stats("RISH_L0", "SSIM").count == 1);
  CHECK(fs::exists(a / "eval" / "predicted" / "report.csv"));
  metrics::MetricReport base_report = pipeline::cmd_evaluate(cfg, a, "baseline");
  CHECK(base_report.stats("FA", "NMSE").count == 1);
}

TEST_CASE("interrupted training resumes bit-exactly") {
  Config four = mini_config();
  four.set("vqvae.epochs", "4");
  Config two = mini_config();
  two.set("vqvae.epochs", "2");

  const fs::path a = fresh_dir("resume_a");
  const fs::path b = fresh_dir("resume_b");
  for (const auto& root : {a, b}) {
    pipeline::cmd_phantom(four, root);
    pipeline::cmd_fit_rish(four, root);
  }
  pipeline::cmd_train("vqvae3t", four, a);          // uninterrupted
  pipeline::cmd_train("vqvae3t", two, b);             // first half
  pipeline::cmd_train("vqvae3t", four, b);          // resume to the end
  CHECK(file_bytes(a / "checkpoints" / "vqvae3t.ckpt") ==
        file_bytes(b / "checkpoints" / "vqvae3t.ckpt"));
}

TEST_CASE("deleting a downstream checkpoint never alters upstream outputs") {
  Config cfg = mini_config();
  const fs::path root = fresh_dir("isolation");
  run_all_stages(cfg, root);

  const std::string v3 = file_bytes(root / "checkpoints" / "vqvae3t.ckpt");
  const std::string ldm_bytes = file_bytes(root / "checkpoints" / "ldm.ckpt");
  fs::remove(root / "checkpoints" / "sr.ckpt");
  pipeline::cmd_train("sr", cfg, root);
  CHECK(file_bytes(root / "checkpoints" / "vqvae3t.ckpt") == v3);
  CHECK(file_bytes(root / "checkpoints" / "ldm.ckpt") == ldm_bytes);
}

TEST_CASE("fingerprint mismatches are rejected at inference") {
  Config cfg = mini_config();
  const fs::path root = fresh_dir("fpmismatch");
  run_all_stages(cfg, root);
  Config other = mini_config();
  other.set("vqvae.num_codes", "16");
  CHECK_THROWS_AS(pipeline::cmd_infer(other, root), ConfigError);
}

TEST_CASE("identity stress test: no translation, unit grids, zero-tail sr") {
  // Equal grids, zero encode depth, untrained (zero-tail) SR head and a
  // fine-tune of zero epochs collapse every transform except the autoencoder
  // round trip.
  Config cfg = mini_config();
  cfg.set("phantom.target_dim", "16");
  cfg.set("phantom.target_voxel", "1.25");
  cfg.set("ldm.t_enc_frac", "0 0 0");
  cfg.set("vqvae.finetune_epochs", "0");
  cfg.set("sr.epochs", "0");
  const fs::path root = fresh_dir("identity");
  run_all_stages(cfg, root);

  const auto subjects = pipeline::read_manifest(root);
  const vq::VqVaeModel m3 = pipeline::load_stage_vqvae(cfg, root, "vqvae3t");
  for (const auto& entry : subjects) {
    if (entry.kind != "test") continue;
    const Volume4 input = load_volume4(root / "rish" / (entry.name + "_source_rish.rgvl"));
    const Volume4 roundtrip = vq::reconstruct(m3, input);
    const sh::RishFeatures predicted = sh::RishFeatures::from_volume4(
        load_volume4(root / "infer" / entry.name / "predicted_rish.rgvl"));

    // predicted = lambda^2 * input = roundtrip * input / (input + tau):
    // equal to the round trip wherever input energy dominates tau.
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < predicted.data.size(); ++i) {
      if (input.data[i] < 1e-3) continue;
      const double d = predicted.data[i] - roundtrip.data[i];
      num += d * d;
      den += roundtrip.data[i] * roundtrip.data[i];
    }
    REQUIRE(den > 0.0);
    CHECK(num / den < 1e-6);
  }
}

}  // TEST_SUITE
