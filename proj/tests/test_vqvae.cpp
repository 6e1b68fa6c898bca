#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "rishgen/vqvae.hpp"

using namespace rishgen;

namespace {

vq::VqVaeConfig small_config() {
  vq::VqVaeConfig cfg;
  cfg.in_channels = 3;
  cfg.embed_dim = 8;
  cfg.num_codes = 16;
  cfg.downsample = 2;
  cfg.base_channels = 4;
  return cfg;
}

Volume4 random_stack(std::array<int, 3> dims, int channels, std::uint64_t seed) {
  Volume4 v({dims[0], dims[1], dims[2], channels}, {1, 1, 1});
  Rng rng(seed);
  for (double& x : v.data) x = rng.uniform(0.0, 1.0);
  return v;
}

}  // namespace

TEST_SUITE("vqvae") {

TEST_CASE("encode/decode shape contract") {
  vq::VqVaeConfig cfg;
  cfg.in_channels = 3;
  cfg.embed_dim = 32;
  cfg.num_codes = 256;
  cfg.downsample = 4;
  cfg.base_channels = 4;
  vq::VqVaeModel model(cfg, "source", 1);

  Volume4 x = random_stack({16, 16, 16}, 3, 5);
  vq::LatentGrid z = vq::encode(model, x);
  CHECK(z.dims == std::array<int, 3>{4, 4, 4});
  CHECK(z.channels == 32);

  Volume4 out = vq::decode(model, z);
  CHECK(out.dims == std::array<int, 4>{16, 16, 16, 3});
}

TEST_CASE("encode is deterministic") {
  vq::VqVaeModel model(small_config(), "source", 3);
  Volume4 x = random_stack({8, 8, 8}, 3, 9);
  vq::LatentGrid a = vq::encode(model, x);
  vq::LatentGrid b = vq::encode(model, x);
  CHECK(a.data == b.data);
}

TEST_CASE("indivisible dims are rejected with a padding hint") {
  vq::VqVaeModel model(small_config(), "source", 3);
  Volume4 x = random_stack({7, 8, 8}, 3, 1);
  try {
    vq::encode(model, x);
    FAIL("expected ArgumentError");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("pad") != std::string::npos);
  }
}

TEST_CASE("decoded stacks are non-negative") {
  vq::VqVaeModel model(small_config(), "source", 7);
  Volume4 x = random_stack({8, 8, 8}, 3, 21);
  Volume4 out = vq::reconstruct(model, x);
  for (double v : out.data) CHECK(v >= 0.0);
}

TEST_CASE("quantize snaps exactly onto a matching row") {
  vq::VqVaeModel model(small_config(), "source", 11);
  const int d = model.cfg.embed_dim;
  std::vector<double> z(static_cast<std::size_t>(d), 0.0);
  for (int c = 0; c < d; ++c) {
    z[static_cast<std::size_t>(c)] = model.codebook.table.value.values()[7 * d + c];
  }
  tn::Tensor zt = tn::Tensor::from_data({d, 1, 1, 1}, std::move(z));
  vq::QuantizeResult q = vq::quantize(model.codebook, zt);
  CHECK(q.indices == std::vector<int>{7});
  CHECK(q.codebook_loss.scalar() == 0.0);
  CHECK(q.commitment_loss.scalar() == 0.0);
}

TEST_CASE("quantize ties break toward the lowest index") {
  vq::VqVaeConfig cfg = small_config();
  cfg.embed_dim = 2;
  cfg.num_codes = 8;
  vq::VqVaeModel model(cfg, "source", 0);
  auto& table = model.codebook.table.value.values();
  std::fill(table.begin(), table.end(), 9.0);  // park all rows far away
  // rows 2 and 5 equidistant from the probe
  table[2 * 2 + 0] = 1.0;
  table[2 * 2 + 1] = 0.0;
  table[5 * 2 + 0] = -1.0;
  table[5 * 2 + 1] = 0.0;
  tn::Tensor z = tn::Tensor::from_data({2, 1, 1, 1}, {0.0, 0.0});
  vq::QuantizeResult q = vq::quantize(model.codebook, z);
  CHECK(q.indices == std::vector<int>{2});
}

TEST_CASE("quantize matches an exhaustive nearest-neighbor scan") {
  vq::VqVaeConfig cfg = small_config();
  cfg.embed_dim = 4;
  cfg.num_codes = 16;
  vq::VqVaeModel model(cfg, "source", 13);
  Rng rng(99);
  const int d = 4;
  const int positions = 27;
  std::vector<double> z(static_cast<std::size_t>(d) * positions);
  for (double& v : z) v = rng.normal();
  tn::Tensor zt = tn::Tensor::from_data({d, 3, 3, 3}, z);
  vq::QuantizeResult q = vq::quantize(model.codebook, zt);

  const auto& table = model.codebook.table.value.values();
  for (int p = 0; p < positions; ++p) {
    int best = 0;
    double best_dist = 1e300;
    for (int k = 0; k < 16; ++k) {
      double dist = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = z[static_cast<std::size_t>(c) * positions + p] - table[k * d + c];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    CHECK(q.indices[static_cast<std::size_t>(p)] == best);
  }
}

TEST_CASE("quantize is idempotent with zero losses") {
  vq::VqVaeModel model(small_config(), "source", 17);
  Volume4 x = random_stack({8, 8, 8}, 3, 2);
  vq::LatentGrid z = vq::encode(model, x);
  vq::LatentGrid zq = vq::quantize_latent(model, z);
  tn::Tensor zt = tn::Tensor::from_data({zq.channels, zq.dims[2], zq.dims[1], zq.dims[0]},
                                        zq.data);
  vq::QuantizeResult again = vq::quantize(model.codebook, zt);
  CHECK(again.z_q.values() == zq.data);
  CHECK(again.codebook_loss.scalar() == 0.0);
  CHECK(again.commitment_loss.scalar() == 0.0);
}

TEST_CASE("straight-through: recon gradient w.r.t. encoder output matches identity graph") {
  vq::VqVaeModel model(small_config(), "source", 23);
  Rng rng(5);
  const int d = model.cfg.embed_dim;
  std::vector<double> zv(static_cast<std::size_t>(d) * 8);
  for (double& v : zv) v = rng.normal();

  // Straight-through graph.
  tn::Tensor z1 = tn::Tensor::leaf({d, 2, 2, 2}, zv);
  vq::QuantizeResult q = vq::quantize(model.codebook, z1);
  tn::Tensor recon1 = model.decoder_forward(q.z_q);
  tn::Tensor target = tn::Tensor::zeros(recon1.shape());
  tn::backward(tn::mae_loss(recon1, target));
  std::vector<double> grad_st = z1.grad();

  // Identity graph evaluated at the quantized values: same decoder input,
  // gradient flows straight to the leaf.
  tn::Tensor z2 = tn::Tensor::leaf({d, 2, 2, 2}, q.z_q.values());
  tn::Tensor recon2 = model.decoder_forward(z2);
  tn::backward(tn::mae_loss(recon2, target));
  CHECK(z2.grad() == grad_st);
}

TEST_CASE("training halves reconstruction error on a tiny set") {
  vq::VqVaeModel model(small_config(), "source", 29);
  std::vector<Volume4> dataset;
  for (std::uint64_t i = 0; i < 3; ++i) dataset.push_back(random_stack({8, 8, 8}, 3, i));
  vq::VqTrainConfig tc;
  tc.epochs = 12;
  tc.lr = 3e-3;
  tc.seed = 7;
  vq::VqTrainReport report = vq::train_vqvae(model, dataset, tc);
  CHECK(report.final_recon_mae < report.initial_recon_mae);
  CHECK(report.steps.size() == 12 * 3);
  CHECK(report.codebook_usage > 0.0);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
  auto run = [] {
    vq::VqVaeModel model(small_config(), "source", 3);
    std::vector<Volume4> dataset{random_stack({8, 8, 8}, 3, 1),
                                 random_stack({8, 8, 8}, 3, 2)};
    vq::VqTrainConfig tc;
    tc.epochs = 3;
    tc.seed = 11;
    vq::VqTrainReport r = vq::train_vqvae(model, dataset, tc);
    return r.steps.back().loss;
  };
  const double a = run(), b = run();
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("empty dataset is rejected") {
  vq::VqVaeModel model(small_config(), "source", 1);
  std::vector<Volume4> empty;
  CHECK_THROWS_AS(vq::train_vqvae(model, empty, {}), ArgumentError);
}

TEST_CASE("zero fine-tune steps returns an identical model") {
  vq::VqVaeModel pretrained(small_config(), "source", 41);
  std::vector<Volume4> dataset{random_stack({8, 8, 8}, 3, 4)};
  vq::VqTrainConfig tc;
  tc.epochs = 2;
  tc.lr = 1e-3;
  tc.seed = 5;
  vq::train_vqvae(pretrained, dataset, tc);

  vq::VqTrainConfig none;
  none.epochs = 0;
  vq::VqVaeModel same = vq::finetune(pretrained, dataset, none);
  auto pp = pretrained.params();
  auto sp = same.params();
  for (std::size_t i = 0; i < pp.size(); ++i) {
    CHECK(sp[i].second->value.values() == pp[i].second->value.values());
  }
  CHECK(same.channel_scale == pretrained.channel_scale);
}

TEST_CASE("fine-tuning on the source domain does not drift catastrophically") {
  vq::VqVaeModel pretrained(small_config(), "source", 47);
  std::vector<Volume4> dataset;
  for (std::uint64_t i = 0; i < 3; ++i) dataset.push_back(random_stack({8, 8, 8}, 3, 40 + i));
  vq::VqTrainConfig tc;
  tc.epochs = 10;
  tc.lr = 3e-3;
  tc.seed = 3;
  vq::train_vqvae(pretrained, dataset, tc);

  auto recon_nmse = [&](const vq::VqVaeModel& m) {
    double num = 0.0, den = 0.0;
    for (const auto& x : dataset) {
      Volume4 r = vq::reconstruct(m, x);
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        num += (r.data[i] - x.data[i]) * (r.data[i] - x.data[i]);
        den += x.data[i] * x.data[i];
      }
    }
    return num / den;
  };
  const double before = recon_nmse(pretrained);

  vq::VqTrainConfig ft;
  ft.epochs = 3;
  ft.lr = 1e-4;
  ft.seed = 9;
  vq::VqVaeModel tuned = vq::finetune(pretrained, dataset, ft);
  const double after = recon_nmse(tuned);
  CHECK(after <= before * 1.10);
}

TEST_CASE("checkpoints round trip the model") {
  vq::VqVaeModel model(small_config(), "target", 53);
  std::vector<Volume4> dataset{random_stack({8, 8, 8}, 3, 6)};
  vq::VqTrainConfig tc;
  tc.epochs = 1;
  tc.seed = 2;
  vq::train_vqvae(model, dataset, tc);

  const auto path = std::filesystem::temp_directory_path() / "rishgen_vqvae_test.ckpt";
  vq::save_vqvae(model, path, {{"note", "unit"}});
  std::map<std::string, std::string> meta;
  vq::VqVaeModel loaded = vq::load_vqvae(path, &meta);
  CHECK(meta.at("domain") == "target");
  CHECK(loaded.channel_scale == model.channel_scale);
  Volume4 x = random_stack({8, 8, 8}, 3, 77);
  CHECK(vq::reconstruct(loaded, x).data == vq::reconstruct(model, x).data);
}

}  // TEST_SUITE
