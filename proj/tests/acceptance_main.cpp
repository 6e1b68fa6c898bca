// Acceptance suite: runs the full desk-scale pipeline and checks every
// release criterion at its stated tolerance, printing one PASS/FAIL line per
// criterion. Exit code = number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "rishgen/pipeline.hpp"

using namespace rishgen;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion,
              what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<missing:" + p.string() + ">";
  return std::string(std::istreambuf_iterator<char>(in), {});
}

pipeline::Config desk_config() { return pipeline::Config::defaults(); }

pipeline::Config mini_config() {
  pipeline::Config cfg = pipeline::Config::defaults();
  cfg.set("seed", "11");
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

void run_full(const pipeline::Config& cfg, const fs::path& root) {
  pipeline::cmd_phantom(cfg, root);
  pipeline::cmd_fit_rish(cfg, root);
  pipeline::cmd_train("vqvae3t", cfg, root);
  pipeline::cmd_train("vqvae7t-finetune", cfg, root);
  pipeline::cmd_train("ldm", cfg, root);
  pipeline::cmd_train("sr", cfg, root);
  pipeline::cmd_infer(cfg, root);
}

GradientTable scheme(int n) {
  GradientTable gtab;
  for (const auto& d : phantom::golden_directions(n)) {
    gtab.bvals.push_back(1000.0);
    gtab.dirs.push_back(d);
  }
  return gtab;
}

// ---------------------------------------------------------------- criterion 1

void criterion_sh_roundtrip() {
  const auto t0 = Clock::now();
  phantom::PhantomConfig pc;  // 32^3 source grid
  pc.snr_source = pc.snr_target = std::numeric_limits<double>::infinity();
  phantom::PhantomPair pair = phantom::generate_pair(pc, 5);

  GradientTable gtab = scheme(60);
  Volume4 signal = sh::reconstruct_signal(pair.source_coeffs, gtab);
  sh::ShCoefficients fitted = sh::fit_sh(signal, gtab, 4, 0.0);
  Volume4 recon = sh::reconstruct_signal(fitted, gtab);
  double max_err = 0.0;
  for (std::size_t i = 0; i < signal.data.size(); ++i) {
    max_err = std::max(max_err, std::abs(recon.data[i] - signal.data[i]));
  }
  const double dt = seconds_since(t0);
  char detail[128];
  std::snprintf(detail, sizeof detail, "max abs err %.3g, %.1f s", max_err, dt);
  report(1, max_err < 1e-8 && dt < 10.0, "SH fit/reconstruct round trip on 32^3", detail);
}

// ---------------------------------------------------------------- criterion 2

void criterion_rish_rotation() {
  sh::ShCoefficients truth;
  truth.dims = {4, 4, 4};
  truth.voxel_size = {1, 1, 1};
  truth.max_order = 4;
  truth.data.resize(static_cast<std::size_t>(truth.num_coeffs()) * truth.num_voxels());
  Rng rng(3);
  for (double& v : truth.data) v = rng.normal();

  GradientTable gtab = scheme(60);
  Volume4 signal = sh::reconstruct_signal(truth, gtab);
  sh::RishFeatures reference = sh::compute_rish(sh::fit_sh(signal, gtab, 4, 0.0));

  double worst = 0.0;
  Rng rot_rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Vector3d axis(rot_rng.normal(), rot_rng.normal(), rot_rng.normal());
    axis.normalize();
    Eigen::Matrix3d rot =
        Eigen::AngleAxisd(rot_rng.uniform(0.0, 2 * M_PI), axis).matrix();
    GradientTable rotated = gtab;
    for (auto& d : rotated.dirs) {
      Eigen::Vector3d v = rot * Eigen::Vector3d(d[0], d[1], d[2]);
      v.normalize();
      d = {v[0], v[1], v[2]};
    }
    sh::RishFeatures rr = sh::compute_rish(sh::fit_sh(signal, rotated, 4, 0.0));
    for (std::size_t i = 0; i < reference.data.size(); ++i) {
      const double denom = std::max(std::abs(reference.data[i]), 1e-9);
      worst = std::max(worst, std::abs(rr.data[i] - reference.data[i]) / denom);
    }
  }
  char detail[96];
  std::snprintf(detail, sizeof detail, "worst relative change %.3g over 10 rotations", worst);
  report(2, worst < 1e-6, "RISH rotation invariance", detail);
}

// ---------------------------------------------------------------- criterion 3

void criterion_scale_maps() {
  sh::ShCoefficients c;
  c.dims = {5, 5, 5};
  c.voxel_size = {1, 1, 1};
  c.max_order = 4;
  c.data.resize(static_cast<std::size_t>(c.num_coeffs()) * c.num_voxels());
  Rng rng(9);
  for (double& v : c.data) v = rng.normal();
  sh::RishFeatures rish = sh::compute_rish(c);

  bool ok = true;
  std::string why = "ok";

  // Identical inputs -> lambda = 1 +- 1e-4 where energy is present.
  sh::ScaleMap lam = sh::compute_scale_map(rish, rish, 1e-12);
  for (std::size_t i = 0; i < lam.data.size(); ++i) {
    if (rish.data[i] >= 1e-4 && std::abs(lam.data[i] - 1.0) > 1e-4) {
      ok = false;
      why = "lambda != 1 on identical inputs";
    }
  }

  // lambda == 1 is an exact identity.
  sh::ScaleMap ones;
  ones.dims = c.dims;
  ones.max_order = 4;
  ones.data.assign(3 * c.num_voxels(), 1.0);
  if (sh::apply_scale_map(c, ones).data != c.data) {
    ok = false;
    why = "unit scale map is not the identity";
  }

  // Per-order RISH of scaled coefficients is exactly lambda^2 times.
  sh::ScaleMap mixed = ones;
  Rng lr(4);
  for (double& v : mixed.data) v = lr.uniform(0.25, 2.5);
  sh::RishFeatures scaled = sh::compute_rish(sh::apply_scale_map(c, mixed));
  for (int oi = 0; oi < 3 && ok; ++oi) {
    for (std::size_t v = 0; v < c.num_voxels(); ++v) {
      const double l = mixed.at(v, oi);
      const double expect = l * l * rish.at(v, oi);
      if (std::abs(scaled.at(v, oi) - expect) >
          1e-12 * std::max(1.0, std::abs(expect))) {
        ok = false;
        why = "RISH of scaled coefficients deviates from lambda^2";
        break;
      }
    }
  }
  report(3, ok, "scale-map identities", why);
}

// ---------------------------------------------------------------- criterion 4

struct GradFail {
  int count = 0;
  double worst = 0.0;
};

void gradcheck_into(GradFail& gf, const std::vector<tn::Tensor>& leaves,
                    const std::function<tn::Tensor()>& forward) {
  for (const tn::Tensor& leaf : leaves) {
    auto& g = const_cast<tn::Tensor&>(leaf).grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  tn::Tensor loss = forward();
  tn::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const tn::Tensor& leaf : leaves) analytic.push_back(const_cast<tn::Tensor&>(leaf).grad());

  const double h = 1e-5;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& values = const_cast<tn::Tensor&>(leaves[li]).values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = forward().scalar();
      values[i] = orig - h;
      const double fm = forward().scalar();
      values[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double rel = std::abs(a - fd) / std::max({std::abs(fd), std::abs(a), 1e-3});
      gf.worst = std::max(gf.worst, rel);
      if (rel >= 1e-4) ++gf.count;
    }
  }
}

void criterion_autodiff() {
  GradFail gf;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(seed, "acceptance-grad"));
    auto leaf = [&](tn::Shape s, double scale = 1.0) {
      std::vector<double> v(tn::shape_numel(s));
      for (double& x : v) x = scale * rng.normal();
      return tn::Tensor::leaf(std::move(s), std::move(v));
    };
    auto frozen = [&](std::function<tn::Tensor()> op) {
      tn::Tensor probe;
      {
        tn::NoGradGuard ng;
        probe = op();
      }
      std::vector<double> w(probe.numel());
      Rng wr(derive_seed(seed, "acceptance-w"));
      for (double& x : w) x = wr.uniform(-1.0, 1.0);
      tn::Tensor weights = tn::Tensor::from_data(probe.shape(), std::move(w));
      return std::function<tn::Tensor()>(
          [op = std::move(op), weights] { return tn::sum_all(tn::mul(op(), weights)); });
    };

    {
      tn::Tensor x = leaf({2, 3, 3, 3}), w = leaf({2, 2, 3, 3, 3}, 0.4), b = leaf({2});
      gradcheck_into(gf, {x, w, b}, frozen([&] { return tn::conv3d(x, w, b, 1); }));
      gradcheck_into(gf, {x, w, b}, frozen([&] { return tn::conv3d(x, w, b, 2); }));
    }
    {
      tn::Tensor x = leaf({4, 2, 2, 2}), g = leaf({4}, 0.5), b = leaf({4}, 0.5);
      gradcheck_into(gf, {x, g, b}, frozen([&] { return tn::group_norm(x, g, b, 2); }));
      gradcheck_into(gf, {x}, frozen([&] { return tn::silu(x); }));
      gradcheck_into(gf, {x}, frozen([&] { return tn::softplus(x); }));
    }
    {
      tn::Tensor x = leaf({3, 4}), w = leaf({2, 4}), b = leaf({2});
      gradcheck_into(gf, {x, w, b}, frozen([&] { return tn::linear(x, w, b); }));
      gradcheck_into(gf, {x}, frozen([&] { return tn::softmax_rows(x); }));
    }
    {
      tn::Tensor x = leaf({4, 2, 2, 2});
      tn::Tensor ctx = leaf({3, 5});
      tn::AttentionWeights aw;
      aw.heads = 2;
      aw.dk = 2;
      tn::Tensor wq = leaf({4, 4}), wk = leaf({4, 5}), wv = leaf({4, 5}), wo = leaf({4, 4});
      aw.wq = wq;
      aw.wk = wk;
      aw.wv = wv;
      aw.wo = wo;
      gradcheck_into(gf, {x, ctx, wq, wk, wv, wo},
                     frozen([&] { return tn::cross_attention(x, ctx, aw); }));
      tn::Tensor table = leaf({5, 3});
      gradcheck_into(gf, {table}, frozen([&] { return tn::embedding_lookup(table, 1); }));
      gradcheck_into(gf, {x}, frozen([&] { return tn::nearest_upsample2(x); }));
    }
    {
      tn::Tensor a = leaf({3, 3}), b = leaf({3, 3});
      gradcheck_into(gf, {a, b}, [&] { return tn::mse_loss(a, b); });
      gradcheck_into(gf, {a, b}, [&] { return tn::mae_loss(a, b); });
      gradcheck_into(gf, {a, b}, frozen([&] { return tn::matmul(a, b); }));
    }
  }

  // Attention against the naive double loop.
  double attn_err = 0.0;
  {
    Rng rng(99);
    const int channels = 4, heads = 2, dk = 2, tokens = 8, keys = 3, ctx_dim = 5;
    auto mk = [&](tn::Shape s) {
      std::vector<double> v(tn::shape_numel(s));
      for (double& x : v) x = rng.normal();
      return tn::Tensor::from_data(std::move(s), std::move(v));
    };
    tn::Tensor x = mk({channels, 2, 2, 2}), ctx = mk({keys, ctx_dim});
    tn::AttentionWeights aw;
    aw.heads = heads;
    aw.dk = dk;
    aw.wq = mk({heads * dk, channels});
    aw.wk = mk({heads * dk, ctx_dim});
    aw.wv = mk({heads * dk, ctx_dim});
    aw.wo = mk({channels, heads * dk});
    tn::NoGradGuard ng;
    tn::Tensor out = tn::cross_attention(x, ctx, aw);

    auto proj = [&](const tn::Tensor& w, const std::vector<double>& in, int in_dim, int row) {
      std::vector<double> r(static_cast<std::size_t>(heads) * dk);
      for (int o = 0; o < heads * dk; ++o) {
        double acc = 0.0;
        for (int j = 0; j < in_dim; ++j) {
          acc += w.values()[static_cast<std::size_t>(o) * in_dim + j] *
                 in[static_cast<std::size_t>(row) * in_dim + j];
        }
        r[static_cast<std::size_t>(o)] = acc;
      }
      return r;
    };
    std::vector<double> xt(static_cast<std::size_t>(tokens) * channels);
    for (int t = 0; t < tokens; ++t)
      for (int c = 0; c < channels; ++c)
        xt[static_cast<std::size_t>(t) * channels + c] =
            x.values()[static_cast<std::size_t>(c) * tokens + t];
    for (int t = 0; t < tokens; ++t) {
      std::vector<double> q = proj(aw.wq, xt, channels, t);
      std::vector<double> concat(static_cast<std::size_t>(heads) * dk);
      for (int hh = 0; hh < heads; ++hh) {
        std::vector<double> scores(keys);
        double mx = -1e300;
        for (int k = 0; k < keys; ++k) {
          std::vector<double> kk = proj(aw.wk, ctx.values(), ctx_dim, k);
          double acc = 0.0;
          for (int d = 0; d < dk; ++d) acc += q[hh * dk + d] * kk[hh * dk + d];
          scores[k] = acc / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, scores[k]);
        }
        double denom = 0.0;
        for (int k = 0; k < keys; ++k) denom += std::exp(scores[k] - mx);
        for (int d = 0; d < dk; ++d) {
          double acc = 0.0;
          for (int k = 0; k < keys; ++k) {
            std::vector<double> vv = proj(aw.wv, ctx.values(), ctx_dim, k);
            acc += std::exp(scores[k] - mx) / denom * vv[hh * dk + d];
          }
          concat[static_cast<std::size_t>(hh) * dk + d] = acc;
        }
      }
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int j = 0; j < heads * dk; ++j) {
          acc += aw.wo.values()[static_cast<std::size_t>(c) * heads * dk + j] * concat[j];
        }
        attn_err = std::max(
            attn_err,
            std::abs(out.values()[static_cast<std::size_t>(c) * tokens + t] - acc));
      }
    }
  }

  char detail[128];
  std::snprintf(detail, sizeof detail,
                "%d finite-difference failures (worst rel %.3g), attention oracle err %.3g",
                gf.count, gf.worst, attn_err);
  report(4, gf.count == 0 && attn_err < 1e-6, "autodiff correctness", detail);
}

// ---------------------------------------------------------------- criterion 5

void criterion_diffusion_algebra() {
  bool ok = true;
  std::string why = "ok";
  ldm::NoiseSchedule s = ldm::make_schedule(1000, 1e-4, 0.02);

  // Monte-Carlo marginal variance within 5% at three depths.
  {
    vq::LatentGrid x0;
    x0.dims = {2, 2, 2};
    x0.channels = 2;
    x0.data.assign(16, 0.3);
    Rng rng(12);
    for (int t : {200, 600, 950}) {
      const double expected = 1.0 - s.alpha_bar[t];
      double acc = 0.0;
      std::size_t n = 0;
      for (int d = 0; d < 700; ++d) {
        std::vector<double> noise(x0.data.size());
        for (double& v : noise) v = rng.normal();
        vq::LatentGrid xt = ldm::q_sample(x0, t, noise, s);
        const double a = std::sqrt(s.alpha_bar[t]);
        for (std::size_t i = 0; i < xt.data.size(); ++i) {
          const double dev = xt.data[i] - a * x0.data[i];
          acc += dev * dev;
          ++n;
        }
      }
      const double var = acc / static_cast<double>(n);
      if (std::abs(var - expected) / expected >= 0.05) {
        ok = false;
        why = "q_sample variance off at t=" + std::to_string(t);
      }
    }
  }

  // Guided-epsilon affine identity, exact arithmetic check.
  {
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) {
      const double a = rng.normal(), b = rng.normal();
      const double w1 = rng.uniform(0.0, 3.0), w2 = rng.uniform(0.0, 3.0);
      auto guided = [&](double w) { return (1.0 + w) * a - w * b; };
      if (std::abs(guided(w1) + guided(w2) - guided(0.0) - guided(w1 + w2)) > 1e-6) {
        ok = false;
        why = "guided epsilon affine identity";
      }
    }
  }

  // Zero-net DDIM encode/sample invert each other.
  {
    ldm::DenoiserConfig dc;
    dc.latent_channels = 4;
    dc.widths = {8, 8, 8, 8};
    dc.context_dim = 8;
    dc.temb_dim = 16;
    dc.heads = 2;
    ldm::DenoiserNet net(dc, 1);  // zero-init output conv: eps == 0
    vq::LatentGrid z;
    z.dims = {2, 2, 2};
    z.channels = 4;
    z.data.resize(32);
    Rng rng(31);
    for (double& v : z.data) v = rng.normal();

    ldm::NoiseSchedule s100 = ldm::make_schedule(100, 1e-4, 0.02);
    vq::LatentGrid xt = ldm::ddim_encode(net, z, 80, ldm::ClassLabel::kSource3T, s100, 20);
    ldm::SamplerConfig sc;
    sc.omega = {0.0};
    sc.t_enc = {80};
    sc.stride = 20;
    vq::LatentGrid back =
        ldm::ddim_sample(net, xt, 80, ldm::ClassLabel::kSource3T, sc, s100);
    for (std::size_t i = 0; i < z.data.size(); ++i) {
      if (std::abs(back.data[i] - z.data[i]) > 1e-6) {
        ok = false;
        why = "zero-net ddim encode/sample are not inverse";
      }
    }

    // omega = 0 equals the conditional prediction bit-exactly (trained or not).
    std::vector<double> cond = net.predict(z.data, z.dims, 40, ldm::ClassLabel::kTarget7T);
    std::vector<double> guided =
        ldm::guided_epsilon(net, z, 40, ldm::ClassLabel::kTarget7T, 0.0);
    if (std::memcmp(cond.data(), guided.data(), cond.size() * 8) != 0) {
      ok = false;
      why = "omega=0 is not bit-exact";
    }
  }
  report(5, ok, "diffusion algebra", why);
}

// ------------------------------------------------------- criteria 6..9 (desk)

struct EpochStat {
  double first = 0.0, last = 0.0;
};

EpochStat recon_by_epoch(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);  // header: step,epoch,loss,recon,codebook,commitment
  EpochStat stat;
  int first_epoch = -1, last_epoch = -1;
  double first_acc = 0.0, last_acc = 0.0;
  int first_n = 0, last_n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::getline(row, field, ',');
    std::getline(row, field, ',');
    const int epoch = std::stoi(field);
    std::getline(row, field, ',');
    std::getline(row, field, ',');
    const double recon = std::strtod(field.c_str(), nullptr);
    if (first_epoch < 0) first_epoch = epoch;
    if (epoch == first_epoch) {
      first_acc += recon;
      ++first_n;
    }
    if (epoch != last_epoch) {
      last_epoch = epoch;
      last_acc = 0.0;
      last_n = 0;
    }
    last_acc += recon;
    ++last_n;
  }
  stat.first = first_n ? first_acc / first_n : 0.0;
  stat.last = last_n ? last_acc / last_n : 0.0;
  return stat;
}

void run_desk_criteria(const fs::path& work_dir) {
  const pipeline::Config cfg = desk_config();
  const fs::path root = work_dir / "desk";
  fs::create_directories(root);

  const auto t_desk = Clock::now();
  std::printf("-- desk-scale pipeline starting in %s\n", root.string().c_str());
  std::fflush(stdout);

  pipeline::cmd_phantom(cfg, root);
  pipeline::cmd_fit_rish(cfg, root);
  std::printf("-- dataset ready (%.0f s)\n", seconds_since(t_desk));
  std::fflush(stdout);

  const auto t_vq = Clock::now();
  pipeline::cmd_train("vqvae3t", cfg, root);
  const double vq_seconds = seconds_since(t_vq);
  std::printf("-- vqvae3t trained (%.0f s)\n", vq_seconds);
  std::fflush(stdout);

  // Criterion 6: training MAE halves, held-out SSIM > 0.9, quantizer exact.
  {
    const EpochStat stat = recon_by_epoch(root / "checkpoints" / "vqvae3t_loss.csv");
    const vq::VqVaeModel m3 = pipeline::load_stage_vqvae(cfg, root, "vqvae3t");

    double ssim_acc = 0.0;
    int ssim_n = 0;
    for (const auto& entry : pipeline::read_manifest(root)) {
      if (entry.kind != "test") continue;
      const Volume4 input = load_volume4(root / "rish" / (entry.name + "_source_rish.rgvl"));
      const Volume4 recon = vq::reconstruct(m3, input);
      Volume3 mask({input.dims[0], input.dims[1], input.dims[2]}, input.voxel_size);
      double mx = 0.0;
      for (std::size_t v = 0; v < mask.size(); ++v) mx = std::max(mx, input.data[v]);
      for (std::size_t v = 0; v < mask.size(); ++v) {
        mask.data[v] = input.data[v] > 0.01 * mx ? 1.0 : 0.0;
      }
      for (int c = 0; c < input.dims[3]; ++c) {
        ssim_acc += metrics::ssim(recon.channel(c), input.channel(c), mask);
        ++ssim_n;
      }
    }
    const double held_out_ssim = ssim_acc / ssim_n;

    // Quantizer against the exhaustive scan on real latents.
    bool quant_ok = true;
    {
      const auto subjects = pipeline::read_manifest(root);
      const Volume4 input =
          load_volume4(root / "rish" / (subjects.front().name + "_source_rish.rgvl"));
      vq::LatentGrid z = vq::encode(m3, input);
      std::vector<int> indices;
      vq::quantize_latent(m3, z, &indices);
      const auto& table = m3.codebook.table.value.values();
      const int d = m3.cfg.embed_dim;
      const std::size_t positions = z.num_positions();
      for (std::size_t p = 0; p < positions && quant_ok; ++p) {
        int best = 0;
        double best_dist = 1e300;
        for (int k = 0; k < m3.cfg.num_codes; ++k) {
          double dist = 0.0;
          for (int c = 0; c < d; ++c) {
            const double diff =
                z.data[static_cast<std::size_t>(c) * positions + p] - table[k * d + c];
            dist += diff * diff;
          }
          if (dist < best_dist) {
            best_dist = dist;
            best = k;
          }
        }
        quant_ok = indices[p] == best;
      }
    }

    char detail[192];
    std::snprintf(detail, sizeof detail,
                  "recon MAE %.4f -> %.4f, held-out SSIM %.3f, quantizer %s, %.0f s",
                  stat.first, stat.last, held_out_ssim, quant_ok ? "exact" : "WRONG",
                  vq_seconds);
    report(6,
           stat.last < 0.5 * stat.first && held_out_ssim > 0.9 && quant_ok &&
               vq_seconds < 7200.0,
           "vqvae training on the desk set", detail);
  }

  pipeline::cmd_train("vqvae7t-finetune", cfg, root);
  pipeline::cmd_train("ldm", cfg, root);
  pipeline::cmd_train("sr", cfg, root);
  std::printf("-- all stages trained (%.0f s)\n", seconds_since(t_desk));
  std::fflush(stdout);

  // Criterion 7: fine-tuning ablation direction.
  {
    auto rows = pipeline::cmd_ablate("finetune", cfg, root);
    const double scratch = rows[0].nmse, finetuned = rows[1].nmse;
    char detail[128];
    std::snprintf(detail, sizeof detail, "finetuned NMSE %.5f vs scratch %.5f", finetuned,
                  scratch);
    report(7, finetuned <= scratch, "fine-tuning ablation direction", detail);
  }

  // Criterion 8: super-resolution ablation direction.
  {
    auto rows = pipeline::cmd_ablate("superres", cfg, root);
    const double bspline = rows[0].nmse, superres = rows[1].nmse;
    char detail[128];
    std::snprintf(detail, sizeof detail, "sr NMSE %.5f vs b-spline %.5f", superres, bspline);
    report(8, superres <= bspline, "super-resolution ablation direction", detail);
  }

  // Criterion 9: end-to-end directional result on the held-out pairs.
  {
    pipeline::cmd_infer(cfg, root);
    metrics::MetricReport predicted = pipeline::cmd_evaluate(cfg, root, "predicted");
    metrics::MetricReport baseline = pipeline::cmd_evaluate(cfg, root, "baseline");

    auto value = [](const metrics::MetricReport& r, const std::string& subject,
                    const std::string& quantity) {
      for (const auto& row : r.rows) {
        if (row.subject == subject && row.quantity == quantity && row.metric == "NMSE") {
          return row.value;
        }
      }
      return -1.0;
    };

    int wins = 0, total = 0;
    std::string per_subject;
    for (const auto& entry : pipeline::read_manifest(root)) {
      if (entry.kind != "test") continue;
      ++total;
      const bool fa = value(predicted, entry.name, "FA") < value(baseline, entry.name, "FA");
      const bool l0 =
          value(predicted, entry.name, "RISH_L0") < value(baseline, entry.name, "RISH_L0");
      const bool l2 =
          value(predicted, entry.name, "RISH_L2") < value(baseline, entry.name, "RISH_L2");
      const bool win = fa && l0 && l2;
      wins += win;
      per_subject += entry.name + (win ? "+" : "-");
    }
    const double total_seconds = seconds_since(t_desk);
    char detail[160];
    std::snprintf(detail, sizeof detail, "%d/%d subjects improved [%s], pipeline %.0f s",
                  wins, total, per_subject.c_str(), total_seconds);
    report(9, wins >= 3 && total == 4 && total_seconds < 6.0 * 3600.0,
           "end-to-end directional result", detail);
  }
}

// --------------------------------------------------------------- criterion 10

void criterion_determinism(const fs::path& work_dir) {
  const pipeline::Config cfg = mini_config();
  const fs::path a = work_dir / "det_a";
  const fs::path b = work_dir / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  run_full(cfg, a);
  run_full(cfg, b);

  bool ok = true;
  std::string why = "bit-identical volumes and CSVs";
  for (const auto& entry : pipeline::read_manifest(a)) {
    if (entry.kind != "test") continue;
    for (const char* file :
         {"predicted_dwi.rgvl", "predicted_rish.rgvl", "predicted_coeffs.rgvl",
          "baseline_dwi.rgvl", "baseline_rish.rgvl", "sampling_log.csv"}) {
      if (file_bytes(a / "infer" / entry.name / file) !=
          file_bytes(b / "infer" / entry.name / file)) {
        ok = false;
        why = std::string("mismatch in ") + file;
      }
    }
  }
  for (const char* csv :
       {"vqvae3t_loss.csv", "vqvae7t_loss.csv", "ldm_loss.csv", "sr_loss.csv"}) {
    if (file_bytes(a / "checkpoints" / csv) != file_bytes(b / "checkpoints" / csv)) {
      ok = false;
      why = std::string("mismatch in ") + csv;
    }
  }
  if (pipeline::manifest_hash(a) != pipeline::manifest_hash(b)) {
    ok = false;
    why = "manifest hashes differ";
  }
  report(10, ok, "full-pipeline determinism", why);
}

// --------------------------------------------------------------- criterion 11

void criterion_metric_selftests() {
  bool ok = true;
  std::string why = "ok";

  Volume3 x({6, 6, 6}, {1, 1, 1});
  Rng rng(2);
  for (double& v : x.data) v = rng.uniform(0.5, 2.0);
  Volume3 mask({6, 6, 6}, {1, 1, 1}, 1.0);

  if (metrics::nmse(x, x, mask) != 0.0) {
    ok = false;
    why = "nmse(x,x) != 0";
  }
  Volume3 scaled = x;
  for (double& v : scaled.data) v *= 1.1;
  if (std::abs(metrics::nmse(scaled, x, mask) - 0.01) > 1e-12) {
    ok = false;
    why = "nmse(1.1x,x) != 0.01";
  }
  if (std::abs(metrics::ssim(x, x, mask) - 1.0) > 1e-9) {
    ok = false;
    why = "ssim(x,x) != 1";
  }

  // FA of the analytic tensor against the closed form.
  {
    const double l1 = 1.7e-3, l2 = 0.3e-3;
    const double mean = (l1 + 2 * l2) / 3.0;
    const double dev2 = (l1 - mean) * (l1 - mean) + 2 * (l2 - mean) * (l2 - mean);
    const double closed_form = std::sqrt(1.5 * dev2 / (l1 * l1 + 2 * l2 * l2));

    phantom::TensorField field;
    field.dims = {1, 1, 1};
    field.voxel_size = {1, 1, 1};
    phantom::VoxelCompartments vox;
    vox.fraction = {1.0, 0.0, 0.0};
    vox.tensor[0] = {l1, l2, l2, 0, 0, 0};
    field.voxels.push_back(vox);
    GradientTable gtab = phantom::make_scheme(30, 2, 1000.0);
    Volume3 fa = metrics::fa_map(phantom::simulate_signal(field, gtab), gtab);
    if (std::abs(fa.data[0] - closed_form) > 1e-3) {
      ok = false;
      why = "FA deviates from the closed form";
    }
  }
  report(11, ok, "metric self-tests", why);
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work_dir = "acceptance_work";
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--work-dir") work_dir = argv[i + 1];
  }
  fs::create_directories(work_dir);
  const auto t0 = Clock::now();

  criterion_sh_roundtrip();
  criterion_rish_rotation();
  criterion_scale_maps();
  criterion_autodiff();
  criterion_diffusion_algebra();
  run_desk_criteria(work_dir);
  criterion_determinism(work_dir);
  criterion_metric_selftests();

  std::printf("%d of 11 criteria passed in %.0f s\n", 11 - failures, seconds_since(t0));
  return failures;
}
