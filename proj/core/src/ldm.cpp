#include "rishgen/ldm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace rishgen::ldm {

void NoiseSchedule::validate() const {
  if (timesteps < 1) throw ArgumentError("schedule: timesteps must be >= 1");
  if (beta.size() != static_cast<std::size_t>(timesteps + 1) ||
      alpha.size() != beta.size() || alpha_bar.size() != beta.size()) {
    throw ArgumentError("schedule: table sizes inconsistent");
  }
  if (alpha_bar[0] != 1.0) throw ArgumentError("schedule: alpha_bar[0] must be 1");
  for (int t = 1; t <= timesteps; ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) {
      throw ArgumentError("schedule: beta out of (0,1) at t=" + std::to_string(t));
    }
    if (t > 1 && beta[t] < beta[t - 1]) {
      throw ArgumentError("schedule: beta must be non-decreasing");
    }
    if (!(alpha_bar[t] < alpha_bar[t - 1])) {
      throw ArgumentError("schedule: alpha_bar must be strictly decreasing");
    }
  }
}

NoiseSchedule make_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 1) throw ArgumentError("make_schedule: timesteps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end) {
    throw ArgumentError("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.timesteps = timesteps;
  s.beta.assign(static_cast<std::size_t>(timesteps) + 1, 0.0);
  s.alpha.assign(s.beta.size(), 1.0);
  s.alpha_bar.assign(s.beta.size(), 1.0);
  for (int t = 1; t <= timesteps; ++t) {
    const double frac =
        timesteps == 1 ? 0.0 : static_cast<double>(t - 1) / (timesteps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  s.validate();
  return s;
}

void DenoiserConfig::validate() const {
  if (latent_channels < 1) throw ArgumentError("denoiser: latent_channels must be >= 1");
  if (widths.size() != 4) throw ArgumentError("denoiser: expected 4 resolution levels");
  for (int w : widths) {
    if (w < 1) throw ArgumentError("denoiser: non-positive width");
  }
  if (heads < 1 || widths[2] % heads != 0 || widths[3] % heads != 0) {
    throw ArgumentError("denoiser: attention widths must divide the head count");
  }
  if (context_dim < 1 || temb_dim < 1) throw ArgumentError("denoiser: bad embed dims");
}

namespace {

AttentionParams make_attention(int channels, int context_dim, int heads, Rng& rng) {
  AttentionParams w;
  w.heads = heads;
  w.dk = channels / heads;
  w.wq = tn::Parameter(
      tn::he_normal({channels, channels}, static_cast<std::size_t>(channels), rng));
  w.wk = tn::Parameter(
      tn::he_normal({channels, context_dim}, static_cast<std::size_t>(context_dim), rng));
  w.wv = tn::Parameter(
      tn::he_normal({channels, context_dim}, static_cast<std::size_t>(context_dim), rng));
  w.wo = tn::Parameter(
      tn::he_normal({channels, channels}, static_cast<std::size_t>(channels), rng));
  return w;
}

std::vector<double> sinusoidal_embedding(int t, int dim) {
  std::vector<double> emb(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(k) / std::max(1, half - 1));
    emb[static_cast<std::size_t>(k)] = std::sin(t * freq);
    emb[static_cast<std::size_t>(half + k)] = std::cos(t * freq);
  }
  return emb;
}

tn::Tensor latent_tensor(const vq::LatentGrid& z) {
  return tn::Tensor::from_data({z.channels, z.dims[2], z.dims[1], z.dims[0]}, z.data);
}

}  // namespace

DenoiserNet::DenoiserNet(DenoiserConfig config, std::uint64_t init_seed) : cfg(config) {
  cfg.validate();
  Rng rng(derive_seed(init_seed, "denoiser-init"));
  const auto& w = cfg.widths;

  class_embedding = tn::Parameter(tn::normal_init({3, cfg.context_dim}, 0.5, rng));
  const int temb_in = 64;
  temb_w1 = tn::Parameter(tn::he_normal({cfg.temb_dim, temb_in}, temb_in, rng));
  temb_b1 = tn::Parameter(tn::Tensor::leaf({cfg.temb_dim}, std::vector<double>(cfg.temb_dim, 0.0)));
  temb_w2 = tn::Parameter(tn::he_normal({cfg.temb_dim, cfg.temb_dim}, cfg.temb_dim, rng));
  temb_b2 = tn::Parameter(tn::Tensor::leaf({cfg.temb_dim}, std::vector<double>(cfg.temb_dim, 0.0)));

  in_conv = tn::ConvLayer(cfg.latent_channels, w[0], 3, rng);
  for (int level = 0; level < 4; ++level) {
    down_res.emplace_back(w[level], w[level], rng, cfg.temb_dim);
    down_res.emplace_back(w[level], w[level], rng, cfg.temb_dim);
    if (level < 3) down_conv.emplace_back(w[level], w[level + 1], 3, rng);
  }
  // Up path: level 3 -> 1, each with a transition conv and one res block on
  // the concatenated skip.
  up_conv.emplace_back(w[3], w[2], 3, rng);
  up_res.emplace_back(2 * w[2], w[2], rng, cfg.temb_dim);
  up_conv.emplace_back(w[2], w[1], 3, rng);
  up_res.emplace_back(2 * w[1], w[1], rng, cfg.temb_dim);
  up_conv.emplace_back(w[1], w[0], 3, rng);
  up_res.emplace_back(2 * w[0], w[0], rng, cfg.temb_dim);

  // Cross-attention sites: both level-3 down blocks, the bottleneck, and the
  // level-3 up block.
  attn.push_back(make_attention(w[2], cfg.context_dim, cfg.heads, rng));
  attn.push_back(make_attention(w[2], cfg.context_dim, cfg.heads, rng));
  attn.push_back(make_attention(w[3], cfg.context_dim, cfg.heads, rng));
  attn.push_back(make_attention(w[2], cfg.context_dim, cfg.heads, rng));

  out_norm = tn::NormLayer(w[0]);
  out_conv = tn::ConvLayer::zero_init(w[0], cfg.latent_channels, 3);
}

tn::ParamMap DenoiserNet::params() {
  tn::ParamMap out;
  out.emplace_back("class_embedding", &class_embedding);
  out.emplace_back("temb.w1", &temb_w1);
  out.emplace_back("temb.b1", &temb_b1);
  out.emplace_back("temb.w2", &temb_w2);
  out.emplace_back("temb.b2", &temb_b2);
  in_conv.collect("in", out);
  for (std::size_t i = 0; i < down_res.size(); ++i) {
    down_res[i].collect("down.res" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < down_conv.size(); ++i) {
    down_conv[i].collect("down.conv" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < up_res.size(); ++i) {
    up_res[i].collect("up.res" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < up_conv.size(); ++i) {
    up_conv[i].collect("up.conv" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < attn.size(); ++i) {
    attn[i].collect("attn" + std::to_string(i), out);
  }
  out_norm.collect("out_norm", out);
  out_conv.collect("out", out);
  return out;
}

std::vector<tn::Parameter*> DenoiserNet::param_list() {
  std::vector<tn::Parameter*> out;
  for (auto& [name, p] : params()) out.push_back(p);
  return out;
}

tn::Tensor DenoiserNet::forward(const tn::Tensor& x, int t, ClassLabel label) const {
  if (x.shape().size() != 4 || x.shape()[0] != cfg.latent_channels) {
    throw ArgumentError("denoiser: input must be (latent_channels, d, h, w)");
  }
  for (int axis = 1; axis < 4; ++axis) {
    if (x.shape()[axis] % 8 != 0) {
      throw ArgumentError(
          "denoiser: spatial dims must be divisible by 8 (three stride-2 levels), got " +
          tn::shape_str(x.shape()));
    }
  }
  const int row = static_cast<int>(label);
  last_embedding_row = row;
  tn::Tensor context = tn::embedding_lookup(class_embedding.value, row);  // (1, ctx)

  tn::Tensor temb_in = tn::Tensor::from_data({1, 64}, sinusoidal_embedding(t, 64));
  tn::Tensor temb = tn::linear(temb_in, temb_w1.value, temb_b1.value);
  temb = tn::linear(tn::silu(temb), temb_w2.value, temb_b2.value);  // (1, temb_dim)

  tn::Tensor h = in_conv(x);
  std::vector<tn::Tensor> skips;
  int attn_site = 0;
  for (int level = 0; level < 4; ++level) {
    h = down_res[static_cast<std::size_t>(2 * level)](h, temb);
    if (level >= 2 && attn_site < 3) {
      h = tn::add(h, tn::cross_attention(
                         h, context, attn[static_cast<std::size_t>(attn_site++)].weights()));
    }
    h = down_res[static_cast<std::size_t>(2 * level + 1)](h, temb);
    if (level == 3) {
      break;
    }
    skips.push_back(h);
    h = down_conv[static_cast<std::size_t>(level)](h, 2);
  }

  for (int i = 0; i < 3; ++i) {
    const int level = 2 - i;  // 2, 1, 0
    h = tn::nearest_upsample2(h);
    h = up_conv[static_cast<std::size_t>(i)](h);
    h = tn::concat_channels(h, skips[static_cast<std::size_t>(level)]);
    h = up_res[static_cast<std::size_t>(i)](h, temb);
    if (level == 2) {
      h = tn::add(h, tn::cross_attention(h, context, attn[3].weights()));
    }
  }
  return out_conv(tn::silu(out_norm(h)));
}

std::vector<double> DenoiserNet::predict(const std::vector<double>& x,
                                         const std::array<int, 3>& dims, int t,
                                         ClassLabel label) const {
  tn::NoGradGuard no_grad;
  tn::Tensor xt = tn::Tensor::from_data({cfg.latent_channels, dims[2], dims[1], dims[0]},
                                        x);
  return forward(xt, t, label).values();
}

void SamplerConfig::validate(int timesteps) const {
  if (omega.empty() || omega.size() != t_enc.size()) {
    throw ArgumentError("sampler: omega and t_enc must have the same group count");
  }
  for (double w : omega) {
    if (w < 0) throw ArgumentError("sampler: omega must be >= 0");
  }
  if (stride < 1) throw ArgumentError("sampler: stride must be >= 1");
  for (int te : t_enc) {
    if (te < 0 || te > timesteps) throw ArgumentError("sampler: t_enc out of [0, T]");
    if (te % stride != 0) {
      throw ArgumentError("sampler: t_enc " + std::to_string(te) +
                          " must be a multiple of the stride " + std::to_string(stride));
    }
  }
}

vq::LatentGrid q_sample(const vq::LatentGrid& x0, int t, const std::vector<double>& noise,
                        const NoiseSchedule& schedule) {
  schedule.validate();
  if (t < 0 || t > schedule.timesteps) throw ArgumentError("q_sample: t out of range");
  if (noise.size() != x0.data.size()) throw ArgumentError("q_sample: noise shape mismatch");
  const double a = std::sqrt(schedule.alpha_bar[static_cast<std::size_t>(t)]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[static_cast<std::size_t>(t)]);
  vq::LatentGrid out = x0;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = a * x0.data[i] + b * noise[i];
  }
  return out;
}

std::vector<double> guided_epsilon(const DenoiserNet& net, const vq::LatentGrid& x_t, int t,
                                   ClassLabel label, double omega) {
  std::vector<double> cond = net.predict(x_t.data, x_t.dims, t, label);
  if (omega == 0.0) return cond;
  std::vector<double> uncond =
      net.predict(x_t.data, x_t.dims, t, ClassLabel::kUnconditional);
  for (std::size_t i = 0; i < cond.size(); ++i) {
    cond[i] = (1.0 + omega) * cond[i] - omega * uncond[i];
  }
  return cond;
}

void ddim_update(std::vector<double>& x, const std::vector<double>& eps, int t, int t_next,
                 const NoiseSchedule& schedule, std::size_t begin, std::size_t end) {
  const double abar_t = schedule.alpha_bar[static_cast<std::size_t>(t)];
  const double abar_n = schedule.alpha_bar[static_cast<std::size_t>(t_next)];
  const double sa_t = std::sqrt(abar_t), sb_t = std::sqrt(1.0 - abar_t);
  const double sa_n = std::sqrt(abar_n), sb_n = std::sqrt(1.0 - abar_n);
  end = std::min(end, x.size());
  for (std::size_t i = begin; i < end; ++i) {
    const double x0_hat = (x[i] - sb_t * eps[i]) / sa_t;
    x[i] = sa_n * x0_hat + sb_n * eps[i];
  }
}

namespace {

// Channel group boundaries as flat index ranges (contiguous channels).
std::vector<std::pair<std::size_t, std::size_t>> group_ranges(const vq::LatentGrid& z,
                                                              int groups) {
  const std::size_t positions = z.num_positions();
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (int g = 0; g < groups; ++g) {
    const int c0 = static_cast<int>(static_cast<long>(g) * z.channels / groups);
    const int c1 = static_cast<int>(static_cast<long>(g + 1) * z.channels / groups);
    out.emplace_back(static_cast<std::size_t>(c0) * positions,
                     static_cast<std::size_t>(c1) * positions);
  }
  return out;
}

double mean_abs(const std::vector<double>& v,
                const std::vector<std::pair<std::size_t, std::size_t>>& ranges,
                const std::vector<char>& active) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < ranges.size(); ++g) {
    if (!active[g]) continue;
    for (std::size_t i = ranges[g].first; i < ranges[g].second; ++i) acc += std::abs(v[i]);
    n += ranges[g].second - ranges[g].first;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace

vq::LatentGrid ddim_encode(const DenoiserNet& net, const vq::LatentGrid& x0, int t_enc,
                           ClassLabel label, const NoiseSchedule& schedule, int stride) {
  schedule.validate();
  if (t_enc < 0 || t_enc > schedule.timesteps) {
    throw ArgumentError("ddim_encode: t_enc out of [0, T]");
  }
  if (stride < 1 || t_enc % stride != 0) {
    throw ArgumentError("ddim_encode: stride must divide t_enc");
  }
  vq::LatentGrid x = x0;
  for (int t = 0; t < t_enc; t += stride) {
    std::vector<double> eps = net.predict(x.data, x.dims, t, label);
    ddim_update(x.data, eps, t, t + stride, schedule);
  }
  return x;
}

vq::LatentGrid ddim_sample(const DenoiserNet& net, const vq::LatentGrid& x_t, int t_start,
                           ClassLabel label, const SamplerConfig& config,
                           const NoiseSchedule& schedule, std::vector<SampleLogRow>* log) {
  SamplerConfig all = config;
  for (int& te : all.t_enc) te = t_start;
  // Uniform-depth sampling is translate's inner loop with every group live.
  all.validate(schedule.timesteps);
  if (t_start % all.stride != 0) {
    throw ArgumentError("ddim_sample: stride must divide t_start");
  }

  vq::LatentGrid x = x_t;
  const auto ranges = group_ranges(x, all.num_groups());
  std::vector<char> active(ranges.size(), 1);
  for (int t = t_start; t > 0; t -= all.stride) {
    std::vector<double> cond = net.predict(x.data, x.dims, t, label);
    bool need_uncond = false;
    for (double w : all.omega) need_uncond = need_uncond || w != 0.0;
    std::vector<double> uncond;
    if (need_uncond) uncond = net.predict(x.data, x.dims, t, ClassLabel::kUnconditional);

    std::vector<double> eps = cond;
    for (std::size_t g = 0; g < ranges.size(); ++g) {
      const double w = all.omega[g];
      if (w == 0.0) continue;
      for (std::size_t i = ranges[g].first; i < ranges[g].second; ++i) {
        eps[i] = (1.0 + w) * cond[i] - w * uncond[i];
      }
    }
    if (log) log->push_back({t, mean_abs(eps, ranges, active)});
    ddim_update(x.data, eps, t, t - all.stride, schedule);
  }
  return x;
}

vq::LatentGrid translate(const DenoiserNet& net, const vq::LatentGrid& z_source,
                         const SamplerConfig& config, const NoiseSchedule& schedule,
                         std::vector<SampleLogRow>* log) {
  schedule.validate();
  config.validate(schedule.timesteps);
  if (z_source.channels != net.cfg.latent_channels) {
    throw ArgumentError("translate: latent channels mismatch");
  }

  vq::LatentGrid x = z_source;
  const double inv_scale = 1.0 / net.latent_scale;
  for (double& v : x.data) v *= inv_scale;

  const auto ranges = group_ranges(x, config.num_groups());
  int t_max = 0;
  for (int te : config.t_enc) t_max = std::max(t_max, te);
  const ClassLabel enc_label =
      config.encode_unconditional ? ClassLabel::kUnconditional : ClassLabel::kSource3T;

  // Encode ladder: group g keeps noising while the next rung stays within
  // its configured depth.
  for (int t = 0; t < t_max; t += config.stride) {
    std::vector<double> eps = net.predict(x.data, x.dims, t, enc_label);
    for (std::size_t g = 0; g < ranges.size(); ++g) {
      if (t + config.stride <= config.t_enc[g]) {
        ddim_update(x.data, eps, t, t + config.stride, schedule, ranges[g].first,
                    ranges[g].second);
      }
    }
  }

  // Guided sampling ladder toward the target class; a group joins once the
  // global rung drops to its encode depth.
  for (int t = t_max; t > 0; t -= config.stride) {
    std::vector<char> active(ranges.size(), 0);
    bool any = false, need_uncond = false;
    for (std::size_t g = 0; g < ranges.size(); ++g) {
      if (config.t_enc[g] >= t) {
        active[g] = 1;
        any = true;
        if (config.omega[g] != 0.0) need_uncond = true;
      }
    }
    if (!any) continue;
    std::vector<double> cond = net.predict(x.data, x.dims, t, ClassLabel::kTarget7T);
    std::vector<double> uncond;
    if (need_uncond) uncond = net.predict(x.data, x.dims, t, ClassLabel::kUnconditional);

    std::vector<double> eps = cond;
    for (std::size_t g = 0; g < ranges.size(); ++g) {
      if (!active[g]) continue;
      const double w = config.omega[g];
      if (w != 0.0) {
        for (std::size_t i = ranges[g].first; i < ranges[g].second; ++i) {
          eps[i] = (1.0 + w) * cond[i] - w * uncond[i];
        }
      }
      ddim_update(x.data, eps, t, t - config.stride, schedule, ranges[g].first,
                  ranges[g].second);
    }
    if (log) log->push_back({t, mean_abs(eps, ranges, active)});
  }

  for (double& v : x.data) v *= net.latent_scale;
  return x;
}

double train_step(DenoiserNet& net, const std::vector<const LatentSample*>& batch,
                  const NoiseSchedule& schedule, double drop_prob, Rng& rng,
                  const tn::AdamWConfig& opt, int* dropped) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  if (drop_prob < 0.0 || drop_prob >= 1.0) {
    throw ArgumentError("train_step: drop_prob must be in [0, 1)");
  }
  auto param_ptrs = net.param_list();
  double total = 0.0;
  for (const LatentSample* sample : batch) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.timesteps)));
    std::vector<double> noise(sample->z.data.size());
    for (double& v : noise) v = rng.normal();
    ClassLabel label = sample->label;
    if (drop_prob > 0.0 && rng.uniform() < drop_prob) {
      label = ClassLabel::kUnconditional;
      if (dropped) ++*dropped;
    }

    std::vector<double> x0_scaled(sample->z.data.size());
    const double inv = 1.0 / net.latent_scale;
    for (std::size_t i = 0; i < x0_scaled.size(); ++i) x0_scaled[i] = sample->z.data[i] * inv;
    const double a = std::sqrt(schedule.alpha_bar[static_cast<std::size_t>(t)]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[static_cast<std::size_t>(t)]);
    std::vector<double> xt(x0_scaled.size());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = a * x0_scaled[i] + b * noise[i];

    tn::Tensor x = tn::Tensor::from_data(
        {sample->z.channels, sample->z.dims[2], sample->z.dims[1], sample->z.dims[0]},
        std::move(xt));
    tn::Tensor target = tn::Tensor::from_data(x.shape(), std::move(noise));
    tn::Tensor pred = net.forward(x, t, label);
    tn::Tensor loss = tn::mse_loss(pred, target);
    tn::backward(loss);
    tn::adamw_step(param_ptrs, opt);
    for (auto* p : param_ptrs) p->zero_grad();
    total += loss.scalar();
  }
  return total / static_cast<double>(batch.size());
}

LdmTrainReport train_ldm(DenoiserNet& net, const std::vector<LatentSample>& dataset,
                         const NoiseSchedule& schedule, const LdmTrainConfig& cfg) {
  if (dataset.empty()) throw ArgumentError("train_ldm: empty dataset");
  schedule.validate();
  for (const LatentSample& s : dataset) {
    if (s.label == ClassLabel::kUnconditional) {
      throw ArgumentError("train_ldm: datasets must not contain the null label");
    }
  }

  if (cfg.start_epoch == 0 && net.latent_scale == 1.0) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const LatentSample& s : dataset) {
      for (double v : s.z.data) acc += v * v;
      n += s.z.data.size();
    }
    const double std_dev = std::sqrt(acc / static_cast<double>(n));
    if (std_dev > 1e-12) net.latent_scale = std_dev;
  }

  tn::AdamWConfig opt;
  opt.lr = cfg.lr;

  LdmTrainReport report;
  int step = cfg.start_epoch * static_cast<int>(dataset.size());
  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, "ldm-shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }

    double epoch_loss = 0.0;
    for (std::size_t s : order) {
      Rng step_rng(derive_seed(cfg.seed, "ldm-step", static_cast<std::uint64_t>(step)));
      int dropped = 0;
      const LatentSample* sample = &dataset[s];
      const double loss =
          train_step(net, {sample}, schedule, cfg.drop_prob, step_rng, opt, &dropped);
      report.unconditional_samples += dropped;
      report.steps.push_back({step, epoch, loss});
      epoch_loss += loss;
      ++step;
    }
    epoch_loss /= static_cast<double>(dataset.size());
    if (epoch == cfg.start_epoch) report.first_epoch_loss = epoch_loss;
    report.last_epoch_loss = epoch_loss;
  }
  return report;
}

void save_denoiser(const DenoiserNet& net, const std::filesystem::path& path,
                   const std::map<std::string, std::string>& extra_meta,
                   bool include_optimizer_state) {
  std::map<std::string, std::string> meta = extra_meta;
  meta["model"] = "denoiser";
  meta["latent_channels"] = std::to_string(net.cfg.latent_channels);
  std::string widths;
  for (int w : net.cfg.widths) widths += std::to_string(w) + " ";
  meta["widths"] = widths;
  meta["context_dim"] = std::to_string(net.cfg.context_dim);
  meta["temb_dim"] = std::to_string(net.cfg.temb_dim);
  meta["heads"] = std::to_string(net.cfg.heads);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", net.latent_scale);
  meta["latent_scale"] = buf;

  tn::save_checkpoint(path, const_cast<DenoiserNet&>(net).params(), meta,
                      include_optimizer_state);
}

DenoiserNet load_denoiser(const std::filesystem::path& path,
                          std::map<std::string, std::string>* meta_out) {
  auto meta = tn::read_checkpoint_meta(path);
  if (meta["model"] != "denoiser") {
    throw ArgumentError("not a denoiser checkpoint: " + path.string());
  }
  DenoiserConfig cfg;
  cfg.latent_channels = std::stoi(meta.at("latent_channels"));
  cfg.widths.clear();
  {
    const std::string& text = meta.at("widths");
    const char* p = text.c_str();
    char* end = nullptr;
    while (*p) {
      long v = std::strtol(p, &end, 10);
      if (end == p) break;
      cfg.widths.push_back(static_cast<int>(v));
      p = end;
    }
  }
  cfg.context_dim = std::stoi(meta.at("context_dim"));
  cfg.temb_dim = std::stoi(meta.at("temb_dim"));
  cfg.heads = std::stoi(meta.at("heads"));

  DenoiserNet net(cfg, 0);
  net.latent_scale = std::strtod(meta.at("latent_scale").c_str(), nullptr);
  tn::load_checkpoint(path, net.params());
  if (meta_out) *meta_out = std::move(meta);
  return net;
}

}  // namespace rishgen::ldm
