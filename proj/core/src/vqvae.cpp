#include "rishgen/vqvae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

namespace rishgen::vq {

namespace {

std::string encode_scales(const std::vector<double>& scales) {
  std::string out;
  char buf[64];
  for (double s : scales) {
    std::snprintf(buf, sizeof buf, "%a ", s);
    out += buf;
  }
  return out;
}

std::vector<double> decode_scales(const std::string& text) {
  std::vector<double> out;
  const char* p = text.c_str();
  char* end = nullptr;
  while (*p) {
    double v = std::strtod(p, &end);
    if (end == p) break;
    out.push_back(v);
    p = end;
  }
  return out;
}

tn::Tensor stack_to_tensor(const Volume4& stack, const std::vector<double>& channel_scale) {
  const int c = stack.dims[3];
  const int n0 = stack.dims[0], n1 = stack.dims[1], n2 = stack.dims[2];
  std::vector<double> values(stack.data.size());
  const std::size_t sp = stack.num_voxels();
  for (int ch = 0; ch < c; ++ch) {
    const double inv = channel_scale.empty() ? 1.0 : 1.0 / channel_scale[ch];
    const double* src = stack.data.data() + static_cast<std::size_t>(ch) * sp;
    double* dst = values.data() + static_cast<std::size_t>(ch) * sp;
    for (std::size_t i = 0; i < sp; ++i) dst[i] = src[i] * inv;
  }
  // Tensor layout (C, z, y, x); Volume4 stores x fastest with q slowest, so
  // the flat buffers coincide.
  return tn::Tensor::from_data({c, n2, n1, n0}, std::move(values));
}

double percentile95(std::vector<double>& values) {
  if (values.empty()) return 1.0;
  const std::size_t idx =
      static_cast<std::size_t>(0.95 * static_cast<double>(values.size() - 1));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx),
                   values.end());
  return std::max(values[idx], 1e-12);
}

}  // namespace

int VqVaeConfig::levels() const {
  int f = downsample, l = 0;
  while (f > 1) {
    f /= 2;
    ++l;
  }
  return l;
}

void VqVaeConfig::validate() const {
  if (in_channels < 1) throw ArgumentError("vqvae: in_channels must be >= 1");
  if (embed_dim < 1) throw ArgumentError("vqvae: embed_dim must be >= 1");
  if (num_codes < 2) throw ArgumentError("vqvae: num_codes must be >= 2");
  if (downsample < 1 || (downsample & (downsample - 1)) != 0) {
    throw ArgumentError("vqvae: downsample factor must be a power of two");
  }
  if (base_channels < 1) throw ArgumentError("vqvae: base_channels must be >= 1");
}

VqVaeModel::VqVaeModel(VqVaeConfig config, std::string dom, std::uint64_t init_seed)
    : cfg(config), domain(std::move(dom)) {
  cfg.validate();
  Rng rng(derive_seed(init_seed, "vqvae-init"));
  const int levels = cfg.levels();
  auto width = [&](int level) { return cfg.base_channels << level; };

  enc_in = tn::ConvLayer(cfg.in_channels, width(0), 3, rng);
  for (int i = 0; i < levels; ++i) {
    enc_down.emplace_back(width(i), width(i + 1), 3, rng);
    enc_res.emplace_back(width(i + 1), width(i + 1), rng);
  }
  enc_out_norm = tn::NormLayer(width(levels));
  enc_out = tn::ConvLayer(width(levels), cfg.embed_dim, 3, rng);

  dec_in = tn::ConvLayer(cfg.embed_dim, width(levels), 3, rng);
  dec_res0 = tn::ResBlock(width(levels), width(levels), rng);
  for (int i = levels; i >= 1; --i) {
    dec_up.emplace_back(width(i), width(i - 1), 3, rng);
    if (i > 1) dec_res.emplace_back(width(i - 1), width(i - 1), rng);
  }
  dec_out_norm = tn::NormLayer(width(0));
  dec_out = tn::ConvLayer(width(0), cfg.in_channels, 3, rng);

  std::vector<double> table(static_cast<std::size_t>(cfg.num_codes) * cfg.embed_dim);
  Rng crng(derive_seed(init_seed, "vqvae-codebook"));
  for (double& v : table) v = 0.05 * crng.normal();
  codebook.table = tn::Parameter(
      tn::Tensor::leaf({cfg.num_codes, cfg.embed_dim}, std::move(table)));
}

tn::ParamMap VqVaeModel::params() {
  tn::ParamMap out;
  enc_in.collect("enc.in", out);
  for (std::size_t i = 0; i < enc_down.size(); ++i) {
    enc_down[i].collect("enc.down" + std::to_string(i), out);
    enc_res[i].collect("enc.res" + std::to_string(i), out);
  }
  enc_out_norm.collect("enc.out_norm", out);
  enc_out.collect("enc.out", out);
  dec_in.collect("dec.in", out);
  dec_res0.collect("dec.res0", out);
  for (std::size_t i = 0; i < dec_up.size(); ++i) {
    dec_up[i].collect("dec.up" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < dec_res.size(); ++i) {
    dec_res[i].collect("dec.res" + std::to_string(i), out);
  }
  dec_out_norm.collect("dec.out_norm", out);
  dec_out.collect("dec.out", out);
  out.emplace_back("codebook.table", &codebook.table);
  return out;
}

std::vector<tn::Parameter*> VqVaeModel::param_list() {
  std::vector<tn::Parameter*> out;
  for (auto& [name, p] : params()) out.push_back(p);
  return out;
}

tn::Tensor VqVaeModel::encoder_forward(const tn::Tensor& x) const {
  tn::Tensor h = enc_in(x);
  for (std::size_t i = 0; i < enc_down.size(); ++i) {
    h = enc_down[i](h, 2);
    h = enc_res[i](h);
  }
  return enc_out(silu(enc_out_norm(h)));
}

tn::Tensor VqVaeModel::decoder_forward(const tn::Tensor& zq) const {
  tn::Tensor h = dec_in(zq);
  h = dec_res0(h);
  for (std::size_t i = 0; i < dec_up.size(); ++i) {
    h = tn::nearest_upsample2(h);
    h = dec_up[i](h);
    if (i < dec_res.size()) h = dec_res[i](h);
  }
  return softplus(dec_out(silu(dec_out_norm(h))));
}

QuantizeResult quantize(Codebook& codebook, const tn::Tensor& z) {
  if (z.shape().size() != 4 || z.shape()[0] != codebook.dim()) {
    throw ArgumentError("quantize: latent channels must equal the codebook dim");
  }
  const int d = codebook.dim();
  const int codes = codebook.num_codes();
  const std::size_t positions = z.numel() / static_cast<std::size_t>(d);
  const double* zv = z.values().data();
  const double* table = codebook.table.value.values().data();

  QuantizeResult result;
  result.indices.resize(positions);
  std::vector<double> quantized(z.numel());
  for (std::size_t p = 0; p < positions; ++p) {
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < codes; ++k) {
      const double* row = table + static_cast<std::size_t>(k) * d;
      double dist = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = zv[static_cast<std::size_t>(c) * positions + p] - row[c];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    result.indices[p] = best;
    const double* row = table + static_cast<std::size_t>(best) * d;
    for (int c = 0; c < d; ++c) {
      quantized[static_cast<std::size_t>(c) * positions + p] = row[c];
    }
  }

  tn::Tensor z_flat = tn::reshape(z, {d, static_cast<int>(positions)});
  tn::Tensor z_sd = tn::transpose(z_flat);  // (positions, d)
  tn::Tensor e = tn::gather_rows(codebook.table.value, result.indices);
  result.codebook_loss = tn::mse_loss(e, tn::detach(z_sd));
  result.commitment_loss = tn::mse_loss(z_sd, tn::detach(e));
  result.z_q = tn::straight_through(z, std::move(quantized));
  return result;
}

namespace {

void check_encodable(const VqVaeModel& model, const Volume4& stack) {
  if (stack.dims[3] != model.cfg.in_channels) {
    throw ArgumentError("encode: expected " + std::to_string(model.cfg.in_channels) +
                        " channels, got " + std::to_string(stack.dims[3]));
  }
  for (int i = 0; i < 3; ++i) {
    if (stack.dims[i] % model.cfg.downsample != 0) {
      throw ArgumentError(
          "encode: dim " + std::to_string(stack.dims[i]) + " not divisible by " +
          std::to_string(model.cfg.downsample) + "; pad the volume to a multiple first");
    }
  }
}

LatentGrid tensor_to_latent(const tn::Tensor& t, const Volume4& src, int f) {
  LatentGrid out;
  out.dims = {src.dims[0] / f, src.dims[1] / f, src.dims[2] / f};
  out.channels = t.shape()[0];
  out.voxel_size = {src.voxel_size[0] * f, src.voxel_size[1] * f, src.voxel_size[2] * f};
  out.data = t.values();
  return out;
}

tn::Tensor latent_to_tensor(const LatentGrid& z) {
  return tn::Tensor::from_data({z.channels, z.dims[2], z.dims[1], z.dims[0]}, z.data);
}

}  // namespace

LatentGrid encode(const VqVaeModel& model, const Volume4& rish_stack) {
  check_encodable(model, rish_stack);
  tn::NoGradGuard no_grad;
  tn::Tensor x = stack_to_tensor(rish_stack, model.channel_scale);
  tn::Tensor z = model.encoder_forward(x);
  return tensor_to_latent(z, rish_stack, model.cfg.downsample);
}

LatentGrid quantize_latent(const VqVaeModel& model, const LatentGrid& z,
                           std::vector<int>* indices_out) {
  tn::NoGradGuard no_grad;
  // quantize() only reads the codebook here; const_cast avoids a parallel API.
  auto& codebook = const_cast<VqVaeModel&>(model).codebook;
  QuantizeResult q = quantize(codebook, latent_to_tensor(z));
  if (indices_out) *indices_out = q.indices;
  LatentGrid out = z;
  out.data = q.z_q.values();
  return out;
}

Volume4 decode(const VqVaeModel& model, const LatentGrid& z_q) {
  if (z_q.channels != model.cfg.embed_dim) {
    throw ArgumentError("decode: latent channels != embed_dim");
  }
  tn::NoGradGuard no_grad;
  tn::Tensor out = model.decoder_forward(latent_to_tensor(z_q));
  const int f = model.cfg.downsample;
  Volume4 stack({z_q.dims[0] * f, z_q.dims[1] * f, z_q.dims[2] * f, model.cfg.in_channels},
                {z_q.voxel_size[0] / f, z_q.voxel_size[1] / f, z_q.voxel_size[2] / f});
  stack.semantics = VolumeSemantics::kRish;
  stack.aux = {static_cast<std::uint32_t>(2 * (model.cfg.in_channels - 1)), 0};
  stack.data = out.values();
  const std::size_t sp = stack.num_voxels();
  for (int c = 0; c < model.cfg.in_channels; ++c) {
    const double s = model.channel_scale.empty() ? 1.0 : model.channel_scale[c];
    double* dst = stack.data.data() + static_cast<std::size_t>(c) * sp;
    for (std::size_t i = 0; i < sp; ++i) dst[i] *= s;
  }
  return stack;
}

Volume4 reconstruct(const VqVaeModel& model, const Volume4& rish_stack) {
  return decode(model, quantize_latent(model, encode(model, rish_stack)));
}

namespace {

void init_from_data(VqVaeModel& model, const std::vector<Volume4>& dataset,
                    std::uint64_t seed) {
  // Per-channel scale: 95th percentile over the training set.
  model.channel_scale.assign(static_cast<std::size_t>(model.cfg.in_channels), 1.0);
  for (int c = 0; c < model.cfg.in_channels; ++c) {
    std::vector<double> values;
    values.reserve(dataset.front().num_voxels() * dataset.size());
    for (const Volume4& v : dataset) {
      const double* src = v.data.data() + static_cast<std::size_t>(c) * v.num_voxels();
      values.insert(values.end(), src, src + v.num_voxels());
    }
    model.channel_scale[static_cast<std::size_t>(c)] = percentile95(values);
  }

  // Data-driven codebook init: latent vectors of the first samples under the
  // freshly initialized encoder, strided over positions. Guards against
  // early codebook collapse.
  tn::NoGradGuard no_grad;
  const int codes = model.cfg.num_codes;
  const int d = model.cfg.embed_dim;
  std::vector<double> vectors;  // (n, d) packed
  for (const Volume4& v : dataset) {
    tn::Tensor z = model.encoder_forward(stack_to_tensor(v, model.channel_scale));
    const std::size_t positions = z.numel() / static_cast<std::size_t>(d);
    for (std::size_t p = 0; p < positions; ++p) {
      for (int c = 0; c < d; ++c) {
        vectors.push_back(z.values()[static_cast<std::size_t>(c) * positions + p]);
      }
    }
    if (vectors.size() >= static_cast<std::size_t>(2 * codes) * d) break;
  }
  const std::size_t available = vectors.size() / static_cast<std::size_t>(d);
  Rng rng(derive_seed(seed, "codebook-data-init"));
  auto& table = model.codebook.table.value.values();
  for (int k = 0; k < codes; ++k) {
    const std::size_t src = (static_cast<std::size_t>(k) * available) / codes;
    for (int c = 0; c < d; ++c) {
      table[static_cast<std::size_t>(k) * d + c] =
          vectors[src * d + c] + 1e-3 * rng.normal();
    }
  }
}

}  // namespace

VqTrainReport train_vqvae(VqVaeModel& model, const std::vector<Volume4>& dataset,
                          const VqTrainConfig& cfg) {
  if (dataset.empty()) throw ArgumentError("train_vqvae: empty dataset");
  for (const Volume4& v : dataset) check_encodable(model, v);

  if (model.channel_scale.empty() && cfg.start_epoch == 0) {
    init_from_data(model, dataset, cfg.seed);
  }

  auto param_ptrs = model.param_list();
  tn::AdamWConfig opt;
  opt.lr = cfg.lr;

  VqTrainReport report;
  double first_epoch_recon = 0.0, last_epoch_recon = 0.0;
  int step = cfg.start_epoch * static_cast<int>(dataset.size());

  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }

    double epoch_recon = 0.0;
    for (std::size_t s : order) {
      tn::Tensor x = stack_to_tensor(dataset[s], model.channel_scale);
      tn::Tensor z = model.encoder_forward(x);
      QuantizeResult q = quantize(model.codebook, z);
      tn::Tensor recon = model.decoder_forward(q.z_q);
      tn::Tensor recon_loss = tn::mae_loss(recon, x);
      tn::Tensor loss =
          tn::add(recon_loss,
                  tn::add(q.codebook_loss,
                          tn::scale(q.commitment_loss, model.cfg.commitment_weight)));
      tn::backward(loss);
      tn::adamw_step(param_ptrs, opt);
      for (auto* p : param_ptrs) p->zero_grad();

      StepRecord row;
      row.step = step++;
      row.epoch = epoch;
      row.loss = loss.scalar();
      row.recon = recon_loss.scalar();
      row.codebook = q.codebook_loss.scalar();
      row.commitment = q.commitment_loss.scalar();
      report.steps.push_back(row);
      epoch_recon += row.recon;
    }
    epoch_recon /= static_cast<double>(dataset.size());
    if (epoch == cfg.start_epoch) first_epoch_recon = epoch_recon;
    last_epoch_recon = epoch_recon;
  }
  report.initial_recon_mae = first_epoch_recon;
  report.final_recon_mae = last_epoch_recon;

  // Codebook usage over the training set.
  std::vector<char> used(static_cast<std::size_t>(model.cfg.num_codes), 0);
  for (const Volume4& v : dataset) {
    std::vector<int> indices;
    quantize_latent(model, encode(model, v), &indices);
    for (int idx : indices) used[static_cast<std::size_t>(idx)] = 1;
  }
  int count = 0;
  for (char u : used) count += u;
  report.codebook_usage = static_cast<double>(count) / model.cfg.num_codes;
  return report;
}

namespace {

VqVaeModel clone_model(const VqVaeModel& src) {
  VqVaeModel dst(src.cfg, src.domain, 0);
  dst.channel_scale = src.channel_scale;
  auto sp = const_cast<VqVaeModel&>(src).params();
  auto dp = dst.params();
  for (std::size_t i = 0; i < sp.size(); ++i) {
    dp[i].second->value.values() = sp[i].second->value.values();
    dp[i].second->m = sp[i].second->m;
    dp[i].second->v = sp[i].second->v;
    dp[i].second->step = sp[i].second->step;
  }
  return dst;
}

}  // namespace

VqVaeModel finetune(const VqVaeModel& pretrained, const std::vector<Volume4>& target_dataset,
                    const VqTrainConfig& cfg, VqTrainReport* report) {
  VqVaeModel model = clone_model(pretrained);
  model.domain = "target";
  if (cfg.epochs > cfg.start_epoch) {
    VqTrainReport r = train_vqvae(model, target_dataset, cfg);
    if (report) *report = std::move(r);
  } else if (report) {
    *report = VqTrainReport{};
  }
  return model;
}

void save_vqvae(const VqVaeModel& model, const std::filesystem::path& path,
                const std::map<std::string, std::string>& extra_meta,
                bool include_optimizer_state) {
  std::map<std::string, std::string> meta = extra_meta;
  meta["model"] = "vqvae";
  meta["domain"] = model.domain;
  meta["in_channels"] = std::to_string(model.cfg.in_channels);
  meta["embed_dim"] = std::to_string(model.cfg.embed_dim);
  meta["num_codes"] = std::to_string(model.cfg.num_codes);
  meta["downsample"] = std::to_string(model.cfg.downsample);
  meta["base_channels"] = std::to_string(model.cfg.base_channels);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", model.cfg.commitment_weight);
  meta["commitment_weight"] = buf;
  meta["channel_scale"] = encode_scales(model.channel_scale);
  tn::save_checkpoint(path, const_cast<VqVaeModel&>(model).params(), meta,
                      include_optimizer_state);
}

VqVaeModel load_vqvae(const std::filesystem::path& path,
                      std::map<std::string, std::string>* meta_out) {
  auto meta = tn::read_checkpoint_meta(path);
  if (meta["model"] != "vqvae") {
    throw ArgumentError("not a vqvae checkpoint: " + path.string());
  }
  VqVaeConfig cfg;
  cfg.in_channels = std::stoi(meta.at("in_channels"));
  cfg.embed_dim = std::stoi(meta.at("embed_dim"));
  cfg.num_codes = std::stoi(meta.at("num_codes"));
  cfg.downsample = std::stoi(meta.at("downsample"));
  cfg.base_channels = std::stoi(meta.at("base_channels"));
  cfg.commitment_weight = std::strtod(meta.at("commitment_weight").c_str(), nullptr);
  VqVaeModel model(cfg, meta.at("domain"), 0);
  model.channel_scale = decode_scales(meta.at("channel_scale"));
  tn::load_checkpoint(path, model.params());
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

}  // namespace rishgen::vq
