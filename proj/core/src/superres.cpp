#include "rishgen/superres.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace rishgen::sr {

void SrConfig::validate() const {
  if (channels < 1 || features < 1 || blocks < 0) {
    throw ArgumentError("superres: bad channel/feature/block counts");
  }
  if (scale < 1.0) throw ArgumentError("superres: scale factor must be >= 1");
  if (patch < 4) throw ArgumentError("superres: patch must be >= 4");
}

std::array<int, 3> SrConfig::target_dims(const std::array<int, 3>& in) const {
  return {static_cast<int>(std::lround(in[0] * scale)),
          static_cast<int>(std::lround(in[1] * scale)),
          static_cast<int>(std::lround(in[2] * scale))};
}

SrModel::SrModel(SrConfig config, std::uint64_t init_seed) : cfg(config) {
  cfg.validate();
  Rng rng(derive_seed(init_seed, "sr-init"));
  head = tn::ConvLayer(cfg.channels, cfg.features, 3, rng);
  for (int i = 0; i < cfg.blocks; ++i) {
    body.emplace_back(cfg.features, cfg.features, rng);
  }
  tail_norm = tn::NormLayer(cfg.features);
  tail = tn::ConvLayer::zero_init(cfg.features, cfg.channels, 3);
}

tn::ParamMap SrModel::params() {
  tn::ParamMap out;
  head.collect("head", out);
  for (std::size_t i = 0; i < body.size(); ++i) {
    body[i].collect("body" + std::to_string(i), out);
  }
  tail_norm.collect("tail_norm", out);
  tail.collect("tail", out);
  return out;
}

std::vector<tn::Parameter*> SrModel::param_list() {
  std::vector<tn::Parameter*> out;
  for (auto& [name, p] : params()) out.push_back(p);
  return out;
}

tn::Tensor SrModel::refine(const tn::Tensor& upsampled) const {
  tn::Tensor h = head(upsampled);
  for (const auto& block : body) h = block(h);
  tn::Tensor residual = tail(tn::silu(tail_norm(h)));
  return relu(tn::add(upsampled, residual));
}

namespace {

tn::Tensor stack_tensor(const Volume4& v) {
  return tn::Tensor::from_data({v.dims[3], v.dims[2], v.dims[1], v.dims[0]}, v.data);
}

}  // namespace

Volume4 sr_forward(const SrModel& model, const Volume4& rish_stack) {
  model.cfg.validate();
  if (rish_stack.dims[3] != model.cfg.channels) {
    throw ArgumentError("sr_forward: expected a " + std::to_string(model.cfg.channels) +
                        "-channel stack");
  }
  const std::array<int, 3> target =
      model.cfg.target_dims({rish_stack.dims[0], rish_stack.dims[1], rish_stack.dims[2]});
  Volume4 up = resample_trilinear4(rish_stack, target);

  tn::NoGradGuard no_grad;
  tn::Tensor out = model.refine(stack_tensor(up));
  Volume4 result = up;
  result.data = out.values();
  return result;
}

SrTrainReport train_sr(SrModel& model, const std::vector<SrPair>& dataset,
                       const SrTrainConfig& cfg) {
  if (dataset.empty()) throw ArgumentError("train_sr: empty dataset");
  model.cfg.validate();

  // Upsample every low-res stack once; training crops come from these.
  std::vector<Volume4> upsampled;
  upsampled.reserve(dataset.size());
  for (const SrPair& pair : dataset) {
    if (pair.high.dims[3] != model.cfg.channels || pair.low.dims[3] != model.cfg.channels) {
      throw ArgumentError("train_sr: channel count mismatch");
    }
    upsampled.push_back(resample_trilinear4(
        pair.low, {pair.high.dims[0], pair.high.dims[1], pair.high.dims[2]}));
  }

  auto param_ptrs = model.param_list();
  tn::AdamWConfig opt;
  opt.lr = cfg.lr;

  SrTrainReport report;
  const int patch = model.cfg.patch;
  int step = cfg.start_epoch * static_cast<int>(dataset.size()) * model.cfg.patches_per_sample;

  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, "sr-shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }

    double epoch_mse = 0.0;
    int epoch_steps = 0;
    for (std::size_t s : order) {
      const Volume4& up = upsampled[s];
      const Volume4& hi = dataset[s].high;
      const int pd = std::min({patch, up.dims[0], up.dims[1], up.dims[2]});
      for (int rep = 0; rep < model.cfg.patches_per_sample; ++rep) {
        Rng patch_rng(derive_seed(cfg.seed, "sr-patch", static_cast<std::uint64_t>(step)));
        std::array<int, 3> corner;
        for (int axis = 0; axis < 3; ++axis) {
          const int room = up.dims[axis] - pd;
          corner[axis] = room > 0 ? static_cast<int>(patch_rng.below(
                                        static_cast<std::uint64_t>(room + 1)))
                                  : 0;
        }

        auto crop = [&](const Volume4& v) {
          std::vector<double> values(
              static_cast<std::size_t>(model.cfg.channels) * pd * pd * pd);
          std::size_t o = 0;
          for (int c = 0; c < model.cfg.channels; ++c)
            for (int z = 0; z < pd; ++z)
              for (int y = 0; y < pd; ++y)
                for (int x = 0; x < pd; ++x, ++o)
                  values[o] = v.at(corner[0] + x, corner[1] + y, corner[2] + z, c);
          return tn::Tensor::from_data({model.cfg.channels, pd, pd, pd}, std::move(values));
        };

        tn::Tensor pred = model.refine(crop(up));
        tn::Tensor loss = tn::mse_loss(pred, crop(hi));
        tn::backward(loss);
        tn::adamw_step(param_ptrs, opt);
        for (auto* p : param_ptrs) p->zero_grad();

        report.steps.push_back({step, epoch, loss.scalar()});
        epoch_mse += loss.scalar();
        ++epoch_steps;
        ++step;
      }
    }
    epoch_mse /= static_cast<double>(epoch_steps);
    if (epoch == cfg.start_epoch) report.first_epoch_mse = epoch_mse;
    report.last_epoch_mse = epoch_mse;
  }
  return report;
}

void save_sr(const SrModel& model, const std::filesystem::path& path,
             const std::map<std::string, std::string>& extra_meta,
             bool include_optimizer_state) {
  std::map<std::string, std::string> meta = extra_meta;
  meta["model"] = "superres";
  meta["channels"] = std::to_string(model.cfg.channels);
  meta["features"] = std::to_string(model.cfg.features);
  meta["blocks"] = std::to_string(model.cfg.blocks);
  meta["patch"] = std::to_string(model.cfg.patch);
  meta["patches_per_sample"] = std::to_string(model.cfg.patches_per_sample);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", model.cfg.scale);
  meta["scale"] = buf;
  tn::save_checkpoint(path, const_cast<SrModel&>(model).params(), meta,
                      include_optimizer_state);
}

SrModel load_sr(const std::filesystem::path& path,
                std::map<std::string, std::string>* meta_out) {
  auto meta = tn::read_checkpoint_meta(path);
  if (meta["model"] != "superres") {
    throw ArgumentError("not a superres checkpoint: " + path.string());
  }
  SrConfig cfg;
  cfg.channels = std::stoi(meta.at("channels"));
  cfg.features = std::stoi(meta.at("features"));
  cfg.blocks = std::stoi(meta.at("blocks"));
  cfg.patch = std::stoi(meta.at("patch"));
  cfg.patches_per_sample = std::stoi(meta.at("patches_per_sample"));
  cfg.scale = std::strtod(meta.at("scale").c_str(), nullptr);
  SrModel model(cfg, 0);
  tn::load_checkpoint(path, model.params());
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

}  // namespace rishgen::sr
