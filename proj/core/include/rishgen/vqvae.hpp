#ifndef RISHGEN_VQVAE_HPP
#define RISHGEN_VQVAE_HPP

#include <optional>
#include <string>

#include "rishgen/layers.hpp"
#include "rishgen/volume.hpp"

namespace rishgen::vq {

/// Encoder output (or its quantized counterpart) on the downsampled grid,
/// channel-major: data[((c*nz + z)*ny + y)*nx + x].
struct LatentGrid {
  std::array<int, 3> dims{0, 0, 0};
  int channels = 0;
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  std::vector<double> data;

  std::size_t num_positions() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t size() const { return data.size(); }
};

struct Codebook {
  tn::Parameter table;  // (num_codes, embed_dim)

  int num_codes() const { return table.value.shape()[0]; }
  int dim() const { return table.value.shape()[1]; }
};

struct VqVaeConfig {
  int in_channels = 3;   ///< stacked RISH orders
  int embed_dim = 32;    ///< D
  int num_codes = 256;   ///< K
  int downsample = 4;    ///< f, power of two
  int base_channels = 16;
  double commitment_weight = 0.25;

  int levels() const;  ///< log2(downsample)
  void validate() const;
};

/// Convolutional encoder/decoder pair around a vector-quantized bottleneck.
/// Channel normalization (per input channel, to unit 95th percentile of the
/// training set) is part of the model and applied symmetrically around it.
struct VqVaeModel {
  VqVaeConfig cfg;
  std::string domain;  ///< "source" or "target"
  std::vector<double> channel_scale;

  tn::ConvLayer enc_in;
  std::vector<tn::ConvLayer> enc_down;
  std::vector<tn::ResBlock> enc_res;
  tn::NormLayer enc_out_norm;
  tn::ConvLayer enc_out;

  tn::ConvLayer dec_in;
  tn::ResBlock dec_res0;
  std::vector<tn::ConvLayer> dec_up;
  std::vector<tn::ResBlock> dec_res;
  tn::NormLayer dec_out_norm;
  tn::ConvLayer dec_out;

  Codebook codebook;

  VqVaeModel() = default;
  VqVaeModel(VqVaeConfig cfg, std::string domain, std::uint64_t init_seed);

  tn::ParamMap params();
  std::vector<tn::Parameter*> param_list();

  /// Encoder as a tape op; x is the normalized (in_channels, n, n, n) stack.
  tn::Tensor encoder_forward(const tn::Tensor& x) const;
  /// Decoder as a tape op; output is softplus-activated (non-negative).
  tn::Tensor decoder_forward(const tn::Tensor& zq) const;
};

struct QuantizeResult {
  tn::Tensor z_q;  ///< straight-through: values quantized, gradient = identity
  std::vector<int> indices;
  tn::Tensor codebook_loss;    ///< mean ||sg(z) - e||^2
  tn::Tensor commitment_loss;  ///< mean ||z - sg(e)||^2
};

/// Nearest codebook row per latent position (Euclidean, ties to the lowest
/// index). Gradients pass straight through to z; the codebook learns only
/// through codebook_loss.
QuantizeResult quantize(Codebook& codebook, const tn::Tensor& z);

/// Continuous encoder output for a 3-channel RISH stack. Spatial dims must
/// be divisible by cfg.downsample.
LatentGrid encode(const VqVaeModel& model, const Volume4& rish_stack);

/// Snaps a continuous latent to the model's codebook.
LatentGrid quantize_latent(const VqVaeModel& model, const LatentGrid& z,
                           std::vector<int>* indices_out = nullptr);

/// Decoder: latent -> non-negative RISH stack on the full-resolution grid.
Volume4 decode(const VqVaeModel& model, const LatentGrid& z_q);

/// decode(quantize(encode(x))): the autoencoder round trip.
Volume4 reconstruct(const VqVaeModel& model, const Volume4& rish_stack);

struct VqTrainConfig {
  int epochs = 30;
  int start_epoch = 0;  ///< resume point; rng streams are per (seed, epoch)
  double lr = 1e-4;
  std::uint64_t seed = 0;
};

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
};

struct VqTrainReport {
  std::vector<StepRecord> steps;
  double initial_recon_mae = 0.0;  ///< mean recon MAE over the first epoch
  double final_recon_mae = 0.0;    ///< mean recon MAE over the last epoch
  double codebook_usage = 0.0;     ///< fraction of codes hit on the training set
};

/// MAE + codebook + commitment-weighted training, one optimizer step per
/// sample, deterministic under the config seed. On the first call (epoch 0)
/// the channel scales and a data-driven codebook init are computed from the
/// dataset; on resume they are kept as loaded.
VqTrainReport train_vqvae(VqVaeModel& model, const std::vector<Volume4>& dataset,
                          const VqTrainConfig& cfg);

/// Transfer: continue training a copy of `pretrained` on the target dataset
/// (typically at a reduced learning rate). Channel scales move to the target
/// dataset statistics; weights start from the source model.
VqVaeModel finetune(const VqVaeModel& pretrained, const std::vector<Volume4>& target_dataset,
                    const VqTrainConfig& cfg, VqTrainReport* report = nullptr);

/// Checkpoint I/O (tensornet container + domain tag + channel scales).
void save_vqvae(const VqVaeModel& model, const std::filesystem::path& path,
                const std::map<std::string, std::string>& extra_meta = {},
                bool include_optimizer_state = true);
VqVaeModel load_vqvae(const std::filesystem::path& path,
                      std::map<std::string, std::string>* meta_out = nullptr);

}  // namespace rishgen::vq

#endif
