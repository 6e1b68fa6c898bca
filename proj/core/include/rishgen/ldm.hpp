#ifndef RISHGEN_LDM_HPP
#define RISHGEN_LDM_HPP

#include "rishgen/layers.hpp"
#include "rishgen/vqvae.hpp"

namespace rishgen::ldm {

/// beta/alpha/alpha_bar tables indexed by t in [0, T]; index 0 is the
/// convention row (beta 0, alpha_bar 1).
struct NoiseSchedule {
  int timesteps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  void validate() const;
};

/// Linear beta ramp. Throws unless 0 < beta_start <= beta_end < 1.
NoiseSchedule make_schedule(int timesteps, double beta_start, double beta_end);

enum class ClassLabel : int {
  kSource3T = 0,
  kTarget7T = 1,
  kUnconditional = 2,  ///< dropout/guidance only, never a dataset label
};

struct DenoiserConfig {
  int latent_channels = 32;
  std::vector<int> widths = {32, 64, 128, 128};  ///< per resolution level
  int context_dim = 64;   ///< class-embedding width fed to cross-attention
  int temb_dim = 128;     ///< hidden width of the timestep MLP
  int heads = 4;          ///< attention heads (levels 3 and 4)

  void validate() const;
};

/// Trainable cross-attention site; weights() is the live view consumed by
/// tn::cross_attention.
struct AttentionParams {
  tn::Parameter wq, wk, wv, wo;
  int heads = 1;
  int dk = 0;

  tn::AttentionWeights weights() const {
    return {wq.value, wk.value, wv.value, wo.value, heads, dk};
  }
  void collect(const std::string& prefix, tn::ParamMap& out) {
    out.emplace_back(prefix + ".wq", &wq);
    out.emplace_back(prefix + ".wk", &wk);
    out.emplace_back(prefix + ".wv", &wv);
    out.emplace_back(prefix + ".wo", &wo);
  }
};

/// Epsilon-prediction U-Net with sinusoidal timestep conditioning and
/// class conditioning through cross-attention at the two coarsest levels.
struct DenoiserNet {
  DenoiserConfig cfg;
  double latent_scale = 1.0;  ///< diffusion operates on z / latent_scale

  tn::Parameter class_embedding;  // (3, context_dim); row 2 is the null label
  tn::Parameter temb_w1, temb_b1, temb_w2, temb_b2;

  tn::ConvLayer in_conv;
  std::vector<tn::ResBlock> down_res;   // two per level
  std::vector<tn::ConvLayer> down_conv; // between levels
  std::vector<tn::ResBlock> up_res;     // one per level (after skip concat)
  std::vector<tn::ConvLayer> up_conv;
  std::vector<AttentionParams> attn;  // sites at levels 3 and 4
  tn::NormLayer out_norm;
  tn::ConvLayer out_conv;  // zero-init so the untrained net predicts 0

  mutable int last_embedding_row = -1;  ///< instrumentation for tests

  DenoiserNet() = default;
  DenoiserNet(DenoiserConfig cfg, std::uint64_t init_seed);

  tn::ParamMap params();
  std::vector<tn::Parameter*> param_list();

  /// x shaped (latent_channels, d, h, w); t in [0, T]; returns the epsilon
  /// prediction with the same shape.
  tn::Tensor forward(const tn::Tensor& x, int t, ClassLabel label) const;

  /// Convenience wrapper on raw latent values (no tape).
  std::vector<double> predict(const std::vector<double>& x, const std::array<int, 3>& dims,
                              int t, ClassLabel label) const;
};

/// Per-channel-group sampler controls. Groups are contiguous slices of the
/// latent channels (group g of G covers [g*D/G, (g+1)*D/G)); with the stacked
/// per-order autoencoder they stand in for the three RISH orders.
struct SamplerConfig {
  std::vector<double> omega = {1.0, 2.0, 3.0};
  std::vector<int> t_enc = {300, 500, 600};
  int stride = 20;
  bool encode_unconditional = false;  ///< encode under the null label instead of source

  void validate(int timesteps) const;
  int num_groups() const { return static_cast<int>(omega.size()); }
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise. t = 0 returns x0.
vq::LatentGrid q_sample(const vq::LatentGrid& x0, int t, const std::vector<double>& noise,
                        const NoiseSchedule& schedule);

/// (1 + omega) eps(x,t,c) - omega eps(x,t) elementwise. omega == 0 skips the
/// unconditional pass and returns the conditional prediction bit-exactly.
std::vector<double> guided_epsilon(const DenoiserNet& net, const vq::LatentGrid& x_t, int t,
                                   ClassLabel label, double omega);

/// Deterministic DDIM inversion from t = 0 up to t_enc (ladder stride
/// `stride`), using the net's own prediction at each rung.
vq::LatentGrid ddim_encode(const DenoiserNet& net, const vq::LatentGrid& x0, int t_enc,
                           ClassLabel label, const NoiseSchedule& schedule, int stride = 1);

/// One (t -> t_next) DDIM update on raw values; exposed for tests.
/// x_next = sqrt(abar_next) * x0_hat + sqrt(1 - abar_next) * eps with
/// x0_hat = (x - sqrt(1 - abar_t) eps) / sqrt(abar_t).
void ddim_update(std::vector<double>& x, const std::vector<double>& eps, int t, int t_next,
                 const NoiseSchedule& schedule, std::size_t begin = 0,
                 std::size_t end = SIZE_MAX);

struct SampleLogRow {
  int t = 0;
  double mean_abs_eps = 0.0;
};

/// Deterministic guided DDIM sampling from t_start down to 0. Per-group
/// omega applies; all groups are active (no per-group depth), which is the
/// t_enc == t_start special case of translate().
vq::LatentGrid ddim_sample(const DenoiserNet& net, const vq::LatentGrid& x_t, int t_start,
                           ClassLabel label, const SamplerConfig& config,
                           const NoiseSchedule& schedule,
                           std::vector<SampleLogRow>* log = nullptr);

/// Source-to-target latent translation: DDIM-encode each channel group to its
/// configured depth under the source (or null) label, then guided DDIM
/// sampling toward the target label. Groups sit at their own noise levels; a
/// group only updates while the global ladder is within its depth.
vq::LatentGrid translate(const DenoiserNet& net, const vq::LatentGrid& z_source,
                         const SamplerConfig& config, const NoiseSchedule& schedule,
                         std::vector<SampleLogRow>* log = nullptr);

struct LatentSample {
  vq::LatentGrid z;
  ClassLabel label = ClassLabel::kSource3T;
};

/// One optimizer step per batch element: draw t uniform in [1,T], draw
/// noise, drop the label to UNCONDITIONAL with probability drop_prob,
/// minimize ||eps - eps_theta(x_t, t, c)||^2. Returns the mean loss;
/// `dropped` (when given) counts replaced labels.
double train_step(DenoiserNet& net, const std::vector<const LatentSample*>& batch,
                  const NoiseSchedule& schedule, double drop_prob, Rng& rng,
                  const tn::AdamWConfig& opt, int* dropped = nullptr);

struct LdmTrainConfig {
  int epochs = 100;
  int start_epoch = 0;
  double lr = 1e-4;
  double drop_prob = 0.1;
  std::uint64_t seed = 0;
};

struct LdmStepRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
};

struct LdmTrainReport {
  std::vector<LdmStepRecord> steps;
  double first_epoch_loss = 0.0;
  double last_epoch_loss = 0.0;
  long unconditional_samples = 0;
};

/// Epoch loop over labeled latents; deterministic and resumable (all rng is
/// derived from (seed, epoch) and (seed, step)). On first use (epoch 0,
/// latent_scale still 1) the latent scale is set from the dataset std.
LdmTrainReport train_ldm(DenoiserNet& net, const std::vector<LatentSample>& dataset,
                         const NoiseSchedule& schedule, const LdmTrainConfig& cfg);

void save_denoiser(const DenoiserNet& net, const std::filesystem::path& path,
                   const std::map<std::string, std::string>& extra_meta = {},
                   bool include_optimizer_state = true);
DenoiserNet load_denoiser(const std::filesystem::path& path,
                          std::map<std::string, std::string>* meta_out = nullptr);

}  // namespace rishgen::ldm

#endif
