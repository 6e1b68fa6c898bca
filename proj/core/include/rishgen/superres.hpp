#ifndef RISHGEN_SUPERRES_HPP
#define RISHGEN_SUPERRES_HPP

#include "rishgen/layers.hpp"
#include "rishgen/volume.hpp"

namespace rishgen::sr {

struct SrConfig {
  int channels = 3;    ///< RISH stack channels
  int features = 32;   ///< trunk width
  int blocks = 4;      ///< middle residual blocks
  double scale = 1.2;  ///< target dims = round(input dims * scale), >= 1
  int patch = 16;      ///< training patch edge (on the upsampled grid)
  int patches_per_sample = 4;

  void validate() const;
  std::array<int, 3> target_dims(const std::array<int, 3>& in) const;
};

/// Pre-upsampling residual refiner: trilinear upsample to the target grid,
/// then head conv, residual trunk, zero-initialized tail conv added back onto
/// the upsampled input. Zero tail means the module IS the interpolation.
struct SrModel {
  SrConfig cfg;
  tn::ConvLayer head;
  std::vector<tn::ResBlock> body;
  tn::NormLayer tail_norm;
  tn::ConvLayer tail;  // zero-init

  SrModel() = default;
  SrModel(SrConfig cfg, std::uint64_t init_seed);

  tn::ParamMap params();
  std::vector<tn::Parameter*> param_list();

  /// Residual branch on an already-upsampled (channels, d, h, w) tensor.
  tn::Tensor refine(const tn::Tensor& upsampled) const;
};

/// Upsample-then-refine; output is clamped at zero so RISH stacks stay
/// non-negative while the zero-tail case reproduces the trilinear upsample
/// exactly.
Volume4 sr_forward(const SrModel& model, const Volume4& rish_stack);

struct SrTrainConfig {
  int epochs = 20;
  int start_epoch = 0;
  double lr = 1e-4;
  std::uint64_t seed = 0;
};

struct SrPair {
  Volume4 low;   ///< generated low-resolution RISH stack
  Volume4 high;  ///< matching ground-truth stack on the target grid
};

struct SrStepRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
};

struct SrTrainReport {
  std::vector<SrStepRecord> steps;
  double first_epoch_mse = 0.0;
  double last_epoch_mse = 0.0;
};

/// MSE training on randomly cropped patch pairs of (upsampled low, high),
/// deterministic under the seed. Throws on an empty dataset.
SrTrainReport train_sr(SrModel& model, const std::vector<SrPair>& dataset,
                       const SrTrainConfig& cfg);

void save_sr(const SrModel& model, const std::filesystem::path& path,
             const std::map<std::string, std::string>& extra_meta = {},
             bool include_optimizer_state = true);
SrModel load_sr(const std::filesystem::path& path,
                std::map<std::string, std::string>* meta_out = nullptr);

}  // namespace rishgen::sr

#endif
