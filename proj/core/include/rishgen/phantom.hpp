#ifndef RISHGEN_PHANTOM_HPP
#define RISHGEN_PHANTOM_HPP

#include "rishgen/sh.hpp"
#include "rishgen/volume.hpp"

namespace rishgen::phantom {

/// Up to three compartments per voxel (two fiber bundles + isotropic
/// background). Tensors are symmetric, packed (xx, yy, zz, xy, xz, yz) in
/// mm^2/s. Fractions sum to 1 inside the head mask and to 0 outside.
struct VoxelCompartments {
  std::array<double, 3> fraction{0.0, 0.0, 0.0};
  std::array<std::array<double, 6>, 3> tensor{};
};

struct TensorField {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  std::vector<VoxelCompartments> voxels;
};

struct PhantomConfig {
  std::array<int, 3> source_dims{32, 32, 32};
  std::array<int, 3> target_dims{38, 38, 38};
  double source_voxel = 1.25;  ///< mm
  double target_voxel = 1.05;  ///< mm
  double snr_source = 25.0;
  double snr_target = 40.0;
  int source_dirs = 60;
  int target_dirs = 64;
  int num_baselines = 4;
  double bvalue = 1000.0;  ///< s/mm^2
  double contrast_amplitude = 0.2;  ///< per-order target-domain bias, 0 disables
  int sh_order = 4;

  void validate() const;
};

/// Multi-tensor forward model: S(g) = s0 * sum_k f_k exp(-b g^T D_k g);
/// baseline entries (b = 0) come out as s0 scaled by the total fraction.
Volume4 simulate_signal(const TensorField& field, const GradientTable& gtab,
                        double s0 = 1.0);

/// Magnitude (Rician) noise: sqrt((s + n1)^2 + n2^2) with n_i ~ N(0, sigma^2)
/// and sigma = s0 / snr. A non-finite snr returns the input unchanged.
Volume4 add_rician_noise(const Volume4& dwi, double snr, Rng& rng, double s0 = 1.0);

/// Evenly spread unit directions on the upper hemisphere (golden-angle
/// spiral); deterministic.
std::vector<std::array<double, 3>> golden_directions(int n);

/// A gradient table with `num_baselines` b=0 entries followed by `dirs`
/// weighted directions at `bvalue`.
GradientTable make_scheme(int dirs, int num_baselines, double bvalue);

struct PhantomPair {
  Volume4 source_dwi;
  GradientTable source_gtab;
  Volume4 target_dwi;
  GradientTable target_gtab;

  // Exact generation-time ground truth.
  TensorField source_field;
  TensorField target_field;
  sh::ShCoefficients source_coeffs;  ///< band-limited clean coefficients
  sh::ShCoefficients target_coeffs;  ///< contrast applied
  std::vector<Volume3> contrast;     ///< per-order multiplicative field, target grid
  Volume3 source_mask;
  Volume3 target_mask;
};

/// Paired generator: the same seeded two-bundle crossing geometry sampled on
/// both grids; the target domain gets lower noise, a finer grid and a smooth
/// per-order contrast field so the source-to-target mapping is non-trivial.
PhantomPair generate_pair(const PhantomConfig& config, std::uint64_t seed);

/// On-disk layout: <dir>/<stem>_{source,target}.rgvl volumes plus
/// <dir>/<stem>.json (gradient tables, s0/snr, seed, contrast summary).
/// Ground-truth coefficient stacks are saved alongside for oracle checks.
/// Source-only subjects (the abundant low-field corpus) are written with
/// include_target = false.
void save_pair(const PhantomPair& pair, const std::filesystem::path& dir,
               const std::string& stem, const PhantomConfig& config, std::uint64_t seed,
               bool include_target = true);

struct LoadedPhantom {
  Volume4 source_dwi;
  GradientTable source_gtab;
  Volume4 target_dwi;
  GradientTable target_gtab;
  sh::ShCoefficients source_coeffs;
  sh::ShCoefficients target_coeffs;
  bool has_target = false;
};

LoadedPhantom load_pair(const std::filesystem::path& dir, const std::string& stem);

}  // namespace rishgen::phantom

#endif
