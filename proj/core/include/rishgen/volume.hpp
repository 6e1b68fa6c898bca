#ifndef RISHGEN_VOLUME_HPP
#define RISHGEN_VOLUME_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <variant>
#include <vector>

#include "rishgen/common.hpp"

namespace rishgen {

/// Semantic tag stored in the volume file header so downstream stages can
/// sanity-check what a file contains.
enum class VolumeSemantics : std::uint32_t {
  kScalar = 0,          ///< generic scalar map (FA, difference map, ...)
  kDwi = 1,             ///< 4D diffusion-weighted signal, q slowest
  kShCoefficients = 2,  ///< 4D SH coefficient stack; aux0 = max order, aux1 = basis fingerprint
  kRish = 3,            ///< 4D per-order energy stack; aux0 = max order
  kScaleMap = 4,        ///< 4D per-order scale stack; aux0 = max order
};

/// Dense scalar grid. Layout is row-major with x fastest:
/// data[(z*ny + y)*nx + x]. Values live in memory as double; the on-disk
/// payload is little-endian float32 (see docs/volume-format in README).
struct Volume3 {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  std::vector<double> data;
  VolumeSemantics semantics = VolumeSemantics::kScalar;
  std::array<std::uint32_t, 2> aux{0, 0};

  Volume3() = default;
  Volume3(std::array<int, 3> d, std::array<double, 3> vs, double fill = 0.0)
      : dims(d), voxel_size(vs),
        data(static_cast<std::size_t>(d[0]) * d[1] * d[2], fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  double& at(int x, int y, int z) { return data[index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[index(x, y, z)]; }

  /// Throws ArgumentError if dims/data/voxel sizes are inconsistent or a
  /// value is non-finite.
  void validate() const;
};

/// Dense grid with a fourth (gradient/channel) axis, q slowest:
/// data[((q*nz + z)*ny + y)*nx + x].
struct Volume4 {
  std::array<int, 4> dims{0, 0, 0, 0};  ///< nx, ny, nz, nq
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  std::vector<double> data;
  VolumeSemantics semantics = VolumeSemantics::kDwi;
  std::array<std::uint32_t, 2> aux{0, 0};

  Volume4() = default;
  Volume4(std::array<int, 4> d, std::array<double, 3> vs, double fill = 0.0)
      : dims(d), voxel_size(vs),
        data(static_cast<std::size_t>(d[0]) * d[1] * d[2] * d[3], fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t num_voxels() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int x, int y, int z, int q) const {
    return ((static_cast<std::size_t>(q) * dims[2] + z) * dims[1] + y) * dims[0] + x;
  }
  double& at(int x, int y, int z, int q) { return data[index(x, y, z, q)]; }
  double at(int x, int y, int z, int q) const { return data[index(x, y, z, q)]; }

  /// Channel q as a standalone Volume3 (copies).
  Volume3 channel(int q) const;

  void validate() const;
};

/// Diffusion sampling scheme: per-entry b-value and unit direction.
/// Entries with b == 0 are baseline images.
struct GradientTable {
  std::vector<double> bvals;
  std::vector<std::array<double, 3>> dirs;

  std::size_t size() const { return bvals.size(); }
  std::size_t num_baselines() const;
  std::vector<std::size_t> weighted_indices() const;  ///< indices with b > 0

  /// Checks |dir| == 1 within 1e-6 and b >= 0.
  void validate() const;
};

/// Writes a volume in the RGVL container (see README for the exact header
/// layout). Payload is little-endian float32; in-memory doubles are rounded.
void save_volume(const Volume3& v, const std::filesystem::path& path);
void save_volume(const Volume4& v, const std::filesystem::path& path);

/// Loads either rank. Throws FormatError (with byte offset) on bad magic,
/// version, rank, dtype, or truncated payload.
std::variant<Volume3, Volume4> load_volume(const std::filesystem::path& path);
Volume3 load_volume3(const std::filesystem::path& path);
Volume4 load_volume4(const std::filesystem::path& path);

/// Trilinear resampling to new_dims. Voxel sizes are rescaled so the
/// physical extent per axis is preserved; samples outside the grid clamp
/// to the boundary voxel. Output values never leave [min, max] of the input.
Volume3 resample_trilinear(const Volume3& v, std::array<int, 3> new_dims);

/// Interpolating cubic B-spline resampling (recursive prefilter, mirror
/// boundary). Reproduces the input exactly at identity dims and is exact on
/// quadratics away from the boundary; may overshoot the input value range.
Volume3 upsample_bspline(const Volume3& v, std::array<int, 3> new_dims);

/// Per-channel resampling of a 4D stack (same conventions as the Volume3 ops).
Volume4 resample_trilinear4(const Volume4& v, std::array<int, 3> new_dims);

/// Deterministic stream for the given seed; see Rng in common.hpp.
inline Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace rishgen

#endif
