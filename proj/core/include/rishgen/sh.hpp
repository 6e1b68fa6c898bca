#ifndef RISHGEN_SH_HPP
#define RISHGEN_SH_HPP

#include <Eigen/Dense>

#include "rishgen/volume.hpp"

namespace rishgen::sh {

/// Number of real even-order SH basis functions up to max_order:
/// (L+1)(L+2)/2.
inline int num_coefficients(int max_order) {
  return (max_order + 1) * (max_order + 2) / 2;
}

/// Column of (order l, degree m) in the order-major, degree-ascending
/// packing: (0,0), (2,-2)..(2,2), (4,-4)..(4,4), ...
inline int coefficient_index(int l, int m) { return l * (l - 1) / 2 + m + l; }

/// Identifies the basis convention + ordering baked into files and
/// checkpoints, so reconstruction can be verified to use the same basis
/// that produced a coefficient set.
std::uint32_t basis_fingerprint(int max_order);

/// Real, symmetric (even-order) SH basis sampled at a set of directions.
/// Convention: m = 0 uses N(l,0) P_l(cos t); m > 0 uses
/// sqrt(2) N(l,m) P_l^m(cos t) cos(m p); m < 0 uses the sin(|m|p) twin.
/// Associated Legendre functions carry no Condon-Shortley phase.
struct ShBasisMatrix {
  Eigen::MatrixXd m;  ///< rows = directions, cols = num_coefficients(max_order)
  int max_order = 0;

  int rows() const { return static_cast<int>(m.rows()); }
  int cols() const { return static_cast<int>(m.cols()); }
};

/// Per-voxel SH coefficient grid. Coefficient index is the slowest axis:
/// data[((c*nz + z)*ny + y)*nx + x].
struct ShCoefficients {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  int max_order = 0;
  std::vector<double> data;

  int num_coeffs() const { return num_coefficients(max_order); }
  std::size_t num_voxels() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(std::size_t voxel, int c) const {
    return static_cast<std::size_t>(c) * num_voxels() + voxel;
  }
  double& at(std::size_t voxel, int c) { return data[index(voxel, c)]; }
  double at(std::size_t voxel, int c) const { return data[index(voxel, c)]; }

  Volume4 to_volume4() const;
  static ShCoefficients from_volume4(const Volume4& v);
};

/// Per-order energy maps |C_i|^2, order index slowest (orders 0,2,...,L).
struct RishFeatures {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  int max_order = 0;
  std::vector<double> data;

  int num_orders() const { return max_order / 2 + 1; }
  std::size_t num_voxels() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  double& at(std::size_t voxel, int order_index) {
    return data[static_cast<std::size_t>(order_index) * num_voxels() + voxel];
  }
  double at(std::size_t voxel, int order_index) const {
    return data[static_cast<std::size_t>(order_index) * num_voxels() + voxel];
  }

  Volume3 order_map(int order_index) const;
  Volume4 to_volume4() const;
  static RishFeatures from_volume4(const Volume4& v);
};

/// Per-order multiplicative factors on SH coefficients, plus the tau used
/// to regularize the ratio that produced them.
struct ScaleMap {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  int max_order = 0;
  double tau = 1e-8;
  std::vector<double> data;  ///< order index slowest, like RishFeatures

  int num_orders() const { return max_order / 2 + 1; }
  std::size_t num_voxels() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  double& at(std::size_t voxel, int order_index) {
    return data[static_cast<std::size_t>(order_index) * num_voxels() + voxel];
  }
  double at(std::size_t voxel, int order_index) const {
    return data[static_cast<std::size_t>(order_index) * num_voxels() + voxel];
  }
};

/// Evaluates the basis at every entry of the gradient table (baseline rows
/// included; they are ignored by fitting). Throws on odd max_order.
ShBasisMatrix sh_basis(const GradientTable& gtab, int max_order);

/// Basis at an explicit direction list.
ShBasisMatrix sh_basis(const std::vector<std::array<double, 3>>& dirs, int max_order);

/// Laplace-Beltrami regularized least-squares fit, per voxel:
///   C = (B^T B + lambda_lb * Lambda)^-1 B^T s,  Lambda = diag(l^2 (l+1)^2).
/// Signals with b > 0 are divided by the per-voxel mean baseline first when
/// baselines are present; voxels whose mean baseline is <= 1e-6 are masked
/// (all coefficients zero). Without baselines the input is taken as already
/// normalized.
ShCoefficients fit_sh(const Volume4& dwi, const GradientTable& gtab, int max_order,
                      double lambda_lb);

/// Evaluates s = B C at the requested table. The table may differ from the
/// one used for fitting. Baseline entries are emitted as 1.0 (signals are in
/// normalized attenuation units).
Volume4 reconstruct_signal(const ShCoefficients& coeffs, const GradientTable& gtab);

/// Per-order energy: |C_i|^2 = sum_j C_ij^2.
RishFeatures compute_rish(const ShCoefficients& coeffs);

/// lambda_i = sqrt(target_i / (source_i + tau)), voxel-wise per order.
ScaleMap compute_scale_map(const RishFeatures& rish_target,
                           const RishFeatures& rish_source, double tau);

/// C_ij <- lambda_i(v) * C_ij per voxel; order structure untouched.
ShCoefficients apply_scale_map(const ShCoefficients& coeffs, const ScaleMap& scale);

}  // namespace rishgen::sh

#endif
