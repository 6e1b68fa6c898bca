#include "rishgen/sh.hpp"

#include <cmath>

namespace rishgen::sh {

namespace {

constexpr double kFourPi = 12.566370614359172954;

// Associated Legendre P_l^m(x) for m >= 0, no Condon-Shortley phase.
double assoc_legendre(int l, int m, double x) {
  double pmm = 1.0;
  if (m > 0) {
    double somx2 = std::sqrt((1.0 - x) * (1.0 + x));
    double fact = 1.0;
    for (int i = 1; i <= m; ++i) {
      pmm *= fact * somx2;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pmmp1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pmmp1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = ((2.0 * ll - 1.0) * x * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pmmp1;
    pmmp1 = pll;
  }
  return pll;
}

double sh_normalization(int l, int m) {
  double ratio = 1.0;  // (l-m)! / (l+m)!
  for (int k = l - m + 1; k <= l + m; ++k) ratio /= k;
  return std::sqrt((2.0 * l + 1.0) / kFourPi * ratio);
}

double real_sh(int l, int m, const std::array<double, 3>& dir) {
  const double cos_theta = dir[2];
  const double phi = std::atan2(dir[1], dir[0]);
  if (m == 0) return sh_normalization(l, 0) * assoc_legendre(l, 0, cos_theta);
  const int am = std::abs(m);
  const double base =
      std::sqrt(2.0) * sh_normalization(l, am) * assoc_legendre(l, am, cos_theta);
  return m > 0 ? base * std::cos(am * phi) : base * std::sin(am * phi);
}

void check_even_order(int max_order) {
  if (max_order < 0 || max_order % 2 != 0) {
    throw ArgumentError("max_order must be a non-negative even integer, got " +
                        std::to_string(max_order));
  }
}

void check_same_grid(const std::array<int, 3>& a, const std::array<int, 3>& b,
                     const char* what) {
  if (a != b) throw ArgumentError(std::string(what) + ": grid dims mismatch");
}

}  // namespace

std::uint32_t basis_fingerprint(int max_order) {
  std::uint64_t h = fnv1a64("rishgen-sh/real-even/no-condon-shortley/order-major-v1/L=" +
                            std::to_string(max_order));
  return static_cast<std::uint32_t>(h ^ (h >> 32));
}

ShBasisMatrix sh_basis(const std::vector<std::array<double, 3>>& dirs, int max_order) {
  check_even_order(max_order);
  if (dirs.empty()) throw ArgumentError("sh_basis: no directions");
  ShBasisMatrix basis;
  basis.max_order = max_order;
  basis.m.resize(static_cast<Eigen::Index>(dirs.size()), num_coefficients(max_order));
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    for (int l = 0; l <= max_order; l += 2) {
      for (int m = -l; m <= l; ++m) {
        basis.m(static_cast<Eigen::Index>(k), coefficient_index(l, m)) =
            real_sh(l, m, dirs[k]);
      }
    }
  }
  return basis;
}

ShBasisMatrix sh_basis(const GradientTable& gtab, int max_order) {
  gtab.validate();
  if (gtab.weighted_indices().empty()) {
    throw ArgumentError("sh_basis: gradient table has no b > 0 entries");
  }
  return sh_basis(gtab.dirs, max_order);
}

ShCoefficients fit_sh(const Volume4& dwi, const GradientTable& gtab, int max_order,
                      double lambda_lb) {
  check_even_order(max_order);
  dwi.validate();
  gtab.validate();
  if (static_cast<std::size_t>(dwi.dims[3]) != gtab.size()) {
    throw ArgumentError("fit_sh: dwi channel count " + std::to_string(dwi.dims[3]) +
                        " != gradient table size " + std::to_string(gtab.size()));
  }
  if (lambda_lb < 0) throw ArgumentError("fit_sh: lambda_lb must be >= 0");

  const auto weighted = gtab.weighted_indices();
  const int ncoef = num_coefficients(max_order);
  if (static_cast<int>(weighted.size()) < ncoef) {
    throw ArgumentError("fit_sh: underdetermined system, " +
                        std::to_string(weighted.size()) + " directions < " +
                        std::to_string(ncoef) + " coefficients");
  }

  std::vector<std::array<double, 3>> wdirs(weighted.size());
  for (std::size_t i = 0; i < weighted.size(); ++i) wdirs[i] = gtab.dirs[weighted[i]];
  const Eigen::MatrixXd B = sh_basis(wdirs, max_order).m;

  Eigen::VectorXd lb(ncoef);
  for (int l = 0; l <= max_order; l += 2) {
    const double penalty = static_cast<double>(l) * l * (l + 1.0) * (l + 1.0);
    for (int m = -l; m <= l; ++m) lb[coefficient_index(l, m)] = penalty;
  }

  Eigen::MatrixXd normal = B.transpose() * B;
  normal += lambda_lb * lb.asDiagonal().toDenseMatrix();
  Eigen::LDLT<Eigen::MatrixXd> solver(normal);
  if (solver.info() != Eigen::Success || !solver.isPositive()) {
    throw NumericalError("fit_sh: singular normal matrix");
  }

  const std::vector<std::size_t> baselines = [&] {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < gtab.size(); ++k) {
      if (gtab.bvals[k] == 0.0) idx.push_back(k);
    }
    return idx;
  }();

  ShCoefficients coeffs;
  coeffs.dims = {dwi.dims[0], dwi.dims[1], dwi.dims[2]};
  coeffs.voxel_size = dwi.voxel_size;
  coeffs.max_order = max_order;
  coeffs.data.assign(static_cast<std::size_t>(ncoef) * coeffs.num_voxels(), 0.0);

  const std::size_t nvox = coeffs.num_voxels();
  Eigen::VectorXd s(static_cast<Eigen::Index>(weighted.size()));
  for (std::size_t v = 0; v < nvox; ++v) {
    double s0 = 1.0;
    if (!baselines.empty()) {
      double acc = 0.0;
      for (std::size_t k : baselines) acc += dwi.data[k * nvox + v];
      s0 = acc / static_cast<double>(baselines.size());
      if (s0 <= 1e-6) continue;  // masked voxel, coefficients stay zero
    }
    for (std::size_t i = 0; i < weighted.size(); ++i) {
      s[static_cast<Eigen::Index>(i)] = dwi.data[weighted[i] * nvox + v] / s0;
    }
    Eigen::VectorXd c = solver.solve(B.transpose() * s);
    for (int j = 0; j < ncoef; ++j) {
      if (!std::isfinite(c[j])) {
        throw NumericalError("fit_sh: non-finite solution at voxel " + std::to_string(v));
      }
      coeffs.data[static_cast<std::size_t>(j) * nvox + v] = c[j];
    }
  }
  return coeffs;
}

Volume4 reconstruct_signal(const ShCoefficients& coeffs, const GradientTable& gtab) {
  gtab.validate();
  const ShBasisMatrix basis = sh_basis(gtab.dirs, coeffs.max_order);
  const int ncoef = coeffs.num_coeffs();
  const std::size_t nvox = coeffs.num_voxels();

  Volume4 out({coeffs.dims[0], coeffs.dims[1], coeffs.dims[2],
               static_cast<int>(gtab.size())},
              coeffs.voxel_size);
  out.semantics = VolumeSemantics::kDwi;

  for (std::size_t k = 0; k < gtab.size(); ++k) {
    double* dst = out.data.data() + k * nvox;
    if (gtab.bvals[k] == 0.0) {
      for (std::size_t v = 0; v < nvox; ++v) dst[v] = 1.0;
      continue;
    }
    for (std::size_t v = 0; v < nvox; ++v) {
      double acc = 0.0;
      for (int j = 0; j < ncoef; ++j) {
        acc += basis.m(static_cast<Eigen::Index>(k), j) *
               coeffs.data[static_cast<std::size_t>(j) * nvox + v];
      }
      dst[v] = acc;
    }
  }
  return out;
}

RishFeatures compute_rish(const ShCoefficients& coeffs) {
  RishFeatures rish;
  rish.dims = coeffs.dims;
  rish.voxel_size = coeffs.voxel_size;
  rish.max_order = coeffs.max_order;
  const std::size_t nvox = coeffs.num_voxels();
  rish.data.assign(static_cast<std::size_t>(rish.num_orders()) * nvox, 0.0);

  for (int l = 0; l <= coeffs.max_order; l += 2) {
    double* dst = rish.data.data() + static_cast<std::size_t>(l / 2) * nvox;
    for (int m = -l; m <= l; ++m) {
      const double* src =
          coeffs.data.data() + static_cast<std::size_t>(coefficient_index(l, m)) * nvox;
      for (std::size_t v = 0; v < nvox; ++v) dst[v] += src[v] * src[v];
    }
  }
  return rish;
}

ScaleMap compute_scale_map(const RishFeatures& rish_target,
                           const RishFeatures& rish_source, double tau) {
  if (!(tau > 0)) throw ArgumentError("compute_scale_map: tau must be > 0");
  check_same_grid(rish_target.dims, rish_source.dims, "compute_scale_map");
  if (rish_target.max_order != rish_source.max_order) {
    throw ArgumentError("compute_scale_map: order sets differ");
  }

  ScaleMap scale;
  scale.dims = rish_target.dims;
  scale.voxel_size = rish_target.voxel_size;
  scale.max_order = rish_target.max_order;
  scale.tau = tau;
  scale.data.resize(rish_target.data.size());
  for (std::size_t i = 0; i < scale.data.size(); ++i) {
    scale.data[i] = std::sqrt(rish_target.data[i] / (rish_source.data[i] + tau));
  }
  return scale;
}

ShCoefficients apply_scale_map(const ShCoefficients& coeffs, const ScaleMap& scale) {
  check_same_grid(coeffs.dims, scale.dims, "apply_scale_map");
  if (coeffs.max_order != scale.max_order) {
    throw ArgumentError("apply_scale_map: order sets differ");
  }
  ShCoefficients out = coeffs;
  const std::size_t nvox = coeffs.num_voxels();
  for (int l = 0; l <= coeffs.max_order; l += 2) {
    const double* lam = scale.data.data() + static_cast<std::size_t>(l / 2) * nvox;
    for (int m = -l; m <= l; ++m) {
      double* dst = out.data.data() + static_cast<std::size_t>(coefficient_index(l, m)) * nvox;
      for (std::size_t v = 0; v < nvox; ++v) dst[v] *= lam[v];
    }
  }
  return out;
}

Volume4 ShCoefficients::to_volume4() const {
  Volume4 v({dims[0], dims[1], dims[2], num_coeffs()}, voxel_size);
  v.semantics = VolumeSemantics::kShCoefficients;
  v.aux = {static_cast<std::uint32_t>(max_order), basis_fingerprint(max_order)};
  v.data = data;
  return v;
}

ShCoefficients ShCoefficients::from_volume4(const Volume4& v) {
  if (v.semantics != VolumeSemantics::kShCoefficients) {
    throw ArgumentError("not an SH coefficient volume");
  }
  const int max_order = static_cast<int>(v.aux[0]);
  if (v.aux[1] != basis_fingerprint(max_order)) {
    throw ArgumentError("SH coefficient volume uses an unknown basis convention");
  }
  if (v.dims[3] != num_coefficients(max_order)) {
    throw ArgumentError("SH coefficient volume channel count mismatch");
  }
  ShCoefficients c;
  c.dims = {v.dims[0], v.dims[1], v.dims[2]};
  c.voxel_size = v.voxel_size;
  c.max_order = max_order;
  c.data = v.data;
  return c;
}

Volume3 RishFeatures::order_map(int order_index) const {
  if (order_index < 0 || order_index >= num_orders()) {
    throw ArgumentError("RishFeatures::order_map: order index out of range");
  }
  Volume3 out(dims, voxel_size);
  const std::size_t n = num_voxels();
  std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(order_index * n), n,
              out.data.begin());
  return out;
}

Volume4 RishFeatures::to_volume4() const {
  Volume4 v({dims[0], dims[1], dims[2], num_orders()}, voxel_size);
  v.semantics = VolumeSemantics::kRish;
  v.aux = {static_cast<std::uint32_t>(max_order), 0};
  v.data = data;
  return v;
}

RishFeatures RishFeatures::from_volume4(const Volume4& v) {
  if (v.semantics != VolumeSemantics::kRish) throw ArgumentError("not a RISH volume");
  RishFeatures r;
  r.dims = {v.dims[0], v.dims[1], v.dims[2]};
  r.voxel_size = v.voxel_size;
  r.max_order = static_cast<int>(v.aux[0]);
  if (v.dims[3] != r.num_orders()) {
    throw ArgumentError("RISH volume channel count mismatch");
  }
  r.data = v.data;
  return r;
}

}  // namespace rishgen::sh
