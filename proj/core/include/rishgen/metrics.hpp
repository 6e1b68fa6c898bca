#ifndef RISHGEN_METRICS_HPP
#define RISHGEN_METRICS_HPP

#include <string>

#include "rishgen/volume.hpp"

namespace rishgen::metrics {

/// Brain mask from baseline intensity: mean b=0 signal > frac * its maximum.
Volume3 make_mask(const Volume4& dwi, const GradientTable& gtab, double frac = 0.1);

/// sum((pred - truth)^2) / sum(truth^2) over mask voxels (mask > 0.5).
/// Requires matching dims, a nonempty mask, and nonzero truth energy.
double nmse(const Volume3& pred, const Volume3& truth, const Volume3& mask);

/// Single-scale SSIM over the full 3D volume: Gaussian window sigma = 1.5
/// with 7^3 support (mirror boundary), K1 = 0.01, K2 = 0.03, dynamic range =
/// max - min of `truth` over the mask; the SSIM map is averaged over the mask.
double ssim(const Volume3& pred, const Volume3& truth, const Volume3& mask);

/// Log-linear least-squares single-tensor fit per voxel, FA from the
/// eigenvalues, clamped to [0, 1]. Signals are normalized by the mean
/// baseline (assumed already normalized when the table has no baselines)
/// and clamped at 1e-9 before the log. Voxels with mean baseline <= 1e-6
/// get FA 0.
Volume3 fa_map(const Volume4& dwi, const GradientTable& gtab);

/// pred - truth, voxel-wise.
Volume3 difference_map(const Volume3& pred, const Volume3& truth);

struct MetricRow {
  std::string subject;
  std::string quantity;  ///< RISH_L0, RISH_L2, RISH_L4, FA, ...
  std::string metric;    ///< NMSE or SSIM
  double value = 0.0;
};

struct MetricStats {
  double mean = 0.0;
  double stddev = 0.0;
  int count = 0;
};

/// Per-subject rows plus aggregate helpers; serialized as CSV with columns
/// subject,quantity,metric,value and as a fixed-width summary table.
struct MetricReport {
  std::vector<MetricRow> rows;

  void add(const std::string& subject, const std::string& quantity,
           const std::string& metric, double value);
  MetricStats stats(const std::string& quantity, const std::string& metric) const;
  void write_csv(const std::filesystem::path& path) const;
  std::string summary_table(const std::vector<std::string>& quantities) const;
};

}  // namespace rishgen::metrics

#endif
