#include "rishgen/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rishgen::metrics {

namespace {

void check_dims(const Volume3& a, const Volume3& b, const char* what) {
  if (a.dims != b.dims) throw ArgumentError(std::string(what) + ": dims mismatch");
}

inline int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

// Separable Gaussian blur, sigma 1.5, radius 3, mirror boundary.
Volume3 gauss_blur(const Volume3& v) {
  constexpr int radius = 3;
  double kernel[2 * radius + 1];
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (1.5 * 1.5));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  Volume3 a = v, b = v;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * v.at(mirror(x + i, nx), y, z);
        a.at(x, y, z) = acc;
      }
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * a.at(x, mirror(y + i, ny), z);
        b.at(x, y, z) = acc;
      }
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * b.at(x, y, mirror(z + i, nz));
        a.at(x, y, z) = acc;
      }
  return a;
}

}  // namespace

Volume3 make_mask(const Volume4& dwi, const GradientTable& gtab, double frac) {
  if (static_cast<std::size_t>(dwi.dims[3]) != gtab.size()) {
    throw ArgumentError("make_mask: dwi/gtab size mismatch");
  }
  std::vector<std::size_t> baselines;
  for (std::size_t k = 0; k < gtab.size(); ++k) {
    if (gtab.bvals[k] == 0.0) baselines.push_back(k);
  }
  if (baselines.empty()) throw ArgumentError("make_mask: no baseline images");

  Volume3 s0({dwi.dims[0], dwi.dims[1], dwi.dims[2]}, dwi.voxel_size);
  const std::size_t nvox = s0.size();
  for (std::size_t v = 0; v < nvox; ++v) {
    double acc = 0.0;
    for (std::size_t k : baselines) acc += dwi.data[k * nvox + v];
    s0.data[v] = acc / static_cast<double>(baselines.size());
  }
  double mx = 0.0;
  for (double v : s0.data) mx = std::max(mx, v);
  Volume3 mask = s0;
  for (double& v : mask.data) v = v > frac * mx ? 1.0 : 0.0;
  return mask;
}

double nmse(const Volume3& pred, const Volume3& truth, const Volume3& mask) {
  check_dims(pred, truth, "nmse");
  check_dims(pred, mask, "nmse");
  double num = 0.0, den = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (mask.data[i] <= 0.5) continue;
    const double d = pred.data[i] - truth.data[i];
    num += d * d;
    den += truth.data[i] * truth.data[i];
    ++count;
  }
  if (count == 0) throw ArgumentError("nmse: empty mask");
  if (den <= 0.0) throw ArgumentError("nmse: truth has zero energy over the mask");
  return num / den;
}

double ssim(const Volume3& pred, const Volume3& truth, const Volume3& mask) {
  check_dims(pred, truth, "ssim");
  check_dims(pred, mask, "ssim");

  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    if (mask.data[i] <= 0.5) continue;
    if (first) {
      lo = hi = truth.data[i];
      first = false;
    } else {
      lo = std::min(lo, truth.data[i]);
      hi = std::max(hi, truth.data[i]);
    }
  }
  if (first) throw ArgumentError("ssim: empty mask");
  const double range = std::max(hi - lo, 1e-12);
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  Volume3 ab = pred, aa = pred, bb = truth;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    ab.data[i] = pred.data[i] * truth.data[i];
    aa.data[i] = pred.data[i] * pred.data[i];
    bb.data[i] = truth.data[i] * truth.data[i];
  }
  const Volume3 mu_a = gauss_blur(pred);
  const Volume3 mu_b = gauss_blur(truth);
  const Volume3 m_aa = gauss_blur(aa);
  const Volume3 m_bb = gauss_blur(bb);
  const Volume3 m_ab = gauss_blur(ab);

  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (mask.data[i] <= 0.5) continue;
    const double ma = mu_a.data[i], mb = mu_b.data[i];
    const double va = m_aa.data[i] - ma * ma;
    const double vb = m_bb.data[i] - mb * mb;
    const double cov = m_ab.data[i] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
    ++count;
  }
  return acc / static_cast<double>(count);
}

Volume3 fa_map(const Volume4& dwi, const GradientTable& gtab) {
  gtab.validate();
  if (static_cast<std::size_t>(dwi.dims[3]) != gtab.size()) {
    throw ArgumentError("fa_map: dwi/gtab size mismatch");
  }
  const auto weighted = gtab.weighted_indices();
  if (weighted.size() < 6) throw ArgumentError("fa_map: need at least 6 weighted directions");

  Eigen::MatrixXd design(static_cast<Eigen::Index>(weighted.size()), 6);
  for (std::size_t i = 0; i < weighted.size(); ++i) {
    const auto& g = gtab.dirs[weighted[i]];
    const double b = gtab.bvals[weighted[i]];
    design(static_cast<Eigen::Index>(i), 0) = b * g[0] * g[0];
    design(static_cast<Eigen::Index>(i), 1) = b * g[1] * g[1];
    design(static_cast<Eigen::Index>(i), 2) = b * g[2] * g[2];
    design(static_cast<Eigen::Index>(i), 3) = 2.0 * b * g[0] * g[1];
    design(static_cast<Eigen::Index>(i), 4) = 2.0 * b * g[0] * g[2];
    design(static_cast<Eigen::Index>(i), 5) = 2.0 * b * g[1] * g[2];
  }
  Eigen::LDLT<Eigen::MatrixXd> solver(design.transpose() * design);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("fa_map: singular tensor design matrix");
  }

  std::vector<std::size_t> baselines;
  for (std::size_t k = 0; k < gtab.size(); ++k) {
    if (gtab.bvals[k] == 0.0) baselines.push_back(k);
  }

  Volume3 fa({dwi.dims[0], dwi.dims[1], dwi.dims[2]}, dwi.voxel_size);
  const std::size_t nvox = fa.size();
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(weighted.size()));
  for (std::size_t v = 0; v < nvox; ++v) {
    double s0 = 1.0;
    if (!baselines.empty()) {
      double acc = 0.0;
      for (std::size_t k : baselines) acc += dwi.data[k * nvox + v];
      s0 = acc / static_cast<double>(baselines.size());
      if (s0 <= 1e-6) continue;  // FA stays 0
    }
    for (std::size_t i = 0; i < weighted.size(); ++i) {
      const double s = std::max(dwi.data[weighted[i] * nvox + v] / s0, 1e-9);
      rhs[static_cast<Eigen::Index>(i)] = -std::log(s);
    }
    Eigen::VectorXd d = solver.solve(design.transpose() * rhs);
    Eigen::Matrix3d tensor;
    tensor << d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2];
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(tensor);
    const Eigen::Vector3d lam = eig.eigenvalues();
    const double mean = lam.mean();
    const double dev2 = (lam.array() - mean).square().sum();
    const double mag2 = lam.squaredNorm();
    if (mag2 <= 0.0) continue;
    fa.data[v] = std::clamp(std::sqrt(1.5 * dev2 / mag2), 0.0, 1.0);
  }
  return fa;
}

Volume3 difference_map(const Volume3& pred, const Volume3& truth) {
  check_dims(pred, truth, "difference_map");
  Volume3 out = pred;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = pred.data[i] - truth.data[i];
  }
  return out;
}

void MetricReport::add(const std::string& subject, const std::string& quantity,
                       const std::string& metric, double value) {
  rows.push_back({subject, quantity, metric, value});
}

MetricStats MetricReport::stats(const std::string& quantity, const std::string& metric) const {
  MetricStats s;
  double sum = 0.0, sum2 = 0.0;
  for (const auto& row : rows) {
    if (row.quantity != quantity || row.metric != metric) continue;
    sum += row.value;
    sum2 += row.value * row.value;
    ++s.count;
  }
  if (s.count == 0) return s;
  s.mean = sum / s.count;
  const double var = std::max(0.0, sum2 / s.count - s.mean * s.mean);
  s.stddev = std::sqrt(var);
  return s;
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArgumentError("cannot write metric csv: " + path.string());
  out << "subject,quantity,metric,value\n";
  char buf[64];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", row.value);
    out << row.subject << "," << row.quantity << "," << row.metric << "," << buf << "\n";
  }
}

std::string MetricReport::summary_table(const std::vector<std::string>& quantities) const {
  std::ostringstream out;
  char buf[96];
  for (const std::string& metric : {std::string("NMSE"), std::string("SSIM")}) {
    out << metric << (metric == "NMSE" ? " (lower is better)" : " (higher is better)")
        << "\n";
    for (const std::string& q : quantities) {
      MetricStats s = stats(q, metric);
      if (s.count == 0) continue;
      std::snprintf(buf, sizeof buf, "  %-10s %.4f +/- %.4f  (n=%d)\n", q.c_str(), s.mean,
                    s.stddev, s.count);
      out << buf;
    }
  }
  return out.str();
}

}  // namespace rishgen::metrics
