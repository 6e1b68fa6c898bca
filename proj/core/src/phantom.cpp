#include "rishgen/phantom.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace rishgen::phantom {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) {
  const double n = norm(a);
  return {a.x / n, a.y / n, a.z / n};
}

std::array<double, 6> prolate_tensor(Vec3 axis, double lambda_par, double lambda_perp) {
  const Vec3 t = normalized(axis);
  const double d = lambda_par - lambda_perp;
  return {lambda_perp + d * t.x * t.x, lambda_perp + d * t.y * t.y,
          lambda_perp + d * t.z * t.z, d * t.x * t.y, d * t.x * t.z, d * t.y * t.z};
}

inline double quadratic_form(const std::array<double, 6>& d, const std::array<double, 3>& g) {
  return d[0] * g[0] * g[0] + d[1] * g[1] * g[1] + d[2] * g[2] * g[2] +
         2.0 * (d[3] * g[0] * g[1] + d[4] * g[0] * g[2] + d[5] * g[1] * g[2]);
}

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Two gently bent tubes crossing at roughly 60 degrees plus isotropic
// background; all shape parameters carry per-subject jitter.
struct Geometry {
  double mask_radius;
  double radius_a, radius_b;
  double bend_ay, bend_az, bend_by, bend_bz;
  double phase_ay, phase_az, phase_by, phase_bz;
  Vec3 axis_b, perp_b1, perp_b2;
  double lambda_par, lambda_perp, background_diffusivity;
  double edge = 2.0;  // mm, soft bundle boundary

  Geometry(double extent, Rng& rng) {
    mask_radius = 0.42 * extent;
    radius_a = 0.15 * extent + rng.uniform(-1.0, 1.0);
    radius_b = 0.15 * extent + rng.uniform(-1.0, 1.0);
    bend_ay = rng.uniform(1.5, 3.5);
    bend_az = rng.uniform(1.5, 3.5);
    bend_by = rng.uniform(1.5, 3.5);
    bend_bz = rng.uniform(1.5, 3.5);
    phase_ay = rng.uniform(0.0, 2.0 * kPi);
    phase_az = rng.uniform(0.0, 2.0 * kPi);
    phase_by = rng.uniform(0.0, 2.0 * kPi);
    phase_bz = rng.uniform(0.0, 2.0 * kPi);
    const double angle = (60.0 + rng.uniform(-5.0, 5.0)) * kPi / 180.0;
    axis_b = {std::cos(angle), std::sin(angle), 0.0};
    perp_b1 = {-std::sin(angle), std::cos(angle), 0.0};
    perp_b2 = {0.0, 0.0, 1.0};
    lambda_par = 1.7e-3;
    lambda_perp = 0.3e-3;
    background_diffusivity = 0.8e-3;
  }

  void bundle_a(double s, double extent, Vec3& offset, Vec3& tangent) const {
    const double w1 = kPi / (0.6 * extent), w2 = kPi / (0.8 * extent);
    offset = {s, bend_ay * std::sin(w1 * s + phase_ay), bend_az * std::cos(w2 * s + phase_az)};
    tangent = normalized({1.0, bend_ay * w1 * std::cos(w1 * s + phase_ay),
                          -bend_az * w2 * std::sin(w2 * s + phase_az)});
  }

  void bundle_b(double u, double extent, Vec3& d1_off, Vec3& tangent) const {
    const double w1 = kPi / (0.7 * extent), w2 = kPi / (0.9 * extent);
    const double o1 = bend_by * std::sin(w1 * u + phase_by);
    const double o2 = bend_bz * std::cos(w2 * u + phase_bz);
    d1_off = {o1, o2, 0.0};  // components along perp_b1 / perp_b2
    const double d1 = bend_by * w1 * std::cos(w1 * u + phase_by);
    const double d2 = -bend_bz * w2 * std::sin(w2 * u + phase_bz);
    tangent = normalized({axis_b.x + d1 * perp_b1.x + d2 * perp_b2.x,
                          axis_b.y + d1 * perp_b1.y + d2 * perp_b2.y,
                          axis_b.z + d1 * perp_b1.z + d2 * perp_b2.z});
  }

  VoxelCompartments voxel(Vec3 p, double extent) const {
    VoxelCompartments out;
    if (norm(p) >= mask_radius) return out;

    Vec3 off_a, tan_a;
    bundle_a(p.x, extent, off_a, tan_a);
    const double da = std::hypot(p.y - off_a.y, p.z - off_a.z);
    const double wa = smoothstep01((radius_a + 0.5 * edge - da) / edge);

    const double u = dot(p, axis_b);
    Vec3 off_b, tan_b;
    bundle_b(u, extent, off_b, tan_b);
    const double pb1 = dot(p, perp_b1) - off_b.x;
    const double pb2 = dot(p, perp_b2) - off_b.y;
    const double db = std::hypot(pb1, pb2);
    const double wb = smoothstep01((radius_b + 0.5 * edge - db) / edge);

    const double wbg = 0.35;
    const double total = wa + wb + wbg;
    out.fraction = {wa / total, wb / total, wbg / total};
    out.tensor[0] = prolate_tensor(tan_a, lambda_par, lambda_perp);
    out.tensor[1] = prolate_tensor(tan_b, lambda_par, lambda_perp);
    out.tensor[2] = {background_diffusivity, background_diffusivity,
                     background_diffusivity, 0.0, 0.0, 0.0};
    return out;
  }
};

Vec3 voxel_center(int i, int j, int k, const std::array<int, 3>& dims, double voxel) {
  return {(i + 0.5) * voxel - 0.5 * dims[0] * voxel,
          (j + 0.5) * voxel - 0.5 * dims[1] * voxel,
          (k + 0.5) * voxel - 0.5 * dims[2] * voxel};
}

TensorField build_field(const Geometry& geom, const std::array<int, 3>& dims, double voxel,
                        double extent) {
  TensorField field;
  field.dims = dims;
  field.voxel_size = {voxel, voxel, voxel};
  field.voxels.resize(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
  std::size_t o = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++o)
        field.voxels[o] = geom.voxel(voxel_center(i, j, k, dims, voxel), extent);
  return field;
}

// Band-limited multiplicative bias: 1 + A * sum of three seeded cosines with
// wavelengths comparable to the field of view.
struct ContrastField {
  double amplitude = 0.0;
  std::array<Vec3, 3> dir;
  std::array<double, 3> wavelength{}, phase{}, weight{};

  ContrastField(double amp, Rng& rng, double extent) : amplitude(amp) {
    double wsum = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double theta = std::acos(std::clamp(rng.uniform(-1.0, 1.0), -1.0, 1.0));
      const double phi = rng.uniform(0.0, 2.0 * kPi);
      dir[k] = {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                std::cos(theta)};
      wavelength[k] = rng.uniform(0.55 * extent, 1.1 * extent);
      phase[k] = rng.uniform(0.0, 2.0 * kPi);
      weight[k] = rng.uniform(0.5, 1.0);
      wsum += weight[k];
    }
    for (double& w : weight) w /= wsum;
  }

  double operator()(Vec3 p) const {
    double dev = 0.0;
    for (int k = 0; k < 3; ++k) {
      dev += weight[k] * std::cos(2.0 * kPi * dot(dir[k], p) / wavelength[k] + phase[k]);
    }
    return 1.0 + amplitude * dev;
  }
};

Volume3 geometric_mask(const Geometry& geom, const std::array<int, 3>& dims, double voxel) {
  Volume3 mask(dims, {voxel, voxel, voxel});
  std::size_t o = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++o)
        mask.data[o] =
            norm(voxel_center(i, j, k, dims, voxel)) < geom.mask_radius ? 1.0 : 0.0;
  return mask;
}

// Per-voxel S0 = total compartment fraction (1 inside the head, 0 outside).
std::vector<double> field_s0(const TensorField& field) {
  std::vector<double> s0(field.voxels.size());
  for (std::size_t v = 0; v < field.voxels.size(); ++v) {
    const auto& f = field.voxels[v].fraction;
    s0[v] = f[0] + f[1] + f[2];
  }
  return s0;
}

}  // namespace

void PhantomConfig::validate() const {
  for (int d : source_dims) {
    if (d < 4) throw ArgumentError("phantom: source dims too small");
  }
  for (int d : target_dims) {
    if (d < 4) throw ArgumentError("phantom: target dims too small");
  }
  if (!(source_voxel > 0) || !(target_voxel > 0) || target_voxel > source_voxel) {
    throw ArgumentError("phantom: target voxel size must be <= source voxel size");
  }
  if (!(snr_source > 0) || !(snr_target > 0)) throw ArgumentError("phantom: snr must be > 0");
  if (source_dirs < sh::num_coefficients(sh_order) ||
      target_dirs < sh::num_coefficients(sh_order)) {
    throw ArgumentError("phantom: gradient schemes underdetermine the SH fit");
  }
  if (num_baselines < 1) throw ArgumentError("phantom: need at least one baseline");
  if (bvalue <= 0) throw ArgumentError("phantom: bvalue must be > 0");
  if (contrast_amplitude < 0 || contrast_amplitude >= 1) {
    throw ArgumentError("phantom: contrast amplitude must be in [0, 1)");
  }
  if (sh_order < 0 || sh_order % 2) throw ArgumentError("phantom: sh order must be even");
}

std::vector<std::array<double, 3>> golden_directions(int n) {
  if (n < 1) throw ArgumentError("golden_directions: n must be >= 1");
  std::vector<std::array<double, 3>> dirs(static_cast<std::size_t>(n));
  const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < n; ++k) {
    const double z = (k + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = k * golden_angle;
    dirs[static_cast<std::size_t>(k)] = {r * std::cos(phi), r * std::sin(phi), z};
  }
  return dirs;
}

GradientTable make_scheme(int dirs, int num_baselines, double bvalue) {
  GradientTable gtab;
  for (int k = 0; k < num_baselines; ++k) {
    gtab.bvals.push_back(0.0);
    gtab.dirs.push_back({0.0, 0.0, 1.0});
  }
  for (const auto& d : golden_directions(dirs)) {
    gtab.bvals.push_back(bvalue);
    gtab.dirs.push_back(d);
  }
  gtab.validate();
  return gtab;
}

Volume4 simulate_signal(const TensorField& field, const GradientTable& gtab, double s0) {
  gtab.validate();
  const std::size_t nvox = field.voxels.size();
  if (nvox != static_cast<std::size_t>(field.dims[0]) * field.dims[1] * field.dims[2]) {
    throw ArgumentError("simulate_signal: field size mismatch");
  }
  for (const auto& v : field.voxels) {
    const double total = v.fraction[0] + v.fraction[1] + v.fraction[2];
    if (v.fraction[0] < 0 || v.fraction[1] < 0 || v.fraction[2] < 0 ||
        (total > 1e-12 && std::abs(total - 1.0) > 1e-6)) {
      throw ArgumentError("simulate_signal: fractions must be >= 0 and sum to 1");
    }
  }

  Volume4 out({field.dims[0], field.dims[1], field.dims[2], static_cast<int>(gtab.size())},
              field.voxel_size);
  out.semantics = VolumeSemantics::kDwi;
  for (std::size_t q = 0; q < gtab.size(); ++q) {
    const double b = gtab.bvals[q];
    const auto& g = gtab.dirs[q];
    double* dst = out.data.data() + q * nvox;
    for (std::size_t v = 0; v < nvox; ++v) {
      const auto& vox = field.voxels[v];
      double acc = 0.0;
      for (int c = 0; c < 3; ++c) {
        if (vox.fraction[c] <= 0.0) continue;
        acc += b == 0.0
                   ? vox.fraction[c]
                   : vox.fraction[c] * std::exp(-b * quadratic_form(vox.tensor[c], g));
      }
      dst[v] = s0 * acc;
    }
  }
  return out;
}

Volume4 add_rician_noise(const Volume4& dwi, double snr, Rng& rng, double s0) {
  if (!(snr > 0)) throw ArgumentError("add_rician_noise: snr must be > 0");
  if (!std::isfinite(snr)) return dwi;
  const double sigma = s0 / snr;
  Volume4 out = dwi;
  for (double& v : out.data) {
    const double n1 = sigma * rng.normal();
    const double n2 = sigma * rng.normal();
    v = std::sqrt((v + n1) * (v + n1) + n2 * n2);
  }
  return out;
}

PhantomPair generate_pair(const PhantomConfig& config, std::uint64_t seed) {
  config.validate();
  const double extent = config.source_dims[0] * config.source_voxel;

  Rng geom_rng(derive_seed(seed, "phantom-geometry"));
  Geometry geom(extent, geom_rng);

  PhantomPair pair;
  pair.source_gtab = make_scheme(config.source_dirs, config.num_baselines, config.bvalue);
  pair.target_gtab = make_scheme(config.target_dirs, config.num_baselines, config.bvalue);
  pair.source_field = build_field(geom, config.source_dims, config.source_voxel, extent);
  pair.target_field = build_field(geom, config.target_dims, config.target_voxel, extent);
  pair.source_mask = geometric_mask(geom, config.source_dims, config.source_voxel);
  pair.target_mask = geometric_mask(geom, config.target_dims, config.target_voxel);

  // Band-limited ground truth: project the analytic multi-tensor signal onto
  // the SH basis through a dense reference scheme, so the synthesized DWIs
  // are exactly in the fitted span.
  const GradientTable ref = make_scheme(96, 0, config.bvalue);
  pair.source_coeffs =
      sh::fit_sh(simulate_signal(pair.source_field, ref), ref, config.sh_order, 0.0);
  pair.target_coeffs =
      sh::fit_sh(simulate_signal(pair.target_field, ref), ref, config.sh_order, 0.0);

  // Target-domain per-order contrast.
  const int norders = config.sh_order / 2 + 1;
  pair.contrast.reserve(static_cast<std::size_t>(norders));
  sh::ScaleMap contrast_map;
  contrast_map.dims = config.target_dims;
  contrast_map.voxel_size = pair.target_coeffs.voxel_size;
  contrast_map.max_order = config.sh_order;
  contrast_map.tau = 1e-8;
  contrast_map.data.resize(
      static_cast<std::size_t>(norders) * pair.target_coeffs.num_voxels(), 1.0);
  for (int oi = 0; oi < norders; ++oi) {
    Volume3 field_vol(config.target_dims,
                      {config.target_voxel, config.target_voxel, config.target_voxel});
    if (config.contrast_amplitude > 0) {
      Rng crng(derive_seed(seed, "phantom-contrast", static_cast<std::uint64_t>(oi)));
      ContrastField cf(config.contrast_amplitude, crng, extent);
      std::size_t o = 0;
      for (int k = 0; k < config.target_dims[2]; ++k)
        for (int j = 0; j < config.target_dims[1]; ++j)
          for (int i = 0; i < config.target_dims[0]; ++i, ++o)
            field_vol.data[o] =
                cf(voxel_center(i, j, k, config.target_dims, config.target_voxel));
    } else {
      std::fill(field_vol.data.begin(), field_vol.data.end(), 1.0);
    }
    std::copy(field_vol.data.begin(), field_vol.data.end(),
              contrast_map.data.begin() +
                  static_cast<std::ptrdiff_t>(oi) *
                      static_cast<std::ptrdiff_t>(pair.target_coeffs.num_voxels()));
    pair.contrast.push_back(std::move(field_vol));
  }
  pair.target_coeffs = sh::apply_scale_map(pair.target_coeffs, contrast_map);

  // Synthesize the observed DWIs: in-span reconstruction scaled by the
  // per-voxel baseline, plus magnitude noise.
  auto synthesize = [](const sh::ShCoefficients& coeffs, const GradientTable& gtab,
                       const TensorField& field, double snr, Rng rng) {
    Volume4 dwi = sh::reconstruct_signal(coeffs, gtab);
    const std::vector<double> s0 = field_s0(field);
    const std::size_t nvox = s0.size();
    for (std::size_t q = 0; q < gtab.size(); ++q) {
      double* dst = dwi.data.data() + q * nvox;
      for (std::size_t v = 0; v < nvox; ++v) dst[v] *= s0[v];
    }
    return std::isfinite(snr) ? add_rician_noise(dwi, snr, rng, 1.0) : dwi;
  };
  pair.source_dwi = synthesize(pair.source_coeffs, pair.source_gtab, pair.source_field,
                               config.snr_source, Rng(derive_seed(seed, "noise-source")));
  pair.target_dwi = synthesize(pair.target_coeffs, pair.target_gtab, pair.target_field,
                               config.snr_target, Rng(derive_seed(seed, "noise-target")));
  return pair;
}

namespace {

nlohmann::json gtab_json(const GradientTable& gtab) {
  nlohmann::json j;
  j["bvals"] = gtab.bvals;
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& d : gtab.dirs) dirs.push_back({d[0], d[1], d[2]});
  j["dirs"] = dirs;
  return j;
}

GradientTable gtab_from_json(const nlohmann::json& j) {
  GradientTable gtab;
  gtab.bvals = j.at("bvals").get<std::vector<double>>();
  for (const auto& d : j.at("dirs")) {
    gtab.dirs.push_back({d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>()});
  }
  gtab.validate();
  return gtab;
}

}  // namespace

void save_pair(const PhantomPair& pair, const std::filesystem::path& dir,
               const std::string& stem, const PhantomConfig& config, std::uint64_t seed,
               bool include_target) {
  std::filesystem::create_directories(dir);
  save_volume(pair.source_dwi, dir / (stem + "_source_dwi.rgvl"));
  save_volume(pair.source_coeffs.to_volume4(), dir / (stem + "_source_coeffs.rgvl"));

  nlohmann::json j;
  j["format"] = "rishgen-phantom-v1";
  j["seed"] = seed;
  j["s0"] = 1.0;
  j["sh_order"] = config.sh_order;
  j["contrast_amplitude"] = config.contrast_amplitude;
  j["source"] = {{"dwi", stem + "_source_dwi.rgvl"},
                 {"coeffs", stem + "_source_coeffs.rgvl"},
                 {"snr", std::isfinite(config.snr_source) ? config.snr_source : -1.0},
                 {"voxel", config.source_voxel},
                 {"gtab", gtab_json(pair.source_gtab)}};
  if (include_target) {
    save_volume(pair.target_dwi, dir / (stem + "_target_dwi.rgvl"));
    save_volume(pair.target_coeffs.to_volume4(), dir / (stem + "_target_coeffs.rgvl"));
    j["target"] = {{"dwi", stem + "_target_dwi.rgvl"},
                   {"coeffs", stem + "_target_coeffs.rgvl"},
                   {"snr", std::isfinite(config.snr_target) ? config.snr_target : -1.0},
                   {"voxel", config.target_voxel},
                   {"gtab", gtab_json(pair.target_gtab)}};
  }

  std::ofstream out(dir / (stem + ".json"));
  if (!out) throw ArgumentError("cannot write sidecar for " + stem);
  out << j.dump(2) << "\n";
}

LoadedPhantom load_pair(const std::filesystem::path& dir, const std::string& stem) {
  std::ifstream in(dir / (stem + ".json"));
  if (!in) {
    throw DependencyError("missing phantom sidecar: " + (dir / (stem + ".json")).string());
  }
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "rishgen-phantom-v1") {
    throw FormatError("unknown phantom sidecar format", 0);
  }

  LoadedPhantom out;
  out.source_gtab = gtab_from_json(j.at("source").at("gtab"));
  out.source_dwi = load_volume4(dir / j.at("source").at("dwi").get<std::string>());
  out.source_coeffs = sh::ShCoefficients::from_volume4(
      load_volume4(dir / j.at("source").at("coeffs").get<std::string>()));
  if (j.contains("target")) {
    out.has_target = true;
    out.target_gtab = gtab_from_json(j.at("target").at("gtab"));
    out.target_dwi = load_volume4(dir / j.at("target").at("dwi").get<std::string>());
    out.target_coeffs = sh::ShCoefficients::from_volume4(
        load_volume4(dir / j.at("target").at("coeffs").get<std::string>()));
  }
  return out;
}

}  // namespace rishgen::phantom
