#include "rishgen/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

static_assert(std::endian::native == std::endian::little,
              "RGVL I/O assumes a little-endian host");

namespace rishgen {

namespace {

constexpr char kMagic[4] = {'R', 'G', 'V', 'L'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;

void check_finite(const std::vector<double>& data, const char* what) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw ArgumentError(std::string(what) + ": non-finite value");
    }
  }
}

void check_dims_voxel(const int* dims, int rank, const std::array<double, 3>& vs,
                      std::size_t data_size, const char* what) {
  std::size_t n = 1;
  for (int i = 0; i < rank; ++i) {
    if (dims[i] <= 0) throw ArgumentError(std::string(what) + ": non-positive dim");
    n *= static_cast<std::size_t>(dims[i]);
  }
  if (n != data_size) throw ArgumentError(std::string(what) + ": data length mismatch");
  for (double s : vs) {
    if (!(s > 0.0)) throw ArgumentError(std::string(what) + ": non-positive voxel size");
  }
}

struct Writer {
  std::ofstream out;
  explicit Writer(const std::filesystem::path& p)
      : out(p, std::ios::binary | std::ios::trunc) {
    if (!out) throw ArgumentError("cannot open for writing: " + p.string());
  }
  void bytes(const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
};

void write_common(Writer& w, int rank, const int* dims,
                  const std::array<double, 3>& voxel, VolumeSemantics sem,
                  const std::array<std::uint32_t, 2>& aux,
                  const std::vector<double>& data) {
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(rank));
  for (int i = 0; i < rank; ++i) w.u32(static_cast<std::uint32_t>(dims[i]));
  for (double s : voxel) w.f32(static_cast<float>(s));
  w.u32(kDtypeF32);
  w.u32(static_cast<std::uint32_t>(sem));
  w.u32(aux[0]);
  w.u32(aux[1]);
  std::vector<float> payload(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) payload[i] = static_cast<float>(data[i]);
  w.bytes(payload.data(), payload.size() * 4);
  if (!w.out) throw ArgumentError("write failed");
}

struct Reader {
  std::ifstream in;
  std::uint64_t offset = 0;
  explicit Reader(const std::filesystem::path& p) : in(p, std::ios::binary) {
    if (!in) throw ArgumentError("cannot open for reading: " + p.string());
  }
  void bytes(void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw FormatError(std::string("truncated file reading ") + what, offset);
    }
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  float f32(const char* what) {
    float v;
    bytes(&v, 4, what);
    return v;
  }
};

}  // namespace

void Volume3::validate() const {
  check_dims_voxel(dims.data(), 3, voxel_size, data.size(), "Volume3");
  check_finite(data, "Volume3");
}

void Volume4::validate() const {
  check_dims_voxel(dims.data(), 4, voxel_size, data.size(), "Volume4");
  if (dims[3] < 1) throw ArgumentError("Volume4: nq must be >= 1");
  check_finite(data, "Volume4");
}

Volume3 Volume4::channel(int q) const {
  if (q < 0 || q >= dims[3]) throw ArgumentError("Volume4::channel: q out of range");
  Volume3 out({dims[0], dims[1], dims[2]}, voxel_size);
  const std::size_t n = out.size();
  std::memcpy(out.data.data(), data.data() + static_cast<std::size_t>(q) * n,
              n * sizeof(double));
  return out;
}

std::size_t GradientTable::num_baselines() const {
  std::size_t n = 0;
  for (double b : bvals) n += (b == 0.0);
  return n;
}

std::vector<std::size_t> GradientTable::weighted_indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < bvals.size(); ++k) {
    if (bvals[k] > 0.0) idx.push_back(k);
  }
  return idx;
}

void GradientTable::validate() const {
  if (bvals.size() != dirs.size()) {
    throw ArgumentError("GradientTable: bvals/dirs length mismatch");
  }
  for (std::size_t k = 0; k < bvals.size(); ++k) {
    if (bvals[k] < 0.0) throw ArgumentError("GradientTable: negative b-value");
    const auto& d = dirs[k];
    double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (std::abs(norm - 1.0) > 1e-6) {
      throw ArgumentError("GradientTable: direction " + std::to_string(k) +
                          " is not unit length");
    }
  }
}

void save_volume(const Volume3& v, const std::filesystem::path& path) {
  v.validate();
  Writer w(path);
  write_common(w, 3, v.dims.data(), v.voxel_size, v.semantics, v.aux, v.data);
}

void save_volume(const Volume4& v, const std::filesystem::path& path) {
  v.validate();
  Writer w(path);
  write_common(w, 4, v.dims.data(), v.voxel_size, v.semantics, v.aux, v.data);
}

std::variant<Volume3, Volume4> load_volume(const std::filesystem::path& path) {
  Reader r(path);

  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic", 0);

  std::uint64_t at = r.offset;
  std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw FormatError("unsupported version " + std::to_string(version), at);
  }

  at = r.offset;
  std::uint32_t rank = r.u32("rank");
  if (rank != 3 && rank != 4) {
    throw FormatError("unsupported rank " + std::to_string(rank), at);
  }

  std::array<int, 4> dims{1, 1, 1, 1};
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    at = r.offset;
    std::uint32_t d = r.u32("dims");
    if (d == 0 || d > (1u << 24)) throw FormatError("bad dimension", at);
    dims[i] = static_cast<int>(d);
    n *= d;
  }

  std::array<double, 3> voxel;
  for (int i = 0; i < 3; ++i) {
    at = r.offset;
    float s = r.f32("voxel size");
    if (!(s > 0.0f) || !std::isfinite(s)) throw FormatError("bad voxel size", at);
    voxel[i] = static_cast<double>(s);
  }

  at = r.offset;
  std::uint32_t dtype = r.u32("dtype");
  if (dtype != kDtypeF32) {
    throw FormatError("unsupported dtype " + std::to_string(dtype), at);
  }
  std::uint32_t sem = r.u32("semantics");
  std::array<std::uint32_t, 2> aux{r.u32("aux0"), r.u32("aux1")};

  std::vector<float> payload(n);
  r.bytes(payload.data(), n * 4, "payload");

  // Reject trailing bytes so stray concatenations are caught.
  char extra;
  r.in.read(&extra, 1);
  if (r.in.gcount() != 0) throw FormatError("trailing bytes after payload", r.offset);

  if (rank == 3) {
    Volume3 v;
    v.dims = {dims[0], dims[1], dims[2]};
    v.voxel_size = voxel;
    v.semantics = static_cast<VolumeSemantics>(sem);
    v.aux = aux;
    v.data.assign(payload.begin(), payload.end());
    return v;
  }
  Volume4 v;
  v.dims = dims;
  v.voxel_size = voxel;
  v.semantics = static_cast<VolumeSemantics>(sem);
  v.aux = aux;
  v.data.assign(payload.begin(), payload.end());
  return v;
}

Volume3 load_volume3(const std::filesystem::path& path) {
  auto v = load_volume(path);
  if (!std::holds_alternative<Volume3>(v)) {
    throw FormatError("expected rank-3 volume: " + path.string(), 8);
  }
  return std::get<Volume3>(std::move(v));
}

Volume4 load_volume4(const std::filesystem::path& path) {
  auto v = load_volume(path);
  if (!std::holds_alternative<Volume4>(v)) {
    throw FormatError("expected rank-4 volume: " + path.string(), 8);
  }
  return std::get<Volume4>(std::move(v));
}

namespace {

// Center-aligned source coordinate of output voxel i; physical extent of the
// axis is preserved, so the scale is n_in / n_out.
inline double source_coord(int i, int n_in, int n_out) {
  return (i + 0.5) * (static_cast<double>(n_in) / n_out) - 0.5;
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

void check_target(const std::array<int, 3>& nd) {
  for (int d : nd) {
    if (d < 1) throw ArgumentError("resample: target dims must be >= 1");
  }
}

std::array<double, 3> rescale_voxels(const Volume3& v, const std::array<int, 3>& nd) {
  return {v.voxel_size[0] * v.dims[0] / nd[0],
          v.voxel_size[1] * v.dims[1] / nd[1],
          v.voxel_size[2] * v.dims[2] / nd[2]};
}

}  // namespace

Volume3 resample_trilinear(const Volume3& v, std::array<int, 3> new_dims) {
  check_target(new_dims);
  v.validate();
  Volume3 out(new_dims, rescale_voxels(v, new_dims));
  out.semantics = v.semantics;
  out.aux = v.aux;

  const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  std::size_t o = 0;
  for (int z = 0; z < new_dims[2]; ++z) {
    double wz = source_coord(z, nz, new_dims[2]);
    int z0 = clampi(static_cast<int>(std::floor(wz)), 0, nz - 1);
    int z1 = clampi(z0 + 1, 0, nz - 1);
    double tz = std::fmin(std::fmax(wz - std::floor(wz), 0.0), 1.0);
    if (wz < 0) tz = 0;
    if (wz > nz - 1) tz = 1, z0 = z1 = nz - 1;
    for (int y = 0; y < new_dims[1]; ++y) {
      double wy = source_coord(y, ny, new_dims[1]);
      int y0 = clampi(static_cast<int>(std::floor(wy)), 0, ny - 1);
      int y1 = clampi(y0 + 1, 0, ny - 1);
      double ty = std::fmin(std::fmax(wy - std::floor(wy), 0.0), 1.0);
      if (wy < 0) ty = 0;
      if (wy > ny - 1) ty = 1, y0 = y1 = ny - 1;
      for (int x = 0; x < new_dims[0]; ++x, ++o) {
        double wx = source_coord(x, nx, new_dims[0]);
        int x0 = clampi(static_cast<int>(std::floor(wx)), 0, nx - 1);
        int x1 = clampi(x0 + 1, 0, nx - 1);
        double tx = std::fmin(std::fmax(wx - std::floor(wx), 0.0), 1.0);
        if (wx < 0) tx = 0;
        if (wx > nx - 1) tx = 1, x0 = x1 = nx - 1;

        double c00 = v.at(x0, y0, z0) * (1 - tx) + v.at(x1, y0, z0) * tx;
        double c10 = v.at(x0, y1, z0) * (1 - tx) + v.at(x1, y1, z0) * tx;
        double c01 = v.at(x0, y0, z1) * (1 - tx) + v.at(x1, y0, z1) * tx;
        double c11 = v.at(x0, y1, z1) * (1 - tx) + v.at(x1, y1, z1) * tx;
        double c0 = c00 * (1 - ty) + c10 * ty;
        double c1 = c01 * (1 - ty) + c11 * ty;
        out.data[o] = c0 * (1 - tz) + c1 * tz;
      }
    }
  }
  return out;
}

namespace {

// Recursive interpolating cubic B-spline prefilter (single pole, mirror
// boundary), applied in place to one line with the given stride.
void bspline_prefilter_line(double* f, int n, std::size_t stride) {
  constexpr double pole = -0.26794919243112270647;  // sqrt(3) - 2
  constexpr double gain = 6.0;
  if (n == 1) return;

  for (int i = 0; i < n; ++i) f[i * stride] *= gain;

  // Causal init for mirror boundary (period 2n-2), exact sum.
  double zn = pole, z2n = std::pow(pole, n - 1), iz = 1.0 / pole;
  double sum = f[0] + z2n * f[static_cast<std::size_t>(n - 1) * stride];
  z2n *= z2n * iz;
  for (int k = 1; k <= n - 2; ++k) {
    sum += (zn + z2n) * f[static_cast<std::size_t>(k) * stride];
    zn *= pole;
    z2n *= iz;
  }
  f[0] = sum / (1.0 - std::pow(pole, 2 * n - 2));

  for (int k = 1; k < n; ++k) {
    f[static_cast<std::size_t>(k) * stride] += pole * f[static_cast<std::size_t>(k - 1) * stride];
  }
  f[static_cast<std::size_t>(n - 1) * stride] =
      pole / (pole * pole - 1.0) *
      (f[static_cast<std::size_t>(n - 1) * stride] + pole * f[static_cast<std::size_t>(n - 2) * stride]);
  for (int k = n - 2; k >= 0; --k) {
    f[static_cast<std::size_t>(k) * stride] =
        pole * (f[static_cast<std::size_t>(k + 1) * stride] - f[static_cast<std::size_t>(k) * stride]);
  }
}

inline int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

inline void cubic_weights(double t, double w[4]) {
  const double t2 = t * t, t3 = t2 * t;
  w[0] = (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0;
  w[1] = (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0;
  w[2] = (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0;
  w[3] = t3 / 6.0;
}

}  // namespace

Volume3 upsample_bspline(const Volume3& v, std::array<int, 3> new_dims) {
  check_target(new_dims);
  v.validate();

  const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  std::vector<double> coeff = v.data;

  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      bspline_prefilter_line(coeff.data() + v.index(0, y, z), nx, 1);
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nx; ++x)
      bspline_prefilter_line(coeff.data() + v.index(x, 0, z), ny, static_cast<std::size_t>(nx));
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x)
      bspline_prefilter_line(coeff.data() + v.index(x, y, 0), nz,
                             static_cast<std::size_t>(nx) * ny);

  Volume3 out(new_dims, rescale_voxels(v, new_dims));
  out.semantics = v.semantics;
  out.aux = v.aux;

  std::size_t o = 0;
  for (int z = 0; z < new_dims[2]; ++z) {
    double wz = source_coord(z, nz, new_dims[2]);
    int bz = static_cast<int>(std::floor(wz));
    double wwz[4];
    cubic_weights(wz - bz, wwz);
    for (int y = 0; y < new_dims[1]; ++y) {
      double wy = source_coord(y, ny, new_dims[1]);
      int by = static_cast<int>(std::floor(wy));
      double wwy[4];
      cubic_weights(wy - by, wwy);
      for (int x = 0; x < new_dims[0]; ++x, ++o) {
        double wx = source_coord(x, nx, new_dims[0]);
        int bx = static_cast<int>(std::floor(wx));
        double wwx[4];
        cubic_weights(wx - bx, wwx);

        double acc = 0.0;
        for (int kz = 0; kz < 4; ++kz) {
          int iz = mirror_index(bz - 1 + kz, nz);
          for (int ky = 0; ky < 4; ++ky) {
            int iy = mirror_index(by - 1 + ky, ny);
            double w2 = wwz[kz] * wwy[ky];
            double row = 0.0;
            for (int kx = 0; kx < 4; ++kx) {
              int ix = mirror_index(bx - 1 + kx, nx);
              row += wwx[kx] * coeff[(static_cast<std::size_t>(iz) * ny + iy) * nx + ix];
            }
            acc += w2 * row;
          }
        }
        out.data[o] = acc;
      }
    }
  }
  return out;
}

Volume4 resample_trilinear4(const Volume4& v, std::array<int, 3> new_dims) {
  check_target(new_dims);
  Volume4 out({new_dims[0], new_dims[1], new_dims[2], v.dims[3]},
              rescale_voxels(Volume3({v.dims[0], v.dims[1], v.dims[2]}, v.voxel_size),
                             new_dims));
  out.semantics = v.semantics;
  out.aux = v.aux;
  const std::size_t nv = out.num_voxels();
  for (int q = 0; q < v.dims[3]; ++q) {
    Volume3 ch = resample_trilinear(v.channel(q), new_dims);
    std::memcpy(out.data.data() + static_cast<std::size_t>(q) * nv, ch.data.data(),
                nv * sizeof(double));
  }
  return out;
}

}  // namespace rishgen
