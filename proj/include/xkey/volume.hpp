#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xkey/error.hpp"

namespace xkey {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index3 = std::array<int, 3>;

/// Voxel lattice in world millimetres. Voxel (0,0,0) is centred at `origin`.
struct Grid {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
  }

  Index3 coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny),
            static_cast<int>(i / (nx * ny))};
  }

  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }

  Vec3 world(int x, int y, int z) const {
    return origin + Vec3(x * spacing.x(), y * spacing.y(), z * spacing.z());
  }

  Vec3 continuous_index(const Vec3& mm) const {
    return (mm - origin).cwiseQuotient(spacing);
  }

  /// Nearest voxel to a world point (may lie outside the grid).
  Index3 nearest_voxel(const Vec3& mm) const {
    const Vec3 c = continuous_index(mm);
    return {static_cast<int>(std::lround(c.x())), static_cast<int>(std::lround(c.y())),
            static_cast<int>(std::lround(c.z()))};
  }

  /// Physical size of the image (dims x spacing) used for normalized [0,1] coordinates.
  Vec3 extent() const {
    return Vec3(dims[0] * spacing.x(), dims[1] * spacing.y(), dims[2] * spacing.z());
  }

  Vec3 normalized(const Vec3& mm) const { return (mm - origin).cwiseQuotient(extent()); }

  Vec3 max_corner() const { return world(dims[0] - 1, dims[1] - 1, dims[2] - 1); }

  bool congruent(const Grid& other, double tol = 1e-9) const {
    return dims == other.dims && (spacing - other.spacing).cwiseAbs().maxCoeff() <= tol &&
           (origin - other.origin).cwiseAbs().maxCoeff() <= tol;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      require(dims[a] >= 1, ErrorKind::invalid_argument, "grid dims must be >= 1");
      require(spacing[a] > 0.0 && std::isfinite(spacing[a]), ErrorKind::invalid_argument,
              "grid spacing must be positive");
      require(std::isfinite(origin[a]), ErrorKind::invalid_argument, "grid origin must be finite");
    }
  }
};

/// Dense scalar field on a Grid, x-fastest storage.
template <typename T>
class Field {
 public:
  using value_type = T;

  Field() = default;

  explicit Field(const Grid& grid, T fill = T{}) : grid_(grid) {
    grid_.validate();
    data_.assign(grid_.voxel_count(), fill);
  }

  Field(const Grid& grid, std::vector<T> data) : grid_(grid), data_(std::move(data)) {
    grid_.validate();
    require(data_.size() == grid_.voxel_count(), ErrorKind::invalid_argument,
            "voxel count does not match grid dims");
  }

  const Grid& grid() const { return grid_; }
  const Index3& dims() const { return grid_.dims; }
  std::size_t size() const { return data_.size(); }

  T& operator()(int x, int y, int z) { return data_[grid_.index(x, y, z)]; }
  T operator()(int x, int y, int z) const { return data_[grid_.index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool operator==(const Field& other) const {
    return grid_.congruent(other.grid_, 0.0) && data_ == other.data_;
  }

 private:
  Grid grid_;
  std::vector<T> data_;
};

using Volume = Field<float>;
/// Binary field-of-view mask (0/1 voxels).
using FovMask = Field<std::uint8_t>;

inline std::size_t count_nonzero(const FovMask& m) {
  return static_cast<std::size_t>(
      std::count_if(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v != 0; }));
}

inline void require_finite(const Volume& v, const std::string& what) {
  for (float x : v.values())
    require(std::isfinite(x), ErrorKind::numeric, what + " contains non-finite values");
}

inline void require_congruent(const Grid& a, const Grid& b, const std::string& what) {
  require(a.congruent(b), ErrorKind::invalid_argument, what + ": grid mismatch");
}

// ---------------------------------------------------------------------------
// Rigid transforms

/// Rotation + translation mapping p -> R p + t.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    require(is_rotation(rotation_, 1e-6), ErrorKind::invalid_argument,
            "rotation matrix is not orthonormal with det +1");
    require(translation_.allFinite(), ErrorKind::invalid_argument, "translation must be finite");
  }

  static RigidTransform identity() { return {}; }
  static RigidTransform translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  /// Rotation by `angle_rad` about `axis` through `center`.
  static RigidTransform rotation_about(const Vec3& axis, double angle_rad, const Vec3& center) {
    const Mat3 r = Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
    return {r, center - r * center};
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Vec3 operator()(const Vec3& p) const { return apply(p); }

  bool is_identity() const {
    return rotation_ == Mat3::Identity() && translation_ == Vec3::Zero();
  }

  static bool is_rotation(const Mat3& r, double tol) {
    if (!r.allFinite()) return false;
    const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
  }

  /// Nearest rotation in the Frobenius sense (polar decomposition).
  static Mat3 orthonormalize(const Mat3& r) {
    Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
    return u * v.transpose();
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

/// compose(a, b) applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  Mat3 r = a.rotation() * b.rotation();
  const double drift = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (drift > 1e-8) r = RigidTransform::orthonormalize(r);
  return {r, a.rotation() * b.translation() + a.translation()};
}

inline RigidTransform invert(const RigidTransform& t) {
  const Mat3 rt = t.rotation().transpose();
  return {rt, -(rt * t.translation())};
}

/// Angular and translational difference between two transforms.
inline double rotation_angle_deg(const Mat3& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

inline void save_transform(const RigidTransform& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write transform: " + path.string());
  out << std::setprecision(17);
  for (int r = 0; r < 3; ++r)
    out << t.rotation()(r, 0) << ' ' << t.rotation()(r, 1) << ' ' << t.rotation()(r, 2) << '\n';
  out << t.translation().x() << ' ' << t.translation().y() << ' ' << t.translation().z() << '\n';
  require(static_cast<bool>(out), ErrorKind::io, "write failed: " + path.string());
}

inline RigidTransform load_transform(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open transform: " + path.string());
  std::array<double, 12> v{};
  for (double& x : v)
    require(static_cast<bool>(in >> x), ErrorKind::format,
            "transform file needs 12 numbers: " + path.string());
  Mat3 r;
  r << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
  return {r, Vec3(v[9], v[10], v[11])};
}

// ---------------------------------------------------------------------------
// RAWV I/O: "<name>.rawv" payload of little-endian f32, "<name>.rawv.hdr" text header.

inline std::filesystem::path rawv_header_path(const std::filesystem::path& payload) {
  return std::filesystem::path(payload.string() + ".hdr");
}

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
  const Grid& g = v.grid();
  {
    std::ofstream hdr(rawv_header_path(path), std::ios::trunc);
    require(static_cast<bool>(hdr), ErrorKind::io,
            "cannot write header: " + rawv_header_path(path).string());
    hdr << std::setprecision(17);
    hdr << "dims: " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n';
    hdr << "spacing: " << g.spacing.x() << ' ' << g.spacing.y() << ' ' << g.spacing.z() << '\n';
    hdr << "origin: " << g.origin.x() << ' ' << g.origin.y() << ' ' << g.origin.z() << '\n';
    hdr << "dtype: f32le\n";
    require(static_cast<bool>(hdr), ErrorKind::io, "header write failed: " + path.string());
  }
  std::vector<std::uint32_t> words(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    words[i] = detail::to_little_endian(std::bit_cast<std::uint32_t>(v[i]));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write volume: " + path.string());
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  require(static_cast<bool>(out), ErrorKind::io, "payload write failed: " + path.string());
}

inline Grid read_rawv_header(const std::filesystem::path& hdr_path) {
  std::ifstream hdr(hdr_path);
  require(static_cast<bool>(hdr), ErrorKind::io, "cannot open header: " + hdr_path.string());
  Grid g;
  bool have_dims = false, have_spacing = false, have_origin = false, have_dtype = false;
  std::string line;
  while (std::getline(hdr, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    require(colon != std::string::npos, ErrorKind::format, "malformed header line: " + line);
    const std::string key = line.substr(0, colon);
    std::istringstream rest(line.substr(colon + 1));
    if (key == "dims") {
      have_dims = static_cast<bool>(rest >> g.dims[0] >> g.dims[1] >> g.dims[2]);
    } else if (key == "spacing") {
      have_spacing = static_cast<bool>(rest >> g.spacing.x() >> g.spacing.y() >> g.spacing.z());
    } else if (key == "origin") {
      have_origin = static_cast<bool>(rest >> g.origin.x() >> g.origin.y() >> g.origin.z());
    } else if (key == "dtype") {
      std::string dtype;
      rest >> dtype;
      require(dtype == "f32le", ErrorKind::format, "unsupported dtype: " + dtype);
      have_dtype = true;
    } else {
      throw Error(ErrorKind::format, "unknown header key: " + key);
    }
  }
  require(have_dims && have_spacing && have_origin && have_dtype, ErrorKind::format,
          "incomplete header: " + hdr_path.string());
  try {
    g.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::format, std::string("invalid header: ") + e.what());
  }
  return g;
}

inline Volume load_volume(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::io, "missing volume file: " + path.string());
  const Grid g = read_rawv_header(rawv_header_path(path));
  const auto bytes = std::filesystem::file_size(path);
  const auto expected = g.voxel_count() * sizeof(float);
  require(bytes == expected, ErrorKind::format,
          "payload size mismatch in " + path.string() + ": expected " + std::to_string(expected) +
              " bytes, found " + std::to_string(bytes));
  std::vector<std::uint32_t> words(g.voxel_count());
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open volume: " + path.string());
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(expected));
  require(static_cast<bool>(in), ErrorKind::io, "short read: " + path.string());
  std::vector<float> values(words.size());
  for (std::size_t i = 0; i < words.size(); ++i)
    values[i] = std::bit_cast<float>(detail::to_little_endian(words[i]));
  Volume v(g, std::move(values));
  require_finite(v, path.string());
  return v;
}

inline Volume mask_to_volume(const FovMask& m) {
  Volume v(m.grid());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0f : 0.0f;
  return v;
}

inline FovMask volume_to_mask(const Volume& v) {
  FovMask m(v.grid());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] > 0.5f ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Intensity and filtering

/// Min-max map to [0,1]; a constant volume maps to all zeros.
inline Volume normalize_intensity(const Volume& v) {
  require_finite(v, "normalize_intensity input");
  const auto [lo_it, hi_it] = std::minmax_element(v.values().begin(), v.values().end());
  const double lo = *lo_it, hi = *hi_it;
  Volume out(v.grid(), 0.0f);
  if (!(hi > lo)) return out;
  const double scale = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>((static_cast<double>(v[i]) - lo) * scale);
  return out;
}

/// Normalized Gaussian taps, truncated at ceil(3 sigma). sigma in voxels.
inline std::vector<double> gaussian_kernel(double sigma_vox) {
  if (sigma_vox <= 0.0) return {1.0};
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma_vox * sigma_vox));
    sum += k[i + radius];
  }
  for (double& w : k) w /= sum;
  return k;
}

namespace detail {

/// Half-sample symmetric reflection into [0, n).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline void convolve_axis(std::vector<float>& data, const Index3& dims, int axis,
                          const std::vector<double>& kernel) {
  if (kernel.size() == 1) return;
  const int n = dims[axis];
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::size_t stride = axis == 0 ? 1
                             : axis == 1 ? static_cast<std::size_t>(dims[0])
                                         : static_cast<std::size_t>(dims[0]) * dims[1];
  const int o1 = axis == 0 ? 1 : 0;
  const int o2 = axis == 2 ? 1 : 2;
  std::vector<double> line(n);
  std::vector<int> taps(static_cast<std::size_t>(n) * kernel.size());
  for (int i = 0; i < n; ++i)
    for (int k = -radius; k <= radius; ++k)
      taps[static_cast<std::size_t>(i) * kernel.size() + (k + radius)] = reflect_index(i + k, n);
  for (int b = 0; b < dims[o2]; ++b) {
    for (int a = 0; a < dims[o1]; ++a) {
      Index3 c{0, 0, 0};
      c[o1] = a;
      c[o2] = b;
      const std::size_t base = static_cast<std::size_t>(c[0]) +
                               static_cast<std::size_t>(dims[0]) *
                                   (static_cast<std::size_t>(c[1]) +
                                    static_cast<std::size_t>(dims[1]) * c[2]);
      for (int i = 0; i < n; ++i) line[i] = data[base + i * stride];
      for (int i = 0; i < n; ++i) {
        const int* t = &taps[static_cast<std::size_t>(i) * kernel.size()];
        double acc = 0.0;
        for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * line[t[k]];
        data[base + i * stride] = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace detail

/// Separable Gaussian with per-axis sigma in voxel units.
inline Volume gaussian_smooth_voxels(const Volume& v, const Vec3& sigma_vox) {
  for (int a = 0; a < 3; ++a)
    require(sigma_vox[a] >= 0.0, ErrorKind::invalid_argument, "sigma must be >= 0");
  Volume out = v;
  for (int a = 0; a < 3; ++a)
    detail::convolve_axis(out.storage(), v.dims(), a, gaussian_kernel(sigma_vox[a]));
  return out;
}

/// Separable Gaussian smoothing, sigma in millimetres, reflective boundaries.
inline Volume gaussian_smooth(const Volume& v, double sigma_mm) {
  require(sigma_mm >= 0.0, ErrorKind::invalid_argument, "sigma must be >= 0");
  return gaussian_smooth_voxels(v, Vec3::Constant(sigma_mm).cwiseQuotient(v.grid().spacing));
}

// ---------------------------------------------------------------------------
// Interpolation and resampling

enum class OutOfBounds { error, fill_zero };

/// Trilinear interpolation between voxel centres.
inline double trilinear_sample(const Volume& v, const Vec3& mm,
                               OutOfBounds mode = OutOfBounds::error) {
  const Grid& g = v.grid();
  const Vec3 c = g.continuous_index(mm);
  constexpr double eps = 1e-9;
  std::array<int, 3> i0{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const int n = g.dims[a];
    double x = c[a];
    if (!(x >= -eps && x <= (n - 1) + eps)) {
      if (mode == OutOfBounds::fill_zero) return 0.0;
      throw Error(ErrorKind::out_of_bounds, "sample point outside volume");
    }
    x = std::clamp(x, 0.0, static_cast<double>(n - 1));
    int lo = static_cast<int>(std::floor(x));
    if (lo >= n - 1) lo = std::max(0, n - 2);
    i0[a] = lo;
    f[a] = n == 1 ? 0.0 : x - lo;
  }
  const int x1 = std::min(i0[0] + 1, g.dims[0] - 1);
  const int y1 = std::min(i0[1] + 1, g.dims[1] - 1);
  const int z1 = std::min(i0[2] + 1, g.dims[2] - 1);
  const double c00 = v(i0[0], i0[1], i0[2]) * (1 - f[0]) + v(x1, i0[1], i0[2]) * f[0];
  const double c10 = v(i0[0], y1, i0[2]) * (1 - f[0]) + v(x1, y1, i0[2]) * f[0];
  const double c01 = v(i0[0], i0[1], z1) * (1 - f[0]) + v(x1, i0[1], z1) * f[0];
  const double c11 = v(i0[0], y1, z1) * (1 - f[0]) + v(x1, y1, z1) * f[0];
  const double c0 = c00 * (1 - f[1]) + c10 * f[1];
  const double c1 = c01 * (1 - f[1]) + c11 * f[1];
  return c0 * (1 - f[2]) + c1 * f[2];
}

/// output(x) = moving(T^-1 x) on the reference grid, zero outside the moving volume.
inline Volume resample_rigid(const Volume& moving, const RigidTransform& t, const Grid& reference) {
  if (t.is_identity() && moving.grid().congruent(reference, 0.0)) return moving;
  const RigidTransform inv = invert(t);
  Volume out(reference);
  for (int z = 0; z < reference.dims[2]; ++z)
    for (int y = 0; y < reference.dims[1]; ++y)
      for (int x = 0; x < reference.dims[0]; ++x)
        out(x, y, z) = static_cast<float>(
            trilinear_sample(moving, inv(reference.world(x, y, z)), OutOfBounds::fill_zero));
  return out;
}

/// Nearest-neighbour resampling of a binary mask, same convention as resample_rigid.
inline FovMask resample_mask(const FovMask& moving, const RigidTransform& t, const Grid& reference) {
  if (t.is_identity() && moving.grid().congruent(reference, 0.0)) return moving;
  const RigidTransform inv = invert(t);
  FovMask out(reference, 0);
  const Grid& mg = moving.grid();
  for (int z = 0; z < reference.dims[2]; ++z)
    for (int y = 0; y < reference.dims[1]; ++y)
      for (int x = 0; x < reference.dims[0]; ++x) {
        const Index3 n = mg.nearest_voxel(inv(reference.world(x, y, z)));
        if (mg.contains(n[0], n[1], n[2])) out(x, y, z) = moving(n[0], n[1], n[2]);
      }
  return out;
}

}  // namespace xkey
