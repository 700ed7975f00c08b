#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>

namespace canopose {

struct PointCloud;

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

  friend Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(const Vec3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend Vec3 operator*(double s, const Vec3& a) { return a * s; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& a);
bool is_finite(const Vec3& a);

/// Dense 3x3 matrix, row-major. Points are row vectors and transforms act on
/// the right, so a cloud P maps to P * M.
struct Mat3 {
  std::array<std::array<double, 3>, 3> a{};

  double& operator()(std::size_t r, std::size_t c) { return a[r][c]; }
  double operator()(std::size_t r, std::size_t c) const { return a[r][c]; }

  Vec3 column(std::size_t c) const { return {a[0][c], a[1][c], a[2][c]}; }
  void set_column(std::size_t c, const Vec3& v);

  static Mat3 identity();
  static Mat3 diagonal(double d0, double d1, double d2);
  static Mat3 from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2);

  friend bool operator==(const Mat3&, const Mat3&) = default;
};

Mat3 operator*(const Mat3& lhs, const Mat3& rhs);
/// Row vector times matrix.
Vec3 operator*(const Vec3& row, const Mat3& m);
Mat3 transpose(const Mat3& m);
double determinant(const Mat3& m);
double max_abs_diff(const Mat3& a, const Mat3& b);
double max_abs(const Mat3& m);
bool is_finite(const Mat3& m);
/// max-abs entry of M^T M - I.
double orthogonality_error(const Mat3& m);

/// Symmetric 3x3 matrix stored by its six unique entries.
struct SymMat3 {
  double xx = 0.0, xy = 0.0, xz = 0.0;
  double yy = 0.0, yz = 0.0;
  double zz = 0.0;

  Mat3 full() const;
  static SymMat3 from_full(const Mat3& m);
  friend bool operator==(const SymMat3&, const SymMat3&) = default;
};

/// Eigenvalues in descending order.
struct Spectrum {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double lambda3 = 0.0;

  double operator[](std::size_t i) const { return i == 0 ? lambda1 : (i == 1 ? lambda2 : lambda3); }
  /// Smallest gap between consecutive eigenvalues relative to lambda1
  /// (0 when lambda1 is not positive).
  double relative_eigengap() const;
};

/// Special orthogonal 3x3 matrix: orthonormal columns and det +1.
class Frame {
 public:
  static constexpr double kTolerance = 1e-10;

  Frame() : m_(Mat3::identity()) {}

  /// Throws NotSpecialOrthogonal when m is not a rotation within `tol`.
  static Frame from_matrix(const Mat3& m, double tol = kTolerance);

  const Mat3& matrix() const { return m_; }
  double operator()(std::size_t r, std::size_t c) const { return m_(r, c); }

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  explicit Frame(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

struct EigenDecomposition {
  Spectrum values;
  /// Column i is the unit eigenvector for values[i]. det may be -1.
  Mat3 vectors;
  /// Set when two or more eigenvalues agree within 1e-9 relative; the
  /// vectors of each tied cluster are then a deterministic basis seeded from
  /// the standard axes.
  bool degenerate = false;
  /// True when the closed-form branch was rejected and Jacobi sweeps ran.
  bool used_jacobi = false;
};

using Rng = std::mt19937_64;

Vec3 centroid(std::span<const Vec3> points);
Vec3 centroid(const PointCloud& cloud);

/// M = (1/N) sum (p_i - c)^T (p_i - c).
SymMat3 covariance(std::span<const Vec3> points);
SymMat3 covariance(const PointCloud& cloud);

EigenDecomposition eigh3(const SymMat3& m);

/// Rotation by `angle` about +z, counterclockwise for row vectors:
/// (1,0,0) * R = (cos, sin, 0).
Frame sample_rotation_z(double angle);
/// Uniform angle in [0, 2pi).
Frame sample_rotation_z(Rng& rng);
/// Haar-uniform rotation from a normalized 4D Gaussian quaternion.
Frame sample_rotation_so3(Rng& rng);

/// Every point (and normal, if present) right-multiplied by m.
PointCloud apply_transform(const PointCloud& cloud, const Mat3& m);

/// SplitMix64 mixing of (seed, stream) used to derive independent substreams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace canopose
