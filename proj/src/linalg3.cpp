#include "canopose/linalg3.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "canopose/error.hpp"
#include "canopose/point_cloud.hpp"

namespace canopose {

double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

bool is_finite(const Vec3& a) { return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z); }

void Mat3::set_column(std::size_t c, const Vec3& v) {
  a[0][c] = v.x;
  a[1][c] = v.y;
  a[2][c] = v.z;
}

Mat3 Mat3::identity() { return diagonal(1.0, 1.0, 1.0); }

Mat3 Mat3::diagonal(double d0, double d1, double d2) {
  Mat3 m;
  m.a[0][0] = d0;
  m.a[1][1] = d1;
  m.a[2][2] = d2;
  return m;
}

Mat3 Mat3::from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
  Mat3 m;
  m.set_column(0, c0);
  m.set_column(1, c1);
  m.set_column(2, c2);
  return m;
}

Mat3 operator*(const Mat3& lhs, const Mat3& rhs) {
  Mat3 out;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.a[r][c] = lhs.a[r][0] * rhs.a[0][c] + lhs.a[r][1] * rhs.a[1][c] + lhs.a[r][2] * rhs.a[2][c];
    }
  }
  return out;
}

Vec3 operator*(const Vec3& row, const Mat3& m) {
  return {row.x * m.a[0][0] + row.y * m.a[1][0] + row.z * m.a[2][0],
          row.x * m.a[0][1] + row.y * m.a[1][1] + row.z * m.a[2][1],
          row.x * m.a[0][2] + row.y * m.a[1][2] + row.z * m.a[2][2]};
}

Mat3 transpose(const Mat3& m) {
  Mat3 t;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) t.a[r][c] = m.a[c][r];
  }
  return t;
}

double determinant(const Mat3& m) {
  const auto& a = m.a;
  return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
         a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
         a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
}

double max_abs_diff(const Mat3& a, const Mat3& b) {
  double d = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) d = std::max(d, std::abs(a.a[r][c] - b.a[r][c]));
  }
  return d;
}

double max_abs(const Mat3& m) { return max_abs_diff(m, Mat3{}); }

bool is_finite(const Mat3& m) {
  for (const auto& row : m.a) {
    for (double v : row) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

double orthogonality_error(const Mat3& m) { return max_abs_diff(transpose(m) * m, Mat3::identity()); }

Mat3 SymMat3::full() const {
  Mat3 m;
  m.a = {{{xx, xy, xz}, {xy, yy, yz}, {xz, yz, zz}}};
  return m;
}

SymMat3 SymMat3::from_full(const Mat3& m) {
  return {m(0, 0), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)),
          m(1, 1), 0.5 * (m(1, 2) + m(2, 1)), m(2, 2)};
}

double Spectrum::relative_eigengap() const {
  if (!(lambda1 > 0.0)) return 0.0;
  return std::min(lambda1 - lambda2, lambda2 - lambda3) / lambda1;
}

Frame Frame::from_matrix(const Mat3& m, double tol) {
  if (!is_finite(m) || orthogonality_error(m) > tol || std::abs(determinant(m) - 1.0) > tol) {
    throw Error(ErrorCode::NotSpecialOrthogonal, "matrix is not a rotation");
  }
  return Frame(m);
}

namespace {

constexpr double kTieRelative = 1e-9;
constexpr double kAnalyticGapRelative = 1e-7;
constexpr double kAnalyticResidual = 1e-12;

struct EigenPair {
  double value;
  Vec3 vector;
  int index;
};

// Cyclic Jacobi on the leading n x n block of a symmetric matrix. On return
// the diagonal of `a` holds the eigenvalues and the columns of `v` the
// eigenvectors.
void jacobi_sweeps(Mat3& a, Mat3& v, std::size_t n) {
  v = Mat3::identity();
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      total += a(p, p) * a(p, p);
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    total += 2.0 * off;
    if (off == 0.0 || off <= 1e-36 * total) return;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e150) {
          t = 0.5 / theta;
        } else {
          t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        Mat3 j = Mat3::identity();
        j(p, p) = c;
        j(q, q) = c;
        j(p, q) = s;
        j(q, p) = -s;
        a = transpose(j) * a * j;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        v = v * j;
      }
    }
  }
}

void sort_descending(std::array<EigenPair, 3>& pairs) {
  std::stable_sort(pairs.begin(), pairs.end(), [](const EigenPair& l, const EigenPair& r) {
    if (l.value != r.value) return l.value > r.value;
    return l.index < r.index;
  });
}

std::array<EigenPair, 3> solve_jacobi(const Mat3& m) {
  Mat3 a = m;
  Mat3 v;
  jacobi_sweeps(a, v, 3);
  std::array<EigenPair, 3> pairs;
  for (int i = 0; i < 3; ++i) pairs[i] = {a(i, i), v.column(i), i};
  sort_descending(pairs);
  return pairs;
}

// Null vector of (A - lambda I) from the best-conditioned cross product of
// its rows. Returns false when every cross product vanishes.
bool null_vector(const Mat3& a, double lambda, Vec3& out) {
  const Vec3 r0{a(0, 0) - lambda, a(0, 1), a(0, 2)};
  const Vec3 r1{a(1, 0), a(1, 1) - lambda, a(1, 2)};
  const Vec3 r2{a(2, 0), a(2, 1), a(2, 2) - lambda};
  const std::array<Vec3, 3> candidates{cross(r0, r1), cross(r0, r2), cross(r1, r2)};
  double best = 0.0;
  for (const auto& c : candidates) {
    const double n = norm(c);
    if (n > best) {
      best = n;
      out = c * (1.0 / n);
    }
  }
  return best > 1e-150;
}

// Closed-form roots of the characteristic polynomial with one Newton step
// each; eigenvectors from row cross products. Returns false when the branch
// is ill-conditioned and Jacobi should take over.
bool solve_analytic(const Mat3& a, std::array<EigenPair, 3>& pairs) {
  const double c2 = a(0, 0) + a(1, 1) + a(2, 2);
  const double c1 = a(0, 0) * a(1, 1) + a(0, 0) * a(2, 2) + a(1, 1) * a(2, 2) - a(0, 1) * a(0, 1) -
                    a(0, 2) * a(0, 2) - a(1, 2) * a(1, 2);
  const double c0 = determinant(a);

  const double q = c2 / 3.0;
  const double off = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
  const double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) +
                    (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * off;
  if (p2 <= 0.0) return false;
  const double p = std::sqrt(p2 / 6.0);
  Mat3 b = a;
  for (int i = 0; i < 3; ++i) b(i, i) -= q;
  for (auto& row : b.a) {
    for (double& x : row) x /= p;
  }
  const double r = std::clamp(determinant(b) / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  std::array<double, 3> roots{q + 2.0 * p * std::cos(phi), 0.0,
                              q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0)};
  roots[1] = c2 - roots[0] - roots[2];

  for (double& lambda : roots) {
    const double f = ((lambda - c2) * lambda + c1) * lambda - c0;
    const double df = (3.0 * lambda - 2.0 * c2) * lambda + c1;
    if (std::abs(df) > 1e-300) {
      const double next = lambda - f / df;
      if (std::isfinite(next)) lambda = next;
    }
  }
  std::sort(roots.begin(), roots.end(), std::greater<>());

  const double scale = std::max({std::abs(roots[0]), std::abs(roots[2]), 1e-300});
  if (std::min(roots[0] - roots[1], roots[1] - roots[2]) < kAnalyticGapRelative * scale) return false;

  Vec3 e1;
  Vec3 e3;
  if (!null_vector(a, roots[0], e1) || !null_vector(a, roots[2], e3)) return false;
  e3 = e3 - e1 * dot(e1, e3);
  const double n3 = norm(e3);
  if (n3 < 0.5) return false;
  e3 = e3 * (1.0 / n3);
  const Vec3 e2 = cross(e3, e1);

  const std::array<Vec3, 3> vecs{e1, e2, e3};
  for (int i = 0; i < 3; ++i) {
    const Vec3 av = vecs[i] * a;  // symmetric: row * A == (A * col)^T
    pairs[i] = {dot(vecs[i], av), vecs[i], i};
    if (norm(av - vecs[i] * pairs[i].value) > kAnalyticResidual * std::max(1.0, scale)) return false;
  }
  sort_descending(pairs);
  return true;
}

// Replaces the vectors of a tied cluster [first, last] with a deterministic
// basis: greedy Gram-Schmidt of the standard axes against the untied
// vectors, then diagonalization of A restricted to that basis.
void rebuild_cluster(const Mat3& a, std::array<EigenPair, 3>& pairs, std::size_t first, std::size_t last) {
  std::vector<Vec3> fixed;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i < first || i > last) fixed.push_back(pairs[i].vector);
  }
  const std::size_t k = last - first + 1;
  std::vector<Vec3> basis;
  std::array<bool, 3> used{false, false, false};
  while (basis.size() < k) {
    double best_norm = -1.0;
    Vec3 best;
    std::size_t best_axis = 0;
    for (std::size_t axis = 0; axis < 3; ++axis) {
      if (used[axis]) continue;
      Vec3 v;
      v[axis] = 1.0;
      for (const auto& f : fixed) v = v - f * dot(f, v);
      for (const auto& b : basis) v = v - b * dot(b, v);
      const double n = norm(v);
      if (n > best_norm) {
        best_norm = n;
        best = v * (1.0 / n);
        best_axis = axis;
      }
    }
    used[best_axis] = true;
    basis.push_back(best);
  }

  Mat3 restricted;
  for (std::size_t i = 0; i < k; ++i) {
    const Vec3 ab = basis[i] * a;
    for (std::size_t j = 0; j < k; ++j) restricted(j, i) = dot(basis[j], ab);
  }
  Mat3 rot;
  jacobi_sweeps(restricted, rot, k);

  std::array<EigenPair, 3> cluster;
  for (std::size_t i = 0; i < k; ++i) {
    Vec3 v;
    for (std::size_t j = 0; j < k; ++j) v = v + basis[j] * rot(j, i);
    cluster[i] = {restricted(i, i), v * (1.0 / norm(v)), static_cast<int>(i)};
  }
  std::stable_sort(cluster.begin(), cluster.begin() + static_cast<std::ptrdiff_t>(k),
                   [](const EigenPair& l, const EigenPair& r) {
                     if (l.value != r.value) return l.value > r.value;
                     return l.index < r.index;
                   });
  for (std::size_t i = 0; i < k; ++i) {
    pairs[first + i].value = cluster[i].value;
    pairs[first + i].vector = cluster[i].vector;
  }
}

// Largest-magnitude component positive, first index on ties.
Vec3 canonical_sign(const Vec3& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < 3; ++i) {
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  }
  return v[arg] < 0.0 ? v * -1.0 : v;
}

}  // namespace

EigenDecomposition eigh3(const SymMat3& m) {
  const Mat3 full = m.full();
  if (!is_finite(full)) throw Error(ErrorCode::InvalidMatrix, "non-finite entries");

  EigenDecomposition out;
  const double scale = max_abs(full);
  if (scale == 0.0) {
    out.vectors = Mat3::identity();
    out.degenerate = true;
    return out;
  }
  Mat3 a = full;
  for (auto& row : a.a) {
    for (double& x : row) x /= scale;
  }

  std::array<EigenPair, 3> pairs;
  if (!solve_analytic(a, pairs)) {
    pairs = solve_jacobi(a);
    out.used_jacobi = true;
  }

  const double spread = std::max(std::abs(pairs[0].value), std::abs(pairs[2].value));
  const bool tie12 = pairs[0].value - pairs[1].value <= kTieRelative * spread;
  const bool tie23 = pairs[1].value - pairs[2].value <= kTieRelative * spread;
  if (tie12 && tie23) {
    rebuild_cluster(a, pairs, 0, 2);
  } else if (tie12) {
    rebuild_cluster(a, pairs, 0, 1);
  } else if (tie23) {
    rebuild_cluster(a, pairs, 1, 2);
  }
  out.degenerate = tie12 || tie23;

  out.values = {pairs[0].value * scale, pairs[1].value * scale, pairs[2].value * scale};
  for (std::size_t i = 0; i < 3; ++i) out.vectors.set_column(i, canonical_sign(pairs[i].vector));
  return out;
}

Vec3 centroid(std::span<const Vec3> points) {
  if (points.empty()) throw Error(ErrorCode::EmptyCloud, "centroid of an empty cloud");
  Vec3 sum;
  for (const auto& p : points) sum = sum + p;
  return sum * (1.0 / static_cast<double>(points.size()));
}

Vec3 centroid(const PointCloud& cloud) { return centroid(std::span<const Vec3>(cloud.points)); }

SymMat3 covariance(std::span<const Vec3> points) {
  const Vec3 c = centroid(points);
  SymMat3 m;
  for (const auto& p : points) {
    const Vec3 d = p - c;
    m.xx += d.x * d.x;
    m.xy += d.x * d.y;
    m.xz += d.x * d.z;
    m.yy += d.y * d.y;
    m.yz += d.y * d.z;
    m.zz += d.z * d.z;
  }
  const double inv = 1.0 / static_cast<double>(points.size());
  m.xx *= inv;
  m.xy *= inv;
  m.xz *= inv;
  m.yy *= inv;
  m.yz *= inv;
  m.zz *= inv;
  return m;
}

SymMat3 covariance(const PointCloud& cloud) { return covariance(std::span<const Vec3>(cloud.points)); }

Frame sample_rotation_z(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat3 m;
  m.a = {{{c, s, 0.0}, {-s, c, 0.0}, {0.0, 0.0, 1.0}}};
  return Frame::from_matrix(m);
}

Frame sample_rotation_z(Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  return sample_rotation_z(angle(rng));
}

Frame sample_rotation_so3(Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  double w, x, y, z, n;
  do {
    w = gauss(rng);
    x = gauss(rng);
    y = gauss(rng);
    z = gauss(rng);
    n = std::sqrt(w * w + x * x + y * y + z * z);
  } while (n < 1e-12);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Mat3 m;
  m.a = {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
          {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
          {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
  return Frame::from_matrix(m);
}

PointCloud apply_transform(const PointCloud& cloud, const Mat3& m) {
  if (!is_finite(m)) throw Error(ErrorCode::InvalidMatrix, "non-finite transform");
  PointCloud out = cloud;
  for (auto& p : out.points) p = p * m;
  for (auto& n : out.normals) n = n * m;
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace canopose
