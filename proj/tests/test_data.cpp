#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "canopose/data.hpp"
#include "test_util.hpp"

using namespace canopose;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("canopose_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Second moment along each axis of a uniformly sampled box surface with
// half-extents (a, b, c), by integrating over the six faces.
Vec3 box_surface_moments(double a, double b, double c) {
  const double ax = 4 * b * c, ay = 4 * a * c, az = 4 * a * b;
  const double total = 2 * (ax + ay + az);
  auto moment = [&](double h, double own_face, double f1, double f2) {
    return (2 * own_face * h * h + 2 * (f1 + f2) * h * h / 3.0) / total;
  };
  return {moment(a, ax, ay, az), moment(b, ay, ax, az), moment(c, az, ax, ay)};
}

std::string box_off(double a, double b, double c) {
  std::string s = "OFF\n8 6 0\n";
  for (int i = 0; i < 8; ++i) {
    s += std::to_string(i & 1 ? a : -a) + " " + std::to_string(i & 2 ? b : -b) + " " + std::to_string(i & 4 ? c : -c) + "\n";
  }
  s += "4 0 1 3 2\n4 4 6 7 5\n4 0 4 5 1\n4 2 3 7 6\n4 0 2 6 4\n4 1 5 7 3\n";
  return s;
}

}  // namespace

TEST(GenShape, EveryClassIsNormalizedAndNonDegenerate) {
  for (int cls = 0; cls < kNumShapeClasses; ++cls) {
    Rng rng(derive_seed(5, static_cast<std::uint64_t>(cls)));
    for (int t = 0; t < 10; ++t) {
      const PointCloud c = gen_shape(cls, 256, rng);
      ASSERT_EQ(c.size(), 256u);
      EXPECT_EQ(c.label, cls);
      EXPECT_GE(eigh3(covariance(c)).values.relative_eigengap(), kMinGeneratedEigengap) << shape_name(cls);
      EXPECT_LE(norm(centroid(c)), 1e-12);
      double radius = 0.0;
      for (const auto& p : c.points) radius = std::max(radius, norm(p));
      EXPECT_LE(radius, 1.0 + 1e-12);
      ASSERT_EQ(c.normals.size(), c.size());
      for (const auto& n : c.normals) EXPECT_NEAR(norm(n), 1.0, 1e-6);
    }
  }
}

TEST(GenShape, DeterministicAndRejectsBadClass) {
  Rng a(3), b(3);
  EXPECT_EQ(gen_shape(2, 64, a).points, gen_shape(2, 64, b).points);
  EXPECT_CANOPOSE_ERROR(gen_shape(6, 64, a), ErrorCode::BadClass);
  EXPECT_CANOPOSE_ERROR(gen_shape(-1, 64, a), ErrorCode::BadClass);
  EXPECT_THROW(gen_shape(0, 31, a), Error);
}

TEST(GenShape, BoxSpectrumDescendsWithGap) {
  Rng rng(1);
  const PointCloud c = gen_shape(static_cast<int>(ShapeClass::Box), 4096, rng);
  const Spectrum s = eigh3(covariance(c)).values;
  EXPECT_GT(s.lambda1, s.lambda2);
  EXPECT_GT(s.lambda2, s.lambda3);
  EXPECT_GE(s.relative_eigengap(), 0.05);
}

TEST(LoadOff, BoxSurfaceMomentsMatchAnalyticIntegral) {
  Rng rng(2);
  const PointCloud c = parse_off(box_off(3, 2, 1), 200000, rng);
  const Vec3 m = box_surface_moments(3, 2, 1);
  const SymMat3 cov = covariance(c);
  EXPECT_NEAR(cov.xx, m.x, 0.02 * m.x);
  EXPECT_NEAR(cov.yy, m.y, 0.02 * m.y);
  EXPECT_NEAR(cov.zz, m.z, 0.02 * m.z);
  EXPECT_NEAR(cov.xy, 0.0, 0.02);
  const Spectrum s = eigh3(cov).values;
  EXPECT_GE(s.relative_eigengap(), 0.05);
}

TEST(LoadOff, UnitSquareMeanPoint) {
  Rng rng(3);
  const PointCloud c = parse_off("OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n", 20000, rng);
  const Vec3 m = centroid(c);
  EXPECT_NEAR(m.x, 0.5, 0.02);
  EXPECT_NEAR(m.y, 0.5, 0.02);
  EXPECT_EQ(m.z, 0.0);
  for (const auto& n : c.normals) EXPECT_NEAR(std::abs(n.z), 1.0, 1e-12);
}

TEST(LoadOff, TetrahedronSamplesOnFaces) {
  Rng rng(4);
  const std::vector<Vec3> v{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const PointCloud c = parse_off("OFF\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n", 2000, rng);
  for (const auto& p : c.points) {
    const double d = std::min({std::abs(p.x), std::abs(p.y), std::abs(p.z), std::abs(p.x + p.y + p.z - 1.0) / std::sqrt(3.0)});
    EXPECT_LE(d, 1e-9);
  }
}

TEST(LoadOff, Errors) {
  Rng rng(5);
  EXPECT_CANOPOSE_ERROR(parse_off("PLY\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", 10, rng), ErrorCode::ParseError);
  EXPECT_CANOPOSE_ERROR(parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", 10, rng), ErrorCode::ParseError);
  EXPECT_CANOPOSE_ERROR(parse_off("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", 10, rng), ErrorCode::ParseError);
  EXPECT_CANOPOSE_ERROR(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n", 10, rng), ErrorCode::DegenerateMesh);
  EXPECT_NO_THROW(parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", 10, rng));
}

TEST(Xyz, ParseExamples) {
  const PointCloud a = parse_xyz("0 0 0\n1 2 3");
  EXPECT_EQ(a.size(), 2u);
  EXPECT_FALSE(a.has_normals());
  EXPECT_EQ(a.points[1], (Vec3{1, 2, 3}));
  const PointCloud b = parse_xyz("# c\n1 0 0 0 0 1");
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b.normals[0], (Vec3{0, 0, 1}));
}

TEST(Xyz, Errors) {
  try {
    parse_xyz("0 0 0\n1 two 3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_CANOPOSE_ERROR(parse_xyz("1 2\n"), ErrorCode::ParseError);
  EXPECT_CANOPOSE_ERROR(parse_xyz("0 0 0\n1 0 0 0 0 1\n"), ErrorCode::InconsistentColumns);
}

TEST(Xyz, RoundTripWithinNineDigits) {
  const fs::path dir = scratch_dir("xyz");
  for (int cls = 0; cls < kNumShapeClasses; ++cls) {
    Rng rng(static_cast<std::uint64_t>(cls));
    const PointCloud c = gen_shape(cls, 128, rng);
    save_xyz(c, dir / "c.xyz");
    const PointCloud back = load_xyz(dir / "c.xyz");
    ASSERT_EQ(back.size(), c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      EXPECT_LE(norm(back.points[i] - c.points[i]), 1e-9 * std::sqrt(3.0));
      EXPECT_LE(norm(back.normals[i] - c.normals[i]), 1e-8);
    }
  }
  EXPECT_CANOPOSE_ERROR(load_xyz(dir / "missing.xyz"), ErrorCode::IoError);
}

TEST(MakeSplit, ZProtocolPreservesZMoment) {
  SplitSpec spec;
  spec.classes = {0, 1, 2, 3, 4, 5};
  spec.train_per_class = std::vector<int>(6, 3);
  spec.test_per_class = std::vector<int>(6, 2);
  spec.points = 64;
  spec.protocol = Protocol::ZZ;
  spec.seed = 9;
  const DatasetSplit zz = make_split(spec);
  spec.protocol = Protocol::SO3SO3;
  const DatasetSplit so3 = make_split(spec);
  ASSERT_EQ(zz.train.size(), 18u);
  ASSERT_EQ(zz.test.size(), 12u);
  for (const auto* list : {&zz.train, &zz.test}) {
    for (const auto& s : *list) {
      // Undo the recorded rotation to recover the unrotated source.
      const PointCloud source = apply_transform(s.cloud, transpose(s.rotation));
      EXPECT_NEAR(covariance(s.cloud).zz, covariance(source).zz, 1e-9);
      EXPECT_EQ(s.rotation(2, 2), 1.0);
    }
  }
  // Same seed gives the same base shapes under every protocol.
  for (std::size_t i = 0; i < zz.train.size(); ++i) {
    const PointCloud a = apply_transform(zz.train[i].cloud, transpose(zz.train[i].rotation));
    const PointCloud b = apply_transform(so3.train[i].cloud, transpose(so3.train[i].rotation));
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_LE(norm(a.points[k] - b.points[k]), 1e-12);
    EXPECT_EQ(zz.train[i].label, so3.train[i].label);
  }
}

TEST(MakeSplit, ZSO3RotatesOnlyTheTestSetFully) {
  SplitSpec spec;
  spec.classes = {0, 1, 2, 3, 4, 5};
  spec.train_per_class = std::vector<int>(6, 20);
  spec.test_per_class = std::vector<int>(6, 20);
  spec.points = 32;
  spec.protocol = Protocol::ZSO3;
  spec.seed = 4;
  const DatasetSplit split = make_split(spec);
  for (const auto& s : split.train) EXPECT_EQ(s.rotation(2, 2), 1.0);
  // Haar rotations: E[R22] = 0, E[R22^2] = 1/3.
  double m1 = 0.0, m2 = 0.0;
  for (const auto& s : split.test) {
    m1 += s.rotation(2, 2);
    m2 += s.rotation(2, 2) * s.rotation(2, 2);
  }
  const double n = static_cast<double>(split.test.size());
  EXPECT_NEAR(m1 / n, 0.0, 0.15);
  EXPECT_NEAR(m2 / n, 1.0 / 3.0, 0.1);
}

TEST(MakeSplit, DeterministicAndDisjoint) {
  SplitSpec spec;
  spec.classes = {1, 3};
  spec.train_per_class = {4, 5};
  spec.test_per_class = {2, 3};
  spec.points = 40;
  spec.seed = 11;
  const DatasetSplit a = make_split(spec);
  const DatasetSplit b = make_split(spec);
  ASSERT_EQ(a.train.size(), 9u);
  ASSERT_EQ(a.test.size(), 5u);
  std::set<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].cloud.points, b.train[i].cloud.points);
    seeds.insert(a.train[i].seed);
  }
  for (const auto& s : a.test) EXPECT_TRUE(seeds.insert(s.seed).second);
  int ones = 0;
  for (const auto& s : a.train) ones += s.label == 0;
  // Labels index into spec.classes, so label 0 is class 1.
  EXPECT_EQ(ones, 4);
  spec.classes = {7};
  spec.train_per_class = {1};
  spec.test_per_class = {1};
  EXPECT_CANOPOSE_ERROR(make_split(spec), ErrorCode::BadClass);
}

TEST(BalancedCounts, SpreadsRemainder) {
  EXPECT_EQ(balanced_counts(512, 6), (std::vector<int>{86, 86, 85, 85, 85, 85}));
  EXPECT_EQ(balanced_counts(128, 6), (std::vector<int>{22, 22, 21, 21, 21, 21}));
}

TEST(Dataset, WriteReadRoundTrip) {
  SplitSpec spec;
  spec.classes = {0, 4};
  spec.train_per_class = {2, 3};
  spec.test_per_class = {1, 1};
  spec.points = 48;
  spec.protocol = Protocol::ZSO3;
  spec.seed = 21;
  const DatasetSplit split = make_split(spec);
  const fs::path dir = scratch_dir("dataset");
  write_dataset(split, dir);
  const DatasetSplit back = read_dataset(dir);
  EXPECT_EQ(back.protocol, Protocol::ZSO3);
  EXPECT_EQ(back.seed, 21u);
  ASSERT_EQ(back.train.size(), split.train.size());
  ASSERT_EQ(back.test.size(), split.test.size());
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    EXPECT_EQ(back.train[i].label, split.train[i].label);
    for (std::size_t k = 0; k < 48; ++k) EXPECT_LE(norm(back.train[i].cloud.points[k] - split.train[i].cloud.points[k]), 2e-9);
  }
  std::ifstream in(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  EXPECT_EQ(manifest.at("protocol"), "z/SO3");
}

TEST(Protocol, Rotations) {
  EXPECT_EQ(train_rotation(Protocol::ZZ), RotationMode::Z);
  EXPECT_EQ(test_rotation(Protocol::ZZ), RotationMode::Z);
  EXPECT_EQ(train_rotation(Protocol::ZSO3), RotationMode::Z);
  EXPECT_EQ(test_rotation(Protocol::ZSO3), RotationMode::SO3);
  EXPECT_EQ(train_rotation(Protocol::SO3SO3), RotationMode::SO3);
  for (Protocol p : {Protocol::ZZ, Protocol::ZSO3, Protocol::SO3SO3}) EXPECT_EQ(parse_protocol(to_string(p)), p);
}
