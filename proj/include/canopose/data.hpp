#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "canopose/augment.hpp"
#include "canopose/linalg3.hpp"
#include "canopose/point_cloud.hpp"

namespace canopose {

/// Synthetic shape classes. Box and L-bracket have similar spectra on
/// purpose, so the classifier has to look at local geometry.
enum class ShapeClass : int {
  Box = 0,
  EllipsoidShell = 1,
  LBracket = 2,
  Cylinder = 3,
  PlaneWithRidge = 4,
  TorusBand = 5,
};

inline constexpr int kNumShapeClasses = 6;

std::string_view shape_name(int class_id);

/// Minimum relative eigengap every generated cloud satisfies.
inline constexpr double kMinGeneratedEigengap = 0.05;

/// Surface samples with analytic unit normals, centered on the centroid and
/// scaled into the unit ball. Dimensions are jittered per draw and redrawn
/// until the eigengap constraint holds. Throws BadClass.
PointCloud gen_shape(int class_id, std::size_t n_points, Rng& rng);

/// Train/test rotation distributions.
enum class Protocol { ZZ, ZSO3, SO3SO3 };

std::string_view to_string(Protocol protocol);
Protocol parse_protocol(std::string_view name);
RotationMode train_rotation(Protocol protocol);
RotationMode test_rotation(Protocol protocol);

struct Sample {
  PointCloud cloud;
  int label = 0;
  std::uint64_t seed = 0;
  Mat3 rotation = Mat3::identity();
};

struct SplitSpec {
  std::vector<int> classes;
  std::vector<int> train_per_class;
  std::vector<int> test_per_class;
  std::size_t points = 256;
  Protocol protocol = Protocol::SO3SO3;
  std::uint64_t seed = 0;
};

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> test;
  Protocol protocol = Protocol::SO3SO3;
  std::uint64_t seed = 0;
  std::size_t points = 0;
  std::vector<int> classes;
};

/// `total` spread over `classes` as evenly as possible, earlier classes
/// taking the remainder.
std::vector<int> balanced_counts(int total, int classes);

/// The base shape of a sample depends only on (seed, split, class, index),
/// never on the protocol, so the same seed yields the same shapes under
/// every protocol and only the rotations differ.
DatasetSplit make_split(const SplitSpec& spec);

PointCloud load_xyz(const std::filesystem::path& path);
PointCloud parse_xyz(std::string_view text);
void save_xyz(const PointCloud& cloud, const std::filesystem::path& path);

/// Area-uniform surface samples of an OFF mesh with face normals.
PointCloud load_off(const std::filesystem::path& path, std::size_t n_samples, Rng& rng);
PointCloud parse_off(std::string_view text, std::size_t n_samples, Rng& rng);

/// Writes <dir>/{train,test}/NNNNNN.xyz and <dir>/manifest.json.
void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit read_dataset(const std::filesystem::path& dir);

}  // namespace canopose
