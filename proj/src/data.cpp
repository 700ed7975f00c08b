#include "canopose/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "canopose/error.hpp"

namespace canopose {

namespace {

constexpr double kPi = std::numbers::pi;

struct SurfacePoint {
  Vec3 p;
  Vec3 n;
};

Vec3 unit(const Vec3& v) { return v * (1.0 / norm(v)); }

double jitter(Rng& rng) { return std::uniform_real_distribution<double>(0.85, 1.15)(rng); }

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Axis-aligned box [lo, hi], faces picked by area.
SurfacePoint sample_box_surface(const Vec3& lo, const Vec3& hi, Rng& rng) {
  const Vec3 e = hi - lo;
  const std::array<double, 3> area{e.y * e.z, e.x * e.z, e.x * e.y};
  double u = uniform(rng, 0.0, 2.0 * (area[0] + area[1] + area[2]));
  std::size_t axis = 0;
  while (axis < 2 && u >= 2.0 * area[axis]) {
    u -= 2.0 * area[axis];
    ++axis;
  }
  const bool upper = u >= area[axis];
  SurfacePoint s;
  for (std::size_t k = 0; k < 3; ++k) s.p[k] = uniform(rng, lo[k], hi[k]);
  s.p[axis] = upper ? hi[axis] : lo[axis];
  s.n[axis] = upper ? 1.0 : -1.0;
  return s;
}

bool strictly_inside(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  for (std::size_t k = 0; k < 3; ++k) {
    if (!(p[k] > lo[k] && p[k] < hi[k])) return false;
  }
  return true;
}

std::vector<SurfacePoint> sample_raw(ShapeClass shape, std::size_t n, Rng& rng) {
  std::vector<SurfacePoint> pts;
  pts.reserve(n);
  switch (shape) {
    case ShapeClass::Box: {
      const Vec3 h{1.0 * jitter(rng), 0.6 * jitter(rng), 0.3 * jitter(rng)};
      while (pts.size() < n) pts.push_back(sample_box_surface(h * -1.0, h, rng));
      break;
    }
    case ShapeClass::EllipsoidShell: {
      const Vec3 r{1.0 * jitter(rng), 0.65 * jitter(rng), 0.4 * jitter(rng)};
      std::normal_distribution<double> gauss(0.0, 1.0);
      while (pts.size() < n) {
        Vec3 d{gauss(rng), gauss(rng), gauss(rng)};
        if (norm(d) < 1e-12) continue;
        d = unit(d);
        const Vec3 p{r.x * d.x, r.y * d.y, r.z * d.z};
        pts.push_back({p, unit({p.x / (r.x * r.x), p.y / (r.y * r.y), p.z / (r.z * r.z)})});
      }
      break;
    }
    case ShapeClass::LBracket: {
      const double l1 = 1.0 * jitter(rng);
      const double l2 = 0.7 * jitter(rng);
      const double w = 0.5 * jitter(rng);
      const double t = 0.12 * jitter(rng);
      const Vec3 a_lo{0.0, -w / 2, 0.0}, a_hi{l1, w / 2, t};
      const Vec3 b_lo{0.0, -w / 2, 0.0}, b_hi{t, w / 2, l2};
      const auto surface = [](const Vec3& lo, const Vec3& hi) {
        const Vec3 e = hi - lo;
        return 2.0 * (e.x * e.y + e.y * e.z + e.x * e.z);
      };
      const double area_a = surface(a_lo, a_hi);
      const double area_b = surface(b_lo, b_hi);
      while (pts.size() < n) {
        const bool pick_a = uniform(rng, 0.0, area_a + area_b) < area_a;
        const SurfacePoint s = pick_a ? sample_box_surface(a_lo, a_hi, rng) : sample_box_surface(b_lo, b_hi, rng);
        if (pick_a ? strictly_inside(s.p, b_lo, b_hi) : strictly_inside(s.p, a_lo, a_hi)) continue;
        // Faces shared with the other slab are interior.
        if (pick_a && s.n.z > 0.5 && s.p.x < t) continue;
        if (!pick_a && s.n.x > 0.5 && s.p.z < t) continue;
        pts.push_back(s);
      }
      break;
    }
    case ShapeClass::Cylinder: {
      const double rx = 0.5 * jitter(rng);
      const double ry = 0.3 * jitter(rng);
      const double h = 1.6 * jitter(rng);
      const double perimeter = kPi * (3 * (rx + ry) - std::sqrt((3 * rx + ry) * (rx + 3 * ry)));
      const double side = perimeter * h;
      const double cap = kPi * rx * ry;
      while (pts.size() < n) {
        const double u = uniform(rng, 0.0, side + 2 * cap);
        const double theta = uniform(rng, 0.0, 2 * kPi);
        if (u < side) {
          const Vec3 p{rx * std::cos(theta), ry * std::sin(theta), uniform(rng, -h / 2, h / 2)};
          pts.push_back({p, unit({std::cos(theta) / rx, std::sin(theta) / ry, 0.0})});
        } else {
          const double r = std::sqrt(uniform(rng, 0.0, 1.0));
          const bool top = u >= side + cap;
          pts.push_back({{rx * r * std::cos(theta), ry * r * std::sin(theta), top ? h / 2 : -h / 2},
                         {0.0, 0.0, top ? 1.0 : -1.0}});
        }
      }
      break;
    }
    case ShapeClass::PlaneWithRidge: {
      const double a = 1.0 * jitter(rng);
      const double b = 0.7 * jitter(rng);
      const double height = 0.35 * jitter(rng);
      const double width = 0.25 * jitter(rng);
      while (pts.size() < n) {
        const double x = uniform(rng, -a, a);
        const double y = uniform(rng, -b, b);
        const double ay = std::abs(y);
        const double z = ay < width ? height * (1.0 - ay / width) : 0.0;
        const double dzdy = ay < width ? -height / width * (y < 0 ? -1.0 : 1.0) : 0.0;
        pts.push_back({{x, y, z}, unit({0.0, -dzdy, 1.0})});
      }
      break;
    }
    case ShapeClass::TorusBand: {
      const double r1 = 1.0 * jitter(rng);
      const double r2 = 0.7 * jitter(rng);
      const double tube = 0.15 * jitter(rng);
      while (pts.size() < n) {
        const double theta = uniform(rng, 0.0, 2 * kPi);
        const double phi = uniform(rng, 0.0, 2 * kPi);
        const Vec3 c{r1 * std::cos(theta), r2 * std::sin(theta), 0.0};
        const Vec3 t = unit({-r1 * std::sin(theta), r2 * std::cos(theta), 0.0});
        const Vec3 outward{t.y, -t.x, 0.0};
        const Vec3 nrm = outward * std::cos(phi) + Vec3{0.0, 0.0, 1.0} * std::sin(phi);
        pts.push_back({c + nrm * tube, unit(nrm)});
      }
      break;
    }
  }
  return pts;
}

}  // namespace

std::string_view shape_name(int class_id) {
  switch (class_id) {
    case 0: return "box";
    case 1: return "ellipsoid_shell";
    case 2: return "l_bracket";
    case 3: return "cylinder";
    case 4: return "plane_with_ridge";
    case 5: return "torus_band";
    default: throw Error(ErrorCode::BadClass, "unknown class id " + std::to_string(class_id));
  }
}

PointCloud gen_shape(int class_id, std::size_t n_points, Rng& rng) {
  if (class_id < 0 || class_id >= kNumShapeClasses) {
    throw Error(ErrorCode::BadClass, "unknown class id " + std::to_string(class_id));
  }
  if (n_points < 32) throw Error(ErrorCode::InvalidConfig, "shapes need at least 32 points");

  for (int attempt = 0; attempt < 1000; ++attempt) {
    const auto raw = sample_raw(static_cast<ShapeClass>(class_id), n_points, rng);
    PointCloud cloud;
    cloud.label = class_id;
    for (const auto& s : raw) {
      cloud.points.push_back(s.p);
      cloud.normals.push_back(s.n);
    }
    const Vec3 c = centroid(cloud);
    double radius = 0.0;
    for (auto& p : cloud.points) {
      p = p - c;
      radius = std::max(radius, norm(p));
    }
    for (auto& p : cloud.points) p = p * (1.0 / radius);
    if (eigh3(covariance(cloud)).values.relative_eigengap() >= kMinGeneratedEigengap) return cloud;
  }
  throw Error(ErrorCode::DegenerateInput, "could not draw a non-degenerate " + std::string(shape_name(class_id)));
}

std::string_view to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::ZZ: return "z/z";
    case Protocol::ZSO3: return "z/SO3";
    case Protocol::SO3SO3: return "SO3/SO3";
  }
  return "SO3/SO3";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "z/z") return Protocol::ZZ;
  if (name == "z/SO3") return Protocol::ZSO3;
  if (name == "SO3/SO3") return Protocol::SO3SO3;
  throw Error(ErrorCode::InvalidConfig, "unknown protocol '" + std::string(name) + "'");
}

RotationMode train_rotation(Protocol protocol) {
  return protocol == Protocol::SO3SO3 ? RotationMode::SO3 : RotationMode::Z;
}

RotationMode test_rotation(Protocol protocol) {
  return protocol == Protocol::ZZ ? RotationMode::Z : RotationMode::SO3;
}

std::vector<int> balanced_counts(int total, int classes) {
  std::vector<int> out(static_cast<std::size_t>(classes), total / classes);
  for (int i = 0; i < total % classes; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

DatasetSplit make_split(const SplitSpec& spec) {
  if (spec.train_per_class.size() != spec.classes.size() || spec.test_per_class.size() != spec.classes.size()) {
    throw Error(ErrorCode::InvalidConfig, "per-class counts must match the class list");
  }
  DatasetSplit out;
  out.protocol = spec.protocol;
  out.seed = spec.seed;
  out.points = spec.points;
  out.classes = spec.classes;

  auto generate = [&](std::uint64_t split_id, const std::vector<int>& counts, RotationMode mode,
                      std::vector<Sample>& dst) {
    for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
      const int cls = spec.classes[ci];
      if (counts[ci] < 0) throw Error(ErrorCode::InvalidConfig, "per-class counts must be >= 0");
      for (int i = 0; i < counts[ci]; ++i) {
        const std::uint64_t stream = (split_id << 48) | (static_cast<std::uint64_t>(cls) << 32) |
                                     static_cast<std::uint64_t>(i);
        Sample s;
        s.seed = derive_seed(spec.seed, stream);
        s.label = static_cast<int>(ci);
        Rng shape_rng(s.seed);
        PointCloud base = gen_shape(cls, spec.points, shape_rng);
        Rng rot_rng(derive_seed(s.seed, 1));
        s.rotation = mode == RotationMode::Z ? sample_rotation_z(rot_rng).matrix()
                                             : sample_rotation_so3(rot_rng).matrix();
        s.cloud = apply_transform(base, s.rotation);
        s.cloud.label = s.label;
        dst.push_back(std::move(s));
      }
    }
  };
  generate(1, spec.train_per_class, train_rotation(spec.protocol), out.train);
  generate(2, spec.test_per_class, test_rotation(spec.protocol), out.test);
  return out;
}

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

bool parse_double(std::string_view token, double& out) {
  if (!token.empty() && token.front() == '+') token.remove_prefix(1);
  const auto res = std::from_chars(token.data(), token.data() + token.size(), out);
  return res.ec == std::errc() && res.ptr == token.data() + token.size() && std::isfinite(out);
}

bool parse_long(std::string_view token, long& out) {
  const auto res = std::from_chars(token.data(), token.data() + token.size(), out);
  return res.ec == std::errc() && res.ptr == token.data() + token.size();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Non-blank lines with '#' comments stripped, paired with 1-based numbers.
std::vector<std::pair<std::size_t, std::string_view>> content_lines(std::string_view text) {
  std::vector<std::pair<std::size_t, std::string_view>> out;
  std::size_t number = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    ++number;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (!split_ws(line).empty()) out.emplace_back(number, line);
    if (end == text.size()) break;
    pos = end + 1;
  }
  return out;
}

}  // namespace

PointCloud parse_xyz(std::string_view text) {
  PointCloud cloud;
  std::size_t columns = 0;
  for (const auto& [number, line] : content_lines(text)) {
    const auto tokens = split_ws(line);
    const std::string where = "line " + std::to_string(number);
    if (tokens.size() != 3 && tokens.size() != 6) {
      throw Error(ErrorCode::ParseError, where + ": expected 3 or 6 columns, got " + std::to_string(tokens.size()));
    }
    if (columns == 0) columns = tokens.size();
    if (tokens.size() != columns) throw Error(ErrorCode::InconsistentColumns, where);
    std::array<double, 6> v{};
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!parse_double(tokens[i], v[i])) throw Error(ErrorCode::ParseError, where + ": bad number '" + std::string(tokens[i]) + "'");
    }
    cloud.points.push_back({v[0], v[1], v[2]});
    if (columns == 6) {
      const Vec3 n{v[3], v[4], v[5]};
      if (norm(n) == 0.0) throw Error(ErrorCode::ParseError, where + ": zero normal");
      cloud.normals.push_back(unit(n));
    }
  }
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "no points in input");
  return cloud;
}

PointCloud load_xyz(const std::filesystem::path& path) {
  try {
    return parse_xyz(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void save_xyz(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  char buf[160];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    int len = std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", p.x, p.y, p.z);
    out.write(buf, len);
    if (cloud.has_normals()) {
      const Vec3& n = cloud.normals[i];
      len = std::snprintf(buf, sizeof(buf), " %.17g %.17g %.17g", n.x, n.y, n.z);
      out.write(buf, len);
    }
    out.put('\n');
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

PointCloud parse_off(std::string_view text, std::size_t n_samples, Rng& rng) {
  const auto lines = content_lines(text);
  std::size_t li = 0;
  auto fail = [](std::size_t number, const std::string& why) {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(number) + ": " + why);
  };
  if (lines.empty()) throw Error(ErrorCode::ParseError, "empty OFF file");

  std::vector<std::string_view> counts;
  {
    auto tokens = split_ws(lines[0].second);
    if (tokens[0].substr(0, 3) != "OFF") fail(lines[0].first, "missing OFF header");
    // Some exporters glue the counts onto the header ("OFF1000 2000 0").
    if (tokens[0].size() > 3) {
      counts.push_back(tokens[0].substr(3));
      counts.insert(counts.end(), tokens.begin() + 1, tokens.end());
    } else {
      counts.assign(tokens.begin() + 1, tokens.end());
    }
    ++li;
    if (counts.empty()) {
      if (li >= lines.size()) throw Error(ErrorCode::ParseError, "missing counts line");
      counts = split_ws(lines[li].second);
      ++li;
    }
  }
  long nv = 0, nf = 0;
  if (counts.size() < 2 || !parse_long(counts[0], nv) || !parse_long(counts[1], nf) || nv < 1 || nf < 0) {
    throw Error(ErrorCode::ParseError, "bad counts line");
  }
  if (li + static_cast<std::size_t>(nv) + static_cast<std::size_t>(nf) != lines.size()) {
    throw Error(ErrorCode::ParseError, "counts line (" + std::to_string(nv) + " vertices, " + std::to_string(nf) +
                                           " faces) does not match the body");
  }

  std::vector<Vec3> verts;
  for (long v = 0; v < nv; ++v, ++li) {
    const auto tokens = split_ws(lines[li].second);
    Vec3 p;
    if (tokens.size() < 3) fail(lines[li].first, "vertex needs 3 coordinates");
    for (std::size_t k = 0; k < 3; ++k) {
      if (!parse_double(tokens[k], p[k])) fail(lines[li].first, "bad coordinate");
    }
    verts.push_back(p);
  }

  std::vector<std::array<Vec3, 3>> tris;
  for (long f = 0; f < nf; ++f, ++li) {
    const auto tokens = split_ws(lines[li].second);
    long k = 0;
    if (tokens.empty() || !parse_long(tokens[0], k) || k < 3 || tokens.size() < static_cast<std::size_t>(k) + 1) {
      fail(lines[li].first, "bad face");
    }
    std::vector<long> idx(static_cast<std::size_t>(k));
    for (long i = 0; i < k; ++i) {
      if (!parse_long(tokens[static_cast<std::size_t>(i) + 1], idx[static_cast<std::size_t>(i)]) ||
          idx[static_cast<std::size_t>(i)] < 0 || idx[static_cast<std::size_t>(i)] >= nv) {
        fail(lines[li].first, "bad vertex index");
      }
    }
    for (long i = 1; i + 1 < k; ++i) {
      tris.push_back({verts[static_cast<std::size_t>(idx[0])], verts[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])],
                      verts[static_cast<std::size_t>(idx[static_cast<std::size_t>(i) + 1])]});
    }
  }

  std::vector<double> cdf;
  double total = 0.0;
  for (const auto& t : tris) {
    total += 0.5 * norm(cross(t[1] - t[0], t[2] - t[0]));
    cdf.push_back(total);
  }
  if (!(total > 0.0)) throw Error(ErrorCode::DegenerateMesh, "mesh has zero surface area");

  PointCloud cloud;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double pick = u01(rng) * total;
    const std::size_t t = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), pick) - cdf.begin()), tris.size() - 1);
    const auto& tri = tris[t];
    const double r1 = std::sqrt(u01(rng));
    const double r2 = u01(rng);
    cloud.points.push_back(tri[0] * (1.0 - r1) + tri[1] * (r1 * (1.0 - r2)) + tri[2] * (r1 * r2));
    cloud.normals.push_back(unit(cross(tri[1] - tri[0], tri[2] - tri[0])));
  }
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "zero samples requested");
  return cloud;
}

PointCloud load_off(const std::filesystem::path& path, std::size_t n_samples, Rng& rng) {
  try {
    return parse_off(read_file(path), n_samples, rng);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

namespace {

std::string sample_file(std::string_view split, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s/%06zu.xyz", std::string(split).c_str(), index);
  return buf;
}

}  // namespace

void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");

  nlohmann::json manifest;
  manifest["format"] = "canopose-dataset";
  manifest["version"] = 1;
  manifest["protocol"] = std::string(to_string(split.protocol));
  manifest["seed"] = split.seed;
  manifest["points"] = split.points;
  nlohmann::json classes = nlohmann::json::array();
  for (int c : split.classes) classes.push_back(std::string(shape_name(c)));
  manifest["classes"] = classes;

  nlohmann::json samples = nlohmann::json::array();
  nlohmann::json counts;
  for (const auto& [name, list, mode] :
       {std::tuple{"train", &split.train, train_rotation(split.protocol)},
        std::tuple{"test", &split.test, test_rotation(split.protocol)}}) {
    std::vector<int> per_class(split.classes.size(), 0);
    for (std::size_t i = 0; i < list->size(); ++i) {
      const Sample& s = (*list)[i];
      const std::string file = sample_file(name, i);
      save_xyz(s.cloud, dir / file);
      samples.push_back({{"file", file},
                         {"label", s.label},
                         {"split", name},
                         {"seed", s.seed},
                         {"rotation", std::string(to_string(mode))}});
      ++per_class[static_cast<std::size_t>(s.label)];
    }
    counts[name] = per_class;
  }
  manifest["counts"] = counts;
  manifest["samples"] = samples;

  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCode::IoError, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

DatasetSplit read_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, "manifest: " + std::string(e.what()));
  }
  try {
    DatasetSplit split;
    split.protocol = parse_protocol(manifest.at("protocol").get<std::string>());
    split.seed = manifest.at("seed").get<std::uint64_t>();
    split.points = manifest.at("points").get<std::size_t>();
    for (const auto& name : manifest.at("classes")) {
      const std::string n = name.get<std::string>();
      int id = -1;
      for (int c = 0; c < kNumShapeClasses; ++c) {
        if (shape_name(c) == n) id = c;
      }
      if (id < 0) throw Error(ErrorCode::BadClass, "unknown class '" + n + "' in manifest");
      split.classes.push_back(id);
    }
    for (const auto& entry : manifest.at("samples")) {
      Sample s;
      s.label = entry.at("label").get<int>();
      s.seed = entry.at("seed").get<std::uint64_t>();
      if (s.label < 0 || s.label >= static_cast<int>(split.classes.size())) {
        throw Error(ErrorCode::BadLabel, "manifest label out of range");
      }
      s.cloud = load_xyz(dir / entry.at("file").get<std::string>());
      s.cloud.label = s.label;
      (entry.at("split").get<std::string>() == "train" ? split.train : split.test).push_back(std::move(s));
    }
    return split;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, "manifest: " + std::string(e.what()));
  }
}

}  // namespace canopose
