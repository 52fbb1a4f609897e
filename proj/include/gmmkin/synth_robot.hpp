#pragma once

// Synthetic stand-in for a tendon-driven continuum robot. Three parallel
// tendons bend the backbone into a constant-curvature arc, a fourth helical
// tendon twists the bending plane along the arc, and the realized shape
// depends on the direction from which a configuration was approached.

#include "gmmkin/core.hpp"
#include "gmmkin/mdn.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace gmmkin {

struct RobotSpec {
  double length = 0.2;          // m
  int tendons = 4;              // three parallel + one helical
  double tendon_radius = 0.01;  // m, offset of the parallel tendons
  double body_radius = 0.005;   // m
  double d_min = 0.0;           // m
  double d_max = 0.03;          // m
  double hysteresis = 0.0015;   // m
  double sensor_noise = 0.001;  // m
  double helical_gain = 0.5;

  void validate() const {
    if (tendons != 4) throw ConfigError("robot model supports exactly four tendons");
    if (!(length > 0 && tendon_radius > 0 && body_radius > 0)) throw ConfigError("robot dimensions must be positive");
    if (!(d_max > d_min)) throw ConfigError("displacement limits must satisfy min < max");
    if (hysteresis < 0 || sensor_noise < 0) throw ConfigError("noise scales must be >= 0");
  }

  Eigen::VectorXd limits_min() const { return Eigen::VectorXd::Constant(tendons, d_min); }
  Eigen::VectorXd limits_max() const { return Eigen::VectorXd::Constant(tendons, d_max); }

  bool within_limits(const TendonConfig& d) const {
    if (d.size() != tendons || !d.allFinite()) return false;
    return (d.array() >= d_min).all() && (d.array() <= d_max).all();
  }

  TendonConfig clamp(TendonConfig d) const { return d.cwiseMax(d_min).cwiseMin(d_max); }
};

namespace detail {

struct ArcState {
  double plane_angle;  // phi(s)
  double twist_rate;   // d(phi)/ds
  double curvature;    // 1/m
};

inline ArcState arc_state(const RobotSpec& spec, const TendonConfig& d, double s) {
  double ux = 0.0, uy = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double alpha = 2.0 * std::numbers::pi * i / 3.0;
    ux += d[i] * std::cos(alpha);
    uy += d[i] * std::sin(alpha);
  }
  const double twist_rate = spec.helical_gain * d[3] / spec.tendon_radius;
  return {std::atan2(uy, ux) + twist_rate * s, twist_rate,
          std::hypot(ux, uy) / (spec.tendon_radius * spec.length)};
}

}  // namespace detail

/// Backbone point at normalized arclength s in [0, 1].
inline Point3 backbone(const RobotSpec& spec, const TendonConfig& d, double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw InvalidInput("backbone arclength must lie in [0, 1]");
  if (d.size() != spec.tendons) throw InvalidInput("tendon configuration has the wrong dimension");
  const auto st = detail::arc_state(spec, d, s);
  const double arc = s * spec.length;
  const double theta = st.curvature * arc;
  double radial, height;
  if (std::abs(theta) < 1e-4) {
    // Series expansion keeps the straight limit smooth.
    radial = arc * (theta / 2.0 - theta * theta * theta / 24.0);
    height = arc * (1.0 - theta * theta / 6.0);
  } else {
    radial = (1.0 - std::cos(theta)) / st.curvature;
    height = std::sin(theta) / st.curvature;
  }
  return {radial * std::cos(st.plane_angle), radial * std::sin(st.plane_angle), height};
}

/// d(backbone)/ds, not normalized.
inline Point3 backbone_tangent(const RobotSpec& spec, const TendonConfig& d, double s) {
  const auto st = detail::arc_state(spec, d, s);
  const Point3 p = backbone(spec, d, s);
  const double radial = std::hypot(p.x(), p.y());
  const double theta = st.curvature * s * spec.length;
  const double dradial = spec.length * std::sin(theta);
  const double dheight = spec.length * std::cos(theta);
  const double c = std::cos(st.plane_angle), sn = std::sin(st.plane_angle);
  return {dradial * c - radial * st.twist_rate * sn, dradial * sn + radial * st.twist_rate * c, dheight};
}

struct ApproachContext {
  TendonConfig start;
  TendonConfig target;
  std::uint64_t seed = 0;
};

/// Configuration actually realized after approaching `target` from `start`.
/// Each tendon lands offset along its direction of travel by
/// hysteresis * tanh(delta / hysteresis) * |g|, g standard normal.
inline TendonConfig effective_config(const RobotSpec& spec, const TendonConfig& start, const TendonConfig& target,
                                     std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  TendonConfig d = target;
  for (int j = 0; j < spec.tendons; ++j) {
    const double g = normal(rng);
    if (spec.hysteresis > 0.0) {
      const double direction = std::tanh((target[j] - start[j]) / spec.hysteresis);
      d[j] += spec.hysteresis * direction * std::abs(g);
    }
  }
  return spec.clamp(d);
}

/// Points on the tube surface around the realized backbone, with isotropic
/// sensor noise.
inline PointCloud simulate_cloud(const RobotSpec& spec, const ApproachContext& ctx, std::size_t points) {
  spec.validate();
  if (points < 1) throw InvalidInput("simulate_cloud needs points >= 1");
  if (!spec.within_limits(ctx.start) || !spec.within_limits(ctx.target))
    throw InvalidInput("approach configurations must lie within the displacement limits");
  std::mt19937_64 rng(ctx.seed);
  const TendonConfig d_eff = effective_config(spec, ctx.start, ctx.target, rng);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  PointCloud cloud;
  cloud.reserve(points);
  for (std::size_t k = 0; k < points; ++k) {
    const double s = unif(rng);
    const double psi = 2.0 * std::numbers::pi * unif(rng);
    const Point3 t = backbone_tangent(spec, d_eff, s).normalized();
    const Point3 helper = std::abs(t.x()) < 0.9 ? Point3::UnitX() : Point3::UnitY();
    const Point3 n1 = (helper - helper.dot(t) * t).normalized();
    const Point3 n2 = t.cross(n1);
    Point3 p = backbone(spec, d_eff, s) + spec.body_radius * (std::cos(psi) * n1 + std::sin(psi) * n2);
    const double ex = noise(rng), ey = noise(rng), ez = noise(rng);
    p += spec.sensor_noise * Point3(ex, ey, ez);
    cloud.push_back(p);
  }
  return cloud;
}

struct DatasetOptions {
  std::array<int, 4> grid{7, 7, 7, 3};
  int approaches = 8;
  std::size_t points_per_cloud = 2000;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// Evenly spaced displacement levels; a single level sits at d_min.
inline std::vector<double> grid_levels(const RobotSpec& spec, int count) {
  std::vector<double> levels;
  if (count == 1) return {spec.d_min};
  for (int k = 0; k < count; ++k) levels.push_back(spec.d_min + (spec.d_max - spec.d_min) * k / (count - 1));
  levels.back() = spec.d_max;  // the formula can round one ulp past the limit
  return levels;
}

inline std::vector<TendonConfig> enumerate_grid(const RobotSpec& spec, const std::array<int, 4>& grid) {
  std::array<std::vector<double>, 4> levels;
  for (int j = 0; j < 4; ++j) {
    if (grid[j] < 1) throw ConfigError("grid level counts must be >= 1");
    levels[j] = grid_levels(spec, grid[j]);
  }
  std::vector<TendonConfig> out;
  for (double a : levels[0])
    for (double b : levels[1])
      for (double c : levels[2])
        for (double e : levels[3]) {
          TendonConfig d(4);
          d << a, b, c, e;
          out.push_back(d);
        }
  return out;
}

inline std::size_t test_count(std::size_t total, double test_fraction) {
  return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(total)));
}

/// Ground-truth cloud for one grid configuration: `approaches` clouds, each
/// approached from a uniformly random start, concatenated.
inline PointCloud config_cloud(const RobotSpec& spec, const TendonConfig& target, const DatasetOptions& opt,
                               std::size_t id) {
  std::mt19937_64 rng(derive_seed(opt.seed, id));
  std::uniform_real_distribution<double> unif(spec.d_min, spec.d_max);
  PointCloud cloud;
  cloud.reserve(opt.points_per_cloud * static_cast<std::size_t>(opt.approaches));
  for (int a = 0; a < opt.approaches; ++a) {
    ApproachContext ctx;
    ctx.start.resize(spec.tendons);
    for (int j = 0; j < spec.tendons; ++j) ctx.start[j] = unif(rng);
    ctx.target = target;
    ctx.seed = rng();
    const PointCloud part = simulate_cloud(spec, ctx, opt.points_per_cloud);
    cloud.insert(cloud.end(), part.begin(), part.end());
  }
  return cloud;
}

/// Enumerates the grid, simulates each configuration, and splits the
/// configurations uniformly at random into (train, test).
inline std::pair<Dataset, Dataset> build_dataset(const RobotSpec& spec, const DatasetOptions& opt) {
  spec.validate();
  if (opt.approaches < 2) throw ConfigError("need at least two approaches per configuration");
  if (!(opt.test_fraction >= 0.0 && opt.test_fraction < 1.0)) throw ConfigError("test fraction must lie in [0, 1)");
  const std::vector<TendonConfig> configs = enumerate_grid(spec, opt.grid);
  if (configs.size() < 10) throw ConfigError("grid must contain at least 10 configurations");

  std::vector<std::size_t> order(configs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 split_rng(derive_seed(opt.seed, "split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  std::vector<bool> is_test(configs.size(), false);
  const std::size_t n_test = test_count(configs.size(), opt.test_fraction);
  for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = true;

  Dataset train, test;
  train.split = Split::train;
  test.split = Split::test;
  for (std::size_t id = 0; id < configs.size(); ++id) {
    Sample s{id, configs[id], config_cloud(spec, configs[id], opt, id)};
    (is_test[id] ? test : train).entries.push_back(std::move(s));
  }
  return {std::move(train), std::move(test)};
}

inline Point3 centroid(const Dataset& data) {
  Point3 sum = Point3::Zero();
  std::size_t n = 0;
  for (const auto& s : data.entries)
    for (const auto& p : s.cloud) {
      sum += p;
      ++n;
    }
  if (n == 0) throw InvalidInput("centroid of an empty dataset");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.txt with `<id> <split> <d1> <d2> <d3> <d4>` and
// one cloud_<id>.csv (header x,y,z) per configuration.

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string cloud_to_csv(const PointCloud& cloud) {
  std::string s = "x,y,z\n";
  s.reserve(cloud.size() * 64);
  for (const auto& p : cloud) s += format_real(p.x()) + "," + format_real(p.y()) + "," + format_real(p.z()) + "\n";
  return s;
}

inline PointCloud cloud_from_csv(std::string_view text) {
  PointCloud cloud;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = trim(text.substr(pos, end - pos));
    const std::size_t at = pos;
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "x,y,z") throw ParseError("cloud CSV must start with header x,y,z", at);
      header = false;
      continue;
    }
    const auto cols = split(line, ",");
    if (cols.size() != 3) throw ParseError("cloud CSV row needs three columns", at);
    cloud.emplace_back(TokenReader::parse_real(cols[0], at, "x"), TokenReader::parse_real(cols[1], at, "y"),
                       TokenReader::parse_real(cols[2], at, "z"));
  }
  if (header) throw ParseError("cloud CSV is missing its header", 0);
  return cloud;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& train, const Dataset& test) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::map<std::size_t, std::pair<const Sample*, const char*>> all;
  for (const auto& s : train.entries) all[s.id] = {&s, "train"};
  for (const auto& s : test.entries) all[s.id] = {&s, "test"};
  std::string manifest;
  for (const auto& [id, entry] : all) {
    manifest += std::to_string(id) + " " + entry.second;
    for (Eigen::Index j = 0; j < entry.first->config.size(); ++j) manifest += " " + format_real(entry.first->config[j]);
    manifest += "\n";
    write_file(dir / ("cloud_" + std::to_string(id) + ".csv"), cloud_to_csv(entry.first->cloud));
  }
  write_file(dir / "manifest.txt", manifest);
}

inline std::pair<Dataset, Dataset> read_dataset(const std::filesystem::path& dir) {
  const std::string manifest = read_file(dir / "manifest.txt");
  Dataset train, test;
  train.split = Split::train;
  test.split = Split::test;
  TokenReader in(manifest);
  while (!in.at_end()) {
    const std::size_t at = in.offset();
    const long long id = in.integer("config id");
    if (id < 0) throw ParseError("negative config id", at);
    const std::string_view split_tag = in.next("split tag");
    Sample s;
    s.id = static_cast<std::size_t>(id);
    s.config.resize(4);
    for (int j = 0; j < 4; ++j) s.config[j] = in.real("displacement");
    s.cloud = cloud_from_csv(read_file(dir / ("cloud_" + std::to_string(id) + ".csv")));
    if (s.cloud.empty()) throw ParseError("empty cloud for config " + std::to_string(id), at);
    if (split_tag == "train")
      train.entries.push_back(std::move(s));
    else if (split_tag == "test")
      test.entries.push_back(std::move(s));
    else
      throw ParseError("split tag must be train or test", at);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace gmmkin
