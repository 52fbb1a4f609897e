#pragma once

// End-to-end driver behind the command-line tool: run configuration, and one
// function per subcommand. Each command reads and writes plain files under the
// output directory and reports progress on the given stream.

#include "gmmkin/collision.hpp"
#include "gmmkin/core.hpp"
#include "gmmkin/mdn.hpp"
#include "gmmkin/planner.hpp"
#include "gmmkin/synth_robot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <random>
#include <tuple>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace gmmkin {

namespace fs = std::filesystem;

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path out = "out";
  // Empty paths default to files under `out`.
  fs::path data_dir;
  fs::path model;
  fs::path scene;
  fs::path trajectory;

  RobotSpec robot;
  DatasetOptions data;

  std::vector<int> trunk{128, 128};
  std::vector<int> heads{64};
  Activation activation = Activation::relu;
  std::vector<int> sweep{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  TrainHyper hyper;

  std::size_t bench_count = 10000;

  PrmParams prm;
  std::size_t states_per_edge = 10;
  double max_edge = EnvironmentMesh::kDefaultMaxEdge;
  OptimizeParams opt;

  std::size_t validate_configs = 20;
  std::size_t validate_samples = 100000;

  fs::path data_path() const { return data_dir.empty() ? out / "data" : data_dir; }
  fs::path model_path() const { return model.empty() ? out / "model_n5.txt" : model; }
  fs::path trajectory_path() const { return trajectory.empty() ? out / "trajectory.csv" : trajectory; }
  fs::path scene_path() const {
    if (scene.empty()) throw ConfigError("no scene configured (key 'scene')");
    return scene;
  }

  MdnArchitecture architecture(int components) const {
    MdnArchitecture a;
    a.components = components;
    a.trunk = trunk;
    a.heads = heads;
    a.activation = activation;
    return a;
  }
};

namespace detail {

inline std::vector<int> parse_int_list(std::string_view v, std::string_view key) {
  std::vector<int> out;
  for (auto tok : split(v, ", \t")) {
    int x = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
    if (ec != std::errc() || p != tok.data() + tok.size())
      throw ConfigError("key '" + std::string(key) + "' needs a list of integers");
    out.push_back(x);
  }
  if (out.empty()) throw ConfigError("key '" + std::string(key) + "' is empty");
  return out;
}

inline double parse_double(std::string_view v, std::string_view key) {
  double x = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x))
    throw ConfigError("key '" + std::string(key) + "' needs a real number");
  return x;
}

inline std::uint64_t parse_u64(std::string_view v, std::string_view key) {
  std::uint64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("key '" + std::string(key) + "' needs a non-negative integer");
  return x;
}

}  // namespace detail

/// Parses `key = value` lines ('#' starts a comment). Relative paths are
/// resolved against `base_dir`. Unknown keys are errors.
inline RunConfig parse_run_config(std::string_view text, const fs::path& base_dir = {}) {
  RunConfig c;
  auto path = [&](std::string_view v) {
    fs::path p{std::string(v)};
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  auto size = [](std::string_view v, std::string_view k) { return static_cast<std::size_t>(detail::parse_u64(v, k)); };

  using Setter = std::function<void(std::string_view, std::string_view)>;
  const std::map<std::string, Setter, std::less<>> setters = {
      {"seed", [&](auto v, auto k) { c.seed = detail::parse_u64(v, k); }},
      {"out", [&](auto v, auto) { c.out = path(v); }},
      {"data_dir", [&](auto v, auto) { c.data_dir = path(v); }},
      {"model", [&](auto v, auto) { c.model = path(v); }},
      {"scene", [&](auto v, auto) { c.scene = path(v); }},
      {"trajectory", [&](auto v, auto) { c.trajectory = path(v); }},
      {"robot.length", [&](auto v, auto k) { c.robot.length = detail::parse_double(v, k); }},
      {"robot.tendon_radius", [&](auto v, auto k) { c.robot.tendon_radius = detail::parse_double(v, k); }},
      {"robot.body_radius", [&](auto v, auto k) { c.robot.body_radius = detail::parse_double(v, k); }},
      {"robot.d_min", [&](auto v, auto k) { c.robot.d_min = detail::parse_double(v, k); }},
      {"robot.d_max", [&](auto v, auto k) { c.robot.d_max = detail::parse_double(v, k); }},
      {"robot.hysteresis", [&](auto v, auto k) { c.robot.hysteresis = detail::parse_double(v, k); }},
      {"robot.sensor_noise", [&](auto v, auto k) { c.robot.sensor_noise = detail::parse_double(v, k); }},
      {"robot.helical_gain", [&](auto v, auto k) { c.robot.helical_gain = detail::parse_double(v, k); }},
      {"data.grid",
       [&](auto v, auto k) {
         const auto g = detail::parse_int_list(v, k);
         if (g.size() != 4) throw ConfigError("data.grid needs four level counts");
         std::copy(g.begin(), g.end(), c.data.grid.begin());
       }},
      {"data.approaches", [&](auto v, auto k) { c.data.approaches = static_cast<int>(detail::parse_u64(v, k)); }},
      {"data.points_per_cloud", [&](auto v, auto k) { c.data.points_per_cloud = size(v, k); }},
      {"data.test_fraction", [&](auto v, auto k) { c.data.test_fraction = detail::parse_double(v, k); }},
      {"mdn.trunk", [&](auto v, auto k) { c.trunk = detail::parse_int_list(v, k); }},
      {"mdn.heads", [&](auto v, auto k) { c.heads = detail::parse_int_list(v, k); }},
      {"mdn.activation", [&](auto v, auto) { c.activation = activation_from_string(v); }},
      {"mdn.sweep", [&](auto v, auto k) { c.sweep = detail::parse_int_list(v, k); }},
      {"train.epochs", [&](auto v, auto k) { c.hyper.epochs = size(v, k); }},
      {"train.step", [&](auto v, auto k) { c.hyper.step = detail::parse_double(v, k); }},
      {"train.batch", [&](auto v, auto k) { c.hyper.batch = size(v, k); }},
      {"train.points_per_config", [&](auto v, auto k) { c.hyper.points_per_config = size(v, k); }},
      {"train.heldout_points", [&](auto v, auto k) { c.hyper.heldout_points = size(v, k); }},
      {"train.collapse_threshold", [&](auto v, auto k) { c.hyper.collapse_threshold = detail::parse_double(v, k); }},
      {"bench.count", [&](auto v, auto k) { c.bench_count = size(v, k); }},
      {"prm.nodes", [&](auto v, auto k) { c.prm.nodes = size(v, k); }},
      {"prm.neighbors", [&](auto v, auto k) { c.prm.neighbors = size(v, k); }},
      {"prm.edge_step", [&](auto v, auto k) { c.prm.edge_step = detail::parse_double(v, k); }},
      {"traj.states_per_edge", [&](auto v, auto k) { c.states_per_edge = size(v, k); }},
      {"mesh.max_edge", [&](auto v, auto k) { c.max_edge = detail::parse_double(v, k); }},
      {"opt.iterations", [&](auto v, auto k) { c.opt.iterations = size(v, k); }},
      {"opt.samples", [&](auto v, auto k) { c.opt.samples = size(v, k); }},
      {"opt.radius", [&](auto v, auto k) { c.opt.radius = detail::parse_double(v, k); }},
      {"opt.xi", [&](auto v, auto k) { c.opt.xi = detail::parse_double(v, k); }},
      {"validate.configs", [&](auto v, auto k) { c.validate_configs = size(v, k); }},
      {"validate.samples", [&](auto v, auto k) { c.validate_samples = size(v, k); }},
  };

  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    if (value.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key '" + std::string(key) + "' has no value");
    it->second(value, key);
  }

  c.robot.validate();
  for (int n : c.sweep)
    if (n < 1) throw ConfigError("component counts in mdn.sweep must be >= 1");
  for (int w : c.trunk)
    if (w < 1) throw ConfigError("layer widths must be >= 1");
  for (int w : c.heads)
    if (w < 1) throw ConfigError("layer widths must be >= 1");
  return c;
}

inline RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_file(path), path.parent_path()); }

// ---------------------------------------------------------------------------
// Shared stages

inline std::uint64_t stage_seed(const RunConfig& c, std::string_view stage) { return derive_seed(c.seed, stage); }

struct TrainedModel {
  MdnParams params;
  TrainReport report;
  double test_nll = 0.0;
};

/// Trains one model with `components` mixture components. Initialization and
/// mini-batch order come from independent streams of `seed`.
inline TrainedModel train_components(const RunConfig& c, const Dataset& train_set, const Dataset& test_set,
                                     int components, std::uint64_t seed) {
  const std::string tag = "n" + std::to_string(components);
  const MdnParams init = mdn_init(c.architecture(components), c.robot.limits_min(), c.robot.limits_max(),
                                  centroid(train_set), derive_seed(seed, "init/" + tag));
  TrainHyper hyper = c.hyper;
  hyper.seed = derive_seed(seed, "batches/" + tag);
  hyper.heldout = test_set.entries.empty() ? nullptr : &test_set;
  TrainedModel out;
  std::tie(out.params, out.report) = train(init, train_set, hyper);
  out.test_nll = test_set.entries.empty() ? std::numeric_limits<double>::quiet_NaN() : dataset_nll(out.params, test_set);
  return out;
}

inline MdnParams load_model(const fs::path& path) { return load_params(read_file(path)); }

inline Scene load_scene(const RunConfig& c) {
  const fs::path p = c.scene_path();
  return parse_scene(read_file(p), p.parent_path(), c.max_edge);
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit status.

inline int cmd_gen_data(const RunConfig& c, std::ostream& log) {
  DatasetOptions opt = c.data;
  opt.seed = stage_seed(c, "gen-data");
  const auto [train_set, test_set] = build_dataset(c.robot, opt);
  write_dataset(c.data_path(), train_set, test_set);
  log << "configs " << train_set.size() + test_set.size() << " train " << train_set.size() << " test "
      << test_set.size() << " -> " << c.data_path().string() << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& c, std::ostream& log) {
  const auto [train_set, test_set] = read_dataset(c.data_path());
  if (train_set.entries.empty()) throw InvalidInput("dataset has no training configurations");
  ensure_dir(c.out);
  const std::uint64_t seed = stage_seed(c, "train");
  std::string sweep = "components,test_nll,collapse_fraction\n";
  bool failed = false;
  for (int n : c.sweep) {
    const std::string tag = "n" + std::to_string(n);
    try {
      const TrainedModel m = train_components(c, train_set, test_set, n, seed);
      write_file(c.out / ("model_" + tag + ".txt"), save_params(m.params));
      std::string curve = "epoch,train_nll,heldout_nll\n", timing = "epoch,seconds\n";
      for (std::size_t e = 0; e < m.report.train_nll.size(); ++e) {
        curve += std::to_string(e + 1) + "," + format_real(m.report.train_nll[e]) + "," +
                 format_real(m.report.heldout_nll[e]) + "\n";
        timing += std::to_string(e + 1) + "," + format_real(m.report.epoch_seconds[e]) + "\n";
      }
      write_file(c.out / ("train_" + tag + ".csv"), curve);
      write_file(c.out / ("timing_" + tag + ".csv"), timing);
      sweep += std::to_string(n) + "," + format_real(m.test_nll) + "," + format_real(m.report.collapse_fraction) + "\n";
      log << "n=" << n << " initial_nll " << format_real(m.report.initial_train_nll) << " test_nll "
          << format_real(m.test_nll) << " collapse_fraction " << format_real(m.report.collapse_fraction)
          << (m.report.mode_collapse ? " (mode collapse)" : "") << "\n";
    } catch (const TrainingFailure& e) {
      failed = true;
      sweep += std::to_string(n) + ",nan,nan\n";
      log << "n=" << n << " failed: " << e.what() << "\n";
    }
  }
  write_file(c.out / "sweep.csv", sweep);
  return failed ? 1 : 0;
}

struct LatencyStats {
  double mean_ms = 0.0, median_ms = 0.0, p99_ms = 0.0;
};

/// Uniformly random configurations within the model's limits.
inline std::vector<TendonConfig> random_configs(const MdnParams& p, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<TendonConfig> out(count);
  for (auto& d : out) {
    d.resize(p.inputs());
    for (int j = 0; j < p.inputs(); ++j) d[j] = p.limits_min[j] + (p.limits_max[j] - p.limits_min[j]) * unif(rng);
  }
  return out;
}

inline LatencyStats time_forward(const MdnParams& p, const std::vector<TendonConfig>& configs) {
  if (configs.empty()) throw InvalidInput("latency benchmark needs at least one configuration");
  std::vector<double> ms;
  ms.reserve(configs.size());
  double sink = 0.0;
  for (const auto& d : configs) {
    const auto t0 = std::chrono::steady_clock::now();
    const Gmm3 g = mdn_forward(p, d);
    const auto t1 = std::chrono::steady_clock::now();
    sink += g[0].weight;
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  if (!std::isfinite(sink)) throw NumericalError("forward pass produced non-finite weights");
  LatencyStats s;
  for (double v : ms) s.mean_ms += v;
  s.mean_ms /= static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  s.median_ms = ms[ms.size() / 2];
  s.p99_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(ms.size()))) - 1)];
  return s;
}

inline int cmd_bench(const RunConfig& c, std::ostream& log) {
  const MdnParams p = load_model(c.model_path());
  const auto configs = random_configs(p, c.bench_count, stage_seed(c, "bench"));
  const LatencyStats s = time_forward(p, configs);
  ensure_dir(c.out);
  write_file(c.out / "bench.csv", "count,mean_ms,median_ms,p99_ms\n" + std::to_string(configs.size()) + "," +
                                      format_real(s.mean_ms) + "," + format_real(s.median_ms) + "," +
                                      format_real(s.p99_ms) + "\n");
  log << "mdn_forward over " << configs.size() << " configs: mean " << s.mean_ms << " ms, median " << s.median_ms
      << " ms, p99 " << s.p99_ms << " ms\n";
  return 0;
}

inline int cmd_plan(const RunConfig& c, std::ostream& log) {
  const MdnParams p = load_model(c.model_path());
  const Scene scene = load_scene(c);
  if (!scene.start || !scene.goal) throw ConfigError("scene file needs 'start' and 'goal' lines");
  const ConfigChecker checker(scene.env, p);
  PrmParams prm = c.prm;
  prm.seed = stage_seed(c, "plan");
  const Roadmap map = prm_build(checker, prm);
  const Trajectory traj = prm_query(map, checker, *scene.start, *scene.goal, prm.edge_step, prm.neighbors);
  const TrajectoryEvaluator eval(scene.env, p, c.states_per_edge);
  const double bound = eval.bound(traj);
  ensure_dir(c.out);
  write_file(c.trajectory_path(), trajectory_to_csv(traj));
  write_file(c.out / "plan.txt", "roadmap_nodes=" + std::to_string(map.nodes.size()) + "\nroadmap_edges=" +
                                     std::to_string(map.edges.size()) + "\nwaypoints=" + std::to_string(traj.size()) +
                                     "\nbound=" + format_real(bound) + "\n");
  log << "roadmap " << map.nodes.size() << " nodes " << map.edges.size() << " edges; path of " << traj.size()
      << " waypoints, collision bound " << format_real(bound) << "\n";
  return 0;
}

inline int cmd_optimize(const RunConfig& c, std::ostream& log) {
  const MdnParams p = load_model(c.model_path());
  const Scene scene = load_scene(c);
  const Trajectory traj = trajectory_from_csv(read_file(c.trajectory_path()));
  const TrajectoryEvaluator eval(scene.env, p, c.states_per_edge);
  OptimizeParams opt = c.opt;
  opt.seed = stage_seed(c, "optimize");
  const OptimizationResult r = optimize_trajectory(traj, eval, p.limits_min, p.limits_max, opt);
  ensure_dir(c.out);
  write_file(c.out / "optimized.csv", trajectory_to_csv(r.trajectory));
  write_file(c.out / "optimization_log.csv", optimization_log_to_csv(r));
  log << "collision bound " << format_real(r.history.front()) << " -> " << format_real(r.history.back()) << " after "
      << r.log.size() << " iterations\n";
  return 0;
}

inline int cmd_validate(const RunConfig& c, std::ostream& log) {
  const MdnParams p = load_model(c.model_path());
  const Scene scene = load_scene(c);
  const std::uint64_t seed = stage_seed(c, "validate");
  const auto configs = random_configs(p, c.validate_configs, derive_seed(seed, "configs"));
  std::string csv = "config,bound,mc_estimate,mc_stderr,conservative\n";
  std::size_t ok = 0;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const Gmm3 g = mdn_forward(p, configs[i]);
    const double bound = config_collision_bound(g, scene.env).bound;
    const MonteCarloEstimate mc = mc_collision_estimate(g, scene.env, c.validate_samples, derive_seed(seed, i));
    const bool conservative = bound >= mc.estimate - 3.0 * mc.standard_error;
    ok += conservative ? 1 : 0;
    csv += std::to_string(i) + "," + format_real(bound) + "," + format_real(mc.estimate) + "," +
           format_real(mc.standard_error) + "," + (conservative ? "1" : "0") + "\n";
    log << i << " bound " << format_real(bound) << " mc " << format_real(mc.estimate) << " +- "
        << format_real(mc.standard_error) << "\n";
  }
  ensure_dir(c.out);
  write_file(c.out / "validate.csv", csv);
  const double fraction = configs.empty() ? 1.0 : static_cast<double>(ok) / static_cast<double>(configs.size());
  log << "conservative fraction " << format_real(fraction) << "\n";
  return fraction == 1.0 ? 0 : 1;
}

}  // namespace gmmkin
