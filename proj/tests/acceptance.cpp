// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Usage: acceptance [criterion numbers...]   (default: all)

#include "gmmkin/pipeline.hpp"

#include <Eigen/Dense>

#include <cstdio>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

using namespace gmmkin;

#ifndef GMMKIN_CONFIG_DIR
#error "GMMKIN_CONFIG_DIR must point at the configs directory"
#endif

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// --------------------------------------------------------------------------
// Shared desk-scale fixture: default dataset and trained models, built once.

const fs::path kConfigs = GMMKIN_CONFIG_DIR;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct DeskRun {
  RunConfig config;
  Dataset train_set, test_set;
  double build_seconds = 0.0;
  // Per seed: {n=1, n=5}.
  std::vector<TrainedModel> n1, n5;
  std::vector<double> init1, init5;
  double train_seconds = 0.0;
};

DeskRun& desk() {
  static DeskRun run = [] {
    DeskRun r;
    r.config = load_run_config(kConfigs / "default.cfg");
    const auto t0 = Clock::now();
    DatasetOptions opt = r.config.data;
    opt.seed = stage_seed(r.config, "gen-data");
    std::tie(r.train_set, r.test_set) = build_dataset(r.config.robot, opt);
    r.build_seconds = seconds_since(t0);
    return r;
  }();
  return run;
}

// Trains n = 1 and n = 5 for every seed (once).
DeskRun& trained_desk() {
  DeskRun& r = desk();
  if (!r.n5.empty()) return r;
  const auto t0 = Clock::now();
  for (std::uint64_t s : kSeeds) {
    RunConfig c = r.config;
    c.seed = s;
    const std::uint64_t seed = stage_seed(c, "train");
    for (int n : {1, 5}) {
      TrainedModel m = train_components(c, r.train_set, r.test_set, n, seed);
      // The initial parameters are rebuilt from the same stream for the baseline.
      const MdnParams init = mdn_init(c.architecture(n), c.robot.limits_min(), c.robot.limits_max(),
                                      centroid(r.train_set), derive_seed(seed, "init/n" + std::to_string(n)));
      (n == 1 ? r.init1 : r.init5).push_back(dataset_nll(init, r.test_set));
      (n == 1 ? r.n1 : r.n5).push_back(std::move(m));
      std::cerr << "  trained seed " << s << " n=" << n << " (" << seconds_since(t0) << " s)\n";
    }
  }
  r.train_seconds = seconds_since(t0);
  return r;
}

// --------------------------------------------------------------------------
// 1. Analytic gradient against central finite differences.

Outcome gradient_exactness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> unif(0.0, 1.0), noise(-0.3, 0.3);
  std::normal_distribution<double> spread(0.0, 0.3);
  double worst = 0.0;
  const int draws = 20;
  for (int draw = 0; draw < draws; ++draw) {
    MdnArchitecture arch;
    arch.components = 2;
    arch.trunk = {8};
    arch.heads = {8};
    arch.activation = Activation::tanh;
    MdnParams p = mdn_init(arch, Eigen::VectorXd::Zero(4), Eigen::VectorXd::Ones(4), Point3::Constant(0.5), 1000 + draw);
    for_each_layer(p, [&](DenseLayer& l) {
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] += noise(rng);
    });
    std::vector<Sample> batch(3);
    for (auto& s : batch) {
      s.config = Eigen::VectorXd(4);
      for (int j = 0; j < 4; ++j) s.config[j] = unif(rng);
      for (int k = 0; k < 16; ++k) s.cloud.emplace_back(0.5 + spread(rng), 0.5 + spread(rng), 0.5 + spread(rng));
    }
    const Eigen::VectorXd theta = flatten(p);
    const Eigen::VectorXd analytic = flatten(mdn_grad(p, batch));
    MdnParams q = p;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      const double h = 1e-5 * std::max(1.0, std::abs(theta[k]));
      Eigen::VectorXd t = theta;
      t[k] = theta[k] + h;
      unflatten(t, q);
      const double up = mdn_loss(q, batch);
      t[k] = theta[k] - h;
      unflatten(t, q);
      const double down = mdn_loss(q, batch);
      const double fd = (up - down) / (2.0 * h);
      const double rel = std::abs(analytic[k] - fd) / std::max({std::abs(analytic[k]), std::abs(fd), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt("max relative error %.3g over %d draws (limit 1e-4), %.1f s (limit 60 s)", worst, draws, secs)};
}

// --------------------------------------------------------------------------
// 2. Log-determinant identity.

Eigen::Matrix3d ubar(const UMatrix& u) {
  Eigen::Matrix3d m;
  m << std::exp(u.u11), u.u12, u.u13, 0.0, std::exp(u.u22), u.u23, 0.0, 0.0, std::exp(u.u33);
  return m;
}

Outcome log_det_identity() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    UMatrix u;
    for (int k = 0; k < UMatrix::kSize; ++k) u[k] = unif(rng);
    const Eigen::Matrix3d b = ubar(u);
    const double logdet = std::log((b.transpose() * b).determinant());
    worst = std::max(worst, std::abs(2.0 * log_sqrt_det_precision(u) - logdet));
  }
  return {worst < 1e-9, fmt("max |2 log|P|^1/2 - log det P| = %.3g over 1000 draws (limit 1e-9)", worst)};
}

// --------------------------------------------------------------------------
// 3. Reduced loss plus constant equals the exact mean negative log density.

Gmm3 random_gmm(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> w(0.1, 1.0), pos(-1.0, 1.0), uu(-1.0, 1.0);
  std::vector<GaussianComponent> comps(n);
  double total = 0.0;
  for (auto& c : comps) {
    c.weight = w(rng);
    total += c.weight;
    c.mean = Point3(pos(rng), pos(rng), pos(rng));
    for (int k = 0; k < UMatrix::kSize; ++k) c.u[k] = uu(rng);
  }
  for (auto& c : comps) c.weight /= total;
  return Gmm3(std::move(comps));
}

// Density from the covariance matrix, independent of the library's factored path.
double covariance_pdf(const Gmm3& g, const Point3& x) {
  double p = 0.0;
  for (const auto& c : g) {
    const Eigen::Matrix3d b = ubar(c.u);
    const Eigen::Matrix3d cov = (b.transpose() * b).inverse();
    const Eigen::Vector3d e = x - c.mean;
    p += c.weight * std::exp(-0.5 * e.dot(cov.inverse() * e)) /
         std::sqrt(std::pow(2.0 * std::numbers::pi, 3) * cov.determinant());
  }
  return p;
}

Outcome loss_equivalence() {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst_pdf = 0.0, worst_oracle = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Gmm3 g = random_gmm(rng, 1 + trial % 6);
    PointCloud cloud;
    for (int k = 0; k < 50; ++k) cloud.emplace_back(normal(rng), normal(rng), normal(rng));
    double via_pdf = 0.0, via_oracle = 0.0;
    for (const auto& x : cloud) {
      via_pdf -= std::log(gmm_pdf(g, x));
      via_oracle -= std::log(covariance_pdf(g, x));
    }
    via_pdf /= static_cast<double>(cloud.size());
    via_oracle /= static_cast<double>(cloud.size());
    const double exact = reduced_nll(g, cloud) + 1.5 * std::log(2.0 * std::numbers::pi);
    worst_pdf = std::max(worst_pdf, std::abs(exact - via_pdf));
    worst_oracle = std::max(worst_oracle, std::abs(exact - via_oracle));
  }
  return {worst_pdf < 1e-8 && worst_oracle < 1e-8,
          fmt("max deviation %.3g vs gmm_pdf, %.3g vs covariance oracle, 100 pairs (limit 1e-8)", worst_pdf,
              worst_oracle)};
}

// --------------------------------------------------------------------------
// 4. Training efficacy and the component-count trend on the desk dataset.

Outcome training_efficacy() {
  DeskRun& r = trained_desk();
  const double secs = r.build_seconds + r.train_seconds;
  std::vector<double> h1, h5;
  for (std::size_t i = 0; i < r.n1.size(); ++i) {
    h1.push_back(r.n1[i].test_nll);
    h5.push_back(r.n5[i].test_nll);
  }
  const double m1 = median3(h1), m5 = median3(h5), i1 = median3(r.init1), i5 = median3(r.init5);
  const bool ok = r.train_set.size() + r.test_set.size() == 1029 && m5 <= m1 && m1 < i1 && m5 < i5 && secs < 1800.0;
  std::string collapse;
  for (const auto& m : r.n5) collapse += fmt(" %.3g", m.report.collapse_fraction);
  return {ok, fmt("%zu/%zu configs; median held-out NLL n=5 %.4f, n=1 %.4f; initial n=5 %.4f, n=1 %.4f; "
                  "n=5 collapse fractions%s; %.0f s (limit 1800 s)",
                  r.train_set.size(), r.test_set.size(), m5, m1, i5, i1, collapse.c_str(), secs)};
}

// --------------------------------------------------------------------------
// 5. Mode-collapse detector on threshold-boundary mixtures.

Outcome mode_collapse_detector() {
  constexpr double eps = 1e-3;
  const double below = std::nextafter(eps, 0.0), above = std::nextafter(eps, 1.0);
  int cases = 0, wrong = 0;
  auto check = [&](std::vector<double> w, bool expect) {
    std::vector<GaussianComponent> comps(w.size());
    double rest = 1.0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      comps[i].weight = w[i];
      rest -= w[i];
    }
    comps.back().weight = rest;
    w.back() = rest;
    const Gmm3 g(comps);
    bool truth = false;
    for (std::size_t i = 0; i < w.size(); ++i) truth = truth || g[i].weight < eps;
    ++cases;
    // Also guard against the mixture silently rescaling the constructed weights.
    bool same = true;
    for (std::size_t i = 0; i < w.size(); ++i) same = same && g[i].weight == w[i];
    if (detect_mode_collapse(g, eps) != expect || truth != expect || !same) ++wrong;
  };
  for (int n = 2; n <= 10; ++n) {
    for (int pos = 0; pos + 1 < n; ++pos) {
      for (double v : {0.0, 1e-300, 1e-6, below, eps, above, 2e-3}) {
        std::vector<double> w(n, (1.0 - v) / (n - 1));
        w[pos] = v;
        check(w, v < eps);
      }
    }
    check(std::vector<double>(n, 1.0 / n), false);
  }
  check({1.0}, false);
  return {wrong == 0, fmt("%d boundary mixtures, %d misclassified", cases, wrong)};
}

// --------------------------------------------------------------------------
// 6. Conservativeness of the bound against Monte Carlo.

EnvironmentMesh rotated_box(const Point3& center, const Point3& half, const Mat3& rot) {
  return make_box(-half, half).transformed({rot, center});
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

Outcome conservativeness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto range = [&](double a, double b) { return a + (b - a) * unif(rng); };
  const int scenes = 24;
  int ok = 0, nontrivial = 0;
  double tightest = std::numeric_limits<double>::infinity();
  for (int s = 0; s < scenes; ++s) {
    const int n = 1 + s % 5;
    std::vector<GaussianComponent> comps(n);
    double total = 0.0;
    for (auto& c : comps) {
      c.weight = range(0.2, 1.0);
      total += c.weight;
      c.mean = Point3(range(-0.05, 0.05), range(-0.05, 0.05), range(-0.05, 0.05));
      // Spread of roughly 1 to 5 cm with random correlation.
      c.u.u11 = -std::log(range(0.01, 0.05));
      c.u.u22 = -std::log(range(0.01, 0.05));
      c.u.u33 = -std::log(range(0.01, 0.05));
      c.u.u12 = range(-30.0, 30.0);
      c.u.u13 = range(-30.0, 30.0);
      c.u.u23 = range(-30.0, 30.0);
    }
    for (auto& c : comps) c.weight /= total;
    const Gmm3 g(comps);

    // One to three boxes or thin walls near the mixture, none swallowing a mean.
    EnvironmentMesh env;
    const int boxes = 1 + s % 3;
    int placed = 0;
    while (placed < boxes) {
      const bool wall = unif(rng) < 0.5;
      const Point3 half = wall ? Point3(0.003, range(0.03, 0.08), range(0.03, 0.08))
                               : Point3(range(0.01, 0.04), range(0.01, 0.04), range(0.01, 0.04));
      const Point3 center(range(-0.1, 0.1), range(-0.1, 0.1), range(-0.1, 0.1));
      const EnvironmentMesh box = rotated_box(center, half, random_rotation(rng));
      bool swallows = false;
      for (const auto& c : g) swallows = swallows || point_in_collision(box, c.mean, 0.0);
      if (swallows) continue;
      env = env.merged(box);
      ++placed;
    }
    const double bound = config_collision_bound(g, env).bound;
    const MonteCarloEstimate mc = mc_collision_estimate(g, env, 100000, derive_seed(606, s));
    const double margin = bound - (mc.estimate - 3.0 * mc.standard_error);
    tightest = std::min(tightest, margin);
    ok += margin >= 0.0 ? 1 : 0;
    nontrivial += mc.estimate > 1e-3 ? 1 : 0;
  }

  // Half-space: a slab far larger than the spread in y and z, face at b sigma.
  const double sigma = 0.02;
  GaussianComponent c;
  c.u.u11 = c.u.u22 = c.u.u33 = -std::log(sigma);
  const Gmm3 g({c});
  int half_ok = 0;
  std::string half_detail;
  for (double b : {0.5, 1.0, 1.5, 2.0}) {
    const EnvironmentMesh slab = make_box(Point3(b * sigma, -6 * sigma, -6 * sigma), Point3((b + 8) * sigma, 6 * sigma, 6 * sigma));
    const MonteCarloEstimate mc = mc_collision_estimate(g, slab, 100000, derive_seed(607, static_cast<std::uint64_t>(b * 10)));
    const bool match = std::abs(mc.estimate - normal_sf(b)) <= 3.0 * mc.standard_error;
    const bool bounded = config_collision_bound(g, slab).bound >= mc.estimate - 3.0 * mc.standard_error;
    half_ok += match && bounded ? 1 : 0;
    half_detail += fmt(" b=%.1f: mc %.4f vs %.4f;", b, mc.estimate, normal_sf(b));
  }
  const double secs = seconds_since(t0);
  return {ok == scenes && half_ok == 4 && secs < 600.0,
          fmt("%d/%d scenes conservative (%d with MC > 1e-3, tightest margin %.3g); half-space %d/4 within 3 SE:%s "
              "%.1f s (limit 600 s)",
              ok, scenes, nontrivial, tightest, half_ok, half_detail.c_str(), secs)};
}

// --------------------------------------------------------------------------
// 7. Trajectory bound hand cases.

Outcome trajectory_bound() {
  struct Case {
    std::vector<double> p;
    double expect;
  };
  const std::vector<Case> cases = {
      {{0.3}, 0.3}, {{0.0}, 0.0}, {{1.0}, 1.0}, {{0.0, 0.0, 0.0, 0.0}, 0.0}, {{0.5, 0.5}, 0.75},
      {{0.1, 0.2}, 0.28}, {{0.5, 0.5, 0.5}, 0.875}, {{0.2, 1.0, 0.0}, 1.0},
  };
  double worst = 0.0;
  for (const auto& c : cases) worst = std::max(worst, std::abs(trajectory_collision_bound(c.p) - c.expect));
  return {worst <= 1e-12, fmt("%zu hand cases, max deviation %.3g (limit 1e-12)", cases.size(), worst)};
}

// --------------------------------------------------------------------------
// 8. Forward latency with the default architecture.

Outcome forward_latency() {
  const RunConfig c = load_run_config(kConfigs / "default.cfg");
  DeskRun& r = desk();
  // Weights do not change the cost; use a trained model when one exists.
  const MdnParams p = r.n5.empty() ? mdn_init(c.architecture(5), c.robot.limits_min(), c.robot.limits_max(),
                                              Point3(0.0, 0.0, 0.1), 808)
                                   : r.n5.front().params;
  const auto configs = random_configs(p, c.bench_count, stage_seed(c, "bench"));
  const LatencyStats s = time_forward(p, configs);
  return {configs.size() == 10000 && s.mean_ms < 1.0,
          fmt("%zu configs: mean %.4f ms, median %.4f ms, p99 %.4f ms (limit: mean < 1 ms)", configs.size(),
              s.mean_ms, s.median_ms, s.p99_ms)};
}

// --------------------------------------------------------------------------
// 9. Planning and trajectory optimization on the corridor scene.

Outcome planning_optimization() {
  DeskRun& r = trained_desk();
  const auto t0 = Clock::now();
  const MdnParams& model = r.n5.front().params;
  const RunConfig base = r.config;
  const Scene scene = load_scene(base);
  const ConfigChecker checker(scene.env, model);
  const TrajectoryEvaluator eval(scene.env, model, base.states_per_edge);
  std::vector<double> ratios;
  std::string detail;
  bool valid = true;
  for (std::uint64_t s : kSeeds) {
    RunConfig c = base;
    c.seed = s;
    PrmParams prm = c.prm;
    prm.seed = stage_seed(c, "plan");
    const Roadmap map = prm_build(checker, prm);
    Trajectory traj;
    try {
      traj = prm_query(map, checker, *scene.start, *scene.goal, prm.edge_step, prm.neighbors);
    } catch (const PathNotFound& e) {
      valid = false;
      detail += fmt(" seed %d: %s;", static_cast<int>(s), e.what());
      continue;
    }
    OptimizeParams opt = c.opt;
    opt.seed = stage_seed(c, "optimize");
    const OptimizationResult res = optimize_trajectory(traj, eval, model.limits_min, model.limits_max, opt);
    const double initial = res.history.front(), final_bound = res.history.back();
    bool monotone = res.history.size() == opt.iterations + 1;
    for (std::size_t k = 1; k < res.history.size(); ++k) monotone = monotone && res.history[k] <= res.history[k - 1];
    const bool ends = res.trajectory.waypoints.front() == traj.waypoints.front() &&
                      res.trajectory.waypoints.back() == traj.waypoints.back();
    valid = valid && initial >= 0.10 && monotone && ends && traj.size() >= 3;
    ratios.push_back(final_bound / initial);
    detail += fmt(" seed %d: %zu waypoints, %.4f -> %.4f%s%s;", static_cast<int>(s), traj.size(), initial,
                  final_bound, monotone ? "" : " NON-MONOTONE", ends ? "" : " ENDPOINTS MOVED");
  }
  const double secs = seconds_since(t0);
  const double med = ratios.size() == 3 ? median3(ratios) : std::numeric_limits<double>::infinity();
  return {valid && med <= 0.5 && secs < 900.0,
          fmt("median final/initial %.4g (limit 0.5);%s %.1f s (limit 900 s)", med, detail.c_str(), secs)};
}

// --------------------------------------------------------------------------
// 10. Byte-identical command outputs.

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string().rfind("timing_", 0) != 0)
      files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return files;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "gmmkin_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::map<std::string, std::string>> runs;
  std::ostringstream log;
  for (const char* name : {"a", "b"}) {
    RunConfig c = load_run_config(kConfigs / "smoke.cfg");
    c.out = root / name;
    c.data_dir.clear();
    c.model = c.out / "model_n5.txt";
    c.trajectory.clear();
    int status = 0;
    for (auto cmd : {cmd_gen_data, cmd_train, cmd_plan, cmd_optimize}) status |= cmd(c, log);
    if (status != 0) return {false, "a command exited nonzero"};
    runs.push_back(snapshot(c.out));
  }
  std::size_t differing = 0;
  for (const auto& [name, body] : runs[0]) {
    const auto it = runs[1].find(name);
    differing += it == runs[1].end() || it->second != body ? 1 : 0;
  }
  differing += runs[1].size() > runs[0].size() ? runs[1].size() - runs[0].size() : 0;
  bool complete = true;
  for (const char* f : {"data/manifest.txt", "sweep.csv", "model_n5.txt", "trajectory.csv", "optimized.csv",
                        "optimization_log.csv"})
    complete = complete && runs[0].count(f);
  fs::remove_all(root);
  return {differing == 0 && complete,
          fmt("%zu files compared across two runs (timing files excluded), %zu differ%s", runs[0].size(), differing,
              complete ? "" : "; expected artifacts missing")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"gradient exactness", gradient_exactness},
      {"log-det identity", log_det_identity},
      {"loss equivalence", loss_equivalence},
      {"training efficacy", training_efficacy},
      {"mode-collapse detector", mode_collapse_detector},
      {"bound conservativeness", conservativeness},
      {"trajectory bound", trajectory_bound},
      {"forward latency", forward_latency},
      {"planning and optimization", planning_optimization},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
