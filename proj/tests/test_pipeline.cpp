#include "gmmkin/pipeline.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace gmmkin;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("gmmkin_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// 3*2*2*1 = 12 configurations, tiny network.
RunConfig tiny(const fs::path& dir) {
  RunConfig c = parse_run_config(
      "data.grid = 3, 2, 2, 1\n"
      "data.approaches = 2\n"
      "data.points_per_cloud = 100\n"
      "mdn.trunk = 8\n"
      "mdn.heads = 8\n"
      "mdn.sweep = 1, 2\n"
      "train.epochs = 3\n"
      "train.points_per_config = 64\n"
      "bench.count = 50\n"
      "prm.nodes = 60\n"
      "opt.iterations = 3\n"
      "opt.samples = 5\n"
      "validate.configs = 3\n"
      "validate.samples = 2000\n");
  c.out = dir;
  return c;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return files;
}

DenseLayer layer(Eigen::MatrixXd w, Eigen::VectorXd b) { return {std::move(w), std::move(b), Activation::identity}; }

// Two components whose means move linearly with the first two normalized
// inputs: mean_i = (0.05 x1, 0.05 x2, 0.1 + 0.01 i), spread 5 mm.
MdnParams linear_model() {
  const int n = 2;
  MdnParams p;
  p.components = n;
  p.activation = Activation::identity;
  p.limits_min = Eigen::VectorXd::Zero(4);
  p.limits_max = Eigen::VectorXd::Constant(4, 0.03);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
  const Eigen::VectorXd zero4 = Eigen::VectorXd::Zero(4);
  p.trunk.push_back(layer(eye, zero4));
  p.heads[kWeightHead] = {layer(eye, zero4), layer(Eigen::MatrixXd::Zero(n, 4), Eigen::VectorXd::Zero(n))};
  Eigen::MatrixXd wm = Eigen::MatrixXd::Zero(3 * n, 4);
  Eigen::VectorXd bm = Eigen::VectorXd::Zero(3 * n);
  Eigen::VectorXd bu = Eigen::VectorXd::Zero(6 * n);
  for (int i = 0; i < n; ++i) {
    wm(3 * i, 0) = 0.05;
    wm(3 * i + 1, 1) = 0.05;
    bm[3 * i + 2] = 0.1 + 0.01 * i;
    for (int k = 0; k < 3; ++k) bu[6 * i + k] = -std::log(0.005);
  }
  p.heads[kMeanHead] = {layer(eye, zero4), layer(wm, bm)};
  p.heads[kUHead] = {layer(eye, zero4), layer(Eigen::MatrixXd::Zero(6 * n, 4), bu)};
  return p;
}

}  // namespace

TEST(RunConfig, DefaultsMatchDeskRun) {
  const RunConfig c = parse_run_config("");
  EXPECT_EQ(c.data.grid, (std::array<int, 4>{7, 7, 7, 3}));
  EXPECT_EQ(c.sweep.size(), 10u);
  EXPECT_EQ(c.trunk, (std::vector<int>{128, 128}));
  EXPECT_EQ(c.hyper.epochs, 200u);
  EXPECT_EQ(c.bench_count, 10000u);
  EXPECT_EQ(c.opt.iterations, 50u);
  EXPECT_EQ(c.model_path(), fs::path("out") / "model_n5.txt");
}

TEST(RunConfig, ParsesValuesCommentsAndWhitespace) {
  const RunConfig c = parse_run_config(
      "# comment\n"
      "  seed = 42   # trailing\n"
      "robot.d_max=0.04\n"
      "mdn.sweep = 1,5\n"
      "mdn.activation = tanh\n"
      "opt.xi = 0.05\n");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_DOUBLE_EQ(c.robot.d_max, 0.04);
  EXPECT_EQ(c.sweep, (std::vector<int>{1, 5}));
  EXPECT_EQ(c.activation, Activation::tanh);
  EXPECT_DOUBLE_EQ(c.opt.xi, 0.05);
}

TEST(RunConfig, RelativePathsResolveAgainstConfigDirectory) {
  const RunConfig c = parse_run_config("out = o\nscene = s.scene\nmodel = /abs/m.txt\n", "/cfg");
  EXPECT_EQ(c.out, fs::path("/cfg/o"));
  EXPECT_EQ(c.scene_path(), fs::path("/cfg/s.scene"));
  EXPECT_EQ(c.model_path(), fs::path("/abs/m.txt"));
  EXPECT_EQ(c.data_path(), fs::path("/cfg/o/data"));
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(parse_run_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("seed 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("seed =\n"), ConfigError);
  EXPECT_THROW(parse_run_config("seed = -1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("robot.length = abc\n"), ConfigError);
  EXPECT_THROW(parse_run_config("robot.length = nan\n"), ConfigError);
  EXPECT_THROW(parse_run_config("mdn.sweep = 0, 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("mdn.trunk = 8, x\n"), ConfigError);
  EXPECT_THROW(parse_run_config("data.grid = 1, 2, 3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("robot.d_max = -1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("").scene_path(), ConfigError);
}

TEST(Pipeline, GenDataWritesSplitAndIsReproducible) {
  const fs::path dir = scratch("gen");
  RunConfig c = tiny(dir / "a");
  std::ostringstream log;
  ASSERT_EQ(cmd_gen_data(c, log), 0);
  EXPECT_NE(log.str().find("configs 12 train 11 test 1"), std::string::npos);
  const auto [train_set, test_set] = read_dataset(c.data_path());
  EXPECT_EQ(train_set.size(), 11u);
  EXPECT_EQ(test_set.size(), 1u);

  RunConfig again = tiny(dir / "b");
  ASSERT_EQ(cmd_gen_data(again, log), 0);
  EXPECT_EQ(snapshot(c.data_path()), snapshot(again.data_path()));

  again.seed = 7;
  again.out = dir / "c";
  ASSERT_EQ(cmd_gen_data(again, log), 0);
  EXPECT_NE(snapshot(c.data_path()), snapshot(again.data_path()));
}

TEST(Pipeline, SplitSizesWithinOneOfFraction) {
  for (std::size_t total : {10u, 11u, 19u, 1029u, 2530u}) {
    const double n = static_cast<double>(test_count(total, 0.1));
    EXPECT_LE(std::abs(n - 0.1 * static_cast<double>(total)), 1.0) << total;
  }
}

TEST(Pipeline, TrainSingleCountOnTenConfigs) {
  const fs::path dir = scratch("train10");
  RunConfig c = tiny(dir);
  c.data.grid = {5, 2, 1, 1};
  c.sweep = {1};
  c.hyper.epochs = 5;
  std::ostringstream log;
  ASSERT_EQ(cmd_gen_data(c, log), 0);
  ASSERT_EQ(cmd_train(c, log), 0);
  EXPECT_TRUE(fs::exists(dir / "model_n1.txt"));
  EXPECT_FALSE(fs::exists(dir / "model_n2.txt"));
  const std::string sweep = read_file(dir / "sweep.csv");
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 2);
  EXPECT_EQ(sweep.rfind("components,test_nll,collapse_fraction\n1,", 0), 0u);
  const std::string curve = read_file(dir / "train_n1.csv");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 6);
  const MdnParams p = load_model(dir / "model_n1.txt");
  EXPECT_EQ(p.components, 1);
}

TEST(Pipeline, SweepRowsMatchSweepLength) {
  const fs::path dir = scratch("sweep");
  RunConfig c = tiny(dir);
  c.sweep = {3, 1, 2};
  std::ostringstream log;
  ASSERT_EQ(cmd_gen_data(c, log), 0);
  ASSERT_EQ(cmd_train(c, log), 0);
  const std::string sweep = read_file(dir / "sweep.csv");
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 4);
  for (int n : {1, 2, 3}) EXPECT_TRUE(fs::exists(dir / ("model_n" + std::to_string(n) + ".txt")));
}

TEST(Pipeline, DivergenceIsReportedWithoutAbortingSweep) {
  const fs::path dir = scratch("diverge");
  RunConfig c = tiny(dir);
  std::ostringstream log;
  ASSERT_EQ(cmd_gen_data(c, log), 0);
  // A poisoned cloud makes every count fail; the sweep still visits each.
  auto [train_set, test_set] = read_dataset(c.data_path());
  train_set.entries[0].cloud[0].x() = std::numeric_limits<double>::quiet_NaN();
  write_dataset(c.data_path(), train_set, test_set);
  EXPECT_EQ(cmd_train(c, log), 1);
  EXPECT_EQ(read_file(dir / "sweep.csv"), "components,test_nll,collapse_fraction\n1,nan,nan\n2,nan,nan\n");
}

TEST(Pipeline, TrainIsReproducibleExceptTimings) {
  const fs::path dir = scratch("train_repeat");
  RunConfig a = tiny(dir / "a"), b = tiny(dir / "b");
  std::ostringstream log;
  ASSERT_EQ(cmd_gen_data(a, log), 0);
  b.data_dir = a.data_path();
  ASSERT_EQ(cmd_train(a, log), 0);
  ASSERT_EQ(cmd_train(b, log), 0);
  auto sa = snapshot(a.out), sb = snapshot(b.out);
  std::erase_if(sa, [](const auto& kv) { return kv.first.find("timing_") == 0 || kv.first.find("data") == 0; });
  std::erase_if(sb, [](const auto& kv) { return kv.first.find("timing_") == 0; });
  EXPECT_EQ(sa, sb);
}

TEST(Pipeline, BenchSamplesDependOnlyOnSeed) {
  const MdnParams p = linear_model();
  const auto a = random_configs(p, 100, 5), b = random_configs(p, 100, 5), c = random_configs(p, 100, 6);
  ASSERT_EQ(a.size(), 100u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    EXPECT_TRUE(((a[i].array() >= 0.0) && (a[i].array() <= 0.03)).all());
  }
  EXPECT_NE(a[0], c[0]);
  const LatencyStats s = time_forward(p, a);
  EXPECT_GT(s.mean_ms, 0.0);
  EXPECT_LE(s.median_ms, s.p99_ms);
  EXPECT_THROW(time_forward(p, {}), InvalidInput);
}

TEST(Pipeline, BenchWritesReport) {
  const fs::path dir = scratch("bench");
  RunConfig c = tiny(dir);
  c.model = dir / "m.txt";
  write_file(c.model, save_params(linear_model()));
  std::ostringstream log;
  ASSERT_EQ(cmd_bench(c, log), 0);
  const std::string csv = read_file(dir / "bench.csv");
  EXPECT_EQ(csv.rfind("count,mean_ms,median_ms,p99_ms\n50,", 0), 0u);
}

class PlanningPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = scratch(::testing::UnitTest::GetInstance()->current_test_info()->name());
    c = tiny(dir);
    c.model = dir / "m.txt";
    write_file(c.model, save_params(linear_model()));
    // Wall over workspace x in [-0.01, 0.01], y <= 0: blocks d1 near 0.015 for d2 <= 0.015.
    write_file(dir / "wall.obj", mesh_to_obj(make_box({-0.01, -0.2, 0.0}, {0.01, 0.0, 0.2})));
    c.scene = dir / "scene.txt";
    c.prm.nodes = 150;
    c.prm.neighbors = 8;
  }
  void scene(const std::string& start, const std::string& goal) {
    write_file(c.scene, "mesh wall.obj\nstart " + start + "\ngoal " + goal + "\n");
  }
  fs::path dir;
  RunConfig c;
};

TEST_F(PlanningPipeline, PlanOptimizeValidateWriteArtifacts) {
  scene("0.004 0.004 0.015 0.015", "0.026 0.004 0.015 0.015");
  std::ostringstream log;
  ASSERT_EQ(cmd_plan(c, log), 0);
  const Trajectory traj = trajectory_from_csv(read_file(c.trajectory_path()));
  ASSERT_GE(traj.size(), 2u);
  const std::string plan = read_file(dir / "plan.txt");
  EXPECT_NE(plan.find("bound="), std::string::npos);

  ASSERT_EQ(cmd_optimize(c, log), 0);
  const Trajectory opt = trajectory_from_csv(read_file(dir / "optimized.csv"));
  ASSERT_EQ(opt.size(), traj.size());
  EXPECT_EQ(opt.waypoints.front(), traj.waypoints.front());
  EXPECT_EQ(opt.waypoints.back(), traj.waypoints.back());
  const std::string olog = read_file(dir / "optimization_log.csv");
  EXPECT_EQ(std::count(olog.begin(), olog.end(), '\n'), 1 + 3);

  ASSERT_EQ(cmd_validate(c, log), 0);
  const std::string v = read_file(dir / "validate.csv");
  EXPECT_EQ(v.rfind("config,bound,mc_estimate,mc_stderr,conservative\n", 0), 0u);
  EXPECT_EQ(std::count(v.begin(), v.end(), '\n'), 1 + 3);
  EXPECT_NE(log.str().find("conservative fraction 1"), std::string::npos);
}

TEST_F(PlanningPipeline, PlanAndOptimizeAreReproducible) {
  scene("0.004 0.004 0.015 0.015", "0.026 0.004 0.015 0.015");
  std::ostringstream log;
  ASSERT_EQ(cmd_plan(c, log), 0);
  ASSERT_EQ(cmd_optimize(c, log), 0);
  const auto first = snapshot(dir);
  ASSERT_EQ(cmd_plan(c, log), 0);
  ASSERT_EQ(cmd_optimize(c, log), 0);
  EXPECT_EQ(first, snapshot(dir));
}

TEST_F(PlanningPipeline, EnclosedGoalSurfacesPathNotFound) {
  // Goal means sit near (0.04, 0.04, 0.1..0.11); enclose that spot.
  write_file(dir / "cage.obj", mesh_to_obj(make_box({0.036, 0.036, 0.09}, {0.044, 0.044, 0.13})));
  write_file(c.scene, "mesh cage.obj\nstart 0.003 0.003 0.015 0.015\ngoal 0.027 0.027 0.015 0.015\n");
  std::ostringstream log;
  try {
    cmd_plan(c, log);
    FAIL() << "expected PathNotFound";
  } catch (const PathNotFound& e) {
    EXPECT_EQ(e.side.rfind("goal", 0), 0u);
  }
}

TEST_F(PlanningPipeline, SceneWithoutEndpointsIsAConfigError) {
  write_file(c.scene, "mesh wall.obj\n");
  std::ostringstream log;
  EXPECT_THROW(cmd_plan(c, log), ConfigError);
}

TEST(Pipeline, MissingInputsAreIoErrors) {
  const fs::path dir = scratch("missing");
  RunConfig c = tiny(dir);
  std::ostringstream log;
  EXPECT_THROW(cmd_train(c, log), Error);
  EXPECT_THROW(cmd_bench(c, log), IoError);
  EXPECT_THROW(load_run_config(dir / "nope.cfg"), IoError);
}
