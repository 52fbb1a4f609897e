#pragma once

// Nominal planning with a probabilistic roadmap whose collision test checks
// only the mixture means, followed by Bayesian-optimization refinement of one
// intermediate waypoint at a time against the trajectory collision bound.

#include "gmmkin/collision.hpp"
#include "gmmkin/core.hpp"
#include "gmmkin/gmm.hpp"
#include "gmmkin/mdn.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <limits>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace gmmkin {

struct Trajectory {
  std::vector<TendonConfig> waypoints;
  bool fixed_endpoints = true;

  std::size_t size() const { return waypoints.size(); }
};

struct RoadmapEdge {
  std::size_t a = 0, b = 0;  // a < b
  double length = 0.0;
};

struct Roadmap {
  std::vector<TendonConfig> nodes;
  std::vector<RoadmapEdge> edges;

  std::vector<std::vector<std::pair<std::size_t, double>>> adjacency() const {
    std::vector<std::vector<std::pair<std::size_t, double>>> adj(nodes.size());
    for (const auto& e : edges) {
      adj[e.a].emplace_back(e.b, e.length);
      adj[e.b].emplace_back(e.a, e.length);
    }
    return adj;
  }
};

/// True (in collision) iff some component mean touches or lies inside an obstacle.
inline bool mean_collision_check(const Gmm3& g, const EnvironmentMesh& env) {
  return std::any_of(g.begin(), g.end(), [&](const GaussianComponent& c) { return point_in_collision(env, c.mean, 0.0); });
}

/// Configuration-space validity through the learned model.
class ConfigChecker {
 public:
  ConfigChecker(const EnvironmentMesh& env, const MdnParams& model) : env_(env), model_(model) {
    validate(model_);
    if (!env_.watertight()) throw UnsupportedOperation("planning needs a closed (watertight) environment mesh");
  }

  bool in_collision(const TendonConfig& d) const { return mean_collision_check(mdn_forward(model_, d), env_); }

  /// Every interpolated configuration at spacing <= step is collision-free.
  /// Endpoints are assumed already checked.
  bool edge_free(const TendonConfig& a, const TendonConfig& b, double step) const {
    const double len = (b - a).norm();
    const auto segments = static_cast<std::size_t>(std::ceil(len / step));
    for (std::size_t k = 1; k < segments; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(segments);
      if (in_collision(a + t * (b - a))) return false;
    }
    return true;
  }

  const EnvironmentMesh& env() const { return env_; }
  const MdnParams& model() const { return model_; }
  Eigen::VectorXd limits_min() const { return model_.limits_min; }
  Eigen::VectorXd limits_max() const { return model_.limits_max; }

 private:
  const EnvironmentMesh& env_;
  const MdnParams& model_;
};

struct PrmParams {
  std::size_t nodes = 500;
  std::size_t neighbors = 10;
  double edge_step = 0.002;  // m in configuration space
  std::uint64_t seed = 0;
};

namespace detail {

/// Indices of `pool` sorted by distance to `q` (ties: lower index first).
inline std::vector<std::size_t> by_distance(const std::vector<TendonConfig>& pool, const TendonConfig& q) {
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) d.emplace_back((pool[i] - q).squaredNorm(), i);
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> out;
  out.reserve(d.size());
  for (const auto& [dist, i] : d) out.push_back(i);
  return out;
}

}  // namespace detail

/// Samples configurations uniformly within the model's limits, keeps the
/// collision-free ones, and links each to its k nearest neighbours when the
/// straight edge between them is free.
inline Roadmap prm_build(const ConfigChecker& checker, const PrmParams& params) {
  if (params.nodes < 2) throw ConfigError("roadmap needs at least two samples");
  if (!(params.edge_step > 0.0)) throw ConfigError("edge step must be positive");
  std::mt19937_64 rng(params.seed);
  const Eigen::VectorXd lo = checker.limits_min(), hi = checker.limits_max();
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Roadmap map;
  for (std::size_t k = 0; k < params.nodes; ++k) {
    TendonConfig d(lo.size());
    for (Eigen::Index j = 0; j < lo.size(); ++j) d[j] = lo[j] + (hi[j] - lo[j]) * unif(rng);
    if (!checker.in_collision(d)) map.nodes.push_back(d);
  }

  std::set<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t i = 0; i < map.nodes.size(); ++i) {
    const auto order = detail::by_distance(map.nodes, map.nodes[i]);
    std::size_t linked = 0;
    for (std::size_t j : order) {
      if (j == i) continue;
      if (linked++ == params.neighbors) break;
      candidates.emplace(std::min(i, j), std::max(i, j));
    }
  }
  for (const auto& [a, b] : candidates)
    if (checker.edge_free(map.nodes[a], map.nodes[b], params.edge_step))
      map.edges.push_back({a, b, (map.nodes[a] - map.nodes[b]).norm()});
  return map;
}

/// Attaches start and goal to their nearest visible roadmap nodes (and to each
/// other when the direct edge is free) and returns the shortest path.
inline Trajectory prm_query(const Roadmap& map, const ConfigChecker& checker, const TendonConfig& start,
                            const TendonConfig& goal, double edge_step, std::size_t neighbors = 10) {
  if (checker.in_collision(start)) throw PathNotFound("start (start configuration is in collision)");
  if (checker.in_collision(goal)) throw PathNotFound("goal (goal configuration is in collision)");

  const std::size_t n = map.nodes.size();
  const std::size_t s_id = n, g_id = n + 1;
  auto adj = map.adjacency();
  adj.resize(n + 2);
  auto attach = [&](std::size_t id, const TendonConfig& q) {
    std::size_t linked = 0;
    for (std::size_t j : detail::by_distance(map.nodes, q)) {
      if (linked == neighbors) break;
      if (checker.edge_free(q, map.nodes[j], edge_step)) {
        const double len = (q - map.nodes[j]).norm();
        adj[id].emplace_back(j, len);
        adj[j].emplace_back(id, len);
        ++linked;
      }
    }
    return linked;
  };
  const std::size_t start_links = attach(s_id, start);
  const std::size_t goal_links = attach(g_id, goal);
  bool direct = checker.edge_free(start, goal, edge_step);
  if (direct) {
    const double len = (start - goal).norm();
    adj[s_id].emplace_back(g_id, len);
    adj[g_id].emplace_back(s_id, len);
  }
  if (!direct && start_links == 0) throw PathNotFound("start (no visible roadmap node)");
  if (!direct && goal_links == 0) throw PathNotFound("goal (no visible roadmap node)");

  // Dijkstra with (distance, index) ordering for deterministic ties.
  std::vector<double> dist(n + 2, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> prev(n + 2, std::numeric_limits<std::size_t>::max());
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[s_id] = 0.0;
  pq.emplace(0.0, s_id);
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[u]) continue;
    if (u == g_id) break;
    for (const auto& [v, w] : adj[u]) {
      if (d + w < dist[v]) {
        dist[v] = d + w;
        prev[v] = u;
        pq.emplace(dist[v], v);
      }
    }
  }
  if (!std::isfinite(dist[g_id])) throw PathNotFound("start and goal (they lie in different roadmap components)");

  std::vector<std::size_t> ids;
  for (std::size_t v = g_id; v != s_id; v = prev[v]) ids.push_back(v);
  ids.push_back(s_id);
  std::reverse(ids.begin(), ids.end());
  Trajectory traj;
  for (std::size_t id : ids) traj.waypoints.push_back(id == s_id ? start : id == g_id ? goal : map.nodes[id]);
  return traj;
}

// ---------------------------------------------------------------------------
// Trajectory bound

/// Per-state bounds along a trajectory whose edges are discretized into a
/// fixed number of interior states.
class TrajectoryEvaluator {
 public:
  TrajectoryEvaluator(const EnvironmentMesh& env, const MdnParams& model, std::size_t states_per_edge = 10)
      : env_(env), model_(model), states_per_edge_(states_per_edge) {
    validate(model_);
  }

  std::size_t states_per_edge() const { return states_per_edge_; }

  /// Waypoint k sits at index k * (states_per_edge + 1).
  std::vector<TendonConfig> states(const Trajectory& traj) const {
    if (traj.size() < 1) throw InvalidInput("trajectory is empty");
    std::vector<TendonConfig> out;
    for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
      const auto& a = traj.waypoints[k];
      const auto& b = traj.waypoints[k + 1];
      out.push_back(a);
      for (std::size_t s = 1; s <= states_per_edge_; ++s) {
        const double t = static_cast<double>(s) / static_cast<double>(states_per_edge_ + 1);
        out.push_back(a + t * (b - a));
      }
    }
    out.push_back(traj.waypoints.back());
    return out;
  }

  std::vector<double> state_bounds(const Trajectory& traj) const {
    const auto st = states(traj);
    std::vector<double> out;
    out.reserve(st.size());
    for (const auto& g : mdn_forward_batch(model_, st)) out.push_back(config_collision_bound(g, env_).bound);
    return out;
  }

  double bound(const Trajectory& traj) const { return trajectory_collision_bound(state_bounds(traj)); }

 private:
  const EnvironmentMesh& env_;
  const MdnParams& model_;
  std::size_t states_per_edge_;
};

// ---------------------------------------------------------------------------
// Gaussian-process surrogate and probability of improvement

struct SurrogateModel {
  std::vector<TendonConfig> inputs;
  std::vector<double> values;
  double lengthscale = 1.0;
  double signal_variance = 1.0;
  double noise_variance = 1e-6;

  void observe(const TendonConfig& x, double y) {
    inputs.push_back(x);
    values.push_back(y);
  }

  double kernel(const TendonConfig& a, const TendonConfig& b) const {
    return signal_variance * std::exp(-0.5 * (a - b).squaredNorm() / (lengthscale * lengthscale));
  }
};

struct Prediction {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Posterior of a zero-mean-residual GP whose prior mean is the mean of the
/// observed values.
class GpPosterior {
 public:
  explicit GpPosterior(const SurrogateModel& s) : s_(s) {
    const std::size_t n = s.inputs.size();
    if (n == 0) throw InvalidInput("surrogate needs at least one observation");
    prior_mean_ = 0.0;
    for (double v : s.values) prior_mean_ += v;
    prior_mean_ /= static_cast<double>(n);
    Eigen::MatrixXd k(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) k(i, j) = s.kernel(s.inputs[i], s.inputs[j]);
    k.diagonal().array() += s.noise_variance;
    llt_.compute(k);
    if (llt_.info() != Eigen::Success) throw NumericalError("surrogate kernel matrix is not positive definite");
    Eigen::VectorXd resid(n);
    for (std::size_t i = 0; i < n; ++i) resid[i] = s.values[i] - prior_mean_;
    alpha_ = llt_.solve(resid);
  }

  Prediction predict(const TendonConfig& x) const {
    const std::size_t n = s_.inputs.size();
    Eigen::VectorXd ks(n);
    for (std::size_t i = 0; i < n; ++i) ks[i] = s_.kernel(x, s_.inputs[i]);
    const Eigen::VectorXd v = llt_.matrixL().solve(ks);
    const double var = std::max(0.0, s_.kernel(x, x) - v.squaredNorm());
    return {prior_mean_ + ks.dot(alpha_), std::sqrt(var)};
  }

 private:
  const SurrogateModel& s_;
  double prior_mean_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
};

/// Probability that a candidate improves on f_best by at least xi.
inline double probability_of_improvement(const Prediction& p, double f_best, double xi) {
  const double target = f_best - xi;
  if (p.stddev < 1e-12) return p.mean < target ? 1.0 : 0.0;
  return normal_cdf((target - p.mean) / p.stddev);
}

inline std::vector<double> pi_scores(const SurrogateModel& s, std::span<const TendonConfig> candidates, double f_best,
                                     double xi) {
  const GpPosterior gp(s);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(probability_of_improvement(gp.predict(c), f_best, xi));
  return out;
}

/// Index of the candidate with the highest probability of improvement (lowest index on ties).
inline std::size_t pi_acquisition(const SurrogateModel& s, std::span<const TendonConfig> candidates, double f_best,
                                  double xi) {
  if (candidates.empty()) throw InvalidInput("acquisition needs at least one candidate");
  const auto scores = pi_scores(s, candidates, f_best, xi);
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

// ---------------------------------------------------------------------------
// Trajectory optimization

struct OptimizeParams {
  std::size_t iterations = 50;
  std::size_t samples = 20;
  double radius = 0.003;  // m, 10% of the default displacement range
  double xi = 0.01;
  std::uint64_t seed = 0;
  double noise_variance = 1e-6;
};

struct OptimizationLogRow {
  std::size_t iteration = 0;
  long waypoint_index = -1;
  double candidate_bound = 0.0;
  double incumbent_bound = 0.0;
  bool accepted = false;
};

struct OptimizationResult {
  Trajectory trajectory;
  /// Incumbent bound before the first iteration and after every iteration.
  std::vector<double> history;
  std::vector<OptimizationLogRow> log;
};

namespace detail {

/// Share of the trajectory bound attributable to an intermediate waypoint:
/// -sum log(1 - p) over the waypoint and the interior states of its two edges.
inline double waypoint_share(std::span<const double> bounds, std::size_t waypoint, std::size_t per_edge) {
  const std::size_t stride = per_edge + 1;
  const std::size_t lo = (waypoint - 1) * stride + 1, hi = (waypoint + 1) * stride - 1;
  double share = 0.0;
  for (std::size_t k = lo; k <= hi; ++k)
    share += bounds[k] >= 1.0 ? std::numeric_limits<double>::infinity() : -std::log1p(-bounds[k]);
  return share;
}

inline TendonConfig sample_in_ball(const TendonConfig& center, double radius, const Eigen::VectorXd& lo,
                                   const Eigen::VectorXd& hi, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Eigen::Index m = center.size();
  Eigen::VectorXd dir(m);
  double norm = 0.0;
  do {
    for (Eigen::Index j = 0; j < m; ++j) dir[j] = normal(rng);
    norm = dir.norm();
  } while (norm == 0.0);
  const double r = radius * std::pow(unif(rng), 1.0 / static_cast<double>(m));
  return (center + (r / norm) * dir).cwiseMax(lo).cwiseMin(hi);
}

}  // namespace detail

/// Each iteration picks the intermediate waypoint with the largest share of
/// the bound, samples candidates in a ball around it, evaluates the one with
/// the highest probability of improvement, and keeps it iff the trajectory
/// bound strictly drops.
inline OptimizationResult optimize_trajectory(const Trajectory& traj, const TrajectoryEvaluator& eval,
                                              const Eigen::VectorXd& limits_min, const Eigen::VectorXd& limits_max,
                                              const OptimizeParams& params) {
  if (traj.size() < 2) throw InvalidInput("trajectory needs at least two waypoints");
  for (const auto& w : traj.waypoints)
    if (w.size() != limits_min.size() || (w.array() < limits_min.array()).any() ||
        (w.array() > limits_max.array()).any())
      throw InvalidInput("trajectory waypoint outside the displacement limits");
  if (params.samples < 1) throw ConfigError("optimizer needs at least one sample per iteration");

  OptimizationResult result;
  result.trajectory = traj;
  std::vector<double> bounds = eval.state_bounds(traj);
  double incumbent = trajectory_collision_bound(bounds);
  result.history.push_back(incumbent);

  std::mt19937_64 rng(params.seed);
  std::map<std::size_t, SurrogateModel> surrogates;
  const std::size_t per_edge = eval.states_per_edge();

  for (std::size_t it = 0; it < params.iterations; ++it) {
    OptimizationLogRow row;
    row.iteration = it + 1;
    row.incumbent_bound = incumbent;
    if (result.trajectory.size() < 3) {
      row.candidate_bound = incumbent;
      result.log.push_back(row);
      result.history.push_back(incumbent);
      continue;
    }

    std::size_t chosen = 1;
    double best_share = -1.0;
    for (std::size_t k = 1; k + 1 < result.trajectory.size(); ++k) {
      const double share = detail::waypoint_share(bounds, k, per_edge);
      if (share > best_share) {
        best_share = share;
        chosen = k;
      }
    }
    row.waypoint_index = static_cast<long>(chosen);

    const TendonConfig current = result.trajectory.waypoints[chosen];
    auto [slot, fresh] = surrogates.try_emplace(chosen);
    SurrogateModel& surrogate = slot->second;
    if (fresh) {
      surrogate.lengthscale = params.radius / 2.0;
      surrogate.noise_variance = params.noise_variance;
      surrogate.observe(current, incumbent);
    }
    {
      double mean = 0.0, var = 0.0;
      for (double v : surrogate.values) mean += v;
      mean /= static_cast<double>(surrogate.values.size());
      for (double v : surrogate.values) var += (v - mean) * (v - mean);
      var /= static_cast<double>(surrogate.values.size());
      surrogate.signal_variance = std::max(var, params.xi * params.xi);
    }

    std::vector<TendonConfig> candidates;
    candidates.reserve(params.samples);
    for (std::size_t k = 0; k < params.samples; ++k)
      candidates.push_back(detail::sample_in_ball(current, params.radius, limits_min, limits_max, rng));
    const std::size_t pick = pi_acquisition(surrogate, candidates, incumbent, params.xi);

    Trajectory trial = result.trajectory;
    trial.waypoints[chosen] = candidates[pick];
    const std::vector<double> trial_bounds = eval.state_bounds(trial);
    const double trial_bound = trajectory_collision_bound(trial_bounds);
    surrogate.observe(candidates[pick], trial_bound);
    row.candidate_bound = trial_bound;

    if (trial_bound < incumbent) {
      row.accepted = true;
      result.trajectory = std::move(trial);
      bounds = trial_bounds;
      incumbent = trial_bound;
      // Observations for other waypoints were made against a trajectory that no longer exists.
      for (auto it2 = surrogates.begin(); it2 != surrogates.end();)
        it2 = it2->first == chosen ? std::next(it2) : surrogates.erase(it2);
    }
    row.incumbent_bound = incumbent;
    result.log.push_back(row);
    result.history.push_back(incumbent);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Files

inline std::string trajectory_to_csv(const Trajectory& traj) {
  std::string s = "d1,d2,d3,d4\n";
  for (const auto& w : traj.waypoints) {
    for (Eigen::Index j = 0; j < w.size(); ++j) s += (j ? "," : "") + format_real(w[j]);
    s += "\n";
  }
  return s;
}

inline Trajectory trajectory_from_csv(std::string_view text) {
  Trajectory traj;
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
      if (line != "d1,d2,d3,d4") throw ParseError("trajectory CSV must start with header d1,d2,d3,d4", at);
      header = false;
      continue;
    }
    const auto cols = split(line, ",");
    if (cols.size() != 4) throw ParseError("trajectory row needs four columns", at);
    TendonConfig d(4);
    for (int j = 0; j < 4; ++j) d[j] = TokenReader::parse_real(cols[j], at, "displacement");
    traj.waypoints.push_back(d);
  }
  if (traj.waypoints.size() < 2) throw ParseError("trajectory needs at least two waypoints", text.size());
  return traj;
}

inline std::string optimization_log_to_csv(const OptimizationResult& r) {
  std::string s = "iteration,waypoint_index,candidate_bound,incumbent_bound,accepted\n";
  for (const auto& row : r.log)
    s += std::to_string(row.iteration) + "," + std::to_string(row.waypoint_index) + "," +
         format_real(row.candidate_bound) + "," + format_real(row.incumbent_bound) + "," +
         (row.accepted ? "1" : "0") + "\n";
  return s;
}

}  // namespace gmmkin
