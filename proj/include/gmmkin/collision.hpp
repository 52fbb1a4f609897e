#pragma once

// Conservative probability-of-collision estimates for a 3D Gaussian mixture
// against a triangle-mesh environment, plus the exact containment test and
// Monte-Carlo estimator used to audit them.
//
// Per component, obstacle points are mapped into the frame where the
// component is standard normal. A convex free region around the origin is
// carved out of those points with half-spaces a^T p <= b, and the union
// bound sum_i w_i sum_j (1 - cdf(b_ij)) bounds the mass outside it.

#include "gmmkin/core.hpp"
#include "gmmkin/gmm.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace gmmkin {

using TriangleIndices = std::array<int, 3>;

/// Rigid transform applied to mesh vertices: p' = R p + t (row-major 3x4).
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Point3 translation = Point3::Zero();

  Point3 apply(const Point3& p) const { return rotation * p + translation; }
};

/// Triangle-mesh obstacles. Inside tests need a closed mesh (every edge shared
/// by exactly two triangles); open meshes only support the bound path.
class EnvironmentMesh {
 public:
  static constexpr double kDefaultMaxEdge = 0.01;  // m

  EnvironmentMesh() { finalize(); }

  EnvironmentMesh(std::vector<Point3> vertices, std::vector<TriangleIndices> triangles,
                  double max_edge = kDefaultMaxEdge)
      : vertices_(std::move(vertices)), triangles_(std::move(triangles)), max_edge_(max_edge) {
    if (!(max_edge_ > 0.0)) throw InvalidInput("densification edge length must be positive");
    for (const auto& v : vertices_)
      if (!all_finite(v)) throw InvalidInput("mesh vertex is not finite");
    for (const auto& t : triangles_)
      for (int i : t)
        if (i < 0 || i >= static_cast<int>(vertices_.size())) throw InvalidInput("triangle index out of range");
    finalize();
  }

  const std::vector<Point3>& vertices() const { return vertices_; }
  const std::vector<TriangleIndices>& triangles() const { return triangles_; }
  /// Vertices plus midpoint-subdivision samples; no triangle edge exceeds max_edge.
  const std::vector<Point3>& densified() const { return densified_; }
  bool watertight() const { return watertight_; }
  bool empty() const { return triangles_.empty() && vertices_.empty(); }
  double max_edge() const { return max_edge_; }
  const Point3& box_min() const { return box_min_; }
  const Point3& box_max() const { return box_max_; }

  /// Disjoint union of two meshes (closed if both are).
  EnvironmentMesh merged(const EnvironmentMesh& other) const {
    std::vector<Point3> v = vertices_;
    std::vector<TriangleIndices> t = triangles_;
    const int offset = static_cast<int>(v.size());
    v.insert(v.end(), other.vertices_.begin(), other.vertices_.end());
    for (auto tri : other.triangles_) t.push_back({tri[0] + offset, tri[1] + offset, tri[2] + offset});
    return EnvironmentMesh(std::move(v), std::move(t), std::min(max_edge_, other.max_edge_));
  }

  EnvironmentMesh transformed(const RigidTransform& x) const {
    std::vector<Point3> v;
    v.reserve(vertices_.size());
    for (const auto& p : vertices_) v.push_back(x.apply(p));
    return EnvironmentMesh(std::move(v), triangles_, max_edge_);
  }

 private:
  void finalize() {
    std::map<std::pair<int, int>, int> edges;
    for (const auto& t : triangles_)
      for (int k = 0; k < 3; ++k) {
        const int a = t[k], b = t[(k + 1) % 3];
        ++edges[{std::min(a, b), std::max(a, b)}];
      }
    watertight_ = std::all_of(edges.begin(), edges.end(), [](const auto& e) { return e.second == 2; });

    box_min_ = Point3::Constant(std::numeric_limits<double>::infinity());
    box_max_ = -box_min_;
    for (const auto& v : vertices_) {
      box_min_ = box_min_.cwiseMin(v);
      box_max_ = box_max_.cwiseMax(v);
    }
    densify();
  }

  void densify() {
    densified_.clear();
    std::map<std::array<double, 3>, std::size_t> seen;
    auto add = [&](const Point3& p) {
      if (seen.emplace(std::array<double, 3>{p.x(), p.y(), p.z()}, densified_.size()).second) densified_.push_back(p);
    };
    for (const auto& v : vertices_) add(v);
    struct Tri {
      Point3 a, b, c;
    };
    std::vector<Tri> stack;
    for (const auto& t : triangles_) {
      stack.push_back({vertices_[t[0]], vertices_[t[1]], vertices_[t[2]]});
      while (!stack.empty()) {
        const Tri tri = stack.back();
        stack.pop_back();
        const double longest =
            std::max({(tri.a - tri.b).norm(), (tri.b - tri.c).norm(), (tri.c - tri.a).norm()});
        if (longest <= max_edge_) continue;
        // a + b is commutative in IEEE arithmetic, so neighbours agree on shared midpoints.
        const Point3 ab = 0.5 * (tri.a + tri.b), bc = 0.5 * (tri.b + tri.c), ca = 0.5 * (tri.c + tri.a);
        add(ab);
        add(bc);
        add(ca);
        stack.push_back({ab, bc, ca});
        stack.push_back({tri.c, ca, bc});
        stack.push_back({tri.b, bc, ab});
        stack.push_back({tri.a, ab, ca});
      }
    }
  }

  std::vector<Point3> vertices_;
  std::vector<TriangleIndices> triangles_;
  double max_edge_ = kDefaultMaxEdge;
  std::vector<Point3> densified_;
  bool watertight_ = true;
  Point3 box_min_, box_max_;
};

// ---------------------------------------------------------------------------
// Mesh construction helpers

/// Closed axis-aligned box mesh with outward-facing triangles.
inline EnvironmentMesh make_box(const Point3& lo, const Point3& hi, double max_edge = EnvironmentMesh::kDefaultMaxEdge) {
  std::vector<Point3> v;
  for (int k = 0; k < 8; ++k)
    v.emplace_back((k & 1) ? hi.x() : lo.x(), (k & 2) ? hi.y() : lo.y(), (k & 4) ? hi.z() : lo.z());
  std::vector<TriangleIndices> t = {
      {0, 2, 1}, {1, 2, 3},  // z = lo
      {4, 5, 6}, {5, 7, 6},  // z = hi
      {0, 1, 4}, {1, 5, 4},  // y = lo
      {2, 6, 3}, {3, 6, 7},  // y = hi
      {0, 4, 2}, {2, 4, 6},  // x = lo
      {1, 3, 5}, {3, 7, 5},  // x = hi
  };
  return EnvironmentMesh(std::move(v), std::move(t), max_edge);
}

// ---------------------------------------------------------------------------
// OBJ subset and scene files

inline EnvironmentMesh mesh_from_obj(std::string_view text, double max_edge = EnvironmentMesh::kDefaultMaxEdge) {
  std::vector<Point3> v;
  std::vector<TriangleIndices> f;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = trim(text.substr(pos, end - pos));
    const std::size_t at = pos;
    pos = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const auto tok = split(line);
    if (tok[0] == "v") {
      if (tok.size() != 4) throw ParseError("OBJ vertex needs three coordinates", at);
      v.emplace_back(TokenReader::parse_real(tok[1], at, "x"), TokenReader::parse_real(tok[2], at, "y"),
                     TokenReader::parse_real(tok[3], at, "z"));
    } else if (tok[0] == "f") {
      if (tok.size() != 4) throw ParseError("OBJ face must be a triangle", at);
      TriangleIndices tri{};
      for (int k = 0; k < 3; ++k) {
        int idx = 0;
        auto [p, ec] = std::from_chars(tok[k + 1].data(), tok[k + 1].data() + tok[k + 1].size(), idx);
        if (ec != std::errc() || p != tok[k + 1].data() + tok[k + 1].size() || idx < 1)
          throw ParseError("OBJ face index must be a positive integer", at);
        tri[k] = idx - 1;
      }
      f.push_back(tri);
    } else {
      throw ParseError("unsupported OBJ directive '" + std::string(tok[0]) + "'", at);
    }
  }
  for (const auto& t : f)
    for (int i : t)
      if (i >= static_cast<int>(v.size())) throw ParseError("OBJ face index out of range", text.size());
  return EnvironmentMesh(std::move(v), std::move(f), max_edge);
}

inline std::string mesh_to_obj(const EnvironmentMesh& mesh) {
  std::string s;
  for (const auto& p : mesh.vertices())
    s += "v " + format_real(p.x()) + " " + format_real(p.y()) + " " + format_real(p.z()) + "\n";
  for (const auto& t : mesh.triangles())
    s += "f " + std::to_string(t[0] + 1) + " " + std::to_string(t[1] + 1) + " " + std::to_string(t[2] + 1) + "\n";
  return s;
}

/// Environment plus planning query read from a scene file:
///   mesh <path> [r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3]
///   start <d1> <d2> <d3> <d4>
///   goal <d1> <d2> <d3> <d4>
/// Mesh paths are relative to the scene file.
struct Scene {
  EnvironmentMesh env;
  std::optional<TendonConfig> start;
  std::optional<TendonConfig> goal;
};

inline Scene parse_scene(std::string_view text, const std::filesystem::path& base_dir,
                         double max_edge = EnvironmentMesh::kDefaultMaxEdge) {
  Scene scene;
  scene.env = EnvironmentMesh({}, {}, max_edge);
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = trim(text.substr(pos, end - pos));
    const std::size_t at = pos;
    pos = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const auto tok = split(line);
    if (tok[0] == "mesh") {
      if (tok.size() != 2 && tok.size() != 14) throw ParseError("mesh line needs a path and optional 3x4 transform", at);
      std::filesystem::path path{std::string(tok[1])};
      if (path.is_relative()) path = base_dir / path;
      std::ifstream in(path, std::ios::binary);
      if (!in) throw IoError("cannot open mesh " + path.string());
      std::ostringstream ss;
      ss << in.rdbuf();
      EnvironmentMesh mesh = mesh_from_obj(ss.str(), max_edge);
      if (tok.size() == 14) {
        RigidTransform x;
        for (int r = 0; r < 3; ++r) {
          for (int c = 0; c < 3; ++c) x.rotation(r, c) = TokenReader::parse_real(tok[2 + 4 * r + c], at, "rotation");
          x.translation[r] = TokenReader::parse_real(tok[2 + 4 * r + 3], at, "translation");
        }
        mesh = mesh.transformed(x);
      }
      scene.env = scene.env.merged(mesh);
    } else if (tok[0] == "start" || tok[0] == "goal") {
      if (tok.size() != 5) throw ParseError("start/goal need four displacements", at);
      TendonConfig d(4);
      for (int j = 0; j < 4; ++j) d[j] = TokenReader::parse_real(tok[j + 1], at, "displacement");
      (tok[0] == "start" ? scene.start : scene.goal) = d;
    } else {
      throw ParseError("unknown scene directive '" + std::string(tok[0]) + "'", at);
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Geometry

/// Closest point on triangle abc to p.
inline Point3 closest_point_on_triangle(const Point3& p, const Point3& a, const Point3& b, const Point3& c) {
  const Point3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Point3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
  const Point3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

namespace detail {

enum class RayHit { miss, hit, degenerate };

/// Moller-Trumbore, flagging rays that graze an edge, a vertex, or a
/// coplanar triangle.
inline RayHit ray_triangle(const Point3& origin, const Point3& dir, const Point3& a, const Point3& b, const Point3& c) {
  constexpr double kEdgeTol = 1e-10;
  const Point3 e1 = b - a, e2 = c - a;
  const Point3 h = dir.cross(e2);
  const double det = e1.dot(h);
  const double scale = e1.norm() * e2.norm();
  if (std::abs(det) <= 1e-14 * scale) {
    const Point3 n = e1.cross(e2);
    const double nn = n.norm();
    if (nn == 0.0) return RayHit::miss;  // zero-area triangle
    return std::abs(n.dot(origin - a)) <= 1e-12 * nn ? RayHit::degenerate : RayHit::miss;
  }
  const double inv = 1.0 / det;
  const Point3 s = origin - a;
  const double u = inv * s.dot(h);
  const Point3 q = s.cross(e1);
  const double v = inv * dir.dot(q);
  const double t = inv * e2.dot(q);
  if (u < -kEdgeTol || v < -kEdgeTol || u + v > 1.0 + kEdgeTol || t < -kEdgeTol) return RayHit::miss;
  if (u < kEdgeTol || v < kEdgeTol || u + v > 1.0 - kEdgeTol || t < kEdgeTol) return RayHit::degenerate;
  return RayHit::hit;
}

/// Parity of ray crossings along +x; degenerate rays are retried along a
/// fixed sequence of slightly tilted directions.
inline bool inside_by_parity(const EnvironmentMesh& env, const Point3& p) {
  constexpr int kAttempts = 16;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Point3 dir = Point3::UnitX();
    if (attempt > 0) {
      const double k = static_cast<double>(attempt);
      dir = Point3(1.0, 0.0137 * std::sin(1.7 * k + 0.3), 0.0191 * std::cos(2.3 * k + 0.1)).normalized();
    }
    bool degenerate = false;
    int crossings = 0;
    for (const auto& t : env.triangles()) {
      const auto r = ray_triangle(p, dir, env.vertices()[t[0]], env.vertices()[t[1]], env.vertices()[t[2]]);
      if (r == RayHit::degenerate) {
        degenerate = true;
        break;
      }
      crossings += r == RayHit::hit ? 1 : 0;
    }
    if (!degenerate) return crossings % 2 == 1;
  }
  throw NumericalError("containment ray stayed degenerate after all retries");
}

}  // namespace detail

/// Distances at or below this count as surface contact.
inline constexpr double kSurfaceTolerance = 1e-12;

/// True iff p is inside the closed mesh or within `clearance` of its surface.
/// Surface contact counts as collision.
inline bool point_in_collision(const EnvironmentMesh& env, const Point3& p, double clearance) {
  if (!env.watertight()) throw UnsupportedOperation("inside tests need a closed (watertight) mesh");
  if (env.triangles().empty()) return false;
  const double reach = clearance + kSurfaceTolerance;
  if ((p.array() < env.box_min().array() - reach).any() || (p.array() > env.box_max().array() + reach).any())
    return false;
  const auto& v = env.vertices();
  for (const auto& t : env.triangles()) {
    const Point3 q = closest_point_on_triangle(p, v[t[0]], v[t[1]], v[t[2]]);
    if ((q - p).squaredNorm() <= reach * reach) return true;
  }
  return detail::inside_by_parity(env, p);
}

// ---------------------------------------------------------------------------
// Whitening and carving

/// Densified obstacle points in the frame where `component` is standard normal.
inline std::vector<Point3> transform_environment(const EnvironmentMesh& env, const GaussianComponent& component) {
  const Mat3 f = component.u.factor();
  std::vector<Point3> out;
  out.reserve(env.densified().size());
  for (const auto& v : env.densified()) out.push_back(f.triangularView<Eigen::Upper>() * (v - component.mean));
  return out;
}

struct HalfSpace {
  Point3 a;  // unit normal
  double b;  // offset, >= 0
};

/// Free set {p : a_j^T p <= b_j for all j} in a whitened frame.
struct ConvexRegion {
  std::vector<HalfSpace> constraints;
  /// An obstacle point sits on the origin; the region degenerates to b = 0.
  bool mean_in_contact = false;

  bool contains(const Point3& p) const {
    return std::all_of(constraints.begin(), constraints.end(),
                       [&](const HalfSpace& h) { return h.a.dot(p) <= h.b; });
  }
};

/// Greedy carving: repeatedly take the uneliminated point nearest the origin
/// (lowest index on ties), add the half-space tangent to the sphere through
/// it, and eliminate every point q with a^T q >= b.
inline ConvexRegion carve_convex_region(std::span<const Point3> points) {
  constexpr double kContact = 1e-12;
  ConvexRegion region;
  if (points.empty()) return region;

  // Scanning in (distance, index) order visits exactly the points the greedy
  // loop would pick, since everything before the cursor is already eliminated.
  std::vector<std::pair<double, std::size_t>> order;
  order.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) order.emplace_back(points[i].squaredNorm(), i);
  std::sort(order.begin(), order.end());

  const double nearest = std::sqrt(order.front().first);
  if (nearest < kContact) {
    const Point3& p = points[order.front().second];
    region.constraints.push_back({nearest > 0.0 ? Point3(p / nearest) : Point3(Point3::UnitX()), 0.0});
    region.mean_in_contact = true;
    return region;
  }

  for (const auto& [sq, idx] : order) {
    const Point3& q = points[idx];
    bool eliminated = false;
    for (const auto& h : region.constraints)
      if (h.a.dot(q) >= h.b) {
        eliminated = true;
        break;
      }
    if (eliminated) continue;
    const Point3 a = q / std::sqrt(sq);
    // b = a^T q as evaluated (not |q|), so q lies exactly on its own plane.
    region.constraints.push_back({a, a.dot(q)});
  }
  return region;
}

struct CollisionBound {
  double bound = 0.0;      // clamped to [0, 1]
  double unclamped = 0.0;  // sum of contributions
  std::vector<double> contributions;
  std::vector<std::size_t> constraint_counts;
  /// Some component mean is inside or touching an obstacle.
  bool mean_in_collision = false;
};

/// Union bound on the probability that a draw from `g` leaves the carved free
/// regions. A component whose mean is already in collision (closed meshes
/// only) contributes its whole weight.
inline CollisionBound config_collision_bound(const Gmm3& g, const EnvironmentMesh& env) {
  CollisionBound out;
  for (const auto& c : g) {
    double contribution = 0.0;
    std::size_t count = 0;
    if (env.watertight() && point_in_collision(env, c.mean, 0.0)) {
      contribution = c.weight;
      out.mean_in_collision = true;
    } else {
      const auto points = transform_environment(env, c);
      const ConvexRegion region = carve_convex_region(points);
      double tail = 0.0;
      for (const auto& h : region.constraints) tail += normal_sf(h.b);
      contribution = c.weight * tail;
      count = region.constraints.size();
      out.mean_in_collision = out.mean_in_collision || region.mean_in_contact;
    }
    out.contributions.push_back(contribution);
    out.constraint_counts.push_back(count);
    out.unclamped += contribution;
  }
  out.bound = std::clamp(out.unclamped, 0.0, 1.0);
  return out;
}

/// 1 - prod_k (1 - p_k): probability that some state collides, from per-state bounds.
inline double trajectory_collision_bound(std::span<const double> bounds) {
  double survive = 1.0;
  for (double p : bounds) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("per-state bounds must lie in [0, 1]");
    survive *= 1.0 - p;
  }
  return 1.0 - survive;
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double standard_error = 0.0;
};

/// Fraction of mixture draws that land in collision, with its standard error.
inline MonteCarloEstimate mc_collision_estimate(const Gmm3& g, const EnvironmentMesh& env, std::size_t samples,
                                                std::uint64_t seed) {
  if (samples < 1000) throw InvalidInput("Monte-Carlo estimate needs at least 1000 samples");
  if (!env.watertight()) throw UnsupportedOperation("inside tests need a closed (watertight) mesh");
  const PointCloud draws = gmm_sample(g, samples, seed);
  std::size_t hits = 0;
  for (const auto& p : draws) hits += point_in_collision(env, p, 0.0) ? 1 : 0;
  MonteCarloEstimate out;
  const double n = static_cast<double>(samples);
  out.estimate = static_cast<double>(hits) / n;
  out.standard_error = std::sqrt(out.estimate * (1.0 - out.estimate) / n);
  return out;
}

}  // namespace gmmkin
