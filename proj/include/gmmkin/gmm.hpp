#pragma once

#include "gmmkin/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace gmmkin {

/// Unconstrained parameterization of an upper-triangular Cholesky factor of
/// a 3x3 precision matrix. Diagonal entries are log-scale; the strict upper
/// entries are used as they are.
struct UMatrix {
  double u11 = 0, u22 = 0, u33 = 0;
  double u12 = 0, u13 = 0, u23 = 0;

  static constexpr int kSize = 6;

  bool finite() const {
    return std::isfinite(u11) && std::isfinite(u22) && std::isfinite(u33) && std::isfinite(u12) &&
           std::isfinite(u13) && std::isfinite(u23);
  }

  /// The factor with exponentiated diagonal (zero below the diagonal).
  Mat3 factor() const {
    Mat3 f;
    f << std::exp(u11), u12, u13,  //
        0.0, std::exp(u22), u23,   //
        0.0, 0.0, std::exp(u33);
    return f;
  }

  // Flat order u11 u22 u33 u12 u13 u23, matching the text format and the
  // MDN output layout.
  double operator[](int i) const { return this->*kOrder[i]; }
  double& operator[](int i) { return this->*kOrder[i]; }

  static constexpr double UMatrix::*kOrder[kSize] = {&UMatrix::u11, &UMatrix::u22, &UMatrix::u33,
                                                      &UMatrix::u12, &UMatrix::u13, &UMatrix::u23};

  bool operator==(const UMatrix&) const = default;
};

struct GaussianComponent {
  double weight = 1.0;
  Point3 mean = Point3::Zero();
  UMatrix u;
};

/// A 3D Gaussian mixture. Construction validates the weights: sums within
/// 1e-9 of one are kept as given (so text round trips are exact), sums
/// within 1e-6 are renormalized, anything else is rejected.
class Gmm3 {
 public:
  static constexpr double kRenormTolerance = 1e-6;
  static constexpr double kKeepTolerance = 1e-9;

  Gmm3() = default;

  explicit Gmm3(std::vector<GaussianComponent> components) : components_(std::move(components)) {
    if (components_.empty()) throw InvalidInput("Gmm3 needs at least one component");
    double total = 0.0;
    for (const auto& c : components_) {
      if (!std::isfinite(c.weight) || c.weight < 0.0) throw InvalidInput("Gmm3 weight must be finite and >= 0");
      if (!all_finite(c.mean)) throw InvalidInput("Gmm3 mean must be finite");
      if (!c.u.finite()) throw InvalidInput("Gmm3 U entries must be finite");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > kRenormTolerance)
      throw InvalidInput("Gmm3 weights sum to " + format_real(total) + ", expected 1");
    if (std::abs(total - 1.0) > kKeepTolerance)
      for (auto& c : components_) c.weight /= total;
  }

  std::size_t size() const { return components_.size(); }
  const GaussianComponent& operator[](std::size_t i) const { return components_[i]; }
  const std::vector<GaussianComponent>& components() const { return components_; }

  auto begin() const { return components_.begin(); }
  auto end() const { return components_.end(); }

  bool operator==(const Gmm3& o) const {
    if (size() != o.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = components_[i];
      const auto& b = o.components_[i];
      if (a.weight != b.weight || a.mean != b.mean || !(a.u == b.u)) return false;
    }
    return true;
  }

 private:
  std::vector<GaussianComponent> components_;
};

inline void require_finite(const UMatrix& u) {
  if (!u.finite()) throw InvalidInput("UMatrix has non-finite entries");
}

/// Precision matrix U^T U of the exponentiated-diagonal factor.
inline Mat3 reconstruct_precision(const UMatrix& u) {
  require_finite(u);
  const Mat3 f = u.factor();
  return f.transpose() * f;
}

/// log |precision|^(1/2), which is the sum of the log-scale diagonal.
inline double log_sqrt_det_precision(const UMatrix& u) {
  require_finite(u);
  return u.u11 + u.u22 + u.u33;
}

namespace detail {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;  // log(2*pi)

/// Per-component quantities that do not depend on the evaluation point.
struct PreparedGmm {
  explicit PreparedGmm(const Gmm3& g) {
    if (g.size() == 0) throw InvalidInput("empty Gmm3");
    factors.reserve(g.size());
    for (const auto& c : g) {
      factors.push_back(c.u.factor());
      means.push_back(c.mean);
      log_norm.push_back(std::log(c.weight) + (c.u.u11 + c.u.u22 + c.u.u33));
    }
    terms.resize(g.size());
  }

  /// log sum_i w_i |P_i|^(1/2) exp(-0.5 |U_i (x - mu_i)|^2), max-shifted.
  double log_sum(const Point3& x) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < factors.size(); ++i) {
      const Point3 r = factors[i].triangularView<Eigen::Upper>() * (x - means[i]);
      terms[i] = log_norm[i] - 0.5 * r.squaredNorm();
      best = std::max(best, terms[i]);
    }
    if (!std::isfinite(best)) return best;
    double s = 0.0;
    for (double t : terms) s += std::exp(t - best);
    return best + std::log(s);
  }

  std::vector<Mat3> factors;
  std::vector<Point3> means;
  std::vector<double> log_norm;
  std::vector<double> terms;
};

}  // namespace detail

/// Mixture density at x.
inline double gmm_pdf(const Gmm3& g, const Point3& x) {
  detail::PreparedGmm prep(g);
  return std::exp(prep.log_sum(x) - 1.5 * detail::kLogTwoPi);
}

/// Mean over points of -log sum_i w_i exp(log|P_i|^(1/2) - 0.5 |U_i(x - mu_i)|^2),
/// i.e. the negative log density without the constant (3/2) log(2 pi).
inline double reduced_nll(const Gmm3& g, std::span<const Point3> points) {
  if (points.empty()) throw InvalidInput("reduced_nll needs a non-empty point cloud");
  detail::PreparedGmm prep(g);
  double total = 0.0;
  for (const auto& x : points) total -= prep.log_sum(x);
  return total / static_cast<double>(points.size());
}

/// Draws `count` points. Component i is picked with probability w_i and the
/// point is mu_i + U_i^{-1} z for standard normal z.
inline PointCloud gmm_sample(const Gmm3& g, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw InvalidInput("gmm_sample needs count >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> cumulative(g.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) cumulative[i] = (acc += g[i].weight);

  std::vector<Mat3> factors;
  factors.reserve(g.size());
  for (const auto& c : g) factors.push_back(c.u.factor());

  PointCloud out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double r = unif(rng) * acc;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const std::size_t i = std::min<std::size_t>(it - cumulative.begin(), g.size() - 1);
    Point3 z;
    z.x() = normal(rng);
    z.y() = normal(rng);
    z.z() = normal(rng);
    out.push_back(g[i].mean + factors[i].triangularView<Eigen::Upper>().solve(z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text serialization: `n=<count>` then `w mx my mz u11 u22 u33 u12 u13 u23`
// per component.

inline std::string to_text(const Gmm3& g) {
  std::string s = "n=" + std::to_string(g.size()) + "\n";
  for (const auto& c : g) {
    s += format_real(c.weight);
    for (int k = 0; k < 3; ++k) s += " " + format_real(c.mean[k]);
    for (int k = 0; k < UMatrix::kSize; ++k) s += " " + format_real(c.u[k]);
    s += "\n";
  }
  return s;
}

inline Gmm3 gmm_from_text(std::string_view text) {
  TokenReader in(text);
  const std::size_t header_at = (in.at_end(), in.offset());
  const std::string_view header = in.next("header n=<count>");
  if (header.substr(0, 2) != "n=") throw ParseError("expected 'n=<count>' header", header_at);
  long long n = 0;
  auto [p, ec] = std::from_chars(header.data() + 2, header.data() + header.size(), n);
  if (ec != std::errc() || p != header.data() + header.size() || n < 1)
    throw ParseError("bad component count in header", header_at);
  std::vector<GaussianComponent> comps(static_cast<std::size_t>(n));
  for (auto& c : comps) {
    c.weight = in.real("weight");
    for (int k = 0; k < 3; ++k) c.mean[k] = in.real("mean");
    for (int k = 0; k < UMatrix::kSize; ++k) c.u[k] = in.real("U entry");
  }
  if (!in.at_end()) throw ParseError("trailing data after last component", in.offset());
  return Gmm3(std::move(comps));
}

}  // namespace gmmkin
