#pragma once

// Mixture density network: a shared dense trunk feeding three dense heads that
// emit mixture logits, component means, and the unconstrained precision
// factors of a 3D Gaussian mixture. Gradients are derived by hand for this
// fixed topology.

#include "gmmkin/core.hpp"
#include "gmmkin/gmm.hpp"

#include <Eigen/Dense>

#include <array>
#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gmmkin {

enum class Activation { relu, tanh, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct DenseLayer {
  Eigen::MatrixXd weights;  // outputs x inputs
  Eigen::VectorXd bias;
  Activation activation = Activation::identity;

  Eigen::Index inputs() const { return weights.cols(); }
  Eigen::Index outputs() const { return weights.rows(); }
};

enum Head : std::size_t { kWeightHead = 0, kMeanHead = 1, kUHead = 2 };

struct MdnArchitecture {
  int inputs = 4;
  int components = 5;
  std::vector<int> trunk{128, 128};
  std::vector<int> heads{64};
  Activation activation = Activation::relu;
};

struct MdnParams {
  int components = 0;
  Activation activation = Activation::relu;
  // Inputs are mapped from [limits_min, limits_max] to [-1, 1] before the trunk.
  Eigen::VectorXd limits_min;
  Eigen::VectorXd limits_max;
  std::vector<DenseLayer> trunk;
  std::array<std::vector<DenseLayer>, 3> heads;

  int inputs() const { return static_cast<int>(limits_min.size()); }

  static int head_outputs(Head h, int components) {
    switch (h) {
      case kWeightHead: return components;
      case kMeanHead: return 3 * components;
      case kUHead: return UMatrix::kSize * components;
    }
    return 0;
  }

  bool operator==(const MdnParams& o) const {
    auto same = [](const std::vector<DenseLayer>& a, const std::vector<DenseLayer>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].weights.rows() != b[i].weights.rows() || a[i].weights.cols() != b[i].weights.cols()) return false;
        if (a[i].weights != b[i].weights || a[i].bias != b[i].bias || a[i].activation != b[i].activation)
          return false;
      }
      return true;
    };
    return components == o.components && activation == o.activation && limits_min == o.limits_min &&
           limits_max == o.limits_max && same(trunk, o.trunk) && same(heads[0], o.heads[0]) &&
           same(heads[1], o.heads[1]) && same(heads[2], o.heads[2]);
  }
};

/// One configuration with its ground-truth point cloud.
struct Sample {
  std::size_t id = 0;
  TendonConfig config;
  PointCloud cloud;
};

enum class Split { train, test };

struct Dataset {
  std::vector<Sample> entries;
  Split split = Split::train;

  std::size_t size() const { return entries.size(); }
};

// ---------------------------------------------------------------------------
// Parameter bookkeeping

template <class P, class F>
void for_each_layer(P& params, F&& f) {
  for (auto& l : params.trunk) f(l);
  for (auto& head : params.heads)
    for (auto& l : head) f(l);
}

inline std::size_t parameter_count(const MdnParams& p) {
  std::size_t n = 0;
  for_each_layer(p, [&](const DenseLayer& l) { n += l.weights.size() + l.bias.size(); });
  return n;
}

/// Row-major weights then bias, layer by layer (same order as the model file).
inline Eigen::VectorXd flatten(const MdnParams& p) {
  Eigen::VectorXd v(parameter_count(p));
  Eigen::Index k = 0;
  for_each_layer(p, [&](const DenseLayer& l) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) v[k++] = l.weights(r, c);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) v[k++] = l.bias[r];
  });
  return v;
}

inline void unflatten(const Eigen::VectorXd& v, MdnParams& p) {
  if (static_cast<std::size_t>(v.size()) != parameter_count(p))
    throw ConfigError("flat parameter vector has the wrong length");
  Eigen::Index k = 0;
  for_each_layer(p, [&](DenseLayer& l) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = v[k++];
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = v[k++];
  });
}

/// Same layer shapes as `p`, all entries zero.
inline MdnParams zeros_like(const MdnParams& p) {
  MdnParams z = p;
  for_each_layer(z, [](DenseLayer& l) {
    l.weights.setZero();
    l.bias.setZero();
  });
  return z;
}

/// Checks that the layer shapes chain from the inputs to every head's output.
inline void validate(const MdnParams& p) {
  if (p.components < 1) throw ConfigError("MDN needs at least one component");
  if (p.limits_min.size() < 1 || p.limits_min.size() != p.limits_max.size())
    throw ConfigError("MDN input limits are malformed");
  for (Eigen::Index j = 0; j < p.limits_min.size(); ++j)
    if (!(p.limits_max[j] > p.limits_min[j])) throw ConfigError("MDN input limits must satisfy min < max");
  Eigen::Index width = p.limits_min.size();
  for (const auto& l : p.trunk) {
    if (l.inputs() != width || l.bias.size() != l.outputs()) throw ConfigError("MDN trunk layer shape mismatch");
    width = l.outputs();
  }
  for (std::size_t h = 0; h < 3; ++h) {
    Eigen::Index w = width;
    if (p.heads[h].empty()) throw ConfigError("MDN head has no layers");
    for (const auto& l : p.heads[h]) {
      if (l.inputs() != w || l.bias.size() != l.outputs()) throw ConfigError("MDN head layer shape mismatch");
      w = l.outputs();
    }
    if (w != MdnParams::head_outputs(static_cast<Head>(h), p.components))
      throw ConfigError("MDN head output size does not match the component count");
  }
}

/// Glorot-uniform weights, zero biases, and the means-head output bias set to
/// `centroid` for every component.
inline MdnParams mdn_init(const MdnArchitecture& arch, const Eigen::VectorXd& limits_min,
                          const Eigen::VectorXd& limits_max, const Point3& centroid, std::uint64_t seed) {
  if (arch.inputs != limits_min.size()) throw ConfigError("architecture input count does not match limits");
  std::mt19937_64 rng(seed);
  auto make = [&](int in, int out, Activation act) {
    DenseLayer l;
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> unif(-a, a);
    l.weights.resize(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) l.weights(r, c) = unif(rng);
    l.bias = Eigen::VectorXd::Zero(out);
    l.activation = act;
    return l;
  };

  MdnParams p;
  p.components = arch.components;
  p.activation = arch.activation;
  p.limits_min = limits_min;
  p.limits_max = limits_max;
  int width = arch.inputs;
  for (int h : arch.trunk) {
    p.trunk.push_back(make(width, h, arch.activation));
    width = h;
  }
  for (std::size_t h = 0; h < 3; ++h) {
    int w = width;
    for (int hidden : arch.heads) {
      p.heads[h].push_back(make(w, hidden, arch.activation));
      w = hidden;
    }
    p.heads[h].push_back(make(w, MdnParams::head_outputs(static_cast<Head>(h), arch.components), Activation::identity));
  }
  auto& mean_bias = p.heads[kMeanHead].back().bias;
  for (int i = 0; i < arch.components; ++i) mean_bias.segment<3>(3 * i) = centroid;
  validate(p);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

struct LayerCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd pre;
};

inline Eigen::MatrixXd activate(const Eigen::MatrixXd& pre, Activation a) {
  switch (a) {
    case Activation::relu: return pre.cwiseMax(0.0);
    case Activation::tanh: return pre.array().tanh().matrix();
    case Activation::identity: return pre;
  }
  return pre;
}

/// Derivative of the activation evaluated at the pre-activation values.
inline Eigen::MatrixXd activation_slope(const Eigen::MatrixXd& pre, Activation a) {
  switch (a) {
    case Activation::relu: return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::tanh: return (1.0 - pre.array().tanh().square()).matrix();
    case Activation::identity: return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
  }
  return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
}

inline Eigen::MatrixXd forward_stack(const std::vector<DenseLayer>& layers, Eigen::MatrixXd x,
                                     std::vector<LayerCache>* cache) {
  for (const auto& l : layers) {
    Eigen::MatrixXd pre = l.weights * x;
    pre.colwise() += l.bias;
    Eigen::MatrixXd out = activate(pre, l.activation);
    if (cache) cache->push_back({std::move(x), std::move(pre)});
    x = std::move(out);
  }
  return x;
}

/// Accumulates parameter gradients into `grads` and returns d(loss)/d(input).
inline Eigen::MatrixXd backward_stack(const std::vector<DenseLayer>& layers, const std::vector<LayerCache>& cache,
                                      Eigen::MatrixXd grad_out, std::vector<DenseLayer>& grads) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& l = layers[k];
    const Eigen::MatrixXd dpre = grad_out.cwiseProduct(activation_slope(cache[k].pre, l.activation));
    grads[k].weights.noalias() += dpre * cache[k].input.transpose();
    grads[k].bias += dpre.rowwise().sum();
    grad_out = l.weights.transpose() * dpre;
  }
  return grad_out;
}

struct Trace {
  std::vector<LayerCache> trunk;
  std::array<std::vector<LayerCache>, 3> heads;
};

struct HeadOutputs {
  Eigen::MatrixXd logits;  // n x B
  Eigen::MatrixXd means;   // 3n x B
  Eigen::MatrixXd u;       // 6n x B
};

inline Eigen::MatrixXd normalize_inputs(const MdnParams& p, std::span<const TendonConfig> configs) {
  const Eigen::Index m = p.limits_min.size();
  Eigen::MatrixXd x(m, static_cast<Eigen::Index>(configs.size()));
  const Eigen::VectorXd center = 0.5 * (p.limits_min + p.limits_max);
  const Eigen::VectorXd half = 0.5 * (p.limits_max - p.limits_min);
  for (std::size_t b = 0; b < configs.size(); ++b) {
    const auto& d = configs[b];
    if (d.size() != m) throw ConfigError("tendon configuration has the wrong dimension");
    if (!d.allFinite()) throw InvalidInput("tendon configuration must be finite");
    x.col(static_cast<Eigen::Index>(b)) = (d - center).cwiseQuotient(half);
  }
  return x;
}

inline HeadOutputs forward_batch(const MdnParams& p, std::span<const TendonConfig> configs, Trace* trace) {
  const Eigen::MatrixXd x = normalize_inputs(p, configs);
  const Eigen::MatrixXd features = forward_stack(p.trunk, x, trace ? &trace->trunk : nullptr);
  HeadOutputs out;
  out.logits = forward_stack(p.heads[kWeightHead], features, trace ? &trace->heads[kWeightHead] : nullptr);
  out.means = forward_stack(p.heads[kMeanHead], features, trace ? &trace->heads[kMeanHead] : nullptr);
  out.u = forward_stack(p.heads[kUHead], features, trace ? &trace->heads[kUHead] : nullptr);
  return out;
}

inline Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

inline Gmm3 gmm_from_outputs(const HeadOutputs& out, Eigen::Index col, int n) {
  const Eigen::VectorXd logits = out.logits.col(col);
  const double mx = logits.maxCoeff();
  const Eigen::ArrayXd e = (logits.array() - mx).exp();
  const double total = e.sum();
  std::vector<GaussianComponent> comps(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& c = comps[static_cast<std::size_t>(i)];
    c.weight = e[i] / total;
    c.mean = out.means.col(col).segment<3>(3 * i);
    for (int k = 0; k < UMatrix::kSize; ++k) c.u[k] = out.u(UMatrix::kSize * i + k, col);
  }
  return Gmm3(std::move(comps));
}

/// Reduced NLL of one cloud under one column of head outputs; optionally adds
/// scale * d(loss)/d(outputs) into the gradient columns.
inline double entry_loss(const HeadOutputs& out, Eigen::Index col, int n, std::span<const Point3> points,
                         HeadOutputs* grad, double scale) {
  if (points.empty()) throw InvalidInput("reduced_nll needs a non-empty point cloud");
  const Eigen::VectorXd log_w = log_softmax(out.logits.col(col));
  std::vector<Mat3> factors(static_cast<std::size_t>(n));
  std::vector<Point3> means(static_cast<std::size_t>(n));
  Eigen::VectorXd log_norm(n);
  for (int i = 0; i < n; ++i) {
    UMatrix u;
    for (int k = 0; k < UMatrix::kSize; ++k) u[k] = out.u(UMatrix::kSize * i + k, col);
    factors[i] = u.factor();
    means[i] = out.means.col(col).segment<3>(3 * i);
    log_norm[i] = log_w[i] + u.u11 + u.u22 + u.u33;
  }

  Eigen::VectorXd a(n), gamma(n), gamma_sum = Eigen::VectorXd::Zero(n);
  std::vector<Point3> e(static_cast<std::size_t>(n)), r(static_cast<std::size_t>(n));
  std::vector<Point3> d_mean(static_cast<std::size_t>(n), Point3::Zero());
  std::vector<Mat3> d_factor(static_cast<std::size_t>(n), Mat3::Zero());
  double total = 0.0;
  for (const auto& x : points) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      e[i] = x - means[i];
      r[i] = factors[i].triangularView<Eigen::Upper>() * e[i];
      a[i] = log_norm[i] - 0.5 * r[i].squaredNorm();
      mx = std::max(mx, a[i]);
    }
    gamma = (a.array() - mx).exp();
    const double s = gamma.sum();
    total -= mx + std::log(s);
    if (!grad) continue;
    gamma /= s;
    gamma_sum += gamma;
    for (int i = 0; i < n; ++i) {
      // d(loss)/d(mu_i) = -gamma_i U_i^T r_i ; d(loss)/dU_jk = gamma_i r_j e_k.
      d_mean[i] -= gamma[i] * (factors[i].transpose() * r[i]);
      d_factor[i] += gamma[i] * r[i] * e[i].transpose();
    }
  }
  const double count = static_cast<double>(points.size());
  if (grad) {
    const double k = scale / count;
    const Eigen::VectorXd w = log_w.array().exp().matrix();
    // Through log-softmax: d/d(logit_k) sum_i gamma_i log w_i = gamma_k - w_k.
    grad->logits.col(col) += k * (count * w - gamma_sum);
    for (int i = 0; i < n; ++i) {
      grad->means.col(col).segment<3>(3 * i) += k * d_mean[i];
      const Mat3& f = factors[i];
      const Mat3& dF = d_factor[i];
      // Diagonal entries are log-scale and also appear in log|P|^(1/2).
      grad->u(UMatrix::kSize * i + 0, col) += k * (dF(0, 0) * f(0, 0) - gamma_sum[i]);
      grad->u(UMatrix::kSize * i + 1, col) += k * (dF(1, 1) * f(1, 1) - gamma_sum[i]);
      grad->u(UMatrix::kSize * i + 2, col) += k * (dF(2, 2) * f(2, 2) - gamma_sum[i]);
      grad->u(UMatrix::kSize * i + 3, col) += k * dF(0, 1);
      grad->u(UMatrix::kSize * i + 4, col) += k * dF(0, 2);
      grad->u(UMatrix::kSize * i + 5, col) += k * dF(1, 2);
    }
  }
  return total / count;
}

/// Mean reduced NLL over entries, with the gradient when `grad` is non-null.
inline double loss_and_grad(const MdnParams& p, std::span<const TendonConfig> configs,
                            std::span<const std::span<const Point3>> clouds, MdnParams* grad) {
  if (configs.empty()) throw InvalidInput("batch must be non-empty");
  Trace trace;
  const HeadOutputs out = forward_batch(p, configs, grad ? &trace : nullptr);
  const auto batch = static_cast<Eigen::Index>(configs.size());
  HeadOutputs d;
  if (grad) {
    d.logits = Eigen::MatrixXd::Zero(out.logits.rows(), batch);
    d.means = Eigen::MatrixXd::Zero(out.means.rows(), batch);
    d.u = Eigen::MatrixXd::Zero(out.u.rows(), batch);
  }
  double total = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b)
    total += entry_loss(out, b, p.components, clouds[static_cast<std::size_t>(b)], grad ? &d : nullptr,
                        1.0 / static_cast<double>(batch));
  if (grad) {
    *grad = zeros_like(p);
    Eigen::MatrixXd d_features = backward_stack(p.heads[kWeightHead], trace.heads[kWeightHead], d.logits,
                                                grad->heads[kWeightHead]);
    d_features += backward_stack(p.heads[kMeanHead], trace.heads[kMeanHead], d.means, grad->heads[kMeanHead]);
    d_features += backward_stack(p.heads[kUHead], trace.heads[kUHead], d.u, grad->heads[kUHead]);
    backward_stack(p.trunk, trace.trunk, std::move(d_features), grad->trunk);
  }
  return total / static_cast<double>(batch);
}

inline double loss_and_grad(const MdnParams& p, std::span<const Sample> batch, MdnParams* grad) {
  std::vector<TendonConfig> configs;
  std::vector<std::span<const Point3>> clouds;
  configs.reserve(batch.size());
  clouds.reserve(batch.size());
  for (const auto& s : batch) {
    configs.push_back(s.config);
    clouds.emplace_back(s.cloud);
  }
  return loss_and_grad(p, configs, clouds, grad);
}

}  // namespace detail

/// Gaussian mixture emitted for one tendon configuration.
inline Gmm3 mdn_forward(const MdnParams& p, const TendonConfig& d) {
  validate(p);
  if (d.size() != p.inputs()) throw ConfigError("tendon configuration has the wrong dimension");
  for (Eigen::Index j = 0; j < d.size(); ++j)
    if (!(d[j] >= p.limits_min[j] - 1e-12 && d[j] <= p.limits_max[j] + 1e-12))
      throw InvalidInput("tendon displacement outside the model's limits");
  const detail::HeadOutputs out = detail::forward_batch(p, std::span(&d, 1), nullptr);
  return detail::gmm_from_outputs(out, 0, p.components);
}

/// Batched variant of mdn_forward; skips revalidating the parameters.
inline std::vector<Gmm3> mdn_forward_batch(const MdnParams& p, std::span<const TendonConfig> configs) {
  const detail::HeadOutputs out = detail::forward_batch(p, configs, nullptr);
  std::vector<Gmm3> gmms;
  gmms.reserve(configs.size());
  for (Eigen::Index b = 0; b < static_cast<Eigen::Index>(configs.size()); ++b)
    gmms.push_back(detail::gmm_from_outputs(out, b, p.components));
  return gmms;
}

/// Mean over batch entries of reduced_nll(mdn_forward(p, d), cloud).
inline double mdn_loss(const MdnParams& p, std::span<const Sample> batch) {
  validate(p);
  return detail::loss_and_grad(p, batch, nullptr);
}

/// Exact gradient of mdn_loss with respect to every network parameter.
inline MdnParams mdn_grad(const MdnParams& p, std::span<const Sample> batch) {
  validate(p);
  MdnParams g;
  detail::loss_and_grad(p, batch, &g);
  return g;
}

/// True iff some mixture weight is strictly below `epsilon_w`.
inline bool detect_mode_collapse(const Gmm3& g, double epsilon_w = 1e-3) {
  for (const auto& c : g)
    if (c.weight < epsilon_w) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Training

struct TrainHyper {
  std::size_t epochs = 200;
  double step = 1e-3;
  std::size_t batch = 16;
  std::size_t points_per_config = 512;
  std::uint64_t seed = 0;
  const Dataset* heldout = nullptr;
  /// Points per held-out cloud used for the per-epoch held-out NLL
  /// (evenly strided; 0 uses every point).
  std::size_t heldout_points = 0;
  double collapse_threshold = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainReport {
  std::vector<double> train_nll;
  std::vector<double> heldout_nll;
  std::vector<double> epoch_seconds;
  double initial_train_nll = 0.0;
  double initial_heldout_nll = 0.0;
  /// Fraction of held-out configurations whose mixture has a weight below the threshold.
  double collapse_fraction = 0.0;
  bool mode_collapse = false;
};

namespace detail {

inline PointCloud strided(const PointCloud& cloud, std::size_t max_points) {
  if (max_points == 0 || cloud.size() <= max_points) return cloud;
  PointCloud out;
  out.reserve(max_points);
  for (std::size_t k = 0; k < max_points; ++k) out.push_back(cloud[k * cloud.size() / max_points]);
  return out;
}

}  // namespace detail

/// Mean reduced NLL over a dataset, each cloud thinned to at most `max_points`.
inline double dataset_nll(const MdnParams& p, const Dataset& data, std::size_t max_points = 0) {
  if (data.entries.empty()) throw InvalidInput("dataset is empty");
  std::vector<TendonConfig> configs;
  std::vector<PointCloud> thinned;
  std::vector<std::span<const Point3>> clouds;
  for (const auto& s : data.entries) {
    configs.push_back(s.config);
    if (max_points != 0 && s.cloud.size() > max_points) {
      thinned.push_back(detail::strided(s.cloud, max_points));
    }
  }
  std::size_t t = 0;
  for (const auto& s : data.entries) {
    if (max_points != 0 && s.cloud.size() > max_points)
      clouds.emplace_back(thinned[t++]);
    else
      clouds.emplace_back(s.cloud);
  }
  return detail::loss_and_grad(p, configs, clouds, nullptr);
}

/// Fraction of entries whose predicted mixture trips the collapse detector.
inline double collapse_fraction(const MdnParams& p, const Dataset& data, double epsilon_w = 1e-3) {
  if (data.entries.empty()) return 0.0;
  std::vector<TendonConfig> configs;
  for (const auto& s : data.entries) configs.push_back(s.config);
  std::size_t hits = 0;
  for (const auto& g : mdn_forward_batch(p, configs)) hits += detect_mode_collapse(g, epsilon_w) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.entries.size());
}

/// Adam over shuffled mini-batches. Every epoch each configuration contributes
/// `points_per_config` points drawn uniformly (with replacement) from its cloud.
inline std::pair<MdnParams, TrainReport> train(const MdnParams& init, const Dataset& data, const TrainHyper& hyper) {
  validate(init);
  if (data.entries.empty()) throw InvalidInput("training dataset is empty");
  if (hyper.batch < 1 || hyper.points_per_config < 1) throw ConfigError("batch size and points per config must be >= 1");
  for (const auto& s : data.entries)
    if (s.cloud.empty()) throw InvalidInput("training cloud is empty");

  TrainReport report;
  report.initial_train_nll = dataset_nll(init, data);
  if (hyper.heldout) report.initial_heldout_nll = dataset_nll(init, *hyper.heldout);

  MdnParams params = init;
  if (hyper.epochs == 0) return {params, report};

  std::mt19937_64 rng(hyper.seed);
  Eigen::VectorXd theta = flatten(params);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(theta.size());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(theta.size());
  std::size_t step = 0;

  std::vector<std::size_t> order(data.entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Sample> batch;
  MdnParams grad;

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch) {
      const std::size_t stop = std::min(order.size(), start + hyper.batch);
      batch.resize(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        const auto& src = data.entries[order[b]];
        auto& dst = batch[b - start];
        dst.config = src.config;
        dst.cloud.resize(hyper.points_per_config);
        std::uniform_int_distribution<std::size_t> pick(0, src.cloud.size() - 1);
        for (auto& pt : dst.cloud) pt = src.cloud[pick(rng)];
      }
      const double loss = detail::loss_and_grad(params, batch, &grad);
      const Eigen::VectorXd g = flatten(grad);
      if (!std::isfinite(loss) || !g.allFinite()) throw TrainingFailure("training diverged", epoch);
      epoch_loss += loss * static_cast<double>(batch.size());

      ++step;
      m1 = hyper.beta1 * m1 + (1.0 - hyper.beta1) * g;
      m2 = hyper.beta2 * m2 + (1.0 - hyper.beta2) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
      theta.array() -= hyper.step * (m1.array() / c1) / ((m2.array() / c2).sqrt() + hyper.epsilon);
      unflatten(theta, params);
    }
    report.train_nll.push_back(epoch_loss / static_cast<double>(order.size()));
    if (hyper.heldout) {
      const double h = dataset_nll(params, *hyper.heldout, hyper.heldout_points);
      if (!std::isfinite(h)) throw TrainingFailure("held-out loss is not finite", epoch);
      report.heldout_nll.push_back(h);
    } else {
      report.heldout_nll.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    report.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  const Dataset& probe = hyper.heldout ? *hyper.heldout : data;
  report.collapse_fraction = collapse_fraction(params, probe, hyper.collapse_threshold);
  report.mode_collapse = report.collapse_fraction >= 0.5;
  return {params, report};
}

// ---------------------------------------------------------------------------
// Model file

inline std::string join_sizes(const std::vector<DenseLayer>& layers, bool drop_last) {
  std::string s;
  const std::size_t count = drop_last && !layers.empty() ? layers.size() - 1 : layers.size();
  for (std::size_t i = 0; i < count; ++i) {
    if (i) s += ",";
    s += std::to_string(layers[i].outputs());
  }
  return s;
}

/// Text model file: `mdn-v1`, `m=`, `n=`, `trunk=`, `heads=`, `activation=`,
/// `limits=` header lines, then `layer <rows> <cols>` blocks of row-major
/// weights followed by biases.
inline std::string save_params(const MdnParams& p) {
  validate(p);
  std::string s = "mdn-v1\n";
  s += "m=" + std::to_string(p.inputs()) + "\n";
  s += "n=" + std::to_string(p.components) + "\n";
  s += "trunk=" + join_sizes(p.trunk, false) + "\n";
  s += "heads=" + join_sizes(p.heads[kWeightHead], true) + "\n";
  s += "activation=" + to_string(p.activation) + "\n";
  s += "limits=";
  for (Eigen::Index j = 0; j < p.limits_min.size(); ++j) s += (j ? " " : "") + format_real(p.limits_min[j]);
  for (Eigen::Index j = 0; j < p.limits_max.size(); ++j) s += " " + format_real(p.limits_max[j]);
  s += "\n";
  for_each_layer(p, [&](const DenseLayer& l) {
    s += "layer " + std::to_string(l.outputs()) + " " + std::to_string(l.inputs()) + "\n";
    for (Eigen::Index r = 0; r < l.outputs(); ++r) {
      for (Eigen::Index c = 0; c < l.inputs(); ++c) s += (c ? " " : "") + format_real(l.weights(r, c));
      s += "\n";
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) s += (r ? " " : "") + format_real(l.bias[r]);
    s += "\n";
  });
  return s;
}

namespace detail {

inline std::string_view header_value(TokenReader& in, std::string_view key) {
  const std::size_t at = (in.at_end(), in.offset());
  const std::string_view line = trim(in.line(std::string(key) + "= header"));
  if (line.size() < key.size() + 1 || line.substr(0, key.size()) != key || line[key.size()] != '=')
    throw ParseError("expected '" + std::string(key) + "=' header line", at);
  return line.substr(key.size() + 1);
}

inline std::vector<int> parse_sizes(std::string_view v, std::size_t at) {
  std::vector<int> out;
  for (auto tok : split(v, ", ")) {
    int x = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
    if (ec != std::errc() || p != tok.data() + tok.size() || x < 1) throw ParseError("bad layer size list", at);
    out.push_back(x);
  }
  return out;
}

inline int parse_count(std::string_view v, std::size_t at) {
  int x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || x < 1) throw ParseError("bad count", at);
  return x;
}

}  // namespace detail

inline MdnParams load_params(std::string_view text) {
  TokenReader in(text);
  {
    const std::size_t at = (in.at_end(), in.offset());
    if (trim(in.line("mdn-v1 magic")) != "mdn-v1") throw ParseError("not an mdn-v1 model file", at);
  }
  std::size_t at = (in.at_end(), in.offset());
  const int m = detail::parse_count(detail::header_value(in, "m"), at);
  at = (in.at_end(), in.offset());
  const int n = detail::parse_count(detail::header_value(in, "n"), at);
  at = (in.at_end(), in.offset());
  const std::vector<int> trunk = detail::parse_sizes(detail::header_value(in, "trunk"), at);
  at = (in.at_end(), in.offset());
  const std::vector<int> heads = detail::parse_sizes(detail::header_value(in, "heads"), at);
  at = (in.at_end(), in.offset());
  Activation act;
  try {
    act = activation_from_string(trim(detail::header_value(in, "activation")));
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), at);
  }
  at = (in.at_end(), in.offset());
  const auto limits = split(detail::header_value(in, "limits"));
  if (limits.size() != static_cast<std::size_t>(2 * m)) throw ShapeError("limits line needs 2*m values", at);

  MdnParams p;
  p.components = n;
  p.activation = act;
  p.limits_min.resize(m);
  p.limits_max.resize(m);
  for (int j = 0; j < m; ++j) {
    p.limits_min[j] = TokenReader::parse_real(limits[j], at, "limit");
    p.limits_max[j] = TokenReader::parse_real(limits[m + j], at, "limit");
  }

  auto read_layer = [&](int rows, int cols, Activation a) {
    const std::size_t layer_at = (in.at_end(), in.offset());
    if (in.next("layer keyword") != "layer") throw ParseError("expected 'layer'", layer_at);
    const long long r = in.integer("layer rows");
    const long long c = in.integer("layer cols");
    if (r != rows || c != cols)
      throw ShapeError("layer declared " + std::to_string(r) + "x" + std::to_string(c) + " but header implies " +
                           std::to_string(rows) + "x" + std::to_string(cols),
                       layer_at);
    DenseLayer l;
    l.activation = a;
    l.weights.resize(rows, cols);
    l.bias.resize(rows);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) l.weights(i, j) = in.real("layer weight");
    for (int i = 0; i < rows; ++i) l.bias[i] = in.real("layer bias");
    return l;
  };

  int width = m;
  for (int h : trunk) {
    p.trunk.push_back(read_layer(h, width, act));
    width = h;
  }
  for (std::size_t h = 0; h < 3; ++h) {
    int w = width;
    for (int hidden : heads) {
      p.heads[h].push_back(read_layer(hidden, w, act));
      w = hidden;
    }
    p.heads[h].push_back(read_layer(MdnParams::head_outputs(static_cast<Head>(h), n), w, Activation::identity));
  }
  if (!in.at_end()) throw ShapeError("trailing data after the last declared layer", in.offset());
  try {
    validate(p);
  } catch (const ConfigError& e) {
    throw ShapeError(e.what(), in.offset());
  }
  return p;
}

}  // namespace gmmkin
