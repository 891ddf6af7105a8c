#pragma once

// Exact Gaussian process regression with a squared-exponential kernel
//   k(x, x') = sf2 * exp(-|x - x'|^2 / (2 l^2))
// and bounded hyperparameters.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gaitcast/error.hpp"

namespace gaitcast {

struct KernelBounds {
  static constexpr double kSignalVarianceMin = 1e-3;
  static constexpr double kSignalVarianceMax = 1e3;
  static constexpr double kLengthScaleMin = 1e-2;
  static constexpr double kLengthScaleMax = 1e2;
  static constexpr double kNoiseVarianceMin = 1e-10;
};

class KernelParams {
 public:
  KernelParams(double signal_variance, double length_scale, double noise_variance = 1e-6)
      : signal_variance_(signal_variance), length_scale_(length_scale), noise_variance_(noise_variance) {
    using B = KernelBounds;
    if (!(signal_variance >= B::kSignalVarianceMin && signal_variance <= B::kSignalVarianceMax)) {
      throw RangeError("signal_variance " + std::to_string(signal_variance) + " outside [1e-3, 1e3]");
    }
    if (!(length_scale >= B::kLengthScaleMin && length_scale <= B::kLengthScaleMax)) {
      throw RangeError("length_scale " + std::to_string(length_scale) + " outside [1e-2, 1e2]");
    }
    if (!(noise_variance >= B::kNoiseVarianceMin) || !std::isfinite(noise_variance)) {
      throw RangeError("noise_variance must be >= 1e-10");
    }
  }

  double signal_variance() const { return signal_variance_; }
  double length_scale() const { return length_scale_; }
  double noise_variance() const { return noise_variance_; }

 private:
  double signal_variance_;
  double length_scale_;
  double noise_variance_;
};

template <typename A, typename B>
double kernel_eval(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& x2, const KernelParams& p) {
  if (x.size() != x2.size()) {
    throw DimensionError("kernel_eval: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                         std::to_string(x2.size()) + ")");
  }
  const double d2 = (x - x2).squaredNorm();
  return p.signal_variance() * std::exp(-d2 / (2.0 * p.length_scale() * p.length_scale()));
}

/// Cross-covariance between the rows of a and b.
inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const KernelParams& p) {
  if (a.cols() != b.cols()) throw DimensionError("kernel_matrix: dimension mismatch");
  const Eigen::VectorXd na = a.rowwise().squaredNorm();
  const Eigen::VectorXd nb = b.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = -2.0 * a * b.transpose();
  d2.colwise() += na;
  d2.rowwise() += nb.transpose();
  const double inv = 1.0 / (2.0 * p.length_scale() * p.length_scale());
  return p.signal_variance() * (-(d2.array().max(0.0)) * inv).exp().matrix();
}

struct GprModel {
  KernelParams params{1.0, 1.0};
  Eigen::MatrixXd x_train;  // [N x D]
  Eigen::VectorXd y_train;  // [N]
  Eigen::VectorXd alpha;    // (K + s I)^-1 y
  Eigen::MatrixXd chol;     // lower factor of K + s I
  double noise_used = 0.0;  // noise variance after jitter escalation

  Eigen::Index dim() const { return x_train.cols(); }
};

namespace detail {

// Symmetrises the kernel matrix exactly: the fast distance expansion can leave
// K - K^T at rounding level.
inline Eigen::MatrixXd train_kernel(const Eigen::MatrixXd& x, const KernelParams& p) {
  Eigen::MatrixXd k = kernel_matrix(x, x, p);
  k = 0.5 * (k + k.transpose());
  k.diagonal().setConstant(p.signal_variance());
  return k;
}

}  // namespace detail

/// Exact fit. The noise variance is escalated by x10 up to three times if the
/// Cholesky factorisation fails.
inline GprModel fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const KernelParams& params) {
  if (x.rows() < 1) throw ArgumentError("gpr fit: need at least one training row");
  if (x.rows() != y.size()) throw DimensionError("gpr fit: X and y row counts differ");
  if (!x.allFinite() || !y.allFinite()) throw ArgumentError("gpr fit: non-finite training data");

  GprModel m;
  m.params = params;
  m.x_train = x;
  m.y_train = y;
  const Eigen::MatrixXd k = detail::train_kernel(x, params);
  double noise = params.noise_variance();
  for (int attempt = 0; attempt <= 3; ++attempt, noise *= 10.0) {
    Eigen::MatrixXd kn = k;
    kn.diagonal().array() += noise;
    Eigen::LLT<Eigen::MatrixXd> llt(kn);
    if (llt.info() == Eigen::Success) {
      m.chol = llt.matrixL();
      m.alpha = llt.solve(y);
      m.noise_used = noise;
      if (m.alpha.allFinite()) return m;
    }
  }
  throw ConditioningError("gpr fit: Cholesky failed after 3 jitter escalations");
}

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

inline Prediction predict(const GprModel& m, const Eigen::MatrixXd& xq) {
  if (xq.cols() != m.dim()) {
    throw DimensionError("gpr predict: query dimension " + std::to_string(xq.cols()) +
                         " != training dimension " + std::to_string(m.dim()));
  }
  const Eigen::MatrixXd ks = kernel_matrix(xq, m.x_train, m.params);  // [M x N]
  Prediction out;
  out.mean = ks * m.alpha;
  const Eigen::MatrixXd v = m.chol.triangularView<Eigen::Lower>().solve(ks.transpose());  // [N x M]
  out.variance = (m.params.signal_variance() + m.noise_used - v.colwise().squaredNorm().array()).max(0.0).matrix();
  return out;
}

/// log p(y | X, params).
inline double log_marginal_likelihood(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const KernelParams& p) {
  const GprModel m = fit(x, y, p);
  const double n = static_cast<double>(y.size());
  return -0.5 * y.dot(m.alpha) - m.chol.diagonal().array().log().sum() -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

struct OptimizeOptions {
  int starts = 5;
  int screen_points = 7;  // per axis, log-spaced over the bounds
  double initial_step = 0.5;  // natural-log units
  double min_step = 1e-4;
  int max_evaluations = 2000;
  // Search box; may narrow, never widen, the KernelBounds limits.
  std::array<double, 2> signal_variance_bounds = {KernelBounds::kSignalVarianceMin, KernelBounds::kSignalVarianceMax};
  std::array<double, 2> length_scale_bounds = {KernelBounds::kLengthScaleMin, KernelBounds::kLengthScaleMax};
};

/// Maximises the log marginal likelihood over (signal_variance,
/// length_scale) within the kernel bounds, noise variance held fixed.
///
/// A log-spaced screening grid picks the `starts` best points; each start is
/// refined by a bounded compass search in log space.
inline KernelParams optimize_hyperparameters(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                             double noise_variance = 1e-6, const OptimizeOptions& opt = {}) {
  using B = KernelBounds;
  const auto& sb = opt.signal_variance_bounds;
  const auto& lb = opt.length_scale_bounds;
  if (!(sb[0] >= B::kSignalVarianceMin && sb[0] <= sb[1] && sb[1] <= B::kSignalVarianceMax) ||
      !(lb[0] >= B::kLengthScaleMin && lb[0] <= lb[1] && lb[1] <= B::kLengthScaleMax)) {
    throw RangeError("optimize_hyperparameters: search bounds outside the kernel limits");
  }
  const std::array<double, 2> lo = {std::log(sb[0]), std::log(lb[0])};
  const std::array<double, 2> hi = {std::log(sb[1]), std::log(lb[1])};
  int evaluations = 0;
  // exp(log(b)) can land one ulp outside the bound.
  auto to_params = [&](const std::array<double, 2>& z) {
    return KernelParams(std::clamp(std::exp(z[0]), sb[0], sb[1]), std::clamp(std::exp(z[1]), lb[0], lb[1]),
                        noise_variance);
  };
  auto objective = [&](const std::array<double, 2>& z) {
    ++evaluations;
    try {
      const double v = log_marginal_likelihood(x, y, to_params(z));
      return std::isfinite(v) ? v : -1e300;
    } catch (const ConditioningError&) {
      return -1e300;
    }
  };
  auto clamp = [&](std::array<double, 2> z) {
    for (int d = 0; d < 2; ++d) z[static_cast<std::size_t>(d)] = std::clamp(z[static_cast<std::size_t>(d)], lo[static_cast<std::size_t>(d)], hi[static_cast<std::size_t>(d)]);
    return z;
  };

  struct Point {
    std::array<double, 2> z;
    double value;
  };
  std::vector<Point> screened;
  const int g = std::max(2, opt.screen_points);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      const std::array<double, 2> z = {lo[0] + (hi[0] - lo[0]) * i / (g - 1), lo[1] + (hi[1] - lo[1]) * j / (g - 1)};
      screened.push_back({z, objective(z)});
    }
  }
  std::stable_sort(screened.begin(), screened.end(), [](const Point& a, const Point& b) { return a.value > b.value; });
  screened.resize(std::min<std::size_t>(screened.size(), static_cast<std::size_t>(std::max(1, opt.starts))));

  Point best = screened.front();
  for (Point p : screened) {
    double step = opt.initial_step;
    while (step > opt.min_step && evaluations < opt.max_evaluations) {
      bool improved = false;
      for (int d = 0; d < 2 && !improved; ++d) {
        for (double dir : {1.0, -1.0}) {
          auto z = p.z;
          z[static_cast<std::size_t>(d)] += dir * step;
          z = clamp(z);
          if (z == p.z) continue;
          const double v = objective(z);
          if (v > p.value) {
            p = {z, v};
            improved = true;
            break;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    if (p.value > best.value) best = p;
  }
  return to_params(best.z);
}

struct ErrorMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

template <typename A, typename B>
ErrorMetrics evaluate(const A& y_true, const B& y_pred) {
  const auto n = static_cast<std::size_t>(std::size(y_true));
  if (n != static_cast<std::size_t>(std::size(y_pred))) throw DimensionError("evaluate: length mismatch");
  if (n == 0) throw ArgumentError("evaluate: empty input");
  double abs_sum = 0.0, sq_sum = 0.0;
  auto it = std::begin(y_pred);
  for (const auto& t : y_true) {
    const double e = static_cast<double>(t) - static_cast<double>(*it++);
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  ErrorMetrics m{abs_sum / static_cast<double>(n), std::sqrt(sq_sum / static_cast<double>(n))};
  // sqrt(mean e^2) >= mean |e| mathematically; rounding can flip equal values.
  m.rmse = std::max(m.rmse, m.mae);
  return m;
}

inline ErrorMetrics evaluate(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred) {
  return evaluate(std::vector<double>(y_true.data(), y_true.data() + y_true.size()),
                  std::vector<double>(y_pred.data(), y_pred.data() + y_pred.size()));
}

// ---------------------------------------------------------------------------
// JSON persistence. Doubles are stored as 17-significant-digit strings.

namespace detail {

inline std::string digits17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double from_digits(const nlohmann::json& j) { return std::stod(j.get<std::string>()); }

}  // namespace detail

inline nlohmann::json to_json(const GprModel& m) {
  using detail::digits17;
  nlohmann::json x = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.x_train.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index d = 0; d < m.x_train.cols(); ++d) row.push_back(digits17(m.x_train(i, d)));
    x.push_back(std::move(row));
  }
  nlohmann::json y = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.y_train.size(); ++i) y.push_back(digits17(m.y_train(i)));
  return {{"kernel", "rbf"},
          {"signal_variance", digits17(m.params.signal_variance())},
          {"length_scale", digits17(m.params.length_scale())},
          {"noise_variance", digits17(m.params.noise_variance())},
          {"x_train", std::move(x)},
          {"y_train", std::move(y)}};
}

inline GprModel gpr_from_json(const nlohmann::json& j) {
  using detail::from_digits;
  try {
    const KernelParams p(from_digits(j.at("signal_variance")), from_digits(j.at("length_scale")),
                         from_digits(j.at("noise_variance")));
    const auto& xs = j.at("x_train");
    const auto& ys = j.at("y_train");
    const auto n = static_cast<Eigen::Index>(ys.size());
    const auto d = n > 0 ? static_cast<Eigen::Index>(xs.at(0).size()) : 0;
    Eigen::MatrixXd x(n, d);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& row = xs.at(static_cast<std::size_t>(i));
      if (static_cast<Eigen::Index>(row.size()) != d) throw DimensionError("ragged x_train in GPR model JSON");
      for (Eigen::Index k = 0; k < d; ++k) x(i, k) = from_digits(row.at(static_cast<std::size_t>(k)));
      y(i) = from_digits(ys.at(static_cast<std::size_t>(i)));
    }
    return fit(x, y, p);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad GPR model JSON: ") + e.what());
  }
}

inline void save_gpr(const GprModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << to_json(m).dump() << '\n';
}

inline GprModel load_gpr(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return gpr_from_json(nlohmann::json::parse(in));
}

}  // namespace gaitcast
