#pragma once

// Independent reference computations used by the unit and acceptance
// suites. Nothing here calls into the library code path it checks.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

namespace gaitcast::oracle {

using Matrix = std::vector<std::vector<double>>;

/// Gauss-Jordan inverse with partial pivoting.
inline Matrix dense_inverse(Matrix a) {
  const std::size_t n = a.size();
  Matrix inv(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    if (a[piv][col] == 0.0) throw std::runtime_error("singular matrix");
    std::swap(a[piv], a[col]);
    std::swap(inv[piv], inv[col]);
    const double d = a[col][col];
    for (std::size_t k = 0; k < n; ++k) {
      a[col][k] /= d;
      inv[col][k] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      if (f == 0.0) continue;
      for (std::size_t k = 0; k < n; ++k) {
        a[r][k] -= f * a[col][k];
        inv[r][k] -= f * inv[col][k];
      }
    }
  }
  return inv;
}

inline double rbf(const std::vector<double>& a, const std::vector<double>& b, double sf2, double l) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  return sf2 * std::exp(-d2 / (2.0 * l * l));
}

struct GpResult {
  std::vector<double> mean, variance;
};

/// Textbook GP posterior through an explicit inverse of K + sn2 I.
inline GpResult gp_bruteforce(const Matrix& x, const std::vector<double>& y, const Matrix& xq, double sf2,
                              double l, double sn2) {
  const std::size_t n = x.size();
  Matrix k(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) k[i][j] = rbf(x[i], x[j], sf2, l) + (i == j ? sn2 : 0.0);
  }
  const Matrix kinv = dense_inverse(k);
  GpResult out;
  for (const auto& q : xq) {
    std::vector<double> ks(n);
    for (std::size_t i = 0; i < n; ++i) ks[i] = rbf(q, x[i], sf2, l);
    double mean = 0.0, quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) row += kinv[i][j] * y[j];
      mean += ks[i] * row;
      double rk = 0.0;
      for (std::size_t j = 0; j < n; ++j) rk += kinv[i][j] * ks[j];
      quad += ks[i] * rk;
    }
    out.mean.push_back(mean);
    out.variance.push_back(std::max(0.0, sf2 - quad + sn2));
  }
  return out;
}

/// Log marginal likelihood through the explicit inverse and an LU
/// determinant.
inline double gp_log_likelihood(const Matrix& x, const std::vector<double>& y, double sf2, double l, double sn2) {
  const std::size_t n = x.size();
  Matrix k(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) k[i][j] = rbf(x[i], x[j], sf2, l) + (i == j ? sn2 : 0.0);
  }
  Matrix lu = k;
  double logdet = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(lu[r][c]) > std::abs(lu[piv][c])) piv = r;
    }
    std::swap(lu[piv], lu[c]);
    logdet += std::log(std::abs(lu[c][c]));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = lu[r][c] / lu[c][c];
      for (std::size_t kk = c; kk < n; ++kk) lu[r][kk] -= f * lu[c][kk];
    }
  }
  const Matrix kinv = dense_inverse(k);
  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) quad += y[i] * kinv[i][j] * y[j];
  }
  return -0.5 * quad - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

/// Closed-form CRPS of N(mu, sigma^2) at y.
inline double gaussian_crps(double mu, double sigma, double y) {
  const double z = (y - mu) / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

/// O(S^2) pairwise CRPS estimator.
inline double crps_pairwise(const std::vector<double>& xs, double y) {
  const double s = static_cast<double>(xs.size());
  double a = 0.0, b = 0.0;
  for (double x : xs) a += std::abs(x - y);
  for (double xi : xs) {
    for (double xj : xs) b += std::abs(xi - xj);
  }
  return a / s - b / (2.0 * s * s);
}

/// Butterworth magnitude after bilinear prewarping, straight from the
/// squared-magnitude formula. Pass high_hz <= 0 for a lowpass at low_hz.
inline double butterworth_magnitude(int order, double low_hz, double high_hz, double fs, double f) {
  const double pi = std::numbers::pi;
  const double omega = std::tan(pi * f / fs);
  double x = 0.0;
  if (high_hz <= 0.0) {
    x = omega / std::tan(pi * low_hz / fs);
  } else {
    const double wl = std::tan(pi * low_hz / fs);
    const double wh = std::tan(pi * high_hz / fs);
    x = (omega * omega - wl * wh) / (omega * (wh - wl));
  }
  return 1.0 / std::sqrt(1.0 + std::pow(x * x, order));
}

/// Amplitude of the `f` Hz component of y[from..] by least squares on
/// sin/cos regressors.
inline double tone_amplitude(const std::vector<double>& y, double f, double fs, std::size_t from) {
  const double pi = std::numbers::pi;
  double ss = 0, cc = 0, sc = 0, ys = 0, yc = 0;
  for (std::size_t i = from; i < y.size(); ++i) {
    const double s = std::sin(2 * pi * f * static_cast<double>(i) / fs);
    const double c = std::cos(2 * pi * f * static_cast<double>(i) / fs);
    ss += s * s;
    cc += c * c;
    sc += s * c;
    ys += y[i] * s;
    yc += y[i] * c;
  }
  const double det = ss * cc - sc * sc;
  const double a = (ys * cc - yc * sc) / det;
  const double b = (yc * ss - ys * sc) / det;
  return std::hypot(a, b);
}

}  // namespace gaitcast::oracle
