#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/ingest.hpp"

namespace gaitcast {

inline constexpr int kFeatureCount = 6;
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "integral", "variance", "wavelength", "zero_crossing_rate", "correlation_coefficient",
    "weighted_avg_frequency"};
inline constexpr std::array<std::string_view, 2> kQuantityNames = {"angle", "torque"};

struct WindowSpec {
  int window_len = 100;
  int overlap = 50;

  int stride() const { return window_len - overlap; }

  void validate() const {
    if (window_len < 1) throw ConfigError("window_len must be >= 1");
    if (overlap < 0 || overlap >= window_len) {
      throw ConfigError("overlap must satisfy 0 <= overlap < window_len");
    }
  }

  /// floor((T - L)/s) + 1, or 0 when T < L.
  std::size_t window_count(std::size_t samples) const {
    const auto len = static_cast<std::size_t>(window_len);
    if (samples < len) return 0;
    return (samples - len) / static_cast<std::size_t>(stride()) + 1;
  }
};

/// Dense row-major [d0 x d1 x d2] array.
struct Tensor3 {
  std::size_t d0 = 0, d1 = 0, d2 = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(std::size_t a, std::size_t b, std::size_t c) : d0(a), d1(b), d2(c), data(a * b * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j, std::size_t k) { return data[(i * d1 + j) * d2 + k]; }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * d1 + j) * d2 + k];
  }
  /// Row i flattened over the trailing two axes.
  std::span<double> row(std::size_t i) { return {data.data() + i * d1 * d2, d1 * d2}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * d1 * d2, d1 * d2}; }
  std::size_t row_size() const { return d1 * d2; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const Tensor3&, const Tensor3&) = default;
};

/// [W x 9 x 6]; feature axis ordered as kFeatureNames.
struct FeatureTensor {
  Tensor3 values;
  std::size_t windows() const { return values.d0; }
  friend bool operator==(const FeatureTensor&, const FeatureTensor&) = default;
};

/// [W x 8 x 2]; last axis is (angle in degrees, torque in Nm).
struct TargetTensor {
  Tensor3 values;
  std::size_t windows() const { return values.d0; }
  friend bool operator==(const TargetTensor&, const TargetTensor&) = default;
};

inline std::vector<std::vector<double>> segment(std::span<const double> signal, const WindowSpec& spec) {
  spec.validate();
  const std::size_t count = spec.window_count(signal.size());
  std::vector<std::vector<double>> out;
  out.reserve(count);
  const auto stride = static_cast<std::size_t>(spec.stride());
  const auto len = static_cast<std::size_t>(spec.window_len);
  for (std::size_t i = 0; i < count; ++i) {
    auto first = signal.begin() + static_cast<std::ptrdiff_t>(i * stride);
    out.emplace_back(first, first + static_cast<std::ptrdiff_t>(len));
  }
  return out;
}

/// Power-weighted mean frequency of the one-sided periodogram of the
/// mean-removed window.
inline double mean_frequency(std::span<const double> x, double sample_rate_hz) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);

  std::vector<double> cos_table(n), sin_table(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    cos_table[j] = std::cos(a);
    sin_table[j] = std::sin(a);
  }
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = (j * k) % n;
      const double v = x[j] - mean;
      re += v * cos_table[idx];
      im -= v * sin_table[idx];
    }
    double p = re * re + im * im;
    const bool edge = k == 0 || (n % 2 == 0 && k == n / 2);
    if (!edge) p *= 2.0;
    const double f = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n);
    num += f * p;
    den += p;
  }
  return den > 0.0 ? num / den : 0.0;
}

/// (integral, variance, wavelength, zero_crossing_rate,
///  correlation_coefficient, weighted_avg_frequency).
///
/// Zero counts as positive for zero crossings; a crossing must also move by
/// at least `zc_threshold`. The correlation coefficient is the lag-1
/// autocorrelation, defined as 0 when either lagged slice is constant.
inline std::array<double, kFeatureCount> feature_vector(std::span<const double> w,
                                                        double sample_rate_hz,
                                                        double zc_threshold = 0.0) {
  const std::size_t n = w.size();
  if (n < 2) throw ArgumentError("feature_vector: window length must be >= 2");

  double iemg = 0.0, mean = 0.0;
  for (double v : w) {
    iemg += std::abs(v);
    mean += v;
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : w) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);

  double wl = 0.0;
  std::size_t crossings = 0;
  for (std::size_t i = 1; i < n; ++i) {
    const double d = w[i] - w[i - 1];
    wl += std::abs(d);
    if ((w[i] >= 0.0) != (w[i - 1] >= 0.0) && std::abs(d) >= zc_threshold) ++crossings;
  }
  const double zcr = static_cast<double>(crossings) / static_cast<double>(n - 1);

  const std::size_t m = n - 1;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    ma += w[i];
    mb += w[i + 1];
  }
  ma /= static_cast<double>(m);
  mb /= static_cast<double>(m);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double a = w[i] - ma;
    const double b = w[i + 1] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  const double corr = (saa > 0.0 && sbb > 0.0) ? std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0) : 0.0;

  return {iemg, var, wl, zcr, corr, mean_frequency(w, sample_rate_hz)};
}

/// Joint-timeline index paired with window `w`: the window's last sEMG
/// sample mapped by nearest-index scaling.
inline std::size_t target_index(std::size_t w, const WindowSpec& spec, std::size_t emg_samples,
                                std::size_t joint_samples) {
  const double last = static_cast<double>(w * static_cast<std::size_t>(spec.stride()) +
                                          static_cast<std::size_t>(spec.window_len) - 1);
  const double scaled = last * static_cast<double>(joint_samples) / static_cast<double>(emg_samples);
  const auto idx = static_cast<std::size_t>(std::llround(scaled));
  return std::min(idx, joint_samples - 1);
}

struct FeaturizeResult {
  FeatureTensor features;
  TargetTensor targets;
};

/// Windows every sEMG channel of an already-preprocessed record and pairs
/// each window with the joint sample at its end.
inline FeaturizeResult featurize(const RawRecord& r, const WindowSpec& spec, double zc_threshold = 0.0) {
  spec.validate();
  r.validate();
  const auto t = static_cast<std::size_t>(r.emg_samples());
  const auto tj = static_cast<std::size_t>(r.joint_samples());
  const std::size_t count = spec.window_count(t);
  if (count == 0 || tj == 0) {
    throw LengthError("featurize: record has " + std::to_string(t) +
                      " sEMG samples, fewer than window_len " + std::to_string(spec.window_len));
  }

  FeaturizeResult out{FeatureTensor{Tensor3(count, kEmgChannels, kFeatureCount)},
                      TargetTensor{Tensor3(count, kJoints, 2)}};
  const auto stride = static_cast<std::size_t>(spec.stride());
  const auto len = static_cast<std::size_t>(spec.window_len);
  std::vector<double> channel(t);
  for (int c = 0; c < kEmgChannels; ++c) {
    for (std::size_t i = 0; i < t; ++i) channel[i] = r.semg(static_cast<Eigen::Index>(i), c);
    for (std::size_t w = 0; w < count; ++w) {
      const auto f = feature_vector(std::span<const double>(channel).subspan(w * stride, len),
                                    r.sample_rate_hz, zc_threshold);
      for (int k = 0; k < kFeatureCount; ++k) {
        out.features.values(w, static_cast<std::size_t>(c), static_cast<std::size_t>(k)) = f[static_cast<std::size_t>(k)];
      }
    }
  }
  for (std::size_t w = 0; w < count; ++w) {
    const auto idx = static_cast<Eigen::Index>(target_index(w, spec, t, tj));
    for (int j = 0; j < kJoints; ++j) {
      out.targets.values(w, static_cast<std::size_t>(j), 0) = r.angles(idx, j);
      out.targets.values(w, static_cast<std::size_t>(j), 1) = r.torques(idx, j);
    }
  }
  return out;
}

/// Per-column z-scoring over axis 0 of a Tensor3 (columns are the flattened
/// trailing axes). Zero-variance columns keep std = 1 and are flagged.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<bool> zero_variance;
  std::string scope = "record";

  bool any_zero_variance() const {
    return std::any_of(zero_variance.begin(), zero_variance.end(), [](bool b) { return b; });
  }

  static Standardizer fit(const Tensor3& x, std::string scope = "record") {
    if (x.d0 < 2) throw ArgumentError("fit_standardizer: need at least 2 windows");
    const std::size_t cols = x.row_size();
    Standardizer s;
    s.scope = std::move(scope);
    s.mean.assign(cols, 0.0);
    s.stddev.assign(cols, 0.0);
    s.zero_variance.assign(cols, false);
    for (std::size_t i = 0; i < x.d0; ++i) {
      const auto r = x.row(i);
      for (std::size_t c = 0; c < cols; ++c) s.mean[c] += r[c];
    }
    for (auto& m : s.mean) m /= static_cast<double>(x.d0);
    for (std::size_t i = 0; i < x.d0; ++i) {
      const auto r = x.row(i);
      for (std::size_t c = 0; c < cols; ++c) s.stddev[c] += (r[c] - s.mean[c]) * (r[c] - s.mean[c]);
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const double sd = std::sqrt(s.stddev[c] / static_cast<double>(x.d0));
      if (!(sd > 1e-12 * (1.0 + std::abs(s.mean[c])))) {
        s.stddev[c] = 1.0;
        s.zero_variance[c] = true;
      } else {
        s.stddev[c] = sd;
      }
    }
    return s;
  }

  Tensor3 apply(const Tensor3& x) const {
    check(x);
    Tensor3 y = x;
    for (std::size_t i = 0; i < y.d0; ++i) {
      auto r = y.row(i);
      for (std::size_t c = 0; c < r.size(); ++c) r[c] = (r[c] - mean[c]) / stddev[c];
    }
    return y;
  }

  Tensor3 inverse(const Tensor3& x) const {
    check(x);
    Tensor3 y = x;
    for (std::size_t i = 0; i < y.d0; ++i) {
      auto r = y.row(i);
      for (std::size_t c = 0; c < r.size(); ++c) r[c] = r[c] * stddev[c] + mean[c];
    }
    return y;
  }

  double inverse_value(double v, std::size_t column) const { return v * stddev.at(column) + mean.at(column); }

 private:
  void check(const Tensor3& x) const {
    if (x.row_size() != mean.size()) {
      throw DimensionError("standardizer fitted on " + std::to_string(mean.size()) +
                           " columns, tensor has " + std::to_string(x.row_size()));
    }
  }
};

inline Standardizer fit_standardizer(const FeatureTensor& f) { return Standardizer::fit(f.values); }

inline FeatureTensor apply_standardizer(const Standardizer& s, const FeatureTensor& f) {
  return FeatureTensor{s.apply(f.values)};
}

}  // namespace gaitcast
