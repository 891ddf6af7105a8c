#pragma once

// Periodised orthogonal wavelet packet transform (Daubechies-4) and
// threshold denoising over the terminal nodes of a full packet tree.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"

namespace gaitcast {

enum class ThresholdMode { soft, hard };

/// Which coefficients the relative threshold is measured against.
enum class ThresholdScope { global, subband };

struct DenoiseConfig {
  double wavelet_threshold = 0.08;
  int decomposition_level = 8;
  ThresholdMode threshold_mode = ThresholdMode::soft;
  ThresholdScope threshold_scope = ThresholdScope::global;
  bool pad = true;

  void validate() const {
    if (!(wavelet_threshold >= 0.0) || !std::isfinite(wavelet_threshold)) {
      throw ConfigError("wavelet_threshold must be >= 0");
    }
    if (decomposition_level < 1 || decomposition_level > 30) {
      throw ConfigError("decomposition_level must be in [1, 30]");
    }
  }
};

namespace wavelet {

/// Daubechies-4 scaling (reconstruction low-pass) filter, 8 taps.
inline constexpr std::array<double, 8> kDb4 = {
    0.23037781330885523,  0.7148465705525415,   0.6308807679295904,  -0.02798376941698385,
    -0.18703481171888114, 0.030841381835986965, 0.032883011666982945, -0.010597401784997278};

inline constexpr std::array<double, 8> db4_highpass() {
  std::array<double, 8> g{};
  for (std::size_t n = 0; n < 8; ++n) {
    g[n] = ((n % 2) ? -1.0 : 1.0) * kDb4[7 - n];
  }
  return g;
}

/// One periodised analysis step. x.size() must be even.
inline void analysis_step(std::span<const double> x, std::span<double> approx,
                          std::span<double> detail) {
  static constexpr auto g = db4_highpass();
  const std::size_t n = x.size();
  const std::size_t half = n / 2;
  for (std::size_t k = 0; k < half; ++k) {
    double a = 0.0, d = 0.0;
    for (std::size_t t = 0; t < kDb4.size(); ++t) {
      const double v = x[(2 * k + t) % n];
      a += kDb4[t] * v;
      d += g[t] * v;
    }
    approx[k] = a;
    detail[k] = d;
  }
}

/// Inverse of analysis_step (the analysis operator is orthogonal).
inline void synthesis_step(std::span<const double> approx, std::span<const double> detail,
                           std::span<double> x) {
  static constexpr auto g = db4_highpass();
  const std::size_t n = x.size();
  std::fill(x.begin(), x.end(), 0.0);
  for (std::size_t k = 0; k < approx.size(); ++k) {
    for (std::size_t t = 0; t < kDb4.size(); ++t) {
      x[(2 * k + t) % n] += kDb4[t] * approx[k] + g[t] * detail[k];
    }
  }
}

/// Full packet decomposition. Returns the 2^level terminal nodes laid out
/// contiguously (node i occupies [i*len, (i+1)*len)). Length must be a
/// multiple of 2^level.
inline std::vector<double> packet_decompose(std::span<const double> x, int level) {
  const std::size_t n = x.size();
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next(n);
  std::size_t nodes = 1;
  for (int l = 0; l < level; ++l) {
    const std::size_t len = n / nodes;
    for (std::size_t i = 0; i < nodes; ++i) {
      std::span<const double> src(cur.data() + i * len, len);
      std::span<double> a(next.data() + (2 * i) * (len / 2), len / 2);
      std::span<double> d(next.data() + (2 * i + 1) * (len / 2), len / 2);
      analysis_step(src, a, d);
    }
    std::swap(cur, next);
    nodes *= 2;
  }
  return cur;
}

inline std::vector<double> packet_reconstruct(std::span<const double> coeffs, int level) {
  const std::size_t n = coeffs.size();
  std::vector<double> cur(coeffs.begin(), coeffs.end());
  std::vector<double> next(n);
  std::size_t nodes = std::size_t{1} << level;
  for (int l = level; l > 0; --l) {
    const std::size_t child_len = n / nodes;
    const std::size_t parents = nodes / 2;
    for (std::size_t i = 0; i < parents; ++i) {
      std::span<const double> a(cur.data() + (2 * i) * child_len, child_len);
      std::span<const double> d(cur.data() + (2 * i + 1) * child_len, child_len);
      std::span<double> dst(next.data() + i * 2 * child_len, 2 * child_len);
      synthesis_step(a, d, dst);
    }
    std::swap(cur, next);
    nodes = parents;
  }
  return cur;
}

/// Half-sample symmetric extension of x to `length` samples.
inline std::vector<double> symmetric_pad(std::span<const double> x, std::size_t length) {
  std::vector<double> out(x.begin(), x.end());
  const std::size_t n = x.size();
  out.reserve(length);
  std::size_t period = 2 * n;
  for (std::size_t i = n; i < length; ++i) {
    const std::size_t m = i % period;
    out.push_back(m < n ? x[m] : x[period - 1 - m]);
  }
  return out;
}

inline double shrink(double c, double thr, ThresholdMode mode) {
  if (mode == ThresholdMode::hard) return std::abs(c) > thr ? c : 0.0;
  const double mag = std::abs(c) - thr;
  return mag > 0.0 ? std::copysign(mag, c) : 0.0;
}

}  // namespace wavelet

/// Wavelet packet denoising: full decomposition to `decomposition_level`,
/// thresholding of every terminal-node coefficient at
/// `wavelet_threshold * max|coeff|` (max over all nodes, or per node with
/// ThresholdScope::subband), and reconstruction to the input length.
inline std::vector<double> wpt_denoise(std::span<const double> signal, const DenoiseConfig& cfg) {
  cfg.validate();
  if (signal.empty()) throw ArgumentError("wpt_denoise: empty signal");
  for (double v : signal) {
    if (!std::isfinite(v)) throw ArgumentError("wpt_denoise: non-finite input");
  }
  const std::size_t block = std::size_t{1} << cfg.decomposition_level;
  const std::size_t n = signal.size();
  std::size_t padded = ((n + block - 1) / block) * block;
  if (padded != n && !cfg.pad) {
    throw LengthError("wpt_denoise: length " + std::to_string(n) + " is not a multiple of 2^" +
                      std::to_string(cfg.decomposition_level) + " and padding is disabled");
  }
  const auto x = wavelet::symmetric_pad(signal, padded);
  auto coeffs = wavelet::packet_decompose(x, cfg.decomposition_level);

  if (cfg.wavelet_threshold > 0.0) {
    const std::size_t len = padded / block;
    if (cfg.threshold_scope == ThresholdScope::global) {
      double peak = 0.0;
      for (double c : coeffs) peak = std::max(peak, std::abs(c));
      const double thr = cfg.wavelet_threshold * peak;
      for (double& c : coeffs) c = wavelet::shrink(c, thr, cfg.threshold_mode);
    } else {
      for (std::size_t node = 0; node < block; ++node) {
        std::span<double> band(coeffs.data() + node * len, len);
        double peak = 0.0;
        for (double c : band) peak = std::max(peak, std::abs(c));
        const double thr = cfg.wavelet_threshold * peak;
        for (double& c : band) c = wavelet::shrink(c, thr, cfg.threshold_mode);
      }
    }
  }

  auto y = wavelet::packet_reconstruct(coeffs, cfg.decomposition_level);
  y.resize(n);
  return y;
}

}  // namespace gaitcast
