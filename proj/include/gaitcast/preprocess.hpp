#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "gaitcast/butterworth.hpp"
#include "gaitcast/error.hpp"
#include "gaitcast/wavelet_packet.hpp"

namespace gaitcast {

/// Mean removal.
inline std::vector<double> baseline_correct(std::span<const double> signal) {
  if (signal.empty()) throw ArgumentError("baseline_correct: empty signal");
  // Two-pass mean keeps the residual mean at rounding level.
  double mean = 0.0;
  for (double v : signal) mean += v;
  mean /= static_cast<double>(signal.size());
  double resid = 0.0;
  for (double v : signal) resid += v - mean;
  mean += resid / static_cast<double>(signal.size());
  std::vector<double> out(signal.size());
  std::transform(signal.begin(), signal.end(), out.begin(), [&](double v) { return v - mean; });
  return out;
}

/// Divides by max|x|. An all-zero input is returned unchanged.
inline std::vector<double> maxabs_normalize(std::span<const double> signal) {
  double peak = 0.0;
  for (double v : signal) peak = std::max(peak, std::abs(v));
  std::vector<double> out(signal.begin(), signal.end());
  if (peak == 0.0) return out;
  for (double& v : out) v /= peak;
  // Division by the peak itself is exact, so the extremum maps to +-1.
  return out;
}

struct PreprocessConfig {
  bool baseline = true;
  bool denoise = true;
  bool filter = true;
  bool normalize = true;
  DenoiseConfig denoise_cfg;
  FilterConfig filter_cfg;

  void validate() const {
    denoise_cfg.validate();
    filter_cfg.validate();
  }
};

/// correct -> denoise -> filter -> normalize, each stage optional.
inline std::vector<double> preprocess_channel(std::span<const double> signal,
                                              const PreprocessConfig& cfg) {
  std::vector<double> x(signal.begin(), signal.end());
  if (cfg.baseline) x = baseline_correct(x);
  if (cfg.denoise) x = wpt_denoise(x, cfg.denoise_cfg);
  if (cfg.filter) x = butterworth_filter(x, cfg.filter_cfg);
  if (cfg.normalize) x = maxabs_normalize(x);
  return x;
}

}  // namespace gaitcast
