#pragma once

// Butterworth IIR design (analog prototype + bilinear transform) realised as a
// cascade of second-order sections, plus a first-order section for odd
// low-pass orders.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"

namespace gaitcast {

enum class FilterKind { lowpass, bandpass };

struct FilterConfig {
  int order = 7;
  FilterKind kind = FilterKind::bandpass;
  double low_hz = 20.0;    // cutoff for lowpass, lower edge for bandpass
  double high_hz = 450.0;  // upper edge for bandpass, ignored for lowpass
  double sample_rate_hz = 1926.0;

  void validate() const {
    if (order < 1) throw ConfigError("filter order must be >= 1");
    if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz)) {
      throw ConfigError("filter sample_rate_hz must be positive");
    }
    const double nyquist = sample_rate_hz / 2.0;
    auto inside = [&](double f) { return f > 0.0 && f < nyquist; };
    if (!inside(low_hz)) {
      throw ConfigError("filter cutoff " + std::to_string(low_hz) +
                        " Hz outside (0, Nyquist=" + std::to_string(nyquist) + ")");
    }
    if (kind == FilterKind::bandpass) {
      if (!inside(high_hz)) {
        throw ConfigError("filter cutoff " + std::to_string(high_hz) +
                          " Hz outside (0, Nyquist=" + std::to_string(nyquist) + ")");
      }
      if (!(low_hz < high_hz)) throw ConfigError("bandpass requires low_hz < high_hz");
    }
  }
};

/// One biquad: y = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2).
/// A first-order section has b2 = a2 = 0.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;

  std::complex<double> response(std::complex<double> z) const {
    const auto zi = 1.0 / z;
    return (b0 + zi * (b1 + zi * b2)) / (1.0 + zi * (a1 + zi * a2));
  }
};

class SosFilter {
 public:
  SosFilter() = default;
  explicit SosFilter(std::vector<Biquad> sections) : sections_(std::move(sections)) {}

  const std::vector<Biquad>& sections() const { return sections_; }

  /// Complex frequency response at `freq_hz`.
  std::complex<double> response(double freq_hz, double sample_rate_hz) const {
    const double w = 2.0 * std::numbers::pi * freq_hz / sample_rate_hz;
    const std::complex<double> z = std::polar(1.0, w);
    std::complex<double> h = 1.0;
    for (const auto& s : sections_) h *= s.response(z);
    return h;
  }

  double magnitude(double freq_hz, double sample_rate_hz) const {
    return std::abs(response(freq_hz, sample_rate_hz));
  }

  /// Causal single pass from zero initial state (transposed direct form II).
  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(x.begin(), x.end());
    for (const auto& s : sections_) {
      double z1 = 0.0, z2 = 0.0;
      for (double& v : y) {
        const double in = v;
        const double out = s.b0 * in + z1;
        z1 = s.b1 * in - s.a1 * out + z2;
        z2 = s.b2 * in - s.a2 * out;
        v = out;
      }
    }
    for (double v : y) {
      if (!std::isfinite(v)) throw NumericError("butterworth filter produced a non-finite sample");
    }
    return y;
  }

 private:
  std::vector<Biquad> sections_;
};

namespace detail {

using cplx = std::complex<double>;

inline cplx bilinear(cplx s, double fs) { return (2.0 * fs + s) / (2.0 * fs - s); }

// Splits poles into conjugate pairs (one representative with imag > 0) and
// real poles.
inline void split_poles(const std::vector<cplx>& poles, std::vector<cplx>& pairs,
                        std::vector<double>& reals) {
  constexpr double kImagTol = 1e-10;
  for (const auto& p : poles) {
    if (std::abs(p.imag()) <= kImagTol * std::max(1.0, std::abs(p))) {
      reals.push_back(p.real());
    } else if (p.imag() > 0.0) {
      pairs.push_back(p);
    }
  }
}

}  // namespace detail

/// Designs a digital Butterworth filter. The bandpass design has order
/// 2*cfg.order (cfg.order sections), matching the usual band transform.
inline SosFilter design_butterworth(const FilterConfig& cfg) {
  using detail::cplx;
  cfg.validate();
  const int n = cfg.order;
  const double fs = cfg.sample_rate_hz;
  const double pi = std::numbers::pi;
  auto warp = [&](double f) { return 2.0 * fs * std::tan(pi * f / fs); };

  // Normalised analog prototype poles on the left half of the unit circle.
  std::vector<cplx> proto;
  for (int k = 0; k < n; ++k) {
    const double theta = pi * (2.0 * k + n + 1) / (2.0 * n);
    proto.push_back(std::polar(1.0, theta));
  }

  std::vector<cplx> zpoles;
  std::vector<Biquad> sections;
  double ref_freq = 0.0;

  if (cfg.kind == FilterKind::lowpass) {
    const double wc = warp(cfg.low_hz);
    for (const auto& p : proto) zpoles.push_back(detail::bilinear(p * wc, fs));
    std::vector<cplx> pairs;
    std::vector<double> reals;
    detail::split_poles(zpoles, pairs, reals);
    for (const auto& p : pairs) {
      sections.push_back({1.0, 2.0, 1.0, -2.0 * p.real(), std::norm(p)});
    }
    for (std::size_t i = 0; i + 1 < reals.size(); i += 2) {
      sections.push_back({1.0, 2.0, 1.0, -(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]});
    }
    if (reals.size() % 2 == 1) sections.push_back({1.0, 1.0, 0.0, -reals.back(), 0.0});
    ref_freq = 0.0;
  } else {
    const double wl = warp(cfg.low_hz);
    const double wh = warp(cfg.high_hz);
    const double bw = wh - wl;
    const double w0sq = wl * wh;
    for (const auto& p : proto) {
      // s^2 - p*bw*s + w0^2 = 0
      const cplx b = p * bw;
      const cplx disc = std::sqrt(b * b - 4.0 * w0sq);
      zpoles.push_back(detail::bilinear((b + disc) / 2.0, fs));
      zpoles.push_back(detail::bilinear((b - disc) / 2.0, fs));
    }
    std::vector<cplx> pairs;
    std::vector<double> reals;
    detail::split_poles(zpoles, pairs, reals);
    // Each section gets one zero at z = 1 and one at z = -1.
    for (const auto& p : pairs) {
      sections.push_back({1.0, 0.0, -1.0, -2.0 * p.real(), std::norm(p)});
    }
    for (std::size_t i = 0; i + 1 < reals.size(); i += 2) {
      sections.push_back({1.0, 0.0, -1.0, -(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]});
    }
    if (reals.size() % 2 == 1) {
      throw NumericError("bandpass design produced an unpaired real pole");
    }
    // Unity gain at the digital image of the analog centre frequency.
    ref_freq = fs / pi * std::atan(std::sqrt(w0sq) / (2.0 * fs));
  }

  // Each section is scaled to unit gain at the reference frequency, which
  // keeps intermediate signal levels bounded in the cascade.
  const cplx z_ref = std::polar(1.0, 2.0 * pi * ref_freq / fs);
  for (auto& s : sections) {
    const double gain = std::abs(s.response(z_ref));
    if (!(gain > 0.0) || !std::isfinite(gain)) throw NumericError("degenerate butterworth gain");
    s.b0 /= gain;
    s.b1 /= gain;
    s.b2 /= gain;
  }
  return SosFilter(std::move(sections));
}

inline std::vector<double> butterworth_filter(std::span<const double> signal,
                                              const FilterConfig& cfg) {
  if (signal.empty()) throw ArgumentError("butterworth_filter: empty signal");
  return design_butterworth(cfg).apply(signal);
}

}  // namespace gaitcast
