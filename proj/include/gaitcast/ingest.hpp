#pragma once

// Canonical on-disk record layout, univariate decoupling of joint targets and
// a synthetic gait generator.
//
// Record CSV: header
//   t,emg1,...,emg9,angle<J>...,torque<J>...
// with J running over kJointNames (left leg first). 26 columns in total. `t`
// is seconds since the first sample and is informational only. When the sEMG
// and joint streams have different lengths the shorter stream's fields are
// left empty on the trailing rows. A sidecar `<stem>.json` carries
// {subject_id, gait_label, sample_rate_hz}.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gaitcast/butterworth.hpp"
#include "gaitcast/error.hpp"
#include "gaitcast/random.hpp"

namespace gaitcast {

inline constexpr int kEmgChannels = 9;
inline constexpr int kJoints = 8;
inline constexpr double kCanonicalSampleRateHz = 1926.0;

inline constexpr std::array<std::string_view, kJoints> kJointNames = {
    "L_hipAdd", "L_hipFlex", "L_kneeFlex", "L_ankleFlex",
    "R_hipAdd", "R_hipFlex", "R_kneeFlex", "R_ankleFlex"};

enum class GaitLabel { DNS, UPS };

inline std::string to_string(GaitLabel g) { return g == GaitLabel::DNS ? "DNS" : "UPS"; }

inline GaitLabel parse_gait_label(std::string_view s) {
  if (s == "DNS") return GaitLabel::DNS;
  if (s == "UPS") return GaitLabel::UPS;
  throw FormatError("unknown gait_label '" + std::string(s) + "' (expected DNS or UPS)");
}

enum class Quantity { angle, torque };

inline std::string to_string(Quantity q) { return q == Quantity::angle ? "angle" : "torque"; }

struct RawRecord {
  std::string subject_id;
  GaitLabel gait_label = GaitLabel::DNS;
  Eigen::MatrixXd semg;     // [T x 9], millivolts
  Eigen::MatrixXd angles;   // [T_j x 8], degrees
  Eigen::MatrixXd torques;  // [T_j x 8], newton-meters
  double sample_rate_hz = kCanonicalSampleRateHz;

  Eigen::Index emg_samples() const { return semg.rows(); }
  Eigen::Index joint_samples() const { return angles.rows(); }

  void validate() const {
    if (semg.cols() != kEmgChannels) {
      throw DimensionError("semg must have 9 columns, got " + std::to_string(semg.cols()));
    }
    if (angles.cols() != kJoints || torques.cols() != kJoints) {
      throw DimensionError("angles and torques must have 8 columns");
    }
    if (angles.rows() != torques.rows()) {
      throw DimensionError("angles and torques must have the same row count");
    }
    if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz)) {
      throw ArgumentError("sample_rate_hz must be positive");
    }
    if (!semg.allFinite() || !angles.allFinite() || !torques.allFinite()) {
      throw ArgumentError("record contains non-finite values");
    }
  }

  friend bool operator==(const RawRecord& a, const RawRecord& b) {
    auto same = [](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return a.subject_id == b.subject_id && a.gait_label == b.gait_label &&
           a.sample_rate_hz == b.sample_rate_hz && same(a.semg, b.semg) &&
           same(a.angles, b.angles) && same(a.torques, b.torques);
  }
};

struct UnivariateSeries {
  std::vector<double> values;
  double dt_ms = 1000.0 / kCanonicalSampleRateHz;
  std::string name;

  void validate() const {
    if (values.empty()) throw ArgumentError("series '" + name + "' is empty");
    if (!(dt_ms > 0.0)) throw ArgumentError("series dt_ms must be positive");
    for (double v : values) {
      if (!std::isfinite(v)) throw ArgumentError("series '" + name + "' has non-finite values");
    }
  }
};

/// e.g. "angleL_kneeFlex".
inline std::string series_name(int joint, Quantity q) {
  return to_string(q) + std::string(kJointNames.at(static_cast<std::size_t>(joint)));
}

inline std::vector<std::string> record_header() {
  std::vector<std::string> cols{"t"};
  for (int c = 1; c <= kEmgChannels; ++c) cols.push_back("emg" + std::to_string(c));
  for (int j = 0; j < kJoints; ++j) cols.push_back(series_name(j, Quantity::angle));
  for (int j = 0; j < kJoints; ++j) cols.push_back(series_name(j, Quantity::torque));
  return cols;
}

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw FormatError("cannot format value");
  return std::string(buf.data(), ptr);
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".json");
  return p;
}

inline void write_record(const RawRecord& r, const std::filesystem::path& path) {
  r.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const auto header = record_header();
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  const Eigen::Index rows = std::max(r.emg_samples(), r.joint_samples());
  for (Eigen::Index i = 0; i < rows; ++i) {
    out << format_double(static_cast<double>(i) / r.sample_rate_hz);
    for (int c = 0; c < kEmgChannels; ++c) {
      out << ',';
      if (i < r.emg_samples()) out << format_double(r.semg(i, c));
    }
    for (const auto* m : {&r.angles, &r.torques}) {
      for (int j = 0; j < kJoints; ++j) {
        out << ',';
        if (i < r.joint_samples()) out << format_double((*m)(i, j));
      }
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");

  nlohmann::json meta = {{"subject_id", r.subject_id},
                         {"gait_label", to_string(r.gait_label)},
                         {"sample_rate_hz", r.sample_rate_hz}};
  std::ofstream side(sidecar_path(path));
  if (!side) throw IoError("cannot write sidecar for '" + path.string() + "'");
  side << meta.dump(2) << '\n';
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline double parse_number(std::string_view s, std::size_t row, std::string_view col) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError("row " + std::to_string(row) + ", column '" + std::string(col) +
                     "': cannot parse '" + std::string(s) + "'");
  }
  if (!std::isfinite(v)) {
    throw ParseError("row " + std::to_string(row) + ", column '" + std::string(col) +
                     "': non-finite value");
  }
  return v;
}

inline bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

}  // namespace detail

inline RawRecord parse_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open record '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw FormatError("record '" + path.string() + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto cols = detail::split_csv(line);
  const auto expected = record_header();

  const auto emg_cols = std::count_if(cols.begin(), cols.end(), [](std::string_view c) {
    return c.starts_with("emg");
  });
  if (emg_cols != kEmgChannels) {
    throw DimensionError("expected 9 sEMG columns, found " + std::to_string(emg_cols));
  }
  if (cols.size() != expected.size()) {
    throw DimensionError("expected " + std::to_string(expected.size()) + " columns, found " +
                         std::to_string(cols.size()));
  }
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] != expected[i]) {
      throw FormatError("header column " + std::to_string(i) + " is '" + std::string(cols[i]) +
                        "', expected '" + expected[i] + "'");
    }
  }

  std::vector<double> emg, joints;
  std::size_t emg_rows = 0, joint_rows = 0;
  bool emg_ended = false, joints_ended = false;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_csv(line);
    if (fields.size() != expected.size()) {
      throw DimensionError("row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                           " fields, expected " + std::to_string(expected.size()));
    }
    detail::parse_number(fields[0], row, expected[0]);

    auto read_block = [&](std::size_t first, std::size_t count, bool& ended, std::size_t& nrows,
                          std::vector<double>& dst) {
      const bool all_blank = std::all_of(fields.begin() + static_cast<std::ptrdiff_t>(first),
                                         fields.begin() + static_cast<std::ptrdiff_t>(first + count),
                                         detail::blank);
      if (all_blank) {
        ended = true;
        return;
      }
      if (ended) {
        throw FormatError("row " + std::to_string(row) +
                          ": values resume after a blank block in column '" + expected[first] + "'");
      }
      for (std::size_t c = first; c < first + count; ++c) {
        dst.push_back(detail::parse_number(fields[c], row, expected[c]));
      }
      ++nrows;
    };
    read_block(1, kEmgChannels, emg_ended, emg_rows, emg);
    read_block(1 + kEmgChannels, 2 * kJoints, joints_ended, joint_rows, joints);
    ++row;
  }

  RawRecord r;
  r.semg.resize(static_cast<Eigen::Index>(emg_rows), kEmgChannels);
  for (std::size_t i = 0; i < emg_rows; ++i) {
    for (int c = 0; c < kEmgChannels; ++c) {
      r.semg(static_cast<Eigen::Index>(i), c) = emg[i * kEmgChannels + static_cast<std::size_t>(c)];
    }
  }
  r.angles.resize(static_cast<Eigen::Index>(joint_rows), kJoints);
  r.torques.resize(static_cast<Eigen::Index>(joint_rows), kJoints);
  for (std::size_t i = 0; i < joint_rows; ++i) {
    for (int j = 0; j < kJoints; ++j) {
      const auto ii = static_cast<Eigen::Index>(i);
      r.angles(ii, j) = joints[i * 2 * kJoints + static_cast<std::size_t>(j)];
      r.torques(ii, j) = joints[i * 2 * kJoints + kJoints + static_cast<std::size_t>(j)];
    }
  }

  const auto side = sidecar_path(path);
  std::ifstream meta_in(side);
  if (!meta_in) throw FormatError("missing metadata sidecar '" + side.string() + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_in);
    r.subject_id = meta.at("subject_id").get<std::string>();
    r.gait_label = parse_gait_label(meta.at("gait_label").get<std::string>());
    r.sample_rate_hz = meta.at("sample_rate_hz").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad sidecar '" + side.string() + "': " + e.what());
  }
  r.validate();
  return r;
}

inline UnivariateSeries to_univariate(const RawRecord& r, int joint, Quantity q) {
  if (joint < 0 || joint >= kJoints) {
    throw RangeError("joint index " + std::to_string(joint) + " outside [0, 8)");
  }
  const auto& m = q == Quantity::angle ? r.angles : r.torques;
  UnivariateSeries s;
  s.values.resize(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) s.values[static_cast<std::size_t>(i)] = m(i, joint);
  s.dt_ms = 1000.0 / r.sample_rate_hz;
  s.name = series_name(joint, q);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic gait

namespace synth {

inline constexpr double kGaitFrequencyHz = 1.0;
inline constexpr int kHarmonics = 3;

// Per joint type (hipAdd, hipFlex, kneeFlex, ankleFlex).
inline constexpr std::array<double, 4> kAngleAmplitudeDeg = {6.0, 22.0, 30.0, 12.0};
inline constexpr std::array<double, 4> kAngleOffsetDeg = {0.0, 12.0, 28.0, -2.0};
inline constexpr std::array<double, 4> kTorqueScaleNm = {25.0, 55.0, 40.0, 90.0};
inline constexpr std::array<double, kHarmonics> kHarmonicWeight = {1.0, 0.4, 0.15};

// Joint driving each sEMG channel and which velocity sign activates it.
inline constexpr std::array<int, kEmgChannels> kChannelJoint = {0, 1, 2, 3, 4, 5, 6, 7, 2};
inline constexpr std::array<double, kEmgChannels> kChannelSign = {1, 1, -1, 1, 1, -1, 1, -1, 1};

inline constexpr double kEnvelopeFloorMv = 0.05;
inline constexpr double kEnvelopeGainMv = 0.6;
inline constexpr double kBaselineOffsetMv = 0.02;

inline Eigen::Index sample_count(int cycles, double sample_rate_hz) {
  return static_cast<Eigen::Index>(std::llround(cycles * sample_rate_hz / kGaitFrequencyHz));
}

}  // namespace synth

/// Deterministic synthetic gait record. Joint angles are sums of three
/// harmonics of the gait frequency, torques mix the scaled angular velocity
/// with a phase-shifted fundamental, and each sEMG channel is band-limited
/// noise whose envelope follows the half-wave rectified velocity of its joint.
inline RawRecord synth_gait(std::uint64_t seed, int cycles,
                            double sample_rate_hz = kCanonicalSampleRateHz,
                            GaitLabel label = GaitLabel::DNS) {
  using namespace synth;
  if (cycles < 1) throw ArgumentError("synth_gait: cycles must be >= 1");
  if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz)) {
    throw ArgumentError("synth_gait: sample_rate_hz must be positive");
  }
  Rng rng(seed);
  const Eigen::Index n = sample_count(cycles, sample_rate_hz);
  const double w = 2.0 * std::numbers::pi * kGaitFrequencyHz;
  const double ups_gain = label == GaitLabel::UPS ? 1.35 : 1.0;

  struct Harmonic {
    double amp, phase;
  };
  std::array<std::array<Harmonic, kHarmonics>, kJoints> harmonics{};
  std::array<double, kJoints> torque_phase{};
  std::array<double, kJoints> vel_scale{};
  for (int j = 0; j < kJoints; ++j) {
    const int type = j % 4;
    const double leg_shift = j < 4 ? 0.0 : std::numbers::pi;
    const double amp = kAngleAmplitudeDeg[static_cast<std::size_t>(type)] *
                       (type == 1 || type == 2 ? ups_gain : 1.0);
    double vmax = 0.0;
    for (int h = 0; h < kHarmonics; ++h) {
      auto& hh = harmonics[static_cast<std::size_t>(j)][static_cast<std::size_t>(h)];
      hh.amp = amp * kHarmonicWeight[static_cast<std::size_t>(h)] * rng.uniform(0.8, 1.2);
      hh.phase = rng.uniform(0.0, 2.0 * std::numbers::pi) * (h == 0 ? 0.1 : 1.0) +
                 leg_shift * (h + 1);
      vmax += hh.amp * w * (h + 1);
    }
    vel_scale[static_cast<std::size_t>(j)] = vmax;
    torque_phase[static_cast<std::size_t>(j)] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  RawRecord r;
  r.subject_id = "synth-" + std::to_string(seed);
  r.gait_label = label;
  r.sample_rate_hz = sample_rate_hz;
  r.angles.resize(n, kJoints);
  r.torques.resize(n, kJoints);
  Eigen::MatrixXd velocity(n, kJoints);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate_hz;
    for (int j = 0; j < kJoints; ++j) {
      const int type = j % 4;
      double angle = kAngleOffsetDeg[static_cast<std::size_t>(type)];
      double vel = 0.0;
      for (int h = 0; h < kHarmonics; ++h) {
        const auto& hh = harmonics[static_cast<std::size_t>(j)][static_cast<std::size_t>(h)];
        const double wh = w * (h + 1);
        angle += hh.amp * std::sin(wh * t + hh.phase);
        vel += hh.amp * wh * std::cos(wh * t + hh.phase);
      }
      const double vnorm = vel / vel_scale[static_cast<std::size_t>(j)];
      r.angles(i, j) = angle;
      velocity(i, j) = vnorm;
      r.torques(i, j) = kTorqueScaleNm[static_cast<std::size_t>(type)] *
                        (0.6 * vnorm + 0.4 * std::sin(w * t + torque_phase[static_cast<std::size_t>(j)]));
    }
  }

  // Band-limited carrier: white noise through a 30-250 Hz bandpass.
  FilterConfig band{2, FilterKind::bandpass, 30.0, 250.0, sample_rate_hz};
  const bool band_ok = 250.0 < sample_rate_hz / 2.0;
  const SosFilter carrier_filter = band_ok ? design_butterworth(band) : SosFilter{};
  r.semg.resize(n, kEmgChannels);
  for (int c = 0; c < kEmgChannels; ++c) {
    std::vector<double> noise(static_cast<std::size_t>(n));
    for (double& v : noise) v = rng.normal();
    auto carrier = carrier_filter.apply(noise);
    double ss = 0.0;
    for (double v : carrier) ss += v * v;
    const double rms = std::sqrt(ss / static_cast<double>(n));
    const double norm = rms > 0.0 ? 1.0 / rms : 1.0;
    const int j = kChannelJoint[static_cast<std::size_t>(c)];
    const double sign = kChannelSign[static_cast<std::size_t>(c)];
    for (Eigen::Index i = 0; i < n; ++i) {
      const double drive = std::max(0.0, sign * velocity(i, j));
      const double env = kEnvelopeFloorMv + kEnvelopeGainMv * drive;
      r.semg(i, c) = kBaselineOffsetMv + env * carrier[static_cast<std::size_t>(i)] * norm;
    }
  }
  r.validate();
  return r;
}

}  // namespace gaitcast
