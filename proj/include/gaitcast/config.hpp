#pragma once

// Run configuration for the command-line tool: one JSON document with a
// section per module. Every key is optional (defaults below); unknown keys
// and wrongly typed values are rejected with the offending path.
//
//   {
//     "seed": 0, "threads": 1, "split_ratio": 0.8,
//     "synth":      {"cycles": 10, "gait": "DNS", "sample_rate_hz": 1926},
//     "preprocess": {"baseline": true, "denoise": true, "filter": true, "normalize": true},
//     "denoise":    {"wavelet_threshold": 0.08, "decomposition_level": 8, "threshold_mode": "soft",
//                    "threshold_scope": "global", "pad": true},
//     "filter":     {"order": 7, "kind": "bandpass", "low_hz": 20, "high_hz": 450, "sample_rate_hz": 1926},
//     "window":     {"window_len": 100, "overlap": 50, "zc_threshold": 0, "scaler_scope": "record"},
//     "gpr":        {"noise_variance": 1e-6, "signal_variance_bounds": [1e-3, 1e3],
//                    "length_scale_bounds": [1e-2, 1e2], "starts": 5, "max_train_rows": 2000},
//     "xlstm":      {... XlstmConfig fields except seed ...},
//     "forecast":   {... ForecastConfig fields except seed ..., "targets": [], "origins": 4,
//                    "fine_tune_epochs": 10}
//   }
//
// The top-level seed drives every stochastic stage.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/features.hpp"
#include "gaitcast/gpr.hpp"
#include "gaitcast/ingest.hpp"
#include "gaitcast/lag_forecaster.hpp"
#include "gaitcast/preprocess.hpp"
#include "gaitcast/xlstm.hpp"

namespace gaitcast {

struct SynthConfig {
  int cycles = 10;
  GaitLabel gait = GaitLabel::DNS;
  double sample_rate_hz = kCanonicalSampleRateHz;
};

enum class ScalerScope { record, corpus };

inline std::string to_string(ScalerScope s) { return s == ScalerScope::record ? "record" : "corpus"; }

struct WindowConfig {
  WindowSpec spec;
  double zc_threshold = 0.0;
  ScalerScope scaler_scope = ScalerScope::record;
};

struct GprConfig {
  double noise_variance = 1e-6;
  std::array<double, 2> signal_variance_bounds = {KernelBounds::kSignalVarianceMin, KernelBounds::kSignalVarianceMax};
  std::array<double, 2> length_scale_bounds = {KernelBounds::kLengthScaleMin, KernelBounds::kLengthScaleMax};
  int starts = 5;
  int max_train_rows = 2000;

  OptimizeOptions options() const {
    OptimizeOptions o;
    o.starts = starts;
    o.signal_variance_bounds = signal_variance_bounds;
    o.length_scale_bounds = length_scale_bounds;
    return o;
  }
};

struct ForecastRunConfig {
  ForecastConfig model;
  std::vector<std::string> targets;  // empty: all 16 series
  int origins = 4;                   // forecast origins per target in the held-out tail
  int fine_tune_epochs = 10;         // used when a pretraining record is given
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  double split_ratio = 0.8;
  SynthConfig synth;
  PreprocessConfig preprocess;
  WindowConfig window;
  GprConfig gpr;
  XlstmConfig xlstm;
  ForecastRunConfig forecast;

  /// Copies the run seed into the module configs.
  void propagate_seed() {
    xlstm.seed = seed;
    forecast.model.seed = seed;
  }

  void validate() const {
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must be in (0, 1)");
    if (synth.cycles < 1) throw ConfigError("synth.cycles must be >= 1");
    if (!(synth.sample_rate_hz > 0.0) || !std::isfinite(synth.sample_rate_hz)) {
      throw ConfigError("synth.sample_rate_hz must be positive");
    }
    preprocess.validate();
    window.spec.validate();
    if (!std::isfinite(window.zc_threshold) || window.zc_threshold < 0.0) {
      throw ConfigError("window.zc_threshold must be >= 0");
    }
    auto check_bounds = [](const std::array<double, 2>& b, double lo, double hi, const char* name) {
      if (!(b[0] >= lo && b[0] <= b[1] && b[1] <= hi)) {
        throw ConfigError(std::string("gpr.") + name + " must satisfy " + std::to_string(lo) + " <= lo <= hi <= " +
                          std::to_string(hi));
      }
    };
    check_bounds(gpr.signal_variance_bounds, KernelBounds::kSignalVarianceMin, KernelBounds::kSignalVarianceMax,
                 "signal_variance_bounds");
    check_bounds(gpr.length_scale_bounds, KernelBounds::kLengthScaleMin, KernelBounds::kLengthScaleMax,
                 "length_scale_bounds");
    if (!(gpr.noise_variance >= KernelBounds::kNoiseVarianceMin) || !std::isfinite(gpr.noise_variance)) {
      throw ConfigError("gpr.noise_variance must be >= 1e-10");
    }
    if (gpr.starts < 1) throw ConfigError("gpr.starts must be >= 1");
    if (gpr.max_train_rows < 2) throw ConfigError("gpr.max_train_rows must be >= 2");
    xlstm.validate();
    if (xlstm.input_dim != 54 || xlstm.output_dim != 16) {
      throw ConfigError("xlstm: input_dim/output_dim must be 54/16 for record features");
    }
    forecast.model.validate();
    for (const auto& t : forecast.targets) parse_series_name(t);
    if (forecast.origins < 1) throw ConfigError("forecast.origins must be >= 1");
    if (forecast.fine_tune_epochs < 0) throw ConfigError("forecast.fine_tune_epochs must be >= 0");
  }

  /// (joint, quantity) of "angleL_kneeFlex" style names.
  static std::pair<int, Quantity> parse_series_name(const std::string& name) {
    for (int j = 0; j < kJoints; ++j) {
      for (Quantity q : {Quantity::angle, Quantity::torque}) {
        if (series_name(j, q) == name) return {j, q};
      }
    }
    throw ConfigError("forecast.targets: unknown series '" + name + "'");
  }

  std::vector<std::pair<int, Quantity>> forecast_series() const {
    std::vector<std::pair<int, Quantity>> out;
    if (forecast.targets.empty()) {
      for (Quantity q : {Quantity::angle, Quantity::torque}) {
        for (int j = 0; j < kJoints; ++j) out.emplace_back(j, q);
      }
    } else {
      for (const auto& t : forecast.targets) out.push_back(parse_series_name(t));
    }
    return out;
  }
};

namespace detail {

// Reads keys of one JSON object, remembering which were consumed.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_unsigned() == false && v.get<long long>() < 0) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where(key) + ": unexpected value " + v.dump());
    }
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  std::string where(const std::string& key = "") const {
    const std::string p = key.empty() ? path_ : (path_.empty() ? key : path_ + "." + key);
    return p.empty() ? "config" : p;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + where(it.key()) + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
E parse_enum(Section& s, const std::string& key, E current, std::initializer_list<std::pair<const char*, E>> names) {
  std::string v;
  for (const auto& [n, e] : names) {
    if (e == current) v = n;
  }
  s.read(key, v);
  for (const auto& [n, e] : names) {
    if (v == n) return e;
  }
  throw ConfigError(s.where(key) + ": unknown value '" + v + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  auto xl = to_json(c.xlstm);
  xl.erase("seed");
  auto fc = to_json(c.forecast.model);
  fc.erase("seed");
  fc["targets"] = c.forecast.targets;
  fc["origins"] = c.forecast.origins;
  fc["fine_tune_epochs"] = c.forecast.fine_tune_epochs;
  const auto& d = c.preprocess.denoise_cfg;
  const auto& f = c.preprocess.filter_cfg;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"split_ratio", c.split_ratio},
      {"synth", {{"cycles", c.synth.cycles}, {"gait", to_string(c.synth.gait)}, {"sample_rate_hz", c.synth.sample_rate_hz}}},
      {"preprocess",
       {{"baseline", c.preprocess.baseline},
        {"denoise", c.preprocess.denoise},
        {"filter", c.preprocess.filter},
        {"normalize", c.preprocess.normalize}}},
      {"denoise",
       {{"wavelet_threshold", d.wavelet_threshold},
        {"decomposition_level", d.decomposition_level},
        {"threshold_mode", d.threshold_mode == ThresholdMode::soft ? "soft" : "hard"},
        {"threshold_scope", d.threshold_scope == ThresholdScope::global ? "global" : "subband"},
        {"pad", d.pad}}},
      {"filter",
       {{"order", f.order},
        {"kind", f.kind == FilterKind::bandpass ? "bandpass" : "lowpass"},
        {"low_hz", f.low_hz},
        {"high_hz", f.high_hz},
        {"sample_rate_hz", f.sample_rate_hz}}},
      {"window",
       {{"window_len", c.window.spec.window_len},
        {"overlap", c.window.spec.overlap},
        {"zc_threshold", c.window.zc_threshold},
        {"scaler_scope", to_string(c.window.scaler_scope)}}},
      {"gpr",
       {{"noise_variance", c.gpr.noise_variance},
        {"signal_variance_bounds", c.gpr.signal_variance_bounds},
        {"length_scale_bounds", c.gpr.length_scale_bounds},
        {"starts", c.gpr.starts},
        {"max_train_rows", c.gpr.max_train_rows}}},
      {"xlstm", xl},
      {"forecast", fc},
  };
}

/// Overlays `j` on `base`. Does not validate.
inline RunConfig merge_config(RunConfig c, const nlohmann::json& j) {
  using detail::Section;
  Section root(j, "");
  root.read("seed", c.seed);
  root.read("threads", c.threads);
  root.read("split_ratio", c.split_ratio);

  if (root.has("synth")) {
    auto s = root.child("synth");
    s.read("cycles", c.synth.cycles);
    c.synth.gait = detail::parse_enum(s, "gait", c.synth.gait, {{"DNS", GaitLabel::DNS}, {"UPS", GaitLabel::UPS}});
    s.read("sample_rate_hz", c.synth.sample_rate_hz);
    s.finish();
  }
  if (root.has("preprocess")) {
    auto s = root.child("preprocess");
    s.read("baseline", c.preprocess.baseline);
    s.read("denoise", c.preprocess.denoise);
    s.read("filter", c.preprocess.filter);
    s.read("normalize", c.preprocess.normalize);
    s.finish();
  }
  if (root.has("denoise")) {
    auto s = root.child("denoise");
    auto& d = c.preprocess.denoise_cfg;
    s.read("wavelet_threshold", d.wavelet_threshold);
    s.read("decomposition_level", d.decomposition_level);
    d.threshold_mode =
        detail::parse_enum(s, "threshold_mode", d.threshold_mode, {{"soft", ThresholdMode::soft}, {"hard", ThresholdMode::hard}});
    d.threshold_scope = detail::parse_enum(s, "threshold_scope", d.threshold_scope,
                                           {{"global", ThresholdScope::global}, {"subband", ThresholdScope::subband}});
    s.read("pad", d.pad);
    s.finish();
  }
  if (root.has("filter")) {
    auto s = root.child("filter");
    auto& f = c.preprocess.filter_cfg;
    s.read("order", f.order);
    f.kind = detail::parse_enum(s, "kind", f.kind, {{"bandpass", FilterKind::bandpass}, {"lowpass", FilterKind::lowpass}});
    s.read("low_hz", f.low_hz);
    s.read("high_hz", f.high_hz);
    s.read("sample_rate_hz", f.sample_rate_hz);
    s.finish();
  }
  if (root.has("window")) {
    auto s = root.child("window");
    s.read("window_len", c.window.spec.window_len);
    s.read("overlap", c.window.spec.overlap);
    s.read("zc_threshold", c.window.zc_threshold);
    c.window.scaler_scope = detail::parse_enum(s, "scaler_scope", c.window.scaler_scope,
                                               {{"record", ScalerScope::record}, {"corpus", ScalerScope::corpus}});
    s.finish();
  }
  if (root.has("gpr")) {
    auto s = root.child("gpr");
    s.read("noise_variance", c.gpr.noise_variance);
    s.read("signal_variance_bounds", c.gpr.signal_variance_bounds);
    s.read("length_scale_bounds", c.gpr.length_scale_bounds);
    s.read("starts", c.gpr.starts);
    s.read("max_train_rows", c.gpr.max_train_rows);
    s.finish();
  }
  if (root.has("xlstm")) {
    auto s = root.child("xlstm");
    auto& x = c.xlstm;
    s.read("input_dim", x.input_dim);
    s.read("output_dim", x.output_dim);
    s.read("hidden_size", x.hidden_size);
    s.read("num_layers", x.num_layers);
    s.read("num_heads", x.num_heads);
    s.read("conv_kernel", x.conv_kernel);
    if (s.has("block_pattern")) {
      std::string p;
      s.read("block_pattern", p);
      x.block_pattern = parse_block_pattern(p);
    }
    s.read("slstm_proj_factor", x.slstm_proj_factor);
    s.read("mlstm_proj_factor", x.mlstm_proj_factor);
    s.read("learning_rate", x.learning_rate);
    s.read("train_steps", x.train_steps);
    s.read("seq_len", x.seq_len);
    s.finish();
  }
  if (root.has("forecast")) {
    auto s = root.child("forecast");
    auto& m = c.forecast.model;
    s.read("horizon", m.horizon);
    s.read("context_len", m.context_len);
    s.read("num_samples", m.num_samples);
    s.read("lags", m.lags.lags);
    s.read("d_model", m.d_model);
    s.read("num_layers", m.num_layers);
    s.read("num_heads", m.num_heads);
    s.read("ffn_mult", m.ffn_mult);
    s.read("max_epochs", m.max_epochs);
    s.read("patience", m.patience);
    s.read("learning_rate", m.learning_rate);
    s.read("batch_size", m.batch_size);
    s.read("slices_per_epoch", m.slices_per_epoch);
    s.read("val_slices", m.val_slices);
    s.read("val_fraction", m.val_fraction);
    s.read("targets", c.forecast.targets);
    s.read("origins", c.forecast.origins);
    s.read("fine_tune_epochs", c.forecast.fine_tune_epochs);
    s.finish();
  }
  root.finish();
  c.propagate_seed();
  return c;
}

/// Parses and validates a complete configuration document.
inline RunConfig parse_config(const nlohmann::json& j) {
  auto c = merge_config(RunConfig{}, j);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_config(j);
}

}  // namespace gaitcast
