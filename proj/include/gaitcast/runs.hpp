#pragma once

// Experiment drivers behind the command-line tool. Each run writes its
// outputs plus `provenance.json` (command, resolved config, input paths and
// digests) into an output directory; replay() re-executes a run from that
// file alone.
//
// Directory layouts:
//   synth:    record.csv, record.json
//   pipeline: features.bin, targets.bin, targets_raw.bin, features.csv,
//             targets.csv, windows.csv, scalers.json
//   gpr:      metrics.json, predictions.csv, models/<output>.json
//   xlstm:    metrics.json, predictions.csv, loss.csv, checkpoint/
//   forecast: metrics.json, quantiles.csv, crps.csv, crps_box.csv,
//             train_curve.csv, samples.bin, truth.bin, forecasts.csv,
//             checkpoint/
//   eval:     eval.json

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gaitcast/checkpoint.hpp"
#include "gaitcast/config.hpp"
#include "gaitcast/features.hpp"
#include "gaitcast/gpr.hpp"
#include "gaitcast/ingest.hpp"
#include "gaitcast/lag_forecaster.hpp"
#include "gaitcast/parallel.hpp"
#include "gaitcast/pipeline.hpp"
#include "gaitcast/tensor_io.hpp"
#include "gaitcast/xlstm.hpp"

namespace gaitcast::runs {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kProvenanceFormat = "gaitcast-provenance-1";

/// Everything a command reads besides its config.
struct Inputs {
  std::vector<fs::path> records;  // synth writes none; pipeline reads one or more
  fs::path data;                  // pipeline output directory
  fs::path test_data;             // optional second pipeline directory
  fs::path pretrain;              // optional pretraining record (forecast)
  fs::path run;                   // run directory (eval)
};

// ---------------------------------------------------------------------------
// Helpers

/// Runs f, rethrowing library errors as StageError(name).
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e.what());
  } catch (const fs::filesystem_error& e) {
    throw StageError(name, e.what());
  } catch (const json::exception& e) {
    throw StageError(name, e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

/// FNV-1a over a file, or over the names and contents of the regular files
/// directly inside a directory (provenance.json excluded).
inline std::string digest(const fs::path& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_regular_file() && e.path().filename() != "provenance.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      feed(f.filename().string());
      feed(read_text(f));
    }
  } else {
    feed(read_text(p));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string output_name(std::size_t column) {
  return series_name(static_cast<int>(column / 2), column % 2 == 0 ? Quantity::angle : Quantity::torque);
}

inline json to_json(const Standardizer& s) {
  return {{"scope", s.scope}, {"mean", s.mean}, {"stddev", s.stddev}, {"zero_variance", s.zero_variance}};
}

inline Standardizer standardizer_from_json(const json& j) {
  Standardizer s;
  s.scope = j.at("scope").get<std::string>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  s.zero_variance = j.at("zero_variance").get<std::vector<bool>>();
  return s;
}

inline json metrics_json(const ErrorMetrics& m) { return {{"mae", m.mae}, {"rmse", m.rmse}}; }

inline json box_json(const BoxStats& b) {
  return {{"min", b.min}, {"q1", b.q1}, {"median", b.median}, {"q3", b.q3}, {"max", b.max}};
}

inline Tensor3 concat(const std::vector<Tensor3>& parts) {
  Tensor3 out(0, parts.front().d1, parts.front().d2);
  for (const auto& p : parts) {
    out.data.insert(out.data.end(), p.data.begin(), p.data.end());
    out.d0 += p.d0;
  }
  return out;
}

inline void write_provenance(const fs::path& out, const std::string& command, const RunConfig& cfg,
                             const Inputs& in) {
  json inputs = json::object();
  json digests = json::object();
  auto add = [&](const std::string& key, const fs::path& p) {
    if (p.empty()) return;
    const auto abs = fs::weakly_canonical(p).string();
    inputs[key] = abs;
    digests[abs] = digest(p);
  };
  if (!in.records.empty()) {
    json recs = json::array();
    for (const auto& r : in.records) {
      const auto abs = fs::weakly_canonical(r).string();
      recs.push_back(abs);
      digests[abs] = digest(r);
      const auto side = sidecar_path(r);
      if (fs::exists(side)) digests[fs::weakly_canonical(side).string()] = digest(side);
    }
    inputs["records"] = recs;
  }
  add("data", in.data);
  add("test_data", in.test_data);
  add("pretrain", in.pretrain);
  add("run", in.run);
  write_json(out / "provenance.json", {{"format", kProvenanceFormat},
                                        {"command", command},
                                        {"config", to_json(cfg)},
                                        {"inputs", inputs},
                                        {"input_digests", digests}});
}

// ---------------------------------------------------------------------------
// synth

/// Writes `<out>/record.csv` and its sidecar.
inline void run_synth(const RunConfig& cfg, const fs::path& out) {
  const auto r = stage("synth", [&] { return synth_gait(cfg.seed, cfg.synth.cycles, cfg.synth.sample_rate_hz, cfg.synth.gait); });
  stage("write", [&] {
    fs::create_directories(out);
    write_record(r, out / "record.csv");
    write_provenance(out, "synth", cfg, {});
  });
}

// ---------------------------------------------------------------------------
// pipeline

/// Tensors written by run_pipeline, read back.
struct Dataset {
  Tensor3 features;     // standardised [W x 9 x 6]
  Tensor3 targets;      // standardised [W x 8 x 2]
  Tensor3 targets_raw;  // original units
  std::vector<int> record_of;
  std::vector<Standardizer> feature_scalers;
  std::vector<Standardizer> target_scalers;  // indexed by record when scope is "record"

  const Standardizer& target_scaler(std::size_t window) const {
    return target_scalers.size() == 1 ? target_scalers.front()
                                      : target_scalers.at(static_cast<std::size_t>(record_of.at(window)));
  }
};

inline void run_pipeline(RunConfig cfg, const std::vector<fs::path>& records, const fs::path& out) {
  if (records.empty()) throw StageError("ingest", "no input record");
  std::vector<RawRecord> raw;
  for (const auto& p : records) raw.push_back(stage("ingest", [&] { return parse_record(p); }));

  std::vector<FeaturizeResult> parts;
  for (auto& r : raw) {
    // The band edges are checked against the record's own Nyquist rate.
    auto pre = cfg.preprocess;
    pre.filter_cfg.sample_rate_hz = r.sample_rate_hz;
    const auto clean = stage("preprocess", [&] { return preprocess_record(r, pre, static_cast<unsigned>(cfg.threads)); });
    parts.push_back(stage("featurize", [&] { return featurize(clean, cfg.window.spec, cfg.window.zc_threshold); }));
  }

  Dataset ds;
  std::vector<Tensor3> f_parts, t_parts;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    f_parts.push_back(parts[k].features.values);
    t_parts.push_back(parts[k].targets.values);
    ds.record_of.insert(ds.record_of.end(), parts[k].features.values.d0, static_cast<int>(k));
  }
  ds.targets_raw = concat(t_parts);
  stage("standardize", [&] {
    std::vector<Tensor3> fs_parts, ts_parts;
    if (cfg.window.scaler_scope == ScalerScope::corpus) {
      ds.feature_scalers = {Standardizer::fit(concat(f_parts), "corpus")};
      ds.target_scalers = {Standardizer::fit(ds.targets_raw, "corpus")};
      for (std::size_t k = 0; k < parts.size(); ++k) {
        fs_parts.push_back(ds.feature_scalers[0].apply(f_parts[k]));
        ts_parts.push_back(ds.target_scalers[0].apply(t_parts[k]));
      }
    } else {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        ds.feature_scalers.push_back(Standardizer::fit(f_parts[k], "record"));
        ds.target_scalers.push_back(Standardizer::fit(t_parts[k], "record"));
        fs_parts.push_back(ds.feature_scalers.back().apply(f_parts[k]));
        ts_parts.push_back(ds.target_scalers.back().apply(t_parts[k]));
      }
    }
    ds.features = concat(fs_parts);
    ds.targets = concat(ts_parts);
  });

  stage("write", [&] {
    fs::create_directories(out);
    save_tensor3(ds.features, out / "features.bin");
    save_tensor3(ds.targets, out / "targets.bin");
    save_tensor3(ds.targets_raw, out / "targets_raw.bin");
    write_tensor_csv(ds.features, out / "features.csv", false);
    write_tensor_csv(ds.targets, out / "targets.csv", true);
    std::ostringstream win;
    win << "window,record\n";
    for (std::size_t w = 0; w < ds.record_of.size(); ++w) win << w << ',' << ds.record_of[w] << '\n';
    write_text(out / "windows.csv", win.str());
    json sc = {{"scope", to_string(cfg.window.scaler_scope)}, {"features", json::array()}, {"targets", json::array()}};
    for (const auto& s : ds.feature_scalers) sc["features"].push_back(to_json(s));
    for (const auto& s : ds.target_scalers) sc["targets"].push_back(to_json(s));
    write_json(out / "scalers.json", sc);
    Inputs in;
    in.records = records;
    write_provenance(out, "pipeline", cfg, in);
  });
}

inline Dataset load_dataset(const fs::path& dir) {
  return stage("load", [&] {
    Dataset ds;
    ds.features = load_tensor3(dir / "features.bin");
    ds.targets = load_tensor3(dir / "targets.bin");
    ds.targets_raw = load_tensor3(dir / "targets_raw.bin");
    if (ds.features.d1 != static_cast<std::size_t>(kEmgChannels) ||
        ds.features.d2 != static_cast<std::size_t>(kFeatureCount) || ds.targets.d1 != static_cast<std::size_t>(kJoints) ||
        ds.targets.d2 != 2 || ds.targets.d0 != ds.features.d0 || ds.targets_raw.d0 != ds.features.d0) {
      throw DimensionError("dataset in '" + dir.string() + "' has inconsistent tensor shapes");
    }
    std::istringstream win(read_text(dir / "windows.csv"));
    std::string line;
    std::getline(win, line);
    while (std::getline(win, line)) {
      if (line.empty()) continue;
      ds.record_of.push_back(std::stoi(line.substr(line.find(',') + 1)));
    }
    if (ds.record_of.size() != ds.features.d0) throw FormatError("windows.csv does not match the tensors");
    const auto sc = read_json(dir / "scalers.json");
    for (const auto& s : sc.at("features")) ds.feature_scalers.push_back(standardizer_from_json(s));
    for (const auto& s : sc.at("targets")) ds.target_scalers.push_back(standardizer_from_json(s));
    if (ds.target_scalers.empty()) throw FormatError("scalers.json has no target scaler");
    return ds;
  });
}

// ---------------------------------------------------------------------------
// Regression runs (gpr, xlstm) share the split and the evaluation tables.

struct RegressionRows {
  Eigen::MatrixXd x_train, y_train;  // standardised
  Eigen::MatrixXd x_eval;            // every evaluated row, train rows first
  Eigen::MatrixXd truth_raw;         // [rows x 16] original units
  std::vector<const Standardizer*> scaler;
  std::vector<std::string> split;
  std::vector<std::size_t> window;
  std::size_t train_rows = 0;
};

/// Without test data: the first split_ratio of the windows train, the rest
/// test. With test data: every training window trains and every test-data
/// window tests.
inline RegressionRows regression_rows(const RunConfig& cfg, const Dataset& ds, const Dataset* test) {
  RegressionRows r;
  const Eigen::MatrixXd x = to_rows(ds.features);
  const Eigen::MatrixXd y = to_rows(ds.targets);
  const Eigen::MatrixXd raw = to_rows(ds.targets_raw);
  const auto w = static_cast<std::size_t>(x.rows());
  r.train_rows = test ? w : static_cast<std::size_t>(std::floor(cfg.split_ratio * static_cast<double>(w)));
  if (r.train_rows < 2 || (!test && r.train_rows >= w)) {
    throw LengthError(std::to_string(w) + " windows leave no usable train/test split at ratio " +
                      std::to_string(cfg.split_ratio));
  }
  const auto n = static_cast<Eigen::Index>(r.train_rows);
  r.x_train = x.topRows(n);
  r.y_train = y.topRows(n);
  std::vector<std::pair<const Dataset*, std::size_t>> rows;
  for (std::size_t i = 0; i < w; ++i) {
    rows.emplace_back(&ds, i);
    r.split.push_back(i < r.train_rows ? "train" : "test");
  }
  Eigen::MatrixXd xt, rawt;
  if (test) {
    xt = to_rows(test->features);
    rawt = to_rows(test->targets_raw);
    for (std::size_t i = 0; i < test->features.d0; ++i) {
      rows.emplace_back(test, i);
      r.split.push_back("test");
    }
  }
  r.x_eval.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  r.truth_raw.resize(static_cast<Eigen::Index>(rows.size()), raw.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto [d, i] = rows[k];
    const auto ki = static_cast<Eigen::Index>(k), ii = static_cast<Eigen::Index>(i);
    if (d == &ds) {
      r.x_eval.row(ki) = x.row(ii);
      r.truth_raw.row(ki) = raw.row(ii);
    } else {
      r.x_eval.row(ki) = xt.row(ii);
      r.truth_raw.row(ki) = rawt.row(ii);
    }
    r.scaler.push_back(&d->target_scaler(i));
    r.window.push_back(i);
  }
  return r;
}

/// MAE/RMSE per output and split, in original units.
inline json regression_metrics(const RegressionRows& r, const Eigen::MatrixXd& pred_raw) {
  json outputs = json::object();
  std::map<std::string, std::vector<double>> pooled_abs, pooled_sq;
  for (Eigen::Index c = 0; c < pred_raw.cols(); ++c) {
    json o = json::object();
    for (const std::string split : {"train", "test"}) {
      std::vector<Eigen::Index> idx;
      for (std::size_t k = 0; k < r.split.size(); ++k) {
        if (r.split[k] == split) idx.push_back(static_cast<Eigen::Index>(k));
      }
      if (idx.empty()) continue;
      Eigen::VectorXd t(static_cast<Eigen::Index>(idx.size())), p(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        t(static_cast<Eigen::Index>(k)) = r.truth_raw(idx[k], c);
        p(static_cast<Eigen::Index>(k)) = pred_raw(idx[k], c);
      }
      o[split] = metrics_json(evaluate(t, p));
    }
    outputs[output_name(static_cast<std::size_t>(c))] = o;
  }
  return outputs;
}

inline std::string regression_csv(const RegressionRows& r, const Eigen::MatrixXd& pred_raw,
                                  const Eigen::MatrixXd* std_raw) {
  std::ostringstream out;
  out << "window,split,output,truth,prediction" << (std_raw ? ",std" : "") << '\n';
  for (Eigen::Index k = 0; k < pred_raw.rows(); ++k) {
    for (Eigen::Index c = 0; c < pred_raw.cols(); ++c) {
      out << r.window[static_cast<std::size_t>(k)] << ',' << r.split[static_cast<std::size_t>(k)] << ','
          << output_name(static_cast<std::size_t>(c)) << ',' << format_double(r.truth_raw(k, c)) << ','
          << format_double(pred_raw(k, c));
      if (std_raw) out << ',' << format_double((*std_raw)(k, c));
      out << '\n';
    }
  }
  return out.str();
}

/// Evenly spaced row subset of size min(n, cap), first row included.
inline std::vector<Eigen::Index> subsample_rows(std::size_t n, std::size_t cap) {
  const std::size_t m = std::min(n, cap);
  std::vector<Eigen::Index> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = static_cast<Eigen::Index>(i * n / m);
  return idx;
}

// ---------------------------------------------------------------------------
// gpr

inline void run_gpr(const RunConfig& cfg, const fs::path& data, const fs::path& test_data, const fs::path& out) {
  const Dataset ds = load_dataset(data);
  Dataset test;
  if (!test_data.empty()) test = load_dataset(test_data);
  const auto rows = stage("split", [&] { return regression_rows(cfg, ds, test_data.empty() ? nullptr : &test); });
  const auto keep = subsample_rows(rows.train_rows, static_cast<std::size_t>(cfg.gpr.max_train_rows));
  const Eigen::MatrixXd xs = rows.x_train(keep, Eigen::all);

  const auto outputs = static_cast<std::size_t>(rows.y_train.cols());
  std::vector<GprModel> models(outputs);
  std::vector<Prediction> preds(outputs);
  stage("gpr", [&] {
    parallel_for(outputs, static_cast<unsigned>(cfg.threads), [&](std::size_t c) {
      const Eigen::VectorXd ys = rows.y_train(keep, static_cast<Eigen::Index>(c));
      const auto params = optimize_hyperparameters(xs, ys, cfg.gpr.noise_variance, cfg.gpr.options());
      models[c] = fit(xs, ys, params);
      preds[c] = predict(models[c], rows.x_eval);
    });
  });

  const auto n = rows.x_eval.rows();
  Eigen::MatrixXd mean(n, static_cast<Eigen::Index>(outputs)), sd(n, static_cast<Eigen::Index>(outputs));
  for (std::size_t c = 0; c < outputs; ++c) {
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& s = *rows.scaler[static_cast<std::size_t>(k)];
      const auto ci = static_cast<Eigen::Index>(c);
      mean(k, ci) = s.inverse_value(preds[c].mean(k), c);
      sd(k, ci) = std::sqrt(preds[c].variance(k)) * s.stddev.at(c);
    }
  }

  stage("write", [&] {
    fs::create_directories(out / "models");
    auto metrics = regression_metrics(rows, mean);
    for (std::size_t c = 0; c < outputs; ++c) {
      const auto& p = models[c].params;
      metrics[output_name(c)]["signal_variance"] = p.signal_variance();
      metrics[output_name(c)]["length_scale"] = p.length_scale();
      metrics[output_name(c)]["noise_variance"] = p.noise_variance();
      save_gpr(models[c], out / "models" / (output_name(c) + ".json"));
    }
    write_json(out / "metrics.json", {{"model", "gpr"},
                                      {"train_rows", rows.train_rows},
                                      {"train_rows_used", keep.size()},
                                      {"max_train_rows", cfg.gpr.max_train_rows},
                                      {"outputs", metrics}});
    write_text(out / "predictions.csv", regression_csv(rows, mean, &sd));
    Inputs in;
    in.data = data;
    in.test_data = test_data;
    write_provenance(out, "gpr", cfg, in);
  });
}

// ---------------------------------------------------------------------------
// xlstm

inline void run_xlstm(const RunConfig& cfg, const fs::path& data, const fs::path& test_data, const fs::path& out) {
  const Dataset ds = load_dataset(data);
  Dataset test;
  if (!test_data.empty()) test = load_dataset(test_data);
  const auto rows = stage("split", [&] { return regression_rows(cfg, ds, test_data.empty() ? nullptr : &test); });

  XlstmModel model(cfg.xlstm);
  const auto curve = stage("xlstm", [&] {
    return train(model, chunk_sequence(rows.x_train, cfg.xlstm.seq_len), chunk_sequence(rows.y_train, cfg.xlstm.seq_len));
  });

  // The training record is replayed as one sequence so test windows see
  // the state carried over from the training windows; test-data windows
  // start from a fresh state.
  const auto w = static_cast<Eigen::Index>(ds.features.d0);
  Eigen::MatrixXd pred = stage("xlstm", [&] {
    Eigen::MatrixXd p(rows.x_eval.rows(), cfg.xlstm.output_dim);
    p.topRows(w) = model.forward(Mat(rows.x_eval.topRows(w)));
    if (rows.x_eval.rows() > w) p.bottomRows(rows.x_eval.rows() - w) = model.forward(Mat(rows.x_eval.bottomRows(rows.x_eval.rows() - w)));
    return p;
  });
  for (Eigen::Index k = 0; k < pred.rows(); ++k) {
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      pred(k, c) = rows.scaler[static_cast<std::size_t>(k)]->inverse_value(pred(k, c), static_cast<std::size_t>(c));
    }
  }

  stage("write", [&] {
    fs::create_directories(out);
    std::ostringstream loss;
    loss << "step,rmse\n";
    for (std::size_t s = 0; s < curve.size(); ++s) loss << s + 1 << ',' << format_double(curve[s]) << '\n';
    write_text(out / "loss.csv", loss.str());
    write_json(out / "metrics.json", {{"model", "xlstm"},
                                      {"train_rows", rows.train_rows},
                                      {"initial_rmse", curve.front()},
                                      {"final_rmse", curve.back()},
                                      {"parameters", nn::parameter_count(model.params())},
                                      {"outputs", regression_metrics(rows, pred)}});
    write_text(out / "predictions.csv", regression_csv(rows, pred, nullptr));
    save_checkpoint(out / "checkpoint", "xlstm", to_json(cfg.xlstm), model.params());
    Inputs in;
    in.data = data;
    in.test_data = test_data;
    write_provenance(out, "xlstm", cfg, in);
  });
}

// ---------------------------------------------------------------------------
// forecast

/// Forecast origins in the held-out tail [split, n - horizon].
inline std::vector<std::size_t> forecast_origins(std::size_t n, std::size_t split, const ForecastRunConfig& fc) {
  const auto h = static_cast<std::size_t>(fc.model.horizon);
  const auto c = static_cast<std::size_t>(fc.model.context_len);
  const std::size_t first = std::max(split, c);
  if (n < h || first > n - h) {
    throw HistoryError("series of length " + std::to_string(n) + " has no forecast origin after sample " +
                       std::to_string(first) + " with horizon " + std::to_string(h));
  }
  const std::size_t last = n - h;
  const auto k = static_cast<std::size_t>(fc.origins);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(k == 1 ? first : first + i * (last - first) / (k - 1));
  return out;
}

inline void run_forecast(const RunConfig& cfg, const fs::path& record, const fs::path& pretrain, const fs::path& out) {
  const auto targets = cfg.forecast_series();
  const auto rec = stage("ingest", [&] { return parse_record(record); });
  std::vector<std::vector<double>> series;
  std::vector<std::string> names;
  for (auto [j, q] : targets) {
    series.push_back(to_univariate(rec, j, q).values);
    names.push_back(series_name(j, q));
  }
  const std::size_t n = series.front().size();
  const auto split = static_cast<std::size_t>(std::floor(cfg.split_ratio * static_cast<double>(n)));
  const auto origins = stage("split", [&] { return forecast_origins(n, split, cfg.forecast); });

  LagForecaster model(cfg.forecast.model);
  std::ostringstream curve;
  curve << "phase,epoch,train_nll,val_nll\n";
  auto log_curve = [&](const char* phase, const TrainReport& rep) {
    for (std::size_t e = 0; e < rep.train_nll.size(); ++e) {
      curve << phase << ',' << e + 1 << ',' << format_double(rep.train_nll[e]) << ',' << format_double(rep.val_nll[e])
            << '\n';
    }
  };
  json training = json::object();
  stage("forecast", [&] {
    std::vector<std::vector<double>> train_part;
    for (const auto& s : series) train_part.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(split));
    const auto& m = cfg.forecast.model;
    if (!pretrain.empty()) {
      const auto pre = stage("ingest", [&] { return parse_record(pretrain); });
      std::vector<std::vector<double>> pre_series;
      for (auto [j, q] : targets) pre_series.push_back(to_univariate(pre, j, q).values);
      const auto rep = train_forecaster(model, pre_series, m.max_epochs, m.patience);
      log_curve("pretrain", rep);
      training["pretrain"] = {{"epochs_run", rep.epochs_run}, {"best_epoch", rep.best_epoch}};
      const auto ft = train_forecaster(model, train_part, cfg.forecast.fine_tune_epochs, m.patience);
      log_curve("fine_tune", ft);
      training["fine_tune"] = {{"epochs_run", ft.epochs_run}, {"best_epoch", ft.best_epoch}};
    } else {
      const auto rep = train_forecaster(model, train_part, m.max_epochs, m.patience);
      log_curve("train", rep);
      training["train"] = {{"epochs_run", rep.epochs_run}, {"best_epoch", rep.best_epoch}};
    }
  });

  std::vector<ForecastDistribution> dists, clims;
  std::vector<std::vector<double>> truths;
  std::vector<std::pair<std::size_t, std::size_t>> index;  // (target, origin)
  stage("forecast", [&] {
    const auto c = static_cast<std::size_t>(cfg.forecast.model.context_len);
    const auto h = static_cast<std::size_t>(cfg.forecast.model.horizon);
    for (std::size_t t = 0; t < series.size(); ++t) {
      for (std::size_t o = 0; o < origins.size(); ++o) {
        const auto& s = series[t];
        const std::span<const double> ctx(s.data() + origins[o] - c, c);
        auto fc = cfg.forecast.model;
        fc.seed = stream_seed(cfg.seed, t * origins.size() + o);
        dists.push_back(sample_forecast(model, ctx, fc, static_cast<unsigned>(cfg.threads), names[t]));
        clims.push_back(climatology_forecast(ctx, fc.horizon, names[t]));
        truths.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(origins[o]),
                            s.begin() + static_cast<std::ptrdiff_t>(origins[o] + h));
        index.emplace_back(t, o);
      }
    }
  });
  const auto summary = stage("evaluate", [&] { return evaluate_forecasts(dists, truths); });
  const auto clim = stage("evaluate", [&] { return evaluate_forecasts(clims, truths); });

  stage("write", [&] {
    fs::create_directories(out);
    auto summary_json = [&](const CrpsSummary& s) {
      json per_target = json::object();
      for (std::size_t i = 0; i < s.targets.size(); ++i) per_target[s.targets[i]] = box_json(s.per_target[i]);
      return json{{"mean", s.mean},
                  {"std", s.std},
                  {"box", box_json(box_stats(s.per_series))},
                  {"per_target_step_crps", per_target}};
    };
    write_json(out / "metrics.json", {{"model", "lag_forecaster"},
                                      {"crps", summary_json(summary)},
                                      {"climatology_crps", summary_json(clim)},
                                      {"forecasts", dists.size()},
                                      {"origins", origins},
                                      {"training", training}});

    std::ostringstream q;
    q << "target,step,q05,q25,q50,q75,q95,truth\n";
    std::ostringstream crps;
    crps << "target,origin,model_crps,climatology_crps\n";
    std::ostringstream idx;
    idx << "forecast,target,origin\n";
    for (std::size_t i = 0; i < dists.size(); ++i) {
      const auto [t, o] = index[i];
      if (o == 0) {
        for (Eigen::Index s = 0; s < dists[i].horizon(); ++s) {
          q << names[t] << ',' << s + 1;
          for (double level : {0.05, 0.25, 0.5, 0.75, 0.95}) q << ',' << format_double(dists[i].quantile(level, s));
          q << ',' << format_double(truths[i][static_cast<std::size_t>(s)]) << '\n';
        }
      }
      crps << names[t] << ',' << origins[o] << ',' << format_double(summary.per_series[i]) << ','
           << format_double(clim.per_series[i]) << '\n';
      idx << i << ',' << names[t] << ',' << origins[o] << '\n';
    }
    write_text(out / "quantiles.csv", q.str());
    write_text(out / "crps.csv", crps.str());
    write_text(out / "forecasts.csv", idx.str());
    write_text(out / "train_curve.csv", curve.str());

    std::ostringstream box;
    box << "forecaster,min,q1,median,q3,max\n";
    for (const auto& [label, s] : {std::pair{"lag_forecaster", &summary}, std::pair{"climatology", &clim}}) {
      const auto b = box_stats(s->per_series);
      box << label << ',' << format_double(b.min) << ',' << format_double(b.q1) << ',' << format_double(b.median)
          << ',' << format_double(b.q3) << ',' << format_double(b.max) << '\n';
    }
    write_text(out / "crps_box.csv", box.str());

    const auto samples = static_cast<std::uint64_t>(cfg.forecast.model.num_samples);
    const auto h = static_cast<std::uint64_t>(cfg.forecast.model.horizon);
    std::vector<double> flat, flat_truth;
    for (std::size_t i = 0; i < dists.size(); ++i) {
      for (Eigen::Index p = 0; p < dists[i].samples.rows(); ++p) {
        for (Eigen::Index s = 0; s < dists[i].samples.cols(); ++s) flat.push_back(dists[i].samples(p, s));
      }
      flat_truth.insert(flat_truth.end(), truths[i].begin(), truths[i].end());
    }
    {
      std::ofstream bin(out / "samples.bin", std::ios::binary);
      const std::array<std::uint64_t, 3> shape = {dists.size(), samples, h};
      write_tensor(bin, shape, flat);
      std::ofstream tb(out / "truth.bin", std::ios::binary);
      const std::array<std::uint64_t, 2> tshape = {dists.size(), h};
      write_tensor(tb, tshape, flat_truth);
      if (!bin || !tb) throw IoError("failed writing forecast samples");
    }
    save_checkpoint(out / "checkpoint", "lag_forecaster", to_json(cfg.forecast.model), model.params());
    Inputs in;
    in.records = {record};
    in.pretrain = pretrain;
    write_provenance(out, "forecast", cfg, in);
  });
}

// ---------------------------------------------------------------------------
// eval: recompute metrics from a run directory's plot data

inline json run_eval(const fs::path& run, const fs::path& out_file) {
  return stage("eval", [&] {
    const auto prov = read_json(run / "provenance.json");
    const auto command = prov.at("command").get<std::string>();
    json result = {{"command", command}};
    if (command == "gpr" || command == "xlstm") {
      // predictions.csv: window,split,output,truth,prediction[,std]
      std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>> cols;
      std::istringstream in(read_text(run / "predictions.csv"));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = gaitcast::detail::split_csv(line);
        if (f.size() < 5) throw FormatError("predictions.csv: short row");
        auto& [t, p] = cols[{std::string(f[2]), std::string(f[1])}];
        t.push_back(std::stod(std::string(f[3])));
        p.push_back(std::stod(std::string(f[4])));
      }
      json outputs = json::object();
      for (const auto& [key, tp] : cols) {
        const Eigen::Map<const Eigen::VectorXd> t(tp.first.data(), static_cast<Eigen::Index>(tp.first.size()));
        const Eigen::Map<const Eigen::VectorXd> p(tp.second.data(), static_cast<Eigen::Index>(tp.second.size()));
        outputs[key.first][key.second] = metrics_json(evaluate(t, p));
      }
      result["outputs"] = outputs;
    } else if (command == "forecast") {
      std::ifstream sb(run / "samples.bin", std::ios::binary), tb(run / "truth.bin", std::ios::binary);
      if (!sb || !tb) throw IoError("forecast run lacks samples.bin/truth.bin");
      const auto samples = read_tensor(sb);
      const auto truth = read_tensor(tb);
      if (samples.shape.size() != 3 || truth.shape.size() != 2 || samples.shape[0] != truth.shape[0] ||
          samples.shape[2] != truth.shape[1]) {
        throw DimensionError("forecast samples/truth shapes disagree");
      }
      std::vector<std::string> names;
      std::istringstream idx(read_text(run / "forecasts.csv"));
      std::string line;
      std::getline(idx, line);
      while (std::getline(idx, line)) {
        if (!line.empty()) names.emplace_back(gaitcast::detail::split_csv(line).at(1));
      }
      const auto nf = samples.shape[0], ns = samples.shape[1], h = samples.shape[2];
      if (names.size() != nf) throw FormatError("forecasts.csv does not match samples.bin");
      std::vector<ForecastDistribution> dists;
      std::vector<std::vector<double>> truths;
      for (std::uint64_t i = 0; i < nf; ++i) {
        ForecastDistribution d{names[i], Mat(static_cast<Eigen::Index>(ns), static_cast<Eigen::Index>(h))};
        for (std::uint64_t p = 0; p < ns; ++p) {
          for (std::uint64_t s = 0; s < h; ++s) d.samples(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(s)) = samples.values[(i * ns + p) * h + s];
        }
        dists.push_back(std::move(d));
        truths.emplace_back(truth.values.begin() + static_cast<std::ptrdiff_t>(i * h),
                            truth.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * h));
      }
      const auto s = evaluate_forecasts(dists, truths);
      result["crps"] = {{"mean", s.mean}, {"std", s.std}, {"box", box_json(box_stats(s.per_series))}};
    } else {
      throw ArgumentError("eval: nothing to evaluate for a '" + command + "' run");
    }
    if (!out_file.empty()) write_json(out_file, result);
    return result;
  });
}

// ---------------------------------------------------------------------------
// replay

/// Re-runs the command recorded in a provenance file into `out`. Inputs must
/// be unchanged since the original run.
inline std::string replay(const fs::path& provenance, const fs::path& out) {
  const auto prov = stage("replay", [&] {
    auto p = read_json(provenance);
    if (p.value("format", "") != kProvenanceFormat) throw FormatError("not a provenance file");
    for (const auto& [path, d] : p.at("input_digests").items()) {
      if (!fs::exists(path)) throw IoError("replay input '" + path + "' is missing");
      if (digest(path) != d.get<std::string>()) throw FormatError("replay input '" + path + "' changed since the run");
    }
    return p;
  });
  const auto cfg = stage("config", [&] { return parse_config(prov.at("config")); });
  const auto command = prov.at("command").get<std::string>();
  const auto& in = prov.at("inputs");
  auto path_of = [&](const char* key) { return in.contains(key) ? fs::path(in.at(key).get<std::string>()) : fs::path(); };
  if (command == "pipeline") {
    std::vector<fs::path> recs;
    for (const auto& r : in.at("records")) recs.emplace_back(r.get<std::string>());
    run_pipeline(cfg, recs, out);
  } else if (command == "gpr") {
    run_gpr(cfg, path_of("data"), path_of("test_data"), out);
  } else if (command == "xlstm") {
    run_xlstm(cfg, path_of("data"), path_of("test_data"), out);
  } else if (command == "forecast") {
    run_forecast(cfg, fs::path(in.at("records").at(0).get<std::string>()), path_of("pretrain"), out);
  } else if (command == "synth") {
    run_synth(cfg, out);
  } else {
    throw StageError("replay", "cannot replay command '" + command + "'");
  }
  return command;
}

}  // namespace gaitcast::runs
