#pragma once

// Glue between the record, preprocessing and feature layers: whole-record
// preprocessing, and conversion of window tensors to row matrices.

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/features.hpp"
#include "gaitcast/ingest.hpp"
#include "gaitcast/parallel.hpp"
#include "gaitcast/preprocess.hpp"

namespace gaitcast {

/// Error wrapper that remembers which pipeline stage failed.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Runs preprocess_channel on every sEMG channel. Channels are independent,
/// so the result does not depend on `threads`.
inline RawRecord preprocess_record(const RawRecord& r, const PreprocessConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  RawRecord out = r;
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(r.semg.cols()));
  parallel_for(cols.size(), threads, [&](std::size_t c) {
    std::vector<double> x(static_cast<std::size_t>(r.semg.rows()));
    for (Eigen::Index t = 0; t < r.semg.rows(); ++t) x[static_cast<std::size_t>(t)] = r.semg(t, static_cast<Eigen::Index>(c));
    cols[c] = preprocess_channel(x, cfg);
  });
  for (std::size_t c = 0; c < cols.size(); ++c) {
    for (Eigen::Index t = 0; t < r.semg.rows(); ++t) {
      out.semg(t, static_cast<Eigen::Index>(c)) = cols[c][static_cast<std::size_t>(t)];
    }
  }
  return out;
}

/// [d0 x d1 x d2] -> [d0 x (d1*d2)].
inline Eigen::MatrixXd to_rows(const Tensor3& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.d0), static_cast<Eigen::Index>(t.row_size()));
  for (std::size_t i = 0; i < t.d0; ++i) {
    const auto r = t.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = r[c];
  }
  return m;
}

inline Tensor3 from_rows(const Eigen::MatrixXd& m, std::size_t d1, std::size_t d2) {
  if (static_cast<std::size_t>(m.cols()) != d1 * d2) throw DimensionError("from_rows: width does not match d1*d2");
  Tensor3 t(static_cast<std::size_t>(m.rows()), d1, d2);
  for (std::size_t i = 0; i < t.d0; ++i) {
    auto r = t.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  }
  return t;
}

/// Preprocessed, featurised and standardised record. Standardisers are fit
/// on the first `fit_rows` windows (all windows when 0).
struct WindowDataset {
  FeatureTensor features;   // standardised
  TargetTensor targets;     // standardised
  Standardizer feature_scaler;
  Standardizer target_scaler;
};

inline WindowDataset build_dataset(const RawRecord& record, const PreprocessConfig& pre, const WindowSpec& spec,
                                   std::size_t fit_rows = 0, unsigned threads = 1, double zc_threshold = 0.0) {
  RawRecord clean;
  try {
    clean = preprocess_record(record, pre, threads);
  } catch (const Error& e) {
    throw StageError("preprocess", e.what());
  }
  FeaturizeResult fr;
  try {
    fr = featurize(clean, spec, zc_threshold);
  } catch (const Error& e) {
    throw StageError("featurize", e.what());
  }
  auto head = [&](const Tensor3& t) {
    if (fit_rows == 0 || fit_rows >= t.d0) return t;
    Tensor3 h(fit_rows, t.d1, t.d2);
    std::copy(t.data.begin(), t.data.begin() + static_cast<std::ptrdiff_t>(fit_rows * t.row_size()), h.data.begin());
    return h;
  };
  WindowDataset ds;
  try {
    ds.feature_scaler = Standardizer::fit(head(fr.features.values), "train");
    ds.target_scaler = Standardizer::fit(head(fr.targets.values), "train");
  } catch (const Error& e) {
    throw StageError("standardize", e.what());
  }
  ds.features.values = ds.feature_scaler.apply(fr.features.values);
  ds.targets.values = ds.target_scaler.apply(fr.targets.values);
  return ds;
}

}  // namespace gaitcast
