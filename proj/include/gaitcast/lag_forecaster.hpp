#pragma once

// Probabilistic autoregressive forecaster for univariate series. Each
// position becomes a token of (value, lagged values); a small decoder-only
// causal transformer maps tokens to Student-t parameters for the next value.
// Everything runs on the context's z-scored values; forecasts are mapped
// back with the context's mean and std.

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/ingest.hpp"
#include "gaitcast/nn.hpp"
#include "gaitcast/parallel.hpp"
#include "gaitcast/random.hpp"

namespace gaitcast {

using nn::Mat;
using nn::Vec;

// ---------------------------------------------------------------------------
// Lags and scaling

struct LagSet {
  std::vector<int> lags;

  static LagSet dense(int max_lag) {
    LagSet s;
    for (int l = 1; l <= max_lag; ++l) s.lags.push_back(l);
    return s;
  }

  void validate() const {
    if (lags.empty()) throw ConfigError("lag set is empty");
    for (std::size_t i = 0; i < lags.size(); ++i) {
      if (lags[i] < 1) throw ConfigError("lags must be positive");
      if (i > 0 && lags[i] <= lags[i - 1]) throw ConfigError("lags must be strictly increasing");
    }
  }

  int max_lag() const { return lags.empty() ? 0 : lags.back(); }
  std::size_t size() const { return lags.size(); }
};

/// Element j is values[t - lags[j]].
inline std::vector<double> build_lag_features(std::span<const double> values, std::size_t t, const LagSet& lags) {
  lags.validate();
  if (t < static_cast<std::size_t>(lags.max_lag()) || t >= values.size()) {
    throw HistoryError("lag features at t=" + std::to_string(t) + " need " + std::to_string(lags.max_lag()) +
                       " past values (max lag " + std::to_string(lags.max_lag()) + ")");
  }
  std::vector<double> out(lags.size());
  for (std::size_t j = 0; j < lags.size(); ++j) out[j] = values[t - static_cast<std::size_t>(lags.lags[j])];
  return out;
}

inline std::vector<double> build_lag_features(const UnivariateSeries& s, std::size_t t, const LagSet& lags) {
  return build_lag_features(std::span<const double>(s.values), t, lags);
}

struct ScaledContext {
  std::vector<double> scaled;
  double mean = 0.0;
  double std = 1.0;

  double to_scaled(double v) const { return (v - mean) / std; }
  double from_scaled(double v) const { return v * std + mean; }
};

inline constexpr double kScaleFloor = 1e-8;

/// Population z-scoring; std floored at 1e-8.
inline ScaledContext scale_context(std::span<const double> context) {
  if (context.size() < 2) throw ArgumentError("scale_context: need at least 2 values");
  ScaledContext s;
  double sum = 0.0;
  for (double v : context) sum += v;
  s.mean = sum / static_cast<double>(context.size());
  double ss = 0.0;
  for (double v : context) ss += (v - s.mean) * (v - s.mean);
  s.std = std::max(std::sqrt(ss / static_cast<double>(context.size())), kScaleFloor);
  s.scaled.resize(context.size());
  for (std::size_t i = 0; i < context.size(); ++i) s.scaled[i] = (context[i] - s.mean) / s.std;
  return s;
}

// ---------------------------------------------------------------------------
// Configuration

struct ForecastConfig {
  int horizon = 128;
  int context_len = 256;
  int num_samples = 100;
  std::uint64_t seed = 0;
  LagSet lags = LagSet::dense(64);
  // network
  int d_model = 64;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_mult = 4;
  // training
  int max_epochs = 50;
  int patience = 5;
  double learning_rate = 3e-3;
  int batch_size = 8;
  int slices_per_epoch = 32;
  int val_slices = 16;
  double val_fraction = 0.2;

  void validate() const {
    lags.validate();
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string("forecast: ") + name + " must be positive");
    };
    positive(horizon, "horizon");
    positive(context_len, "context_len");
    positive(num_samples, "num_samples");
    positive(d_model, "d_model");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(ffn_mult, "ffn_mult");
    positive(batch_size, "batch_size");
    positive(slices_per_epoch, "slices_per_epoch");
    positive(val_slices, "val_slices");
    if (max_epochs < 0 || patience < 1) throw ConfigError("forecast: max_epochs must be >= 0 and patience >= 1");
    if (context_len <= lags.max_lag()) throw ConfigError("forecast: context_len must exceed the largest lag");
    if (d_model % num_heads != 0) throw ConfigError("forecast: d_model must be divisible by num_heads");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("forecast: learning_rate must be finite and >= 0");
    }
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("forecast: val_fraction must be in (0, 1)");
  }

  /// Tokens per context: positions max_lag .. context_len-1.
  int window_tokens() const { return context_len - lags.max_lag(); }
};

inline nlohmann::json to_json(const ForecastConfig& c) {
  return {{"horizon", c.horizon},
          {"context_len", c.context_len},
          {"num_samples", c.num_samples},
          {"seed", c.seed},
          {"lags", c.lags.lags},
          {"d_model", c.d_model},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"ffn_mult", c.ffn_mult},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"slices_per_epoch", c.slices_per_epoch},
          {"val_slices", c.val_slices},
          {"val_fraction", c.val_fraction}};
}

// ---------------------------------------------------------------------------
// Student-t head

struct StudentT {
  double df = 3.0;
  double loc = 0.0;
  double scale = 1.0;

  double nll(double y) const {
    const double z = (y - loc) / scale;
    return -(std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) - 0.5 * std::log(df * std::numbers::pi) -
             std::log(scale) - 0.5 * (df + 1.0) * std::log1p(z * z / df));
  }

  /// Standard deviation (finite because df > 2).
  double stddev() const { return scale * std::sqrt(df / (df - 2.0)); }

  double sample(Rng& rng) const { return loc + scale * rng.student_t(df); }
};

inline StudentT head_to_dist(double df_raw, double loc, double scale_raw) {
  return {2.0 + nn::softplus(df_raw), loc, nn::softplus(scale_raw)};
}

/// NLL and its gradient w.r.t. the raw head outputs (df_raw, loc, scale_raw).
inline double student_t_nll_grad(double df_raw, double loc, double scale_raw, double y, double grad[3]) {
  const auto d = head_to_dist(df_raw, loc, scale_raw);
  const double nu = d.df, s = d.scale;
  const double z = (y - loc) / s;
  const double q = nu + z * z;
  const double dloc = -(nu + 1.0) * z / (s * q);
  const double dscale = 1.0 / s - (nu + 1.0) * z * z / (s * q);
  const double dnu = -(0.5 * boost::math::digamma(0.5 * (nu + 1.0)) - 0.5 * boost::math::digamma(0.5 * nu) -
                       0.5 / nu - 0.5 * std::log1p(z * z / nu) + 0.5 * (nu + 1.0) * z * z / (nu * q));
  grad[0] = dnu * nn::sigmoid(df_raw);
  grad[1] = dloc;
  grad[2] = dscale * nn::sigmoid(scale_raw);
  return d.nll(y);
}

// ---------------------------------------------------------------------------
// Forecast distributions

struct ForecastDistribution {
  std::string target_name;
  Mat samples;  // [num_samples x horizon], original units

  Eigen::Index num_samples() const { return samples.rows(); }
  Eigen::Index horizon() const { return samples.cols(); }

  /// Linear-interpolation quantile of the samples at step t.
  double quantile(double q, Eigen::Index t) const {
    if (!(q >= 0.0 && q <= 1.0)) throw RangeError("quantile level outside [0, 1]");
    if (t < 0 || t >= samples.cols()) throw RangeError("quantile step outside horizon");
    std::vector<double> col(samples.col(t).data(), samples.col(t).data() + samples.rows());
    std::sort(col.begin(), col.end());
    const double pos = q * static_cast<double>(col.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, col.size() - 1);
    return col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
  }

  std::vector<double> step_samples(Eigen::Index t) const {
    return {samples.col(t).data(), samples.col(t).data() + samples.rows()};
  }

  std::vector<double> stddev_per_step() const {
    std::vector<double> out(static_cast<std::size_t>(samples.cols()));
    for (Eigen::Index t = 0; t < samples.cols(); ++t) {
      const double m = samples.col(t).mean();
      out[static_cast<std::size_t>(t)] =
          std::sqrt((samples.col(t).array() - m).square().sum() / static_cast<double>(samples.rows()));
    }
    return out;
  }
};

/// Unconditional baseline: every step's predictive samples are the context
/// values themselves.
inline ForecastDistribution climatology_forecast(std::span<const double> context, int horizon,
                                                 std::string name = {}) {
  if (context.empty() || horizon < 1) throw ArgumentError("climatology_forecast: empty context or horizon");
  ForecastDistribution d{std::move(name), Mat(static_cast<Eigen::Index>(context.size()), horizon)};
  for (Eigen::Index t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < context.size(); ++i) d.samples(static_cast<Eigen::Index>(i), t) = context[i];
  }
  return d;
}

// ---------------------------------------------------------------------------
// CRPS

/// mean|X - y| - (1 / 2S^2) sum_ij |X_i - X_j|, with the pair sum taken from
/// the sorted samples in O(S log S).
inline double crps_empirical(std::span<const double> samples, double y) {
  if (samples.empty()) throw ArgumentError("crps_empirical: no samples");
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const double s = static_cast<double>(x.size());
  double abs_err = 0.0, pair = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    abs_err += std::abs(x[i] - y);
    pair += (2.0 * static_cast<double>(i + 1) - s - 1.0) * x[i];
  }
  return std::max(0.0, abs_err / s - pair / (s * s));
}

/// Mean per-step CRPS over the horizon.
inline double forecast_crps(const ForecastDistribution& d, std::span<const double> truth) {
  if (static_cast<Eigen::Index>(truth.size()) != d.horizon()) {
    throw DimensionError("forecast_crps: truth length " + std::to_string(truth.size()) + " != horizon " +
                         std::to_string(d.horizon()));
  }
  double sum = 0.0;
  for (Eigen::Index t = 0; t < d.horizon(); ++t) {
    sum += crps_empirical(d.step_samples(t), truth[static_cast<std::size_t>(t)]);
  }
  return sum / static_cast<double>(d.horizon());
}

struct BoxStats {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

inline BoxStats box_stats(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("box_stats: empty input");
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {v.front(), q(0.25), q(0.5), q(0.75), v.back()};
}

struct CrpsSummary {
  double mean = 0.0;
  double std = 0.0;  // population
  std::vector<std::string> names;
  std::vector<double> per_series;  // horizon-averaged CRPS per forecast
  std::vector<std::string> targets;
  std::vector<BoxStats> per_target;  // box stats of per-step CRPS, per target name
};

inline CrpsSummary evaluate_forecasts(const std::vector<ForecastDistribution>& dists,
                                      const std::vector<std::vector<double>>& truths) {
  if (dists.size() != truths.size()) throw DimensionError("evaluate_forecasts: forecast/truth counts differ");
  if (dists.empty()) throw ArgumentError("evaluate_forecasts: nothing to evaluate");
  CrpsSummary s;
  std::vector<std::vector<double>> steps_by_target;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto& d = dists[i];
    if (static_cast<Eigen::Index>(truths[i].size()) != d.horizon()) {
      throw DimensionError("evaluate_forecasts: truth " + std::to_string(i) + " length differs from horizon");
    }
    auto it = std::find(s.targets.begin(), s.targets.end(), d.target_name);
    if (it == s.targets.end()) {
      s.targets.push_back(d.target_name);
      steps_by_target.emplace_back();
      it = s.targets.end() - 1;
    }
    auto& steps = steps_by_target[static_cast<std::size_t>(it - s.targets.begin())];
    double sum = 0.0;
    for (Eigen::Index t = 0; t < d.horizon(); ++t) {
      const double c = crps_empirical(d.step_samples(t), truths[i][static_cast<std::size_t>(t)]);
      steps.push_back(c);
      sum += c;
    }
    s.names.push_back(d.target_name);
    s.per_series.push_back(sum / static_cast<double>(d.horizon()));
  }
  const double n = static_cast<double>(s.per_series.size());
  for (double v : s.per_series) s.mean += v;
  s.mean /= n;
  for (double v : s.per_series) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / n);
  for (auto& steps : steps_by_target) s.per_target.push_back(box_stats(steps));
  return s;
}

// ---------------------------------------------------------------------------
// Network

namespace detail {

inline Vec gelu_vec(const Vec& x) { return x.unaryExpr([](double v) { return nn::gelu(v); }); }

/// Ring buffer of the most recent `capacity` key/value rows for one layer.
struct KvCache {
  Mat k, v;
  Eigen::Index count = 0, next = 0;

  KvCache() = default;
  KvCache(Eigen::Index capacity, Eigen::Index dim) : k(capacity, dim), v(capacity, dim) {}

  void push(const Vec& key, const Vec& value) {
    k.row(next) = key.transpose();
    v.row(next) = value.transpose();
    next = (next + 1) % k.rows();
    count = std::min(count + 1, k.rows());
  }
};

}  // namespace detail

/// Pre-norm causal self-attention + GELU feed-forward, both residual. Each
/// token attends to itself and at most window-1 predecessors.
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(const std::string& name, int d, int heads, int ffn, int window)
      : ln1_(name + ".ln1", d),
        wq_(name + ".wq", d, d),
        wk_(name + ".wk", d, d),
        wv_(name + ".wv", d, d),
        wo_(name + ".wo", d, d),
        ln2_(name + ".ln2", d),
        ff1_(name + ".ff1", d, ffn),
        ff2_(name + ".ff2", ffn, d),
        heads_(heads),
        dh_(d / heads),
        window_(window) {}

  void init(Rng& rng) {
    for (auto* l : {&wq_, &wk_, &wv_, &wo_, &ff1_, &ff2_}) l->init(rng);
  }
  void params(nn::ParamList& out) {
    ln1_.params(out);
    for (auto* l : {&wq_, &wk_, &wv_, &wo_}) l->params(out);
    ln2_.params(out);
    ff1_.params(out);
    ff2_.params(out);
  }

  Mat forward(const Mat& x) {
    const Eigen::Index n = x.rows();
    const Mat a = ln1_.forward(x);
    q_ = wq_.forward(a);
    k_ = wk_.forward(a);
    v_ = wv_.forward(a);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh_));
    p_.assign(static_cast<std::size_t>(heads_), Mat::Zero(n, n));
    Mat o(n, heads_ * dh_);
    for (int h = 0; h < heads_; ++h) {
      Mat& p = p_[static_cast<std::size_t>(h)];
      const Mat s = q_.middleCols(h * dh_, dh_) * k_.middleCols(h * dh_, dh_).transpose() * inv;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, i - window_ + 1);
        const double mx = s.row(i).segment(lo, i - lo + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = lo; j <= i; ++j) z += (p(i, j) = std::exp(s(i, j) - mx));
        p.row(i).segment(lo, i - lo + 1) /= z;
      }
      o.middleCols(h * dh_, dh_).noalias() = p * v_.middleCols(h * dh_, dh_);
    }
    x1_ = x + wo_.forward(o);
    u_ = ff1_.forward(ln2_.forward(x1_));
    return x1_ + ff2_.forward(u_.unaryExpr([](double v) { return nn::gelu(v); }));
  }

  Mat backward(const Mat& dy) {
    const Mat dg = ff2_.backward(dy);
    const Mat du = dg.cwiseProduct(u_.unaryExpr([](double v) { return nn::gelu_grad(v); }));
    const Mat dx1 = dy + ln2_.backward(ff1_.backward(du));
    const Mat dout = wo_.backward(dx1);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh_));
    Mat dq(q_.rows(), q_.cols()), dk(k_.rows(), k_.cols()), dv(v_.rows(), v_.cols());
    for (int h = 0; h < heads_; ++h) {
      const Mat& p = p_[static_cast<std::size_t>(h)];
      const auto doh = dout.middleCols(h * dh_, dh_);
      const Mat dp = doh * v_.middleCols(h * dh_, dh_).transpose();
      dv.middleCols(h * dh_, dh_).noalias() = p.transpose() * doh;
      const Vec rowdot = (dp.cwiseProduct(p)).rowwise().sum();
      const Mat ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv;
      dq.middleCols(h * dh_, dh_).noalias() = ds * k_.middleCols(h * dh_, dh_);
      dk.middleCols(h * dh_, dh_).noalias() = ds.transpose() * q_.middleCols(h * dh_, dh_);
    }
    const Mat da = wq_.backward(dq) + wk_.backward(dk) + wv_.backward(dv);
    return dx1 + ln1_.backward(da);
  }

  /// One token through the layer, appending its key/value to `cache`.
  Vec step(const Vec& x, detail::KvCache& cache) const {
    const Vec a = ln1_.apply_vec(x);
    const Vec q = wq_.apply_vec(a);
    cache.push(wk_.apply_vec(a), wv_.apply_vec(a));
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh_));
    const Eigen::Index n = cache.count;
    Vec o(heads_ * dh_);
    for (int h = 0; h < heads_; ++h) {
      const Vec s = cache.k.topRows(n).middleCols(h * dh_, dh_) * q.segment(h * dh_, dh_) * inv;
      const Vec e = (s.array() - s.maxCoeff()).exp();
      o.segment(h * dh_, dh_) = cache.v.topRows(n).middleCols(h * dh_, dh_).transpose() * (e / e.sum());
    }
    const Vec x1 = x + wo_.apply_vec(o);
    return x1 + ff2_.apply_vec(detail::gelu_vec(ff1_.apply_vec(ln2_.apply_vec(x1))));
  }

  int window() const { return window_; }

 private:
  nn::LayerNorm ln1_;
  nn::Linear wq_, wk_, wv_, wo_;
  nn::LayerNorm ln2_;
  nn::Linear ff1_, ff2_;
  int heads_ = 1;
  Eigen::Index dh_ = 1;
  int window_ = 1;
  Mat q_, k_, v_, x1_, u_;
  std::vector<Mat> p_;
};

/// Decoder state after consuming a prefix of tokens.
struct DecodeState {
  std::vector<detail::KvCache> caches;
  std::vector<double> history;  // scaled values seen so far
  Vec head;                     // raw head output for the next value
};

class LagForecaster {
 public:
  explicit LagForecaster(const ForecastConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int in = 1 + static_cast<int>(cfg_.lags.size());
    embed_ = nn::Linear("embed", in, cfg_.d_model);
    for (int l = 0; l < cfg_.num_layers; ++l) {
      layers_.emplace_back("layer" + std::to_string(l), cfg_.d_model, cfg_.num_heads, cfg_.ffn_mult * cfg_.d_model,
                           cfg_.window_tokens());
    }
    final_ln_ = nn::LayerNorm("final_ln", cfg_.d_model);
    head_ = nn::Linear("head", cfg_.d_model, 3);
    Rng rng(cfg_.seed);
    embed_.init(rng);
    for (auto& l : layers_) l.init(rng);
    head_.init(rng);
    // Start near a unit-scale, heavy-ish tailed distribution: df = 2 + softplus(3), scale = softplus(0.5413) = 1.
    head_.bias().value(0, 0) = 3.0;
    head_.bias().value(2, 0) = std::log(std::exp(1.0) - 1.0);
  }

  const ForecastConfig& config() const { return cfg_; }
  nn::Linear& head() { return head_; }

  nn::ParamList params() {
    nn::ParamList out;
    embed_.params(out);
    for (auto& l : layers_) l.params(out);
    final_ln_.params(out);
    head_.params(out);
    return out;
  }

  /// Token for position t of a scaled series: [x_t, x_{t-l} for each lag].
  Vec token(std::span<const double> scaled, std::size_t t) const {
    const auto lagv = build_lag_features(scaled, t, cfg_.lags);
    Vec tok(1 + static_cast<Eigen::Index>(lagv.size()));
    tok(0) = scaled[t];
    for (std::size_t j = 0; j < lagv.size(); ++j) tok(static_cast<Eigen::Index>(j) + 1) = lagv[j];
    return tok;
  }

  /// Tokens for positions max_lag .. scaled.size()-1.
  Mat tokens(std::span<const double> scaled) const {
    const auto first = static_cast<std::size_t>(cfg_.lags.max_lag());
    if (scaled.size() <= first) throw HistoryError("series shorter than the largest lag");
    Mat out(static_cast<Eigen::Index>(scaled.size() - first), 1 + static_cast<Eigen::Index>(cfg_.lags.size()));
    for (std::size_t t = first; t < scaled.size(); ++t) out.row(static_cast<Eigen::Index>(t - first)) = token(scaled, t).transpose();
    return out;
  }

  /// Training-mode forward: raw head outputs [N x 3], one per token.
  Mat forward_tokens(const Mat& tok) {
    Mat h = embed_.forward(tok);
    for (auto& l : layers_) h = l.forward(h);
    return head_.forward(final_ln_.forward(h));
  }

  void backward(const Mat& dhead) {
    Mat d = final_ln_.backward(head_.backward(dhead));
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = it->backward(d);
    embed_.backward(d);
  }

  /// Consumes a scaled context (length context_len) token by token.
  DecodeState begin(std::span<const double> scaled) const {
    if (static_cast<int>(scaled.size()) != cfg_.context_len) {
      throw DimensionError("forecaster context has " + std::to_string(scaled.size()) + " values, expected " +
                           std::to_string(cfg_.context_len));
    }
    DecodeState st;
    for (int l = 0; l < cfg_.num_layers; ++l) st.caches.emplace_back(cfg_.window_tokens(), cfg_.d_model);
    st.history.assign(scaled.begin(), scaled.end());
    for (std::size_t t = static_cast<std::size_t>(cfg_.lags.max_lag()); t < scaled.size(); ++t) {
      st.head = step_token(token(scaled, t), st);
    }
    return st;
  }

  /// Appends a scaled value and advances the decoder one position.
  void advance(DecodeState& st, double value) const {
    st.history.push_back(value);
    st.head = step_token(token(st.history, st.history.size() - 1), st);
  }

  static StudentT dist_of(const Vec& head) { return head_to_dist(head(0), head(1), head(2)); }

 private:
  Vec step_token(const Vec& tok, DecodeState& st) const {
    Vec h = embed_.apply_vec(tok);
    for (std::size_t l = 0; l < layers_.size(); ++l) h = layers_[l].step(h, st.caches[l]);
    return head_.apply_vec(final_ln_.apply_vec(h));
  }

  ForecastConfig cfg_;
  nn::Linear embed_;
  std::vector<DecoderLayer> layers_;
  nn::LayerNorm final_ln_;
  nn::Linear head_;
};

/// Next-step Student-t in scaled space for a raw context of context_len values.
inline StudentT forward_dist(const LagForecaster& model, std::span<const double> context) {
  const auto sc = scale_context(context);
  return LagForecaster::dist_of(model.begin(sc.scaled).head);
}

inline constexpr double kSampleBound = 1e6;  // |scaled value| beyond this counts as overflow

/// Autoregressive sample paths in original units. Path p draws from its own
/// stream stream_seed(seed, p), so results do not depend on `threads`.
inline ForecastDistribution sample_forecast(const LagForecaster& model, std::span<const double> context,
                                            const ForecastConfig& cfg, unsigned threads = 1,
                                            std::string target_name = {}) {
  cfg.validate();
  const auto sc = scale_context(context);
  const DecodeState prefix = model.begin(sc.scaled);
  ForecastDistribution out{std::move(target_name), Mat(cfg.num_samples, cfg.horizon)};
  parallel_for(static_cast<std::size_t>(cfg.num_samples), threads, [&](std::size_t p) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      Rng rng(stream_seed(cfg.seed, p + static_cast<std::size_t>(attempt) * static_cast<std::size_t>(cfg.num_samples)));
      DecodeState st = prefix;
      bool ok = true;
      for (int h = 0; h < cfg.horizon; ++h) {
        const double y = LagForecaster::dist_of(st.head).sample(rng);
        if (!std::isfinite(y) || std::abs(y) > kSampleBound) {
          ok = false;
          break;
        }
        out.samples(static_cast<Eigen::Index>(p), h) = sc.from_scaled(y);
        if (h + 1 < cfg.horizon) model.advance(st, y);
      }
      if (ok) return;
    }
    throw NumericError("sample path " + std::to_string(p) + " overflowed twice");
  });
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  std::vector<double> train_nll;
  std::vector<double> val_nll;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  int epochs_run = 0;
};

/// Mean NLL over every token of a raw slice of context_len+1 values (scaled by
/// its first context_len values). Accumulates gradients when asked.
inline double slice_nll(LagForecaster& model, std::span<const double> slice, bool accumulate, double grad_scale = 1.0) {
  const auto& cfg = model.config();
  const auto sc = scale_context(slice.first(static_cast<std::size_t>(cfg.context_len)));
  std::vector<double> scaled(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) scaled[i] = sc.to_scaled(slice[i]);
  const Mat tok = model.tokens(std::span<const double>(scaled).first(static_cast<std::size_t>(cfg.context_len)));
  const Mat head = model.forward_tokens(tok);
  const auto first = static_cast<std::size_t>(cfg.lags.max_lag());
  Mat dhead(head.rows(), 3);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < head.rows(); ++i) {
    double g[3];
    sum += student_t_nll_grad(head(i, 0), head(i, 1), head(i, 2), scaled[first + static_cast<std::size_t>(i) + 1], g);
    for (int c = 0; c < 3; ++c) dhead(i, c) = g[c];
  }
  const double n = static_cast<double>(head.rows());
  if (accumulate) model.backward(dhead * (grad_scale / n));
  return sum / n;
}

/// Start offsets of training and validation slices for one series. Validation
/// slices end inside the last val_fraction of the series.
struct SliceRanges {
  std::size_t train_max = 0;  // train starts in [0, train_max]
  std::size_t val_min = 0, val_max = 0;
};

inline SliceRanges slice_ranges(std::size_t length, const ForecastConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.context_len);
  const auto val_len = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(length))));
  if (length < c + 1 + val_len) {
    throw HistoryError("series of length " + std::to_string(length) + " too short for context " +
                       std::to_string(c) + " plus a validation tail of " + std::to_string(val_len));
  }
  return {length - val_len - c - 1, length - val_len - c, length - c - 1};
}

/// Adam on the mean token NLL over random slices; early stopping on the NLL
/// of a fixed validation slice set; the best-validation weights are kept.
inline TrainReport train_forecaster(LagForecaster& model, const std::vector<std::vector<double>>& series,
                                    int epochs, int patience) {
  const auto& cfg = model.config();
  TrainReport rep;
  if (epochs <= 0) return rep;
  if (series.empty()) throw ArgumentError("train_forecaster: no series");
  if (patience < 1) throw ArgumentError("train_forecaster: patience must be >= 1");
  std::vector<SliceRanges> ranges;
  for (const auto& s : series) ranges.push_back(slice_ranges(s.size(), cfg));
  const std::size_t span_len = static_cast<std::size_t>(cfg.context_len) + 1;

  Rng rng(stream_seed(cfg.seed, 0x7261696eull));
  std::vector<std::pair<std::size_t, std::size_t>> val_set;
  for (int i = 0; i < cfg.val_slices; ++i) {
    const auto s = static_cast<std::size_t>(i) % series.size();
    const auto& r = ranges[s];
    val_set.emplace_back(s, r.val_min + rng.index(r.val_max - r.val_min + 1));
  }
  auto val_nll = [&] {
    double sum = 0.0;
    for (auto [s, start] : val_set) sum += slice_nll(model, std::span(series[s]).subspan(start, span_len), false);
    return sum / static_cast<double>(val_set.size());
  };

  auto ps = model.params();
  nn::Adam opt(cfg.learning_rate);
  double best = val_nll();
  auto best_weights = nn::snapshot(ps);
  int since_best = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    double total = 0.0;
    int done = 0;
    while (done < cfg.slices_per_epoch) {
      const int batch = std::min(cfg.batch_size, cfg.slices_per_epoch - done);
      nn::zero_grad(ps);
      for (int b = 0; b < batch; ++b) {
        const auto s = rng.index(series.size());
        const auto start = rng.index(ranges[s].train_max + 1);
        total += slice_nll(model, std::span(series[s]).subspan(start, span_len), true, 1.0 / batch);
      }
      opt.step(ps);
      done += batch;
    }
    const double train_loss = total / cfg.slices_per_epoch;
    const double v = val_nll();
    if (!std::isfinite(train_loss) || !std::isfinite(v)) {
      throw NumericError("forecaster training: non-finite loss at epoch " + std::to_string(epoch));
    }
    rep.train_nll.push_back(train_loss);
    rep.val_nll.push_back(v);
    rep.epochs_run = epoch;
    if (v < best) {
      best = v;
      best_weights = nn::snapshot(ps);
      rep.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= patience) {
      break;
    }
  }
  nn::restore(ps, best_weights);
  return rep;
}

}  // namespace gaitcast
