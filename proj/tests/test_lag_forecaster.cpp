#include <gtest/gtest.h>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gaitcast/checkpoint.hpp"
#include "gaitcast/lag_forecaster.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace gaitcast;

namespace {

ForecastConfig tiny_config(std::uint64_t seed = 1) {
  ForecastConfig c;
  c.context_len = 48;
  c.lags = LagSet::dense(8);
  c.d_model = 16;
  c.num_heads = 2;
  c.num_layers = 2;
  c.horizon = 16;
  c.num_samples = 40;
  c.seed = seed;
  c.max_epochs = 30;
  c.slices_per_epoch = 64;
  return c;
}

std::vector<double> white_noise(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

std::vector<double> random_walk(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  double x = 0.0;
  for (auto& y : v) y = (x += rng.normal());
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Lags and scaling

TEST(LagFeatures, IndexArithmetic) {
  const std::vector<double> s = {10, 20, 30, 40};
  const LagSet lags{{1, 2}};
  EXPECT_EQ(build_lag_features(s, 3, lags), (std::vector<double>{30, 20}));
  EXPECT_THROW(build_lag_features(s, 0, LagSet{{1}}), HistoryError);
}

TEST(LagFeatures, HistoryErrorNamesMaxLag) {
  const std::vector<double> s(100, 1.0);
  try {
    build_lag_features(s, 10, LagSet::dense(64));
    FAIL();
  } catch (const HistoryError& e) {
    EXPECT_NE(std::string(e.what()).find("64"), std::string::npos);
  }
}

TEST(LagFeatures, DenseLagsMatchDirectIndexing) {
  const auto s = gaitcast::testing::random_vector(500, 3);
  const auto lags = LagSet::dense(64);
  for (std::size_t t : {64u, 100u, 499u}) {
    const auto f = build_lag_features(s, t, lags);
    for (int l = 1; l <= 64; ++l) EXPECT_EQ(f[static_cast<std::size_t>(l - 1)], s[t - static_cast<std::size_t>(l)]);
  }
  UnivariateSeries us{s, 1.0, "x"};
  EXPECT_EQ(build_lag_features(us, 200, lags), build_lag_features(s, 200, lags));
}

TEST(LagSet, Validation) {
  EXPECT_THROW(LagSet{}.validate(), ConfigError);
  EXPECT_THROW((LagSet{{2, 1}}.validate()), ConfigError);
  EXPECT_THROW((LagSet{{0, 1}}.validate()), ConfigError);
  EXPECT_EQ(LagSet::dense(64).max_lag(), 64);
}

TEST(ScaleContext, TwoPoints) {
  const std::vector<double> v = {1, 3};
  const auto s = scale_context(v);
  EXPECT_EQ(s.scaled, (std::vector<double>{-1, 1}));
  EXPECT_EQ(s.mean, 2.0);
  EXPECT_EQ(s.std, 1.0);
}

TEST(ScaleContext, ConstantUsesFloor) {
  const std::vector<double> v(10, 4.5);
  const auto s = scale_context(v);
  EXPECT_EQ(s.std, kScaleFloor);
  for (double x : s.scaled) EXPECT_EQ(x, 0.0);
}

TEST(ScaleContext, RoundTrip) {
  const auto v = gaitcast::testing::random_vector(300, 4, 50.0);
  const auto s = scale_context(v);
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(s.from_scaled(s.scaled[i]) - v[i]));
  EXPECT_LT(worst, 1e-10);
  EXPECT_THROW(scale_context(std::vector<double>{1.0}), ArgumentError);
}

// ---------------------------------------------------------------------------
// Student-t head

TEST(StudentT, NllMatchesBoostDensity) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const StudentT d{2.0 + 30.0 * rng.uniform(), rng.normal(), 0.1 + 3.0 * rng.uniform()};
    const double y = d.loc + 4.0 * rng.normal();
    boost::math::students_t_distribution<double> t(d.df);
    const double ref = -std::log(boost::math::pdf(t, (y - d.loc) / d.scale) / d.scale);
    EXPECT_NEAR(d.nll(y), ref, 1e-10 * std::max(1.0, std::abs(ref)));
  }
}

TEST(StudentT, NllGradientMatchesFiniteDifferences) {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    double raw[3] = {2.0 * rng.normal(), rng.normal(), rng.normal()};
    const double y = 2.0 * rng.normal();
    double g[3];
    student_t_nll_grad(raw[0], raw[1], raw[2], y, g);
    for (int k = 0; k < 3; ++k) {
      double up[3] = {raw[0], raw[1], raw[2]}, dn[3] = {raw[0], raw[1], raw[2]};
      up[k] += 1e-6;
      dn[k] -= 1e-6;
      const double fd = (head_to_dist(up[0], up[1], up[2]).nll(y) - head_to_dist(dn[0], dn[1], dn[2]).nll(y)) / 2e-6;
      EXPECT_NEAR(g[k], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "component " << k;
    }
  }
}

TEST(StudentT, ConstraintsByConstruction) {
  for (double raw : {-30.0, -5.0, 0.0, 5.0, 50.0}) {
    const auto d = head_to_dist(raw, 0.0, raw);
    EXPECT_GT(d.df, 2.0);
    EXPECT_GT(d.scale, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Network

TEST(Forecaster, ForwardDistIsValidAndDeterministic) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const auto ctx = random_walk(48, rng);
    const auto a = forward_dist(model, ctx);
    const auto b = forward_dist(model, ctx);
    EXPECT_GT(a.df, 2.0);
    EXPECT_GT(a.scale, 0.0);
    EXPECT_EQ(a.df, b.df);
    EXPECT_EQ(a.loc, b.loc);
    EXPECT_EQ(a.scale, b.scale);
  }
  EXPECT_THROW(forward_dist(model, std::vector<double>(47, 0.0)), DimensionError);
}

TEST(Forecaster, IncrementalDecodeMatchesFullForward) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  Rng rng(8);
  const auto sc = scale_context(white_noise(48, rng));
  const Mat full = model.forward_tokens(model.tokens(sc.scaled));
  const auto st = model.begin(sc.scaled);
  EXPECT_LT((full.row(full.rows() - 1).transpose() - st.head).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forecaster, MaskedAttentionIsCausal) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  Rng rng(9);
  const auto sc = scale_context(white_noise(48, rng));
  Mat tok = model.tokens(sc.scaled);
  const Mat h0 = model.forward_tokens(tok);
  for (Eigen::Index t : {0, 10, 39}) {
    Mat tp = tok;
    tp.bottomRows(tok.rows() - t - 1).array() += 1.7;
    const Mat h1 = model.forward_tokens(tp);
    EXPECT_EQ(h0.topRows(t + 1), h1.topRows(t + 1)) << "t=" << t;
  }
}

TEST(Forecaster, BackwardMatchesFiniteDifferences) {
  auto cfg = tiny_config(3);
  cfg.context_len = 20;
  cfg.lags = LagSet{{1, 2, 5}};
  cfg.d_model = 8;
  LagForecaster model(cfg);
  Rng rng(10);
  const auto slice = white_noise(21, rng);
  auto ps = model.params();
  nn::zero_grad(ps);
  slice_nll(model, slice, true);
  double worst = 0.0;
  for (auto* p : ps) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double o = p->value(i);
      p->value(i) = o + 1e-5;
      const double up = slice_nll(model, slice, false);
      p->value(i) = o - 1e-5;
      const double dn = slice_nll(model, slice, false);
      p->value(i) = o;
      const double fd = (up - dn) / 2e-5;
      worst = std::max(worst, std::abs(fd - p->grad(i)) / std::max({std::abs(fd), std::abs(p->grad(i)), 1e-5}));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Sampling, ShapeOfSingleDraw) {
  auto cfg = tiny_config();
  cfg.num_samples = 1;
  cfg.horizon = 1;
  LagForecaster model(cfg);
  Rng rng(11);
  const auto d = sample_forecast(model, white_noise(48, rng), cfg);
  EXPECT_EQ(d.samples.rows(), 1);
  EXPECT_EQ(d.samples.cols(), 1);
}

TEST(Sampling, DegenerateScaleGivesIdenticalPaths) {
  auto cfg = tiny_config();
  LagForecaster model(cfg);
  model.head().weight().value.row(2).setZero();
  model.head().bias().value(2, 0) = -1000.0;  // softplus underflows to 0
  Rng rng(12);
  const auto d = sample_forecast(model, white_noise(48, rng), cfg);
  for (Eigen::Index p = 1; p < d.samples.rows(); ++p) EXPECT_EQ(d.samples.row(p), d.samples.row(0));
}

TEST(Sampling, IndependentOfThreadCount) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  Rng rng(13);
  const auto ctx = random_walk(48, rng);
  EXPECT_EQ(sample_forecast(model, ctx, cfg, 1).samples, sample_forecast(model, ctx, cfg, 3).samples);
}

TEST(Sampling, QuantilesMonotonic) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  Rng rng(14);
  const auto d = sample_forecast(model, random_walk(48, rng), cfg);
  for (Eigen::Index t = 0; t < d.horizon(); ++t) {
    double prev = -std::numeric_limits<double>::infinity();
    for (double q = 0.0; q <= 1.0; q += 0.05) {
      const double v = d.quantile(q, t);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
  EXPECT_THROW(d.quantile(1.5, 0), RangeError);
}

TEST(Sampling, ShiftAndScaleEquivariance) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  Rng rng(15);
  const auto ctx = random_walk(48, rng);
  const double a = 3.5, c = -40.0;
  std::vector<double> moved(ctx.size());
  for (std::size_t i = 0; i < ctx.size(); ++i) moved[i] = a * ctx[i] + c;
  const auto d0 = sample_forecast(model, ctx, cfg);
  const auto d1 = sample_forecast(model, moved, cfg);
  const Mat expected = (a * d0.samples).array() + c;
  EXPECT_LT((d1.samples - expected).cwiseAbs().maxCoeff(), 1e-8 * expected.cwiseAbs().maxCoeff());
}

// ---------------------------------------------------------------------------
// CRPS

TEST(Crps, PerfectForecastIsZero) {
  const std::vector<double> s(7, 2.5);
  EXPECT_EQ(crps_empirical(s, 2.5), 0.0);
}

TEST(Crps, TwoPointEnumeration) { EXPECT_EQ(crps_empirical(std::vector<double>{0.0, 2.0}, 1.0), 0.5); }

TEST(Crps, MatchesPairwiseOracle) {
  Rng rng(16);
  for (int i = 0; i < 50; ++i) {
    const auto s = gaitcast::testing::random_vector(1 + rng.index(60), 100 + static_cast<std::uint64_t>(i), 2.0);
    const double y = rng.normal();
    EXPECT_NEAR(crps_empirical(s, y), oracle::crps_pairwise(s, y), 1e-12);
  }
}

TEST(Crps, GaussianClosedFormStratified) {
  // Midpoint quantiles of N(0, 1): removes Monte Carlo noise so only the
  // estimator itself is compared.
  const std::size_t n = 50000;
  boost::math::normal_distribution<double> nd;
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = boost::math::quantile(nd, (static_cast<double>(i) + 0.5) / n);
  for (double y : {-2.0, 0.0, 0.5, 3.0}) {
    const double ref = oracle::gaussian_crps(0.0, 1.0, y);
    EXPECT_NEAR(crps_empirical(s, y), ref, 0.01 * ref) << "y=" << y;
  }
}

TEST(Crps, GaussianClosedFormRandomDraws) {
  // Random draws: the tolerance is four Monte Carlo standard errors of
  // mean |X - y| (sd <= sqrt(1 + y^2)).
  Rng rng(17);
  std::vector<double> s(50000);
  for (auto& x : s) x = rng.normal();
  const double ref = oracle::gaussian_crps(0.0, 1.0, 0.5);
  EXPECT_NEAR(crps_empirical(s, 0.5), ref, 4.0 * std::sqrt(1.25 / 50000.0));
}

TEST(Crps, NonNegativeAndScaleEquivariant) {
  Rng rng(18);
  for (int i = 0; i < 100; ++i) {
    auto s = gaitcast::testing::random_vector(1 + rng.index(40), 500 + static_cast<std::uint64_t>(i));
    const double y = 2.0 * rng.normal();
    const double a = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.1 + 10.0 * rng.uniform());
    const double base = crps_empirical(s, y);
    EXPECT_GE(base, 0.0);
    for (auto& x : s) x *= a;
    EXPECT_NEAR(crps_empirical(s, a * y), std::abs(a) * base, 1e-10 * std::max(1.0, std::abs(a) * base));
  }
}

TEST(Crps, IdenticalSamplesGiveAbsoluteError) {
  const std::vector<double> s(5, 1.25);
  EXPECT_DOUBLE_EQ(crps_empirical(s, -0.75), 2.0);
  EXPECT_THROW(crps_empirical(std::vector<double>{}, 0.0), ArgumentError);
}

TEST(EvaluateForecasts, Aggregation) {
  ForecastDistribution perfect{"a", Mat::Constant(1, 3, 1.0)};
  auto s0 = evaluate_forecasts({perfect}, {{1.0, 1.0, 1.0}});
  EXPECT_EQ(s0.mean, 0.0);
  EXPECT_EQ(s0.std, 0.0);

  ForecastDistribution f1{"a", Mat::Constant(1, 2, 0.2)}, f2{"b", Mat::Constant(1, 2, 0.6)};
  auto s = evaluate_forecasts({f1, f2}, {{0.0, 0.0}, {0.0, 0.0}});
  EXPECT_NEAR(s.mean, 0.4, 1e-15);
  EXPECT_NEAR(s.std, 0.2, 1e-15);
  ASSERT_EQ(s.targets.size(), 2u);
  EXPECT_NEAR(s.per_target[1].median, 0.6, 1e-15);
  EXPECT_THROW(evaluate_forecasts({f1}, {}), DimensionError);
  EXPECT_THROW(evaluate_forecasts({f1}, {{0.0}}), DimensionError);
}

TEST(EvaluateForecasts, BoxStats) {
  const auto b = box_stats({5, 1, 4, 2, 3});
  EXPECT_EQ(b.min, 1);
  EXPECT_EQ(b.q1, 2);
  EXPECT_EQ(b.median, 3);
  EXPECT_EQ(b.q3, 4);
  EXPECT_EQ(b.max, 5);
}

// ---------------------------------------------------------------------------
// Training

TEST(Training, ZeroEpochsIsNoOp) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  const auto before = nn::snapshot(model.params());
  Rng rng(19);
  const auto rep = train_forecaster(model, {white_noise(500, rng)}, 0, 5);
  EXPECT_EQ(rep.epochs_run, 0);
  EXPECT_TRUE(rep.val_nll.empty());
  const auto after = nn::snapshot(model.params());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Training, TooShortSeriesRejected) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  EXPECT_THROW(train_forecaster(model, {std::vector<double>(50, 0.0)}, 1, 5), HistoryError);
}

TEST(Training, NonFiniteLossNamesEpoch) {
  const auto cfg = tiny_config();
  LagForecaster model(cfg);
  std::vector<double> s(400, 1.0);
  for (std::size_t i = 0; i < s.size(); i += 7) s[i] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_forecaster(model, {s}, 3, 5);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Training, EarlyStoppingRespectsPatience) {
  auto cfg = tiny_config(20);
  cfg.slices_per_epoch = 8;
  LagForecaster model(cfg);
  Rng rng(21);
  const auto rep = train_forecaster(model, {white_noise(600, rng)}, 50, 2);
  EXPECT_LE(rep.epochs_run, 50);
  EXPECT_LE(rep.epochs_run - rep.best_epoch, 2);
  EXPECT_EQ(rep.val_nll.size(), static_cast<std::size_t>(rep.epochs_run));
}

TEST(Training, WhiteNoiseCalibration) {
  auto cfg = tiny_config(22);
  cfg.context_len = 64;
  cfg.lags = LagSet::dense(16);
  LagForecaster model(cfg);
  Rng rng(23);
  std::vector<std::vector<double>> series;
  for (int i = 0; i < 4; ++i) series.push_back(white_noise(3000, rng));
  train_forecaster(model, series, cfg.max_epochs, cfg.patience);
  double sd = 0.0;
  for (int i = 0; i < 50; ++i) {
    const auto ctx = white_noise(64, rng);
    sd += forward_dist(model, ctx).stddev() * scale_context(ctx).std / 50.0;
  }
  EXPECT_GT(sd, 0.8);
  EXPECT_LT(sd, 1.2);
}

TEST(Training, ConstantSeriesMedian) {
  auto cfg = tiny_config(24);
  cfg.max_epochs = 3;
  LagForecaster model(cfg);
  const double c = 17.5;
  train_forecaster(model, {std::vector<double>(400, c)}, cfg.max_epochs, cfg.patience);
  const auto d = sample_forecast(model, std::vector<double>(48, c), cfg);
  for (Eigen::Index t = 0; t < d.horizon(); ++t) EXPECT_NEAR(d.quantile(0.5, t), c, 0.05 * c);
}

TEST(Training, SineBeatsClimatology) {
  auto cfg = tiny_config(25);
  cfg.context_len = 64;
  cfg.lags = LagSet::dense(16);
  cfg.horizon = 24;
  LagForecaster model(cfg);
  std::vector<double> s(3000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / 37.0);
  const std::vector<double> train(s.begin(), s.begin() + 2200);
  train_forecaster(model, {train}, cfg.max_epochs, cfg.patience);
  double model_crps = 0.0, clim_crps = 0.0;
  int n = 0;
  for (std::size_t o = 2300; o + 24 <= s.size(); o += 50, ++n) {
    const std::span<const double> ctx(s.data() + o - 64, 64);
    const std::vector<double> truth(s.begin() + static_cast<std::ptrdiff_t>(o),
                                    s.begin() + static_cast<std::ptrdiff_t>(o) + 24);
    model_crps += forecast_crps(sample_forecast(model, ctx, cfg), truth);
    clim_crps += forecast_crps(climatology_forecast(ctx, 24), truth);
  }
  EXPECT_LT(model_crps / n, clim_crps / n);
}

TEST(Training, RandomWalkDispersionGrows) {
  auto cfg = tiny_config(26);
  cfg.context_len = 64;
  cfg.lags = LagSet::dense(16);
  cfg.horizon = 64;
  cfg.num_samples = 100;
  LagForecaster model(cfg);
  Rng rng(27);
  std::vector<std::vector<double>> series;
  for (int i = 0; i < 4; ++i) series.push_back(random_walk(3000, rng));
  train_forecaster(model, series, cfg.max_epochs, cfg.patience);
  double s1 = 0.0, s64 = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto c = cfg;
    c.seed = seed;
    const auto sd = sample_forecast(model, random_walk(64, rng), c).stddev_per_step();
    s1 += sd.front() / 50.0;
    s64 += sd.back() / 50.0;
  }
  EXPECT_GT(s64, s1);
}

TEST(Forecaster, CheckpointRoundTrip) {
  const auto cfg = tiny_config(28);
  LagForecaster a(cfg);
  const auto dir = gaitcast::testing::scratch_dir("forecaster_ckpt");
  save_checkpoint(dir, "lag_forecaster", to_json(cfg), a.params());
  LagForecaster b(tiny_config(29));
  load_checkpoint(dir, "lag_forecaster", b.params());
  Rng rng(30);
  const auto ctx = white_noise(48, rng);
  EXPECT_EQ(sample_forecast(a, ctx, cfg).samples, sample_forecast(b, ctx, cfg).samples);
}
