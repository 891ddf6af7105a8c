#include <gtest/gtest.h>

#include <cmath>

#include "gaitcast/gpr.hpp"
#include "gaitcast/random.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace gaitcast {
namespace {

oracle::Matrix to_rows(const Eigen::MatrixXd& m) {
  oracle::Matrix out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  }
  return out;
}

TEST(Kernel, ClosedForms) {
  Eigen::VectorXd a(2), b(2);
  a << 0.0, 0.0;
  b << 1.0, 1.0;
  EXPECT_DOUBLE_EQ(kernel_eval(a, a, KernelParams(1.0, 1.0)), 1.0);
  EXPECT_NEAR(kernel_eval(a, b, KernelParams(1.0, 1.0)), std::exp(-1.0), 1e-12);
  Eigen::VectorXd c(1), d(1);
  c << 0.0;
  d << 1.0;
  // 2.5 * exp(-1 / (2 * 0.25)) computed by hand: 2.5 * e^-2.
  EXPECT_NEAR(kernel_eval(c, d, KernelParams(2.5, 0.5)), 0.33833820809153176, 1e-12);
  EXPECT_THROW(kernel_eval(a, c, KernelParams(1.0, 1.0)), DimensionError);
}

TEST(Kernel, BoundsEnforced) {
  EXPECT_THROW(KernelParams(1e-4, 1.0), RangeError);
  EXPECT_THROW(KernelParams(2e3, 1.0), RangeError);
  EXPECT_THROW(KernelParams(1.0, 1e-3), RangeError);
  EXPECT_THROW(KernelParams(1.0, 1e3), RangeError);
  EXPECT_THROW(KernelParams(1.0, 1.0, 1e-12), RangeError);
  EXPECT_NO_THROW(KernelParams(1e-3, 1e-2, 1e-10));
  EXPECT_NO_THROW(KernelParams(1e3, 1e2));
}

TEST(Kernel, MatrixSymmetricAndPsd) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(40, 5);
  const KernelParams p(2.0, 0.8, 1e-8);
  const Eigen::MatrixXd k = detail::train_kernel(x, p);
  EXPECT_LT((k - k.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index i = 0; i < 40; ++i) {
    for (Eigen::Index j = 0; j < 40; ++j) {
      EXPECT_NEAR(k(i, j), kernel_eval(x.row(i), x.row(j), p), 1e-12);
    }
  }
  EXPECT_NO_THROW(fit(x, Eigen::VectorXd::Random(40), p));
}

TEST(Fit, SinglePointInterpolation) {
  Eigen::MatrixXd x(1, 1);
  x << 0.0;
  Eigen::VectorXd y(1);
  y << 7.0;
  const auto m = fit(x, y, KernelParams(1.0, 1.0, 1e-10));
  EXPECT_NEAR(predict(m, x).mean(0), 7.0, 1e-6);
}

TEST(Fit, NoiselessSineInterpolation) {
  Eigen::MatrixXd x(5, 1);
  Eigen::VectorXd y(5);
  for (int i = 0; i < 5; ++i) {
    x(i, 0) = 3.0 * i / 4.0;
    y(i) = std::sin(x(i, 0));
  }
  const auto m = fit(x, y, KernelParams(1.0, 1.0, 1e-10));
  const auto pr = predict(m, x);
  EXPECT_LT((pr.mean - y).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Fit, DimensionChecks) {
  EXPECT_THROW(fit(Eigen::MatrixXd(0, 2), Eigen::VectorXd(0), KernelParams(1, 1)), ArgumentError);
  EXPECT_THROW(fit(Eigen::MatrixXd::Zero(3, 2), Eigen::VectorXd::Zero(2), KernelParams(1, 1)), DimensionError);
  const auto m = fit(Eigen::MatrixXd::Random(3, 2), Eigen::VectorXd::Random(3), KernelParams(1, 1));
  EXPECT_THROW(predict(m, Eigen::MatrixXd::Zero(1, 3)), DimensionError);
}

TEST(Fit, JitterEscalationOnDuplicateRows) {
  // Identical rows with conflicting targets and the smallest noise: the
  // factorisation either succeeds at the floor or after escalation.
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(30, 2);
  Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(30, 0, 1);
  const auto m = fit(x, y, KernelParams(1e3, 100.0, 1e-10));
  EXPECT_GE(m.noise_used, 1e-10);
  EXPECT_TRUE(m.alpha.allFinite());
}

TEST(Predict, PriorReversionFarFromData) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(10, 3);
  Eigen::VectorXd y = Eigen::VectorXd::Random(10);
  const KernelParams p(1.5, 0.3, 1e-6);
  const auto m = fit(x, y, p);
  Eigen::MatrixXd q = Eigen::MatrixXd::Constant(1, 3, 100.0 * 0.3 + 1.0);
  const auto pr = predict(m, q);
  EXPECT_LT(std::abs(pr.mean(0)), 1e-3 * std::sqrt(1.5));
  EXPECT_NEAR(pr.variance(0), 1.5 + 1e-6, 0.01 * (1.5 + 1e-6));
  // Variance at the data is no larger than far away.
  const auto at = predict(m, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    EXPECT_GE(at.variance(i), 0.0);
    EXPECT_LE(at.variance(i), pr.variance(0));
  }
}

TEST(Predict, MatchesDenseInverseOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int n = 2 + static_cast<int>(rng.index(49));
    const int d = 1 + static_cast<int>(rng.index(6));
    Eigen::MatrixXd x(n, d);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.uniform(-2.0, 2.0);
    for (Eigen::Index i = 0; i < n; ++i) y(i) = rng.normal();
    Eigen::MatrixXd q(7, d);
    for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = rng.uniform(-3.0, 3.0);
    const KernelParams p(rng.uniform(0.1, 5.0), rng.uniform(0.3, 2.0), 1e-3);
    const auto pr = predict(fit(x, y, p), q);
    const auto ref = oracle::gp_bruteforce(to_rows(x), std::vector<double>(y.data(), y.data() + n), to_rows(q),
                                           p.signal_variance(), p.length_scale(), p.noise_variance());
    for (int i = 0; i < 7; ++i) {
      EXPECT_NEAR(pr.mean(i), ref.mean[static_cast<std::size_t>(i)], 1e-8) << "seed " << seed;
      EXPECT_NEAR(pr.variance(i), ref.variance[static_cast<std::size_t>(i)], 1e-8) << "seed " << seed;
    }
  }
}

TEST(Predict, TwoPointToyMatchesDenseInverse) {
  Eigen::MatrixXd x(2, 1);
  x << 0.0, 1.0;
  Eigen::VectorXd y(2);
  y << 1.0, -1.0;
  Eigen::MatrixXd q(3, 1);
  q << 0.5, -0.25, 2.0;
  const KernelParams p(1.3, 0.7, 0.01);
  const auto pr = predict(fit(x, y, p), q);
  const auto ref = oracle::gp_bruteforce(to_rows(x), {1.0, -1.0}, to_rows(q), 1.3, 0.7, 0.01);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(pr.mean(i), ref.mean[static_cast<std::size_t>(i)], 1e-10);
    EXPECT_NEAR(pr.variance(i), ref.variance[static_cast<std::size_t>(i)], 1e-10);
  }
}

TEST(Likelihood, MatchesOracle) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(12, 2);
  const Eigen::VectorXd y = Eigen::VectorXd::Random(12);
  const KernelParams p(0.7, 0.9, 1e-3);
  EXPECT_NEAR(log_marginal_likelihood(x, y, p),
              oracle::gp_log_likelihood(to_rows(x), std::vector<double>(y.data(), y.data() + 12), 0.7, 0.9, 1e-3),
              1e-8);
}

TEST(Optimize, BeatsFixedGrid) {
  Eigen::MatrixXd x(5, 1);
  Eigen::VectorXd y(5);
  for (int i = 0; i < 5; ++i) {
    x(i, 0) = 3.0 * i / 4.0;
    y(i) = std::sin(x(i, 0));
  }
  const double noise = 1e-6;
  const auto best = optimize_hyperparameters(x, y, noise);
  const double best_ll = log_marginal_likelihood(x, y, best);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      const double sf2 = std::pow(10.0, -3.0 + 6.0 * i / 4.0);
      const double l = std::pow(10.0, -2.0 + 4.0 * j / 4.0);
      double ll = -1e300;
      try {
        ll = log_marginal_likelihood(x, y, KernelParams(sf2, l, noise));
      } catch (const ConditioningError&) {
      }
      EXPECT_GE(best_ll, ll) << "grid point sf2=" << sf2 << " l=" << l;
    }
  }
  EXPECT_GE(best.signal_variance(), 1e-3);
  EXPECT_LE(best.signal_variance(), 1e3);
  EXPECT_GE(best.length_scale(), 1e-2);
  EXPECT_LE(best.length_scale(), 1e2);
}

TEST(Evaluate, ClosedForms) {
  const std::vector<double> a{1, 2, 3};
  const auto same = evaluate(a, a);
  EXPECT_EQ(same.mae, 0.0);
  EXPECT_EQ(same.rmse, 0.0);
  const auto m = evaluate(std::vector<double>{0, 0}, std::vector<double>{3, 4});
  EXPECT_DOUBLE_EQ(m.mae, 3.5);
  EXPECT_NEAR(m.rmse, std::sqrt(12.5), 1e-12);
  EXPECT_THROW(evaluate(std::vector<double>{1}, std::vector<double>{1, 2}), DimensionError);
  EXPECT_THROW(evaluate(std::vector<double>{}, std::vector<double>{}), ArgumentError);
}

TEST(Evaluate, RmseAtLeastMae) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto a = testing::random_vector(1 + seed % 17, seed);
    const auto b = testing::random_vector(1 + seed % 17, seed + 1000, 3.0);
    const auto m = evaluate(a, b);
    EXPECT_GE(m.rmse, m.mae);
  }
}

TEST(Persistence, JsonRoundTripIsExact) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(8, 3);
  const Eigen::VectorXd y = Eigen::VectorXd::Random(8);
  const auto m = fit(x, y, KernelParams(1.234567890123, 0.4321, 1e-5));
  const auto dir = testing::scratch_dir("gpr_json");
  save_gpr(m, dir / "m.json");
  const auto back = load_gpr(dir / "m.json");
  EXPECT_EQ(back.x_train, m.x_train);
  EXPECT_EQ(back.y_train, m.y_train);
  EXPECT_EQ(back.params.signal_variance(), m.params.signal_variance());
  EXPECT_EQ(back.params.length_scale(), m.params.length_scale());
  const Eigen::MatrixXd q = Eigen::MatrixXd::Random(4, 3);
  EXPECT_EQ(predict(back, q).mean, predict(m, q).mean);
}

}  // namespace
}  // namespace gaitcast
