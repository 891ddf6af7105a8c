#pragma once

// Small dense layers with hand-written backward passes. Sequences are
// Eigen matrices with one timestep per row. Each layer caches what its
// backward pass needs from the most recent forward call, so a layer instance
// must not run forward concurrently.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/random.hpp"

namespace gaitcast::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}

  void fill_uniform(Rng& rng, double bound) {
    for (Eigen::Index i = 0; i < value.size(); ++i) value(i) = rng.uniform(-bound, bound);
  }
};

using ParamList = std::vector<Param*>;

inline void zero_grad(const ParamList& ps) {
  for (auto* p : ps) p->grad.setZero();
}

inline std::size_t parameter_count(const ParamList& ps) {
  std::size_t n = 0;
  for (const auto* p : ps) n += static_cast<std::size_t>(p->value.size());
  return n;
}

inline std::vector<Mat> snapshot(const ParamList& ps) {
  std::vector<Mat> out;
  out.reserve(ps.size());
  for (const auto* p : ps) out.push_back(p->value);
  return out;
}

inline void restore(const ParamList& ps, const std::vector<Mat>& values) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = values[i];
}

// ---------------------------------------------------------------------------
// Elementwise activations

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline double gelu(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// ---------------------------------------------------------------------------
// Layers

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, bool bias = true)
      : w_(name + ".weight", out, in), has_bias_(bias) {
    if (bias) b_ = Param(name + ".bias", out, 1);
  }

  void init(Rng& rng) { w_.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(w_.value.cols()))); }
  void params(ParamList& out) {
    out.push_back(&w_);
    if (has_bias_) out.push_back(&b_);
  }

  Param& weight() { return w_; }
  Param& bias() { return b_; }
  const Param& weight() const { return w_; }
  const Param& bias() const { return b_; }
  Eigen::Index in_dim() const { return w_.value.cols(); }
  Eigen::Index out_dim() const { return w_.value.rows(); }

  Mat forward(const Mat& x) {
    x_ = x;
    return apply(x);
  }

  Mat apply(const Mat& x) const {
    if (x.cols() != w_.value.cols()) throw DimensionError("linear " + w_.name + ": input width mismatch");
    Mat y = x * w_.value.transpose();
    if (has_bias_) y.rowwise() += b_.value.col(0).transpose();
    return y;
  }

  Vec apply_vec(const Vec& x) const {
    Vec y = w_.value * x;
    if (has_bias_) y += b_.value.col(0);
    return y;
  }

  Mat backward(const Mat& dy) {
    w_.grad.noalias() += dy.transpose() * x_;
    if (has_bias_) b_.grad.col(0) += dy.colwise().sum().transpose();
    return dy * w_.value;
  }

 private:
  Param w_;
  Param b_;
  bool has_bias_ = true;
  Mat x_;
};

/// Per-head independent linear maps: input slice h -> output slice h.
class BlockDiagonal {
 public:
  BlockDiagonal() = default;
  BlockDiagonal(const std::string& name, Eigen::Index in, Eigen::Index out, int heads, bool bias = false)
      : heads_(heads), has_bias_(bias) {
    if (heads < 1 || in % heads != 0 || out % heads != 0) {
      throw DimensionError("block-diagonal " + name + ": dimensions " + std::to_string(in) + "->" +
                           std::to_string(out) + " not divisible by " + std::to_string(heads) + " heads");
    }
    in_head_ = in / heads;
    out_head_ = out / heads;
    w_ = Param(name + ".weight", out, in_head_);
    if (bias) b_ = Param(name + ".bias", out, 1);
  }

  void init(Rng& rng) { w_.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(in_head_))); }
  void params(ParamList& out) {
    out.push_back(&w_);
    if (has_bias_) out.push_back(&b_);
  }

  int heads() const { return heads_; }
  Param& weight() { return w_; }
  Param& bias() { return b_; }

  /// Head h's matrix [out/heads x in/heads].
  auto head_weight(int h) const { return w_.value.middleRows(h * out_head_, out_head_); }

  Mat forward(const Mat& x) {
    x_ = x;
    return apply(x);
  }

  Mat apply(const Mat& x) const {
    if (x.cols() != in_head_ * heads_) throw DimensionError("block-diagonal " + w_.name + ": input width mismatch");
    Mat y(x.rows(), out_head_ * heads_);
    for (int h = 0; h < heads_; ++h) {
      y.middleCols(h * out_head_, out_head_).noalias() =
          x.middleCols(h * in_head_, in_head_) * head_weight(h).transpose();
    }
    if (has_bias_) y.rowwise() += b_.value.col(0).transpose();
    return y;
  }

  Vec apply_vec(const Vec& x) const {
    if (x.size() != in_head_ * heads_) throw DimensionError("block-diagonal " + w_.name + ": input size mismatch");
    Vec y(out_head_ * heads_);
    for (int h = 0; h < heads_; ++h) {
      y.segment(h * out_head_, out_head_).noalias() = head_weight(h) * x.segment(h * in_head_, in_head_);
    }
    if (has_bias_) y += b_.value.col(0);
    return y;
  }

  /// Accumulates dW for a single (dy, x) pair and returns dx.
  Vec backward_vec(const Vec& dy, const Vec& x) {
    Vec dx(in_head_ * heads_);
    for (int h = 0; h < heads_; ++h) {
      const auto dyh = dy.segment(h * out_head_, out_head_);
      w_.grad.middleRows(h * out_head_, out_head_).noalias() += dyh * x.segment(h * in_head_, in_head_).transpose();
      dx.segment(h * in_head_, in_head_).noalias() = head_weight(h).transpose() * dyh;
    }
    if (has_bias_) b_.grad.col(0) += dy;
    return dx;
  }

  Mat backward(const Mat& dy) { return backward_with(dy, x_); }

  Mat backward_with(const Mat& dy, const Mat& x) {
    Mat dx(x.rows(), in_head_ * heads_);
    for (int h = 0; h < heads_; ++h) {
      const auto dyh = dy.middleCols(h * out_head_, out_head_);
      w_.grad.middleRows(h * out_head_, out_head_).noalias() += dyh.transpose() * x.middleCols(h * in_head_, in_head_);
      dx.middleCols(h * in_head_, in_head_).noalias() = dyh * head_weight(h);
    }
    if (has_bias_) b_.grad.col(0) += dy.colwise().sum().transpose();
    return dx;
  }

 private:
  Param w_;
  Param b_;
  int heads_ = 1;
  Eigen::Index in_head_ = 0, out_head_ = 0;
  bool has_bias_ = false;
  Mat x_;
};

/// Row-wise layer normalisation with gain and bias.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index dim) : g_(name + ".weight", dim, 1), b_(name + ".bias", dim, 1) {
    g_.value.setOnes();
  }

  void params(ParamList& out) {
    out.push_back(&g_);
    out.push_back(&b_);
  }

  Mat forward(const Mat& x) {
    const Eigen::Index d = x.cols();
    xhat_.resize(x.rows(), d);
    rstd_.resize(x.rows());
    Mat y(x.rows(), d);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      const double mean = x.row(t).mean();
      const double var = (x.row(t).array() - mean).square().mean();
      rstd_(t) = 1.0 / std::sqrt(var + kEps);
      xhat_.row(t) = (x.row(t).array() - mean) * rstd_(t);
      y.row(t) = xhat_.row(t).array() * g_.value.col(0).transpose().array() + b_.value.col(0).transpose().array();
    }
    return y;
  }

  Vec apply_vec(const Vec& x) const {
    const double mean = x.mean();
    const double var = (x.array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kEps);
    return ((x.array() - mean) * rstd * g_.value.col(0).array() + b_.value.col(0).array()).matrix();
  }

  Mat backward(const Mat& dy) {
    Mat dx(dy.rows(), dy.cols());
    const double d = static_cast<double>(dy.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
      g_.grad.col(0) += (dy.row(t).array() * xhat_.row(t).array()).matrix().transpose();
      b_.grad.col(0) += dy.row(t).transpose();
      const Eigen::RowVectorXd dxh = dy.row(t).array() * g_.value.col(0).transpose().array();
      const double m1 = dxh.sum() / d;
      const double m2 = dxh.dot(xhat_.row(t)) / d;
      dx.row(t) = rstd_(t) * (dxh.array() - m1 - xhat_.row(t).array() * m2);
    }
    return dx;
  }

  static constexpr double kEps = 1e-5;

 private:
  Param g_;
  Param b_;
  Mat xhat_;
  Vec rstd_;
};

/// Normalises each of `groups` contiguous channel groups per row; gain only.
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const std::string& name, Eigen::Index dim, int groups) : g_(name + ".weight", dim, 1), groups_(groups) {
    if (groups < 1 || dim % groups != 0) throw DimensionError("group norm " + name + ": dim not divisible by groups");
    g_.value.setOnes();
  }

  void params(ParamList& out) { out.push_back(&g_); }

  Mat forward(const Mat& x) {
    const Eigen::Index gs = x.cols() / groups_;
    xhat_.resize(x.rows(), x.cols());
    rstd_.resize(x.rows(), groups_);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      for (int g = 0; g < groups_; ++g) {
        const auto seg = x.row(t).segment(g * gs, gs);
        const double mean = seg.mean();
        const double var = (seg.array() - mean).square().mean();
        rstd_(t, g) = 1.0 / std::sqrt(var + kEps);
        xhat_.row(t).segment(g * gs, gs) = (seg.array() - mean) * rstd_(t, g);
      }
    }
    Mat y = xhat_;
    for (Eigen::Index t = 0; t < y.rows(); ++t) y.row(t).array() *= g_.value.col(0).transpose().array();
    return y;
  }

  Mat backward(const Mat& dy) {
    const Eigen::Index gs = dy.cols() / groups_;
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
      g_.grad.col(0) += (dy.row(t).array() * xhat_.row(t).array()).matrix().transpose();
      const Eigen::RowVectorXd dxh = dy.row(t).array() * g_.value.col(0).transpose().array();
      for (int g = 0; g < groups_; ++g) {
        const auto d = dxh.segment(g * gs, gs);
        const auto xh = xhat_.row(t).segment(g * gs, gs);
        const double m1 = d.mean();
        const double m2 = d.dot(xh) / static_cast<double>(gs);
        dx.row(t).segment(g * gs, gs) = rstd_(t, g) * (d.array() - m1 - xh.array() * m2);
      }
    }
    return dx;
  }

  static constexpr double kEps = 1e-5;

 private:
  Param g_;
  int groups_ = 1;
  Mat xhat_;
  Mat rstd_;
};

/// Depthwise causal convolution: y[t] depends on x[t-K+1 .. t] only (zero
/// left padding). Tap K-1 multiplies the current sample.
class CausalConv1D {
 public:
  CausalConv1D() = default;
  CausalConv1D(const std::string& name, Eigen::Index channels, int kernel_size)
      : w_(name + ".weight", channels, kernel_size), b_(name + ".bias", channels, 1), k_(kernel_size) {
    if (kernel_size < 1) throw ArgumentError("causal conv: kernel_size must be >= 1");
  }

  void init(Rng& rng) { w_.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(k_))); }
  void params(ParamList& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }
  Param& weight() { return w_; }
  Param& bias() { return b_; }
  int kernel_size() const { return k_; }

  Mat forward(const Mat& x) {
    x_ = x;
    return apply(x);
  }

  Mat apply(const Mat& x) const {
    if (x.cols() != w_.value.rows()) throw DimensionError("causal conv " + w_.name + ": channel mismatch");
    const Eigen::Index t_len = x.rows();
    Mat y(t_len, x.cols());
    for (Eigen::Index t = 0; t < t_len; ++t) {
      Eigen::RowVectorXd acc = b_.value.col(0).transpose();
      for (int k = 0; k < k_; ++k) {
        const Eigen::Index src = t - (k_ - 1) + k;
        if (src < 0) continue;
        acc.array() += w_.value.col(k).transpose().array() * x.row(src).array();
      }
      y.row(t) = acc;
    }
    return y;
  }

  Mat backward(const Mat& dy) {
    Mat dx = Mat::Zero(x_.rows(), x_.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
      b_.grad.col(0) += dy.row(t).transpose();
      for (int k = 0; k < k_; ++k) {
        const Eigen::Index src = t - (k_ - 1) + k;
        if (src < 0) continue;
        w_.grad.col(k).array() += (dy.row(t).array() * x_.row(src).array()).transpose();
        dx.row(src).array() += dy.row(t).array() * w_.value.col(k).transpose().array();
      }
    }
    return dx;
  }

 private:
  Param w_;
  Param b_;
  int k_ = 1;
  Mat x_;
};

// ---------------------------------------------------------------------------

/// Adam with bias correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamList& ps) {
    if (m_.empty()) {
      for (const auto* p : ps) {
        m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace gaitcast::nn
