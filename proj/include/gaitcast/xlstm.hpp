#pragma once

// xLSTM sequence regressor: stacked sLSTM / mLSTM residual blocks between a
// linear embedding and a linear head. Backpropagation is written by hand;
// grad_check() compares it against central differences.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/nn.hpp"
#include "gaitcast/random.hpp"

namespace gaitcast {

using nn::Mat;
using nn::Vec;

enum class BlockKind { slstm, mlstm };

inline char to_char(BlockKind k) { return k == BlockKind::slstm ? 's' : 'm'; }

inline std::vector<BlockKind> parse_block_pattern(const std::string& s) {
  std::vector<BlockKind> out;
  for (char c : s) {
    if (c == 's' || c == 'S') {
      out.push_back(BlockKind::slstm);
    } else if (c == 'm' || c == 'M') {
      out.push_back(BlockKind::mlstm);
    } else {
      throw ConfigError(std::string("block pattern: unknown block '") + c + "' (expected s or m)");
    }
  }
  return out;
}

inline std::string pattern_string(const std::vector<BlockKind>& p) {
  std::string s;
  for (auto k : p) s += to_char(k);
  return s;
}

struct XlstmConfig {
  int input_dim = 54;
  int output_dim = 16;
  int hidden_size = 32;
  int num_layers = 2;
  int num_heads = 4;
  int conv_kernel = 4;
  std::vector<BlockKind> block_pattern{BlockKind::mlstm, BlockKind::slstm};
  double slstm_proj_factor = 4.0 / 3.0;
  double mlstm_proj_factor = 2.0;
  double learning_rate = 0.01;
  int train_steps = 20;
  std::uint64_t seed = 0;
  int seq_len = 64;  // windows per training subsequence

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string("xlstm: ") + name + " must be positive");
    };
    positive(input_dim, "input_dim");
    positive(output_dim, "output_dim");
    positive(hidden_size, "hidden_size");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(conv_kernel, "conv_kernel");
    positive(train_steps, "train_steps");
    positive(seq_len, "seq_len");
    if (hidden_size % num_heads != 0) throw ConfigError("xlstm: hidden_size must be divisible by num_heads");
    if (static_cast<int>(block_pattern.size()) != num_layers) {
      throw ConfigError("xlstm: block_pattern length must equal num_layers");
    }
    if (!(slstm_proj_factor > 0.0) || !(mlstm_proj_factor > 0.0)) {
      throw ConfigError("xlstm: projection factors must be positive");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("xlstm: learning_rate must be finite and >= 0");
    }
  }

  int slstm_ffn_dim() const {
    return std::max(1, static_cast<int>(std::lround(slstm_proj_factor * hidden_size)));
  }

  /// mLSTM inner width, rounded up to a multiple of num_heads.
  int mlstm_inner_dim() const {
    const int raw = std::max(1, static_cast<int>(std::lround(mlstm_proj_factor * hidden_size)));
    return (raw + num_heads - 1) / num_heads * num_heads;
  }
};

inline nlohmann::json to_json(const XlstmConfig& c) {
  return {{"input_dim", c.input_dim},
          {"output_dim", c.output_dim},
          {"hidden_size", c.hidden_size},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"conv_kernel", c.conv_kernel},
          {"block_pattern", pattern_string(c.block_pattern)},
          {"slstm_proj_factor", c.slstm_proj_factor},
          {"mlstm_proj_factor", c.mlstm_proj_factor},
          {"learning_rate", c.learning_rate},
          {"train_steps", c.train_steps},
          {"seed", c.seed},
          {"seq_len", c.seq_len}};
}

namespace detail {

// Stabilised exponential gate pair shared by both cells. Returns m_t and
// writes the gate values; `forget_branch` records which argument won the max.
struct GatePair {
  double m, i, f;
  bool forget_branch;
};

inline GatePair exp_gates(double i_pre, double f_pre, double m_prev) {
  GatePair g{};
  const double a = f_pre + m_prev;
  g.forget_branch = a >= i_pre;
  g.m = g.forget_branch ? a : i_pre;
  g.i = std::exp(i_pre - g.m);
  g.f = std::exp(a - g.m);
  return g;
}

// Backward through exp_gates. di, df are upstream grads of the gate values;
// dm is the grad of m_t arriving from the next step. Writes preactivation
// grads and returns the grad w.r.t. m_{t-1}.
inline double exp_gates_backward(const GatePair& g, double di, double df, double dm, double& di_pre,
                                 double& df_pre) {
  di_pre = di * g.i;
  dm -= di * g.i;
  const double da = df * g.f;
  df_pre = da;
  double dm_prev = da;
  dm -= da;
  if (g.forget_branch) {
    df_pre += dm;
    dm_prev += dm;
  } else {
    di_pre += dm;
  }
  return dm_prev;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// sLSTM

struct SlstmState {
  Vec c, n, h, m;

  static SlstmState zeros(Eigen::Index size) {
    return {Vec::Zero(size), Vec::Zero(size), Vec::Zero(size), Vec::Zero(size)};
  }
  bool all_finite() const { return c.allFinite() && n.allFinite() && h.allFinite() && m.allFinite(); }
};

struct SlstmPreact {
  Vec i, f, z, o;
};

struct SlstmTrace {
  std::vector<detail::GatePair> gates;
  Vec zeta, o;
};

/// One sLSTM state update from gate preactivations.
inline SlstmState slstm_update(const SlstmPreact& p, const SlstmState& prev, SlstmTrace* trace = nullptr) {
  const Eigen::Index n = p.i.size();
  SlstmState s{Vec(n), Vec(n), Vec(n), Vec(n)};
  if (trace) {
    trace->gates.resize(static_cast<std::size_t>(n));
    trace->zeta.resize(n);
    trace->o.resize(n);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto g = detail::exp_gates(p.i(j), p.f(j), prev.m(j));
    const double zeta = std::tanh(p.z(j));
    const double o = nn::sigmoid(p.o(j));
    s.m(j) = g.m;
    s.c(j) = g.f * prev.c(j) + g.i * zeta;
    s.n(j) = g.f * prev.n(j) + g.i;
    s.h(j) = o * s.c(j) / s.n(j);
    if (trace) {
      trace->gates[static_cast<std::size_t>(j)] = g;
      trace->zeta(j) = zeta;
      trace->o(j) = o;
    }
  }
  if (!s.all_finite()) throw NumericError("slstm: non-finite state");
  return s;
}

class SlstmCell {
 public:
  SlstmCell() = default;
  SlstmCell(const std::string& name, Eigen::Index size, int heads)
      : size_(size),
        wi_(name + ".wi", size, size, heads, true),
        wf_(name + ".wf", size, size, heads, true),
        wz_(name + ".wz", size, size, heads, true),
        wo_(name + ".wo", size, size, heads, true),
        ri_(name + ".ri", size, size, heads),
        rf_(name + ".rf", size, size, heads),
        rz_(name + ".rz", size, size, heads),
        ro_(name + ".ro", size, size, heads) {}

  void init(Rng& rng) {
    for (auto* w : {&wi_, &wf_, &wz_, &wo_, &ri_, &rf_, &rz_, &ro_}) w->init(rng);
    wf_.bias().value.setConstant(1.0);
  }

  void params(nn::ParamList& out) {
    for (auto* w : {&wi_, &wf_, &wz_, &wo_, &ri_, &rf_, &rz_, &ro_}) w->params(out);
  }

  Eigen::Index size() const { return size_; }
  nn::BlockDiagonal& input_weight(char gate) { return *pick(gate, false); }
  nn::BlockDiagonal& recurrent_weight(char gate) { return *pick(gate, true); }

  SlstmPreact preactivations(const Vec& x_if, const Vec& x_zo, const Vec& h_prev) const {
    return {wi_.apply_vec(x_if) + ri_.apply_vec(h_prev), wf_.apply_vec(x_if) + rf_.apply_vec(h_prev),
            wz_.apply_vec(x_zo) + rz_.apply_vec(h_prev), wo_.apply_vec(x_zo) + ro_.apply_vec(h_prev)};
  }

  /// Input and forget gates read `x_if`; cell input and output gates read
  /// `x_zo`. Returns the new state; h_t is state.h.
  SlstmState step(const Vec& x_if, const Vec& x_zo, const SlstmState& s) const {
    return slstm_update(preactivations(x_if, x_zo, s.h), s);
  }
  SlstmState step(const Vec& x, const SlstmState& s) const { return step(x, x, s); }

  Mat forward(const Mat& x_if, const Mat& x_zo) {
    const Eigen::Index t_len = x_if.rows();
    xif_ = x_if;
    xzo_ = x_zo;
    const Mat pi = wi_.apply(x_if), pf = wf_.apply(x_if), pz = wz_.apply(x_zo), po = wo_.apply(x_zo);
    states_.assign(1, SlstmState::zeros(size_));
    traces_.assign(static_cast<std::size_t>(t_len), {});
    Mat h(t_len, size_);
    for (Eigen::Index t = 0; t < t_len; ++t) {
      const auto& prev = states_.back();
      SlstmPreact p{pi.row(t).transpose() + ri_.apply_vec(prev.h), pf.row(t).transpose() + rf_.apply_vec(prev.h),
                    pz.row(t).transpose() + rz_.apply_vec(prev.h), po.row(t).transpose() + ro_.apply_vec(prev.h)};
      states_.push_back(slstm_update(p, prev, &traces_[static_cast<std::size_t>(t)]));
      h.row(t) = states_.back().h.transpose();
    }
    return h;
  }

  /// Returns (d x_if, d x_zo).
  std::pair<Mat, Mat> backward(const Mat& dh_out) {
    const Eigen::Index t_len = dh_out.rows();
    Mat dpi(t_len, size_), dpf(t_len, size_), dpz(t_len, size_), dpo(t_len, size_);
    Vec dh_rec = Vec::Zero(size_), dc_carry = Vec::Zero(size_), dn_carry = Vec::Zero(size_),
        dm_carry = Vec::Zero(size_);
    for (Eigen::Index t = t_len - 1; t >= 0; --t) {
      const auto& tr = traces_[static_cast<std::size_t>(t)];
      const auto& cur = states_[static_cast<std::size_t>(t) + 1];
      const auto& prev = states_[static_cast<std::size_t>(t)];
      const Vec dh = dh_out.row(t).transpose() + dh_rec;
      Vec di_pre(size_), df_pre(size_), dz_pre(size_), do_pre(size_);
      for (Eigen::Index j = 0; j < size_; ++j) {
        const auto& g = tr.gates[static_cast<std::size_t>(j)];
        const double o = tr.o(j);
        const double r = cur.c(j) / cur.n(j);
        do_pre(j) = dh(j) * r * o * (1.0 - o);
        const double dr = dh(j) * o;
        const double dc = dc_carry(j) + dr / cur.n(j);
        const double dn = dn_carry(j) - dr * r / cur.n(j);
        const double df = dc * prev.c(j) + dn * prev.n(j);
        const double di = dc * tr.zeta(j) + dn;
        dz_pre(j) = dc * g.i * (1.0 - tr.zeta(j) * tr.zeta(j));
        dc_carry(j) = dc * g.f;
        dn_carry(j) = dn * g.f;
        dm_carry(j) = detail::exp_gates_backward(g, di, df, dm_carry(j), di_pre(j), df_pre(j));
      }
      dpi.row(t) = di_pre.transpose();
      dpf.row(t) = df_pre.transpose();
      dpz.row(t) = dz_pre.transpose();
      dpo.row(t) = do_pre.transpose();
      dh_rec = ri_.backward_vec(di_pre, prev.h) + rf_.backward_vec(df_pre, prev.h) +
               rz_.backward_vec(dz_pre, prev.h) + ro_.backward_vec(do_pre, prev.h);
    }
    Mat dxif = wi_.backward_with(dpi, xif_) + wf_.backward_with(dpf, xif_);
    Mat dxzo = wz_.backward_with(dpz, xzo_) + wo_.backward_with(dpo, xzo_);
    return {std::move(dxif), std::move(dxzo)};
  }

 private:
  nn::BlockDiagonal* pick(char gate, bool recurrent) {
    switch (gate) {
      case 'i': return recurrent ? &ri_ : &wi_;
      case 'f': return recurrent ? &rf_ : &wf_;
      case 'z': return recurrent ? &rz_ : &wz_;
      case 'o': return recurrent ? &ro_ : &wo_;
      default: throw ArgumentError(std::string("slstm: unknown gate '") + gate + "'");
    }
  }

  Eigen::Index size_ = 0;
  nn::BlockDiagonal wi_, wf_, wz_, wo_, ri_, rf_, rz_, ro_;
  Mat xif_, xzo_;
  std::vector<SlstmState> states_;
  std::vector<SlstmTrace> traces_;
};

// ---------------------------------------------------------------------------
// mLSTM

struct MlstmState {
  std::vector<Mat> C;
  std::vector<Vec> n;
  Vec m;

  static MlstmState zeros(int heads, Eigen::Index head_dim) {
    MlstmState s;
    s.C.assign(static_cast<std::size_t>(heads), Mat::Zero(head_dim, head_dim));
    s.n.assign(static_cast<std::size_t>(heads), Vec::Zero(head_dim));
    s.m = Vec::Zero(heads);
    return s;
  }
  bool all_finite() const {
    for (const auto& c : C) {
      if (!c.allFinite()) return false;
    }
    for (const auto& v : n) {
      if (!v.allFinite()) return false;
    }
    return m.allFinite();
  }
};

/// Per-step mLSTM inputs; k is already scaled by 1/sqrt(head_dim). `i` and
/// `f` hold one preactivation per head, `o` one per channel.
struct MlstmPreact {
  Vec q, k, v, i, f, o;
};

struct MlstmTrace {
  std::vector<detail::GatePair> gates;
  Vec o, htilde, den, nq;
};

struct MlstmOutput {
  Vec h;
  MlstmState state;
};

inline MlstmOutput mlstm_update(const MlstmPreact& p, const MlstmState& prev, MlstmTrace* trace = nullptr) {
  const int heads = static_cast<int>(prev.C.size());
  const Eigen::Index d = p.q.size() / heads;
  MlstmOutput out{Vec(p.q.size()), MlstmState{}};
  out.state.C.resize(static_cast<std::size_t>(heads));
  out.state.n.resize(static_cast<std::size_t>(heads));
  out.state.m.resize(heads);
  Vec o = p.o.unaryExpr([](double x) { return nn::sigmoid(x); });
  Vec htilde(p.q.size()), den(heads), nq(heads);
  std::vector<detail::GatePair> gates(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto hs = static_cast<std::size_t>(h);
    const auto q = p.q.segment(h * d, d);
    const auto k = p.k.segment(h * d, d);
    const auto v = p.v.segment(h * d, d);
    const auto g = detail::exp_gates(p.i(h), p.f(h), prev.m(h));
    gates[hs] = g;
    out.state.m(h) = g.m;
    out.state.C[hs] = g.f * prev.C[hs] + g.i * (v * k.transpose());
    out.state.n[hs] = g.f * prev.n[hs] + g.i * k;
    nq(h) = out.state.n[hs].dot(q);
    den(h) = std::max(std::abs(nq(h)), 1.0);
    htilde.segment(h * d, d) = out.state.C[hs] * q / den(h);
  }
  out.h = o.cwiseProduct(htilde);
  if (!out.state.all_finite() || !out.h.allFinite()) throw NumericError("mlstm: non-finite state");
  if (trace) *trace = {std::move(gates), std::move(o), std::move(htilde), std::move(den), std::move(nq)};
  return out;
}

class MlstmCell {
 public:
  MlstmCell() = default;
  MlstmCell(const std::string& name, Eigen::Index size, int heads)
      : size_(size),
        heads_(heads),
        wq_(name + ".wq", size, size, heads),
        wk_(name + ".wk", size, size, heads),
        wv_(name + ".wv", size, size, heads),
        wi_(name + ".wi", size, heads),
        wf_(name + ".wf", size, heads),
        wo_(name + ".wo", size, size) {
    head_dim_ = size / heads;
    kscale_ = 1.0 / std::sqrt(static_cast<double>(head_dim_));
  }

  void init(Rng& rng) {
    wq_.init(rng);
    wk_.init(rng);
    wv_.init(rng);
    wi_.init(rng);
    wf_.init(rng);
    wo_.init(rng);
    wf_.bias().value.setConstant(1.0);
  }

  void params(nn::ParamList& out) {
    wq_.params(out);
    wk_.params(out);
    wv_.params(out);
    wi_.params(out);
    wf_.params(out);
    wo_.params(out);
  }

  Eigen::Index size() const { return size_; }
  int heads() const { return heads_; }
  Eigen::Index head_dim() const { return head_dim_; }
  nn::BlockDiagonal& wq() { return wq_; }
  nn::BlockDiagonal& wk() { return wk_; }
  nn::BlockDiagonal& wv() { return wv_; }
  nn::Linear& wi() { return wi_; }
  nn::Linear& wf() { return wf_; }
  nn::Linear& wo() { return wo_; }

  MlstmPreact preactivations(const Vec& x_qk, const Vec& x_v) const {
    return {wq_.apply_vec(x_qk), kscale_ * wk_.apply_vec(x_qk), wv_.apply_vec(x_v),
            wi_.apply_vec(x_qk), wf_.apply_vec(x_qk), wo_.apply_vec(x_qk)};
  }

  /// Queries, keys and gates read `x_qk`; values read `x_v`.
  MlstmOutput step(const Vec& x_qk, const Vec& x_v, const MlstmState& s) const {
    return mlstm_update(preactivations(x_qk, x_v), s);
  }
  MlstmOutput step(const Vec& x, const MlstmState& s) const { return step(x, x, s); }

  Mat forward(const Mat& x_qk, const Mat& x_v) {
    const Eigen::Index t_len = x_qk.rows();
    xqk_ = x_qk;
    xv_ = x_v;
    q_ = wq_.apply(x_qk);
    k_ = kscale_ * wk_.apply(x_qk);
    v_ = wv_.apply(x_v);
    const Mat pi = wi_.forward(x_qk), pf = wf_.forward(x_qk), po = wo_.forward(x_qk);
    states_.assign(1, MlstmState::zeros(heads_, head_dim_));
    traces_.assign(static_cast<std::size_t>(t_len), {});
    Mat h(t_len, size_);
    for (Eigen::Index t = 0; t < t_len; ++t) {
      MlstmPreact p{q_.row(t).transpose(), k_.row(t).transpose(), v_.row(t).transpose(),
                    pi.row(t).transpose(), pf.row(t).transpose(), po.row(t).transpose()};
      auto r = mlstm_update(p, states_.back(), &traces_[static_cast<std::size_t>(t)]);
      h.row(t) = r.h.transpose();
      states_.push_back(std::move(r.state));
    }
    return h;
  }

  /// Returns (d x_qk, d x_v).
  std::pair<Mat, Mat> backward(const Mat& dh_out) {
    const Eigen::Index t_len = dh_out.rows();
    const Eigen::Index d = head_dim_;
    Mat dq(t_len, size_), dk(t_len, size_), dv(t_len, size_), dpi(t_len, heads_), dpf(t_len, heads_),
        dpo(t_len, size_);
    std::vector<Mat> dC(static_cast<std::size_t>(heads_), Mat::Zero(d, d));
    std::vector<Vec> dn_carry(static_cast<std::size_t>(heads_), Vec::Zero(d));
    Vec dm_carry = Vec::Zero(heads_);
    for (Eigen::Index t = t_len - 1; t >= 0; --t) {
      const auto& tr = traces_[static_cast<std::size_t>(t)];
      const auto& cur = states_[static_cast<std::size_t>(t) + 1];
      const auto& prev = states_[static_cast<std::size_t>(t)];
      const Vec dh = dh_out.row(t).transpose();
      dpo.row(t) = (dh.array() * tr.htilde.array() * tr.o.array() * (1.0 - tr.o.array())).transpose();
      const Vec dht = dh.cwiseProduct(tr.o);
      for (int h = 0; h < heads_; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        const auto& g = tr.gates[hs];
        const Vec q = q_.row(t).segment(h * d, d).transpose();
        const Vec k = k_.row(t).segment(h * d, d).transpose();
        const Vec v = v_.row(t).segment(h * d, d).transpose();
        const Vec dhs = dht.segment(h * d, d);
        const double den = tr.den(h);
        const Vec du = dhs / den;
        const double dden = -dhs.dot(tr.htilde.segment(h * d, d)) / den;
        const double dnq = std::abs(tr.nq(h)) > 1.0 ? (tr.nq(h) > 0.0 ? dden : -dden) : 0.0;
        Mat& dCh = dC[hs];
        dCh.noalias() += du * q.transpose();
        const Vec dn = dn_carry[hs] + dnq * q;
        const Vec dqh = cur.C[hs].transpose() * du + dnq * cur.n[hs];
        const double df = (dCh.array() * prev.C[hs].array()).sum() + dn.dot(prev.n[hs]);
        const Vec dCk = dCh * k;
        const double di = v.dot(dCk) + dn.dot(k);
        dv.row(t).segment(h * d, d) = (g.i * dCk).transpose();
        dk.row(t).segment(h * d, d) = (g.i * (dCh.transpose() * v + dn)).transpose();
        dq.row(t).segment(h * d, d) = dqh.transpose();
        dCh *= g.f;
        dn_carry[hs] = g.f * dn;
        double di_pre = 0.0, df_pre = 0.0;
        dm_carry(h) = detail::exp_gates_backward(g, di, df, dm_carry(h), di_pre, df_pre);
        dpi(t, h) = di_pre;
        dpf(t, h) = df_pre;
      }
    }
    Mat dxqk = wq_.backward_with(dq, xqk_) + wk_.backward_with(kscale_ * dk, xqk_) + wi_.backward(dpi) +
               wf_.backward(dpf) + wo_.backward(dpo);
    Mat dxv = wv_.backward_with(dv, xv_);
    return {std::move(dxqk), std::move(dxv)};
  }

 private:
  Eigen::Index size_ = 0;
  int heads_ = 1;
  Eigen::Index head_dim_ = 0;
  double kscale_ = 1.0;
  nn::BlockDiagonal wq_, wk_, wv_;
  nn::Linear wi_, wf_, wo_;
  Mat xqk_, xv_, q_, k_, v_;
  std::vector<MlstmState> states_;
  std::vector<MlstmTrace> traces_;
};

// ---------------------------------------------------------------------------
// Residual blocks

class XlstmBlock {
 public:
  virtual ~XlstmBlock() = default;
  virtual BlockKind kind() const = 0;
  virtual void init(Rng& rng) = 0;
  virtual void params(nn::ParamList& out) = 0;
  virtual Mat forward(const Mat& x) = 0;
  virtual Mat backward(const Mat& dy) = 0;
};

/// x + FFN(GroupNorm(sLSTM(conv(LN x), LN x))), gated-GELU FFN.
class SlstmBlock final : public XlstmBlock {
 public:
  SlstmBlock(const std::string& name, int hidden, int heads, int conv_kernel, int ffn_dim)
      : ln_(name + ".ln", hidden),
        conv_(name + ".conv", hidden, conv_kernel),
        cell_(name + ".cell", hidden, heads),
        gn_(name + ".gn", hidden, heads),
        up_(name + ".up", hidden, 2 * ffn_dim),
        down_(name + ".down", ffn_dim, hidden),
        ffn_(ffn_dim) {}

  BlockKind kind() const override { return BlockKind::slstm; }
  void init(Rng& rng) override {
    conv_.init(rng);
    cell_.init(rng);
    up_.init(rng);
    down_.init(rng);
  }
  void params(nn::ParamList& out) override {
    ln_.params(out);
    conv_.params(out);
    cell_.params(out);
    gn_.params(out);
    up_.params(out);
    down_.params(out);
  }
  SlstmCell& cell() { return cell_; }

  Mat forward(const Mat& x) override {
    a_ = ln_.forward(x);
    cv_ = conv_.forward(a_);
    const Mat ac = cv_.unaryExpr([](double v) { return nn::silu(v); });
    const Mat g = gn_.forward(cell_.forward(ac, a_));
    u_ = up_.forward(g);
    const Mat f = u_.leftCols(ffn_).unaryExpr([](double v) { return nn::gelu(v); }).cwiseProduct(u_.rightCols(ffn_));
    return x + down_.forward(f);
  }

  Mat backward(const Mat& dy) override {
    const Mat df = down_.backward(dy);
    Mat du(u_.rows(), 2 * ffn_);
    du.leftCols(ffn_) = df.cwiseProduct(u_.rightCols(ffn_))
                            .cwiseProduct(u_.leftCols(ffn_).unaryExpr([](double v) { return nn::gelu_grad(v); }));
    du.rightCols(ffn_) = df.cwiseProduct(u_.leftCols(ffn_).unaryExpr([](double v) { return nn::gelu(v); }));
    const Mat dhs = gn_.backward(up_.backward(du));
    auto [dac, da] = cell_.backward(dhs);
    const Mat dcv = dac.cwiseProduct(cv_.unaryExpr([](double v) { return nn::silu_grad(v); }));
    da += conv_.backward(dcv);
    return dy + ln_.backward(da);
  }

 private:
  nn::LayerNorm ln_;
  nn::CausalConv1D conv_;
  SlstmCell cell_;
  nn::GroupNorm gn_;
  nn::Linear up_, down_;
  Eigen::Index ffn_;
  Mat a_, cv_, u_;
};

/// x + down((GroupNorm(mLSTM(c, xm)) + skip * c) * silu(z)) where
/// [xm, z] = up(LN x) and c = silu(conv(xm)).
class MlstmBlock final : public XlstmBlock {
 public:
  MlstmBlock(const std::string& name, int hidden, int heads, int conv_kernel, int inner)
      : ln_(name + ".ln", hidden),
        up_(name + ".up", hidden, 2 * inner),
        conv_(name + ".conv", inner, conv_kernel),
        cell_(name + ".cell", inner, heads),
        gn_(name + ".gn", inner, heads),
        skip_(name + ".skip", inner, 1),
        down_(name + ".down", inner, hidden),
        inner_(inner) {
    skip_.value.setOnes();
  }

  BlockKind kind() const override { return BlockKind::mlstm; }
  void init(Rng& rng) override {
    up_.init(rng);
    conv_.init(rng);
    cell_.init(rng);
    down_.init(rng);
  }
  void params(nn::ParamList& out) override {
    ln_.params(out);
    up_.params(out);
    conv_.params(out);
    cell_.params(out);
    gn_.params(out);
    out.push_back(&skip_);
    down_.params(out);
  }
  MlstmCell& cell() { return cell_; }

  Mat forward(const Mat& x) override {
    u_ = up_.forward(ln_.forward(x));
    const Mat xm = u_.leftCols(inner_);
    cv_ = conv_.forward(xm);
    xc_ = cv_.unaryExpr([](double v) { return nn::silu(v); });
    hn_ = gn_.forward(cell_.forward(xc_, xm));
    for (Eigen::Index t = 0; t < hn_.rows(); ++t) hn_.row(t) += xc_.row(t).cwiseProduct(skip_.value.col(0).transpose());
    const Mat y = hn_.cwiseProduct(u_.rightCols(inner_).unaryExpr([](double v) { return nn::silu(v); }));
    return x + down_.forward(y);
  }

  Mat backward(const Mat& dy) override {
    const Mat dyy = down_.backward(dy);
    const auto z = u_.rightCols(inner_);
    const Mat dhn = dyy.cwiseProduct(z.unaryExpr([](double v) { return nn::silu(v); }));
    Mat du(u_.rows(), 2 * inner_);
    du.rightCols(inner_) = dyy.cwiseProduct(hn_).cwiseProduct(z.unaryExpr([](double v) { return nn::silu_grad(v); }));
    skip_.grad.col(0) += dhn.cwiseProduct(xc_).colwise().sum().transpose();
    Mat dxc = dhn;
    for (Eigen::Index t = 0; t < dxc.rows(); ++t) dxc.row(t).array() *= skip_.value.col(0).transpose().array();
    auto [dxc2, dxm] = cell_.backward(gn_.backward(dhn));
    dxc += dxc2;
    const Mat dcv = dxc.cwiseProduct(cv_.unaryExpr([](double v) { return nn::silu_grad(v); }));
    du.leftCols(inner_) = dxm + conv_.backward(dcv);
    return dy + ln_.backward(up_.backward(du));
  }

 private:
  nn::LayerNorm ln_;
  nn::Linear up_;
  nn::CausalConv1D conv_;
  MlstmCell cell_;
  nn::GroupNorm gn_;
  nn::Param skip_;
  nn::Linear down_;
  Eigen::Index inner_;
  Mat u_, cv_, xc_, hn_;
};

// ---------------------------------------------------------------------------
// Model

class XlstmModel {
 public:
  explicit XlstmModel(const XlstmConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    embed_ = nn::Linear("embed", cfg_.input_dim, cfg_.hidden_size);
    for (int l = 0; l < cfg_.num_layers; ++l) {
      const std::string name = "block" + std::to_string(l);
      if (cfg_.block_pattern[static_cast<std::size_t>(l)] == BlockKind::slstm) {
        blocks_.push_back(std::make_unique<SlstmBlock>(name, cfg_.hidden_size, cfg_.num_heads, cfg_.conv_kernel,
                                                       cfg_.slstm_ffn_dim()));
      } else {
        blocks_.push_back(std::make_unique<MlstmBlock>(name, cfg_.hidden_size, cfg_.num_heads, cfg_.conv_kernel,
                                                       cfg_.mlstm_inner_dim()));
      }
    }
    final_ln_ = nn::LayerNorm("final_ln", cfg_.hidden_size);
    head_ = nn::Linear("head", cfg_.hidden_size, cfg_.output_dim);

    Rng rng(cfg_.seed);
    embed_.init(rng);
    for (auto& b : blocks_) b->init(rng);
    head_.init(rng);
  }

  const XlstmConfig& config() const { return cfg_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  XlstmBlock& block(std::size_t i) { return *blocks_[i]; }
  nn::Linear& embed() { return embed_; }
  nn::Linear& head() { return head_; }
  nn::LayerNorm& final_norm() { return final_ln_; }

  nn::ParamList params() {
    nn::ParamList out;
    embed_.params(out);
    for (auto& b : blocks_) b->params(out);
    final_ln_.params(out);
    head_.params(out);
    return out;
  }

  nn::ParamList block_params() {
    nn::ParamList out;
    for (auto& b : blocks_) b->params(out);
    return out;
  }

  /// [T x input_dim] -> [T x output_dim].
  Mat forward(const Mat& x) {
    if (x.cols() != cfg_.input_dim) {
      throw DimensionError("xlstm forward: input has " + std::to_string(x.cols()) + " features, expected " +
                           std::to_string(cfg_.input_dim));
    }
    Mat h = embed_.forward(x);
    for (auto& b : blocks_) h = b->forward(h);
    return head_.forward(final_ln_.forward(h));
  }

  std::vector<Mat> forward(const std::vector<Mat>& batch) {
    std::vector<Mat> out;
    out.reserve(batch.size());
    for (const auto& x : batch) out.push_back(forward(x));
    return out;
  }

  /// Backward for the most recent single-sequence forward call.
  void backward(const Mat& dy) {
    Mat d = final_ln_.backward(head_.backward(dy));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) d = (*it)->backward(d);
    embed_.backward(d);
  }

 private:
  XlstmConfig cfg_;
  nn::Linear embed_;
  std::vector<std::unique_ptr<XlstmBlock>> blocks_;
  nn::LayerNorm final_ln_;
  nn::Linear head_;
};

// ---------------------------------------------------------------------------
// Loss, training, gradient check

inline void check_batch(const std::vector<Mat>& x, const std::vector<Mat>& y, const XlstmConfig& cfg) {
  if (x.empty() || x.size() != y.size()) throw DimensionError("xlstm: feature/target batch sizes differ or are empty");
  for (std::size_t b = 0; b < x.size(); ++b) {
    if (x[b].rows() != y[b].rows() || x[b].rows() == 0) {
      throw DimensionError("xlstm: sequence " + std::to_string(b) + " has mismatched or empty length");
    }
    if (x[b].cols() != cfg.input_dim || y[b].cols() != cfg.output_dim) {
      throw DimensionError("xlstm: sequence " + std::to_string(b) + " has wrong feature/target width");
    }
  }
}

/// Pooled RMSE over every element of every sequence. With `accumulate_grad`
/// the parameter gradients of that RMSE are accumulated into the model.
inline double rmse_loss(XlstmModel& model, const std::vector<Mat>& x, const std::vector<Mat>& y,
                        bool accumulate_grad = false) {
  double sse = 0.0;
  double count = 0.0;
  auto ps = model.params();
  std::vector<Mat> g0;
  if (accumulate_grad) {
    g0.reserve(ps.size());
    for (auto* p : ps) {
      g0.push_back(p->grad);
      p->grad.setZero();
    }
  }
  for (std::size_t b = 0; b < x.size(); ++b) {
    const Mat r = model.forward(x[b]) - y[b];
    sse += r.squaredNorm();
    count += static_cast<double>(r.size());
    if (accumulate_grad) model.backward(2.0 * r);  // gradient of SSE; rescaled below
  }
  const double rmse = std::sqrt(sse / count);
  if (accumulate_grad) {
    const double scale = rmse > 0.0 ? 1.0 / (2.0 * count * rmse) : 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->grad = g0[i] + scale * ps[i]->grad;
  }
  return rmse;
}

/// Full-batch Adam on the pooled RMSE. Entry s of the curve is the loss at
/// the start of step s (before that step's update).
inline std::vector<double> train(XlstmModel& model, const std::vector<Mat>& x, const std::vector<Mat>& y,
                                 double learning_rate, int steps) {
  check_batch(x, y, model.config());
  if (steps < 1) throw ArgumentError("xlstm train: train_steps must be >= 1");
  auto ps = model.params();
  nn::Adam opt(learning_rate);
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    nn::zero_grad(ps);
    double loss = 0.0;
    try {
      loss = rmse_loss(model, x, y, true);
    } catch (const NumericError& e) {
      throw NumericError("xlstm train: step " + std::to_string(s + 1) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw NumericError("xlstm train: non-finite loss at step " + std::to_string(s + 1));
    curve.push_back(loss);
    if (learning_rate > 0.0) opt.step(ps);
  }
  return curve;
}

inline std::vector<double> train(XlstmModel& model, const std::vector<Mat>& x, const std::vector<Mat>& y) {
  return train(model, x, y, model.config().learning_rate, model.config().train_steps);
}

/// Relative error |a - n| / max(|a|, |n|, floor). Gradients smaller than the
/// floor are compared in absolute terms; there the O(eps^2) truncation error
/// of the central difference dominates any relative measure.
inline double gradient_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Central differences (step eps) over every element of every parameter;
/// the relative-error floor equals eps.
inline GradCheckResult grad_check(XlstmModel& model, const std::vector<Mat>& x, const std::vector<Mat>& y,
                                  double eps = 1e-5) {
  check_batch(x, y, model.config());
  auto ps = model.params();
  nn::zero_grad(ps);
  rmse_loss(model, x, y, true);
  GradCheckResult res;
  for (auto* p : ps) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value(i);
      p->value(i) = orig + eps;
      const double lp = rmse_loss(model, x, y);
      p->value(i) = orig - eps;
      const double lm = rmse_loss(model, x, y);
      p->value(i) = orig;
      const double err = gradient_relative_error(p->grad(i), (lp - lm) / (2.0 * eps), eps);
      ++res.checked;
      if (err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_param = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

/// Cuts a [W x D] window sequence into consecutive chunks of `len` rows; a
/// shorter trailing chunk is kept.
inline std::vector<Mat> chunk_sequence(const Mat& seq, int len) {
  if (len < 1) throw ArgumentError("chunk_sequence: length must be >= 1");
  std::vector<Mat> out;
  for (Eigen::Index s = 0; s < seq.rows(); s += len) {
    out.push_back(seq.middleRows(s, std::min<Eigen::Index>(len, seq.rows() - s)));
  }
  return out;
}

}  // namespace gaitcast
