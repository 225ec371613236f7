#pragma once

// A small gated linear attention language model over MQAR tokens, with a
// hand-written backward pass. Activations are row-major matrices with one
// row per token, sample-major (row b * L + t).
//
// Layer (pre-norm, residual):
//   u        = RMSNorm(x)
//   q, k, v* = SiLU(causal depthwise conv(u W_q | u W_k | u W_v))
//   q, k     = per-head L2 normalisation           (Palimpsa-D, Ablation)
//   beta     = b_scale_h softplus(u W_b1 W_b2 + b_b)
//   d_t      = softplus(u W_d + b_d),   A = softplus(A_raw),   I_prior = exp(I_raw)
//   w        = sigmoid(u W_gate_in)_h v*  (D, Ablation)   or   d_t v*   (M)
//   y        = recurrence readout on (k, w, beta, q, d_t); Ablation freezes importance
//   y        = y + r_h v*
//   out      = (per-head RMSNorm(y) * sigmoid(u W_g)) W_o
// followed by a final RMSNorm and tied-embedding logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "palimpsa/autograd.hpp"
#include "palimpsa/mqar/data.hpp"
#include "palimpsa/mqar/params.hpp"
#include "palimpsa/recurrence.hpp"

namespace palimpsa::mqar {

enum class Variant { PalimpsaD, PalimpsaM, Ablation };
enum class Precision { F32, F64 };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::PalimpsaD: return "palimpsa_d";
    case Variant::PalimpsaM: return "palimpsa_m";
    case Variant::Ablation: return "ablation";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "palimpsa_d") return Variant::PalimpsaD;
  if (s == "palimpsa_m") return Variant::PalimpsaM;
  if (s == "ablation") return Variant::Ablation;
  throw ConfigError("unknown model variant '" + s + "' (expected palimpsa_d, palimpsa_m or ablation)");
}

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

inline const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_state = 16;
  std::size_t expand_v = 2;
  std::size_t expand_k = 1;
  std::size_t beta_rank = 4;
  std::size_t vocab = 256;
  std::size_t conv_size = 4;
  std::size_t chunk_len = 64;
  Variant variant = Variant::PalimpsaD;
  Precision precision = Precision::F32;
  double b_scale_init = 1.0;
  double init_std = 0.02;

  std::size_t head_dk() const { return d_state * expand_k; }
  std::size_t head_dv() const { return expand_v * d_model / n_heads; }
  std::size_t key_dim() const { return n_heads * head_dk(); }
  std::size_t value_dim() const { return n_heads * head_dv(); }
  bool metaplastic() const { return variant != Variant::Ablation; }
  bool normalize_qk() const { return variant != Variant::PalimpsaM; }
  bool input_gate() const { return variant != Variant::PalimpsaM; }

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_state < 1 || expand_v < 1 || expand_k < 1)
      throw ConfigError("model: dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (expand_v * d_model % n_heads != 0) throw ConfigError("model: expand_v * d_model must divide by n_heads");
    if (beta_rank < 1) throw ConfigError("model: beta_rank must be >= 1");
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (conv_size < 1) throw ConfigError("model: conv_size must be >= 1");
    if (chunk_len < 1) throw ConfigError("model: chunk_len must be >= 1");
    if (!(b_scale_init > 0)) throw ConfigError("model: b_scale_init must be > 0");
    if (!(init_std > 0)) throw ConfigError("model: init_std must be > 0");
  }
};

/// Per-pass quantities behind the memory-window and importance plots.
/// Per-head vectors are layer-major (layer * n_heads + head).
struct Diagnostics {
  double mean_log_N = 0.0;
  std::vector<double> ratio_per_head;        // batch mean of (I_max - I_min) / I_min, final state
  std::vector<double> imin_margin_per_head;  // batch min of I_min - I_prior, final state
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double query_accuracy = std::numeric_limits<double>::quiet_NaN();

  double min_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (double x : imin_margin_per_head) m = std::min(m, x);
    return m;
  }
};

namespace detail {

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

inline double inv_softplus(double y) { return y > 20 ? y : std::log(std::expm1(y)); }

/// y = x / s per group of g consecutive columns, s = sqrt(c * sum x^2 + eps).
/// c = 1/g gives RMS normalisation, c = 1 the L2 normalisation.
template <typename T>
void group_normalize(const Mat<T>& x, Eigen::Index g, T c, T eps, Mat<T>& y, Mat<T>& s) {
  const Eigen::Index groups = x.cols() / g;
  y.resize(x.rows(), x.cols());
  s.resize(x.rows(), groups);
  for (Eigen::Index n = 0; n < x.rows(); ++n)
    for (Eigen::Index h = 0; h < groups; ++h) {
      const auto blk = x.row(n).segment(h * g, g);
      const T sc = std::sqrt(c * blk.squaredNorm() + eps);
      s(n, h) = sc;
      y.row(n).segment(h * g, g) = blk / sc;
    }
}

/// dx = (dy - c y (y . dy)) / s, per group.
template <typename T>
Mat<T> group_normalize_backward(const Mat<T>& y, const Mat<T>& s, Eigen::Index g, T c, const Mat<T>& dy) {
  Mat<T> dx(y.rows(), y.cols());
  for (Eigen::Index n = 0; n < y.rows(); ++n)
    for (Eigen::Index h = 0; h < s.cols(); ++h) {
      const auto yb = y.row(n).segment(h * g, g);
      const auto db = dy.row(n).segment(h * g, g);
      dx.row(n).segment(h * g, g) = (db - (c * yb.dot(db)) * yb) / s(n, h);
    }
  return dx;
}

/// Causal depthwise convolution within each sample: out[t] = sum_s w[s] (.) in[t - s].
template <typename T>
Mat<T> causal_conv(const Mat<T>& in, const Eigen::Map<const Mat<T>>& w, std::size_t len) {
  Mat<T> out = Mat<T>::Zero(in.rows(), in.cols());
  const auto taps = static_cast<std::size_t>(w.rows());
  for (Eigen::Index n = 0; n < in.rows(); ++n) {
    const std::size_t t = static_cast<std::size_t>(n) % len;
    for (std::size_t s = 0; s < taps && s <= t; ++s)
      out.row(n).array() += w.row(static_cast<Eigen::Index>(s)).array() * in.row(n - static_cast<Eigen::Index>(s)).array();
  }
  return out;
}

template <typename T>
void causal_conv_backward(const Mat<T>& in, const Eigen::Map<const Mat<T>>& w, std::size_t len, const Mat<T>& dout,
                          Mat<T>& din, Eigen::Map<Mat<T>> dw) {
  din = Mat<T>::Zero(in.rows(), in.cols());
  const auto taps = static_cast<std::size_t>(w.rows());
  for (Eigen::Index n = 0; n < in.rows(); ++n) {
    const std::size_t t = static_cast<std::size_t>(n) % len;
    for (std::size_t s = 0; s < taps && s <= t; ++s) {
      const auto src = n - static_cast<Eigen::Index>(s);
      din.row(src).array() += w.row(static_cast<Eigen::Index>(s)).array() * dout.row(n).array();
      dw.row(static_cast<Eigen::Index>(s)).array() += dout.row(n).array() * in.row(src).array();
    }
  }
}

template <typename T>
Mat<T> silu(const Mat<T>& c) {
  return c.unaryExpr([](T x) { return x * sigmoid(x); });
}

template <typename T>
Mat<T> silu_backward(const Mat<T>& c, const Mat<T>& ds) {
  return ds.binaryExpr(c, [](T g, T x) {
    const T s = sigmoid(x);
    return g * s * (T(1) + x * (T(1) - s));
  });
}

}  // namespace detail

template <typename T>
struct CrossEntropy {
  T loss = T(0);
  Mat<T> dlogits;           // gradient of the mean loss
  std::size_t correct = 0;  // argmax over [answer_lo, answer_hi) equals the target
};

/// Mean softmax cross entropy over rows of `logits` against `targets`.
/// answer_hi < 0 means the full vocabulary.
template <typename T>
CrossEntropy<T> cross_entropy(const Mat<T>& logits, const std::vector<int>& targets, int answer_lo = 0,
                              int answer_hi = -1) {
  if (targets.empty() || static_cast<std::size_t>(logits.rows()) != targets.size())
    throw ConfigError("cross_entropy: need one target per logit row and at least one row");
  if (answer_hi < 0) answer_hi = static_cast<int>(logits.cols());
  if (answer_lo < 0 || answer_lo >= answer_hi || answer_hi > logits.cols())
    throw ConfigError("cross_entropy: bad answer range");
  CrossEntropy<T> r;
  const T inv_count = T(1) / static_cast<T>(targets.size());
  r.dlogits.resize(logits.rows(), logits.cols());
  double loss = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const int target = targets[static_cast<std::size_t>(i)];
    if (target < 0 || target >= logits.cols()) throw ConfigError("cross_entropy: target outside vocab");
    const T mx = row.maxCoeff();
    const auto ex = (row.array() - mx).exp();
    const T z = ex.sum();
    loss += static_cast<double>(std::log(z) + mx - row(target));
    r.dlogits.row(i) = ex / z * inv_count;
    r.dlogits(i, target) -= inv_count;
    Eigen::Index best = answer_lo;
    for (Eigen::Index j = answer_lo; j < answer_hi; ++j)
      if (row(j) > row(best)) best = j;
    r.correct += best == target;
  }
  r.loss = static_cast<T>(loss / static_cast<double>(targets.size()));
  return r;
}

template <typename T>
struct LayerCache {
  Mat<T> xhat, rms, u;
  Mat<T> pq, pk, pv, cq, ck, cv, sq, sk, sv;
  Mat<T> qn, kn, qs, ks;
  Mat<T> z1, z2, beta, zd, dt, gb, w;
  Mat<T> y_kernel;  // recurrence readout before the value residual
  Mat<T> yhat, rms_y, gate, z;
  Vec<T> A, I_prior, b_scale;
  std::vector<KernelSequence<T>> seqs;  // task b * n_heads + h
  std::vector<CheckpointStore<T>> stores;
};

template <typename T>
struct ForwardCache {
  std::vector<int> tokens;
  std::size_t batch = 0, len = 0;
  std::vector<LayerCache<T>> layers;
  Mat<T> fhat, frms, hf;
};

template <typename T>
struct ForwardResult {
  Mat<T> logits;                  // one row per entry of `rows`
  std::vector<std::size_t> rows;  // flattened token positions
  Diagnostics diag;
};

template <typename T>
struct LossGrad {
  T loss = T(0);
  Vec<T> grad;
  Diagnostics diag;
  std::size_t correct = 0;
  std::size_t counted = 0;
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto kd = static_cast<Eigen::Index>(cfg_.key_dim());
    const auto vd = static_cast<Eigen::Index>(cfg_.value_dim());
    const auto h = static_cast<Eigen::Index>(cfg_.n_heads);
    const auto r = static_cast<Eigen::Index>(cfg_.beta_rank);
    const auto taps = static_cast<Eigen::Index>(cfg_.conv_size);
    embed_ = layout_.add("embed", static_cast<Eigen::Index>(cfg_.vocab), d, true);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Slots s;
      s.norm = layout_.add(p + "norm", 1, d, false);
      s.wq = layout_.add(p + "w_q", d, kd, true);
      s.wk = layout_.add(p + "w_k", d, kd, true);
      s.wv = layout_.add(p + "w_v", d, vd, true);
      s.conv_q = layout_.add(p + "conv_q", taps, kd, true);
      s.conv_k = layout_.add(p + "conv_k", taps, kd, true);
      s.conv_v = layout_.add(p + "conv_v", taps, vd, true);
      s.wb1 = layout_.add(p + "w_beta1", d, r, true);
      s.wb2 = layout_.add(p + "w_beta2", r, vd, true);
      s.bb = layout_.add(p + "b_beta", 1, vd, false);
      s.wd = layout_.add(p + "w_dt", d, h, true);
      s.bd = layout_.add(p + "b_dt", 1, h, false);
      if (cfg_.input_gate()) s.wgi = layout_.add(p + "w_gate_in", d, h, true);
      s.a_raw = layout_.add(p + "a_raw", 1, h, false);
      s.ip_raw = layout_.add(p + "i_prior_raw", 1, h, false);
      s.bs_raw = layout_.add(p + "b_scale_raw", 1, h, false);
      s.resid = layout_.add(p + "residual", 1, h, false);
      s.norm_y = layout_.add(p + "norm_y", 1, vd, false);
      s.wg = layout_.add(p + "w_gate_out", d, vd, true);
      s.wo = layout_.add(p + "w_o", vd, d, true);
      slots_.push_back(s);
    }
    final_norm_ = layout_.add("final_norm", 1, d, false);
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.size(); }

  Vec<T> init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(mix_seed(seed ^ 0x5a17ull));
    std::normal_distribution<double> normal(0.0, cfg_.init_std);
    const double conv_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.conv_size));
    std::uniform_real_distribution<double> conv_init(-conv_bound, conv_bound);
    Vec<T> p = Vec<T>::Zero(static_cast<Eigen::Index>(layout_.size()));
    for (std::size_t i = 0; i < layout_.entries().size(); ++i) {
      const auto& e = layout_[i];
      auto v = layout_.view(p, i);
      const bool is_conv = e.name.find("conv_") != std::string::npos;
      if (e.decay)
        for (Eigen::Index j = 0; j < v.size(); ++j)
          v.data()[j] = static_cast<T>(is_conv ? conv_init(rng) : normal(rng));
    }
    const std::size_t h = cfg_.n_heads;
    for (const auto& s : slots_) {
      layout_.view(p, s.norm).setOnes();
      layout_.view(p, s.norm_y).setOnes();
      for (std::size_t j = 0; j < h; ++j) {
        const double frac = h == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(h - 1);
        const double A = 0.01 + frac * (0.16 - 0.01);
        const double dt = std::exp(std::log(1e-3) + frac * (std::log(1e-1) - std::log(1e-3)));
        const auto jj = static_cast<Eigen::Index>(j);
        layout_.view(p, s.a_raw)(0, jj) = static_cast<T>(detail::inv_softplus(A));
        layout_.view(p, s.bd)(0, jj) = static_cast<T>(detail::inv_softplus(dt));
        layout_.view(p, s.ip_raw)(0, jj) = T(0);
        layout_.view(p, s.bs_raw)(0, jj) = static_cast<T>(std::log(cfg_.b_scale_init));
        layout_.view(p, s.resid)(0, jj) = T(0);
      }
    }
    layout_.view(p, final_norm_).setOnes();
    return p;
  }

  /// Forward pass. Logits are produced for every position when
  /// `all_positions`, otherwise only at masked (query) positions.
  ForwardResult<T> forward(const Vec<T>& params, const MqarBatch& batch, WorkerPool& pool, bool all_positions,
                           ForwardCache<T>* cache = nullptr) const {
    check_batch(params, batch);
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c.tokens = batch.tokens;
    c.batch = batch.batch;
    c.len = batch.len;
    c.layers.assign(cfg_.n_layers, {});
    const auto n = static_cast<Eigen::Index>(batch.tokens.size());
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);

    ForwardResult<T> out;
    out.diag.ratio_per_head.assign(cfg_.n_layers * cfg_.n_heads, 0.0);
    out.diag.imin_margin_per_head.assign(cfg_.n_layers * cfg_.n_heads, std::numeric_limits<double>::infinity());

    const auto E = layout_.view(params, embed_);
    Mat<T> x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = E.row(batch.tokens[static_cast<std::size_t>(i)]);

    double log_n_sum = 0;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      x += layer_forward(params, l, x, batch, pool, c.layers[l], out.diag, log_n_sum);
      if (!x.allFinite()) throw NumericError("model: non-finite activation after layer " + std::to_string(l));
    }
    out.diag.mean_log_N = log_n_sum / static_cast<double>(cfg_.n_layers * cfg_.n_heads * static_cast<std::size_t>(n));

    detail::group_normalize<T>(x, d, T(1) / T(d), eps(), c.fhat, c.frms);
    c.hf = c.fhat.array().rowwise() * layout_.view(params, final_norm_).row(0).array();
    for (std::size_t i = 0; i < batch.targets.size(); ++i)
      if (all_positions || batch.targets[i] >= 0) out.rows.push_back(i);
    out.logits.resize(static_cast<Eigen::Index>(out.rows.size()), static_cast<Eigen::Index>(cfg_.vocab));
    for (std::size_t r = 0; r < out.rows.size(); ++r)
      out.logits.row(static_cast<Eigen::Index>(r)).noalias() =
          c.hf.row(static_cast<Eigen::Index>(out.rows[r])) * E.transpose();
    return out;
  }

  /// Mean cross entropy over masked positions, its gradient, diagnostics and
  /// the number of correct argmax predictions among tokens [lo, hi).
  LossGrad<T> loss_and_grads(const Vec<T>& params, const MqarBatch& batch, WorkerPool& pool, bool want_grad = true,
                             int answer_lo = 0, int answer_hi = -1) const {
    ForwardCache<T> cache;
    auto fwd = forward(params, batch, pool, false, want_grad ? &cache : nullptr);
    if (fwd.rows.empty()) throw ConfigError("loss: batch has no masked positions");
    std::vector<int> targets;
    targets.reserve(fwd.rows.size());
    for (std::size_t row : fwd.rows) targets.push_back(batch.targets[row]);
    const auto ce = cross_entropy(fwd.logits, targets, answer_lo, answer_hi);
    LossGrad<T> r;
    r.loss = ce.loss;
    r.correct = ce.correct;
    r.counted = targets.size();
    if (!std::isfinite(static_cast<double>(r.loss))) throw NumericError("model: non-finite loss");
    r.diag = fwd.diag;
    r.diag.train_loss = static_cast<double>(r.loss);
    if (want_grad) r.grad = backward(params, cache, fwd.rows, ce.dlogits, pool);
    return r;
  }

 private:
  struct Slots {
    std::size_t norm, wq, wk, wv, conv_q, conv_k, conv_v, wb1, wb2, bb, wd, bd, wgi = 0, a_raw, ip_raw, bs_raw, resid,
        norm_y, wg, wo;
  };

  static T eps() { return T(1e-6); }

  void check_batch(const Vec<T>& params, const MqarBatch& batch) const {
    if (static_cast<std::size_t>(params.size()) != layout_.size()) throw ConfigError("model: parameter vector size");
    if (batch.tokens.size() != batch.batch * batch.len || batch.targets.size() != batch.tokens.size())
      throw ConfigError("model: malformed batch");
    for (int t : batch.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) throw ConfigError("model: token id outside vocab");
    for (int t : batch.targets)
      if (t >= static_cast<int>(cfg_.vocab)) throw ConfigError("model: target id outside vocab");
  }

  HeadParams<T> head_params(const LayerCache<T>& c, std::size_t h) const {
    const auto hh = static_cast<Eigen::Index>(h);
    return {cfg_.head_dk(), cfg_.head_dv(), c.A(hh), c.I_prior(hh)};
  }

  Mat<T> layer_forward(const Vec<T>& P, std::size_t l, const Mat<T>& x, const MqarBatch& batch, WorkerPool& pool,
                       LayerCache<T>& c, Diagnostics& diag, double& log_n_sum) const {
    const Slots& s = slots_[l];
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
    const auto dk = static_cast<Eigen::Index>(cfg_.head_dk());
    const auto dv = static_cast<Eigen::Index>(cfg_.head_dv());
    const auto L = static_cast<Eigen::Index>(batch.len);
    const std::size_t len = batch.len;

    detail::group_normalize<T>(x, d, T(1) / T(d), eps(), c.xhat, c.rms);
    c.u = c.xhat.array().rowwise() * layout_.view(P, s.norm).row(0).array();
    c.pq.noalias() = c.u * layout_.view(P, s.wq);
    c.pk.noalias() = c.u * layout_.view(P, s.wk);
    c.pv.noalias() = c.u * layout_.view(P, s.wv);
    c.cq = detail::causal_conv<T>(c.pq, layout_.view(P, s.conv_q), len);
    c.ck = detail::causal_conv<T>(c.pk, layout_.view(P, s.conv_k), len);
    c.cv = detail::causal_conv<T>(c.pv, layout_.view(P, s.conv_v), len);
    c.sq = detail::silu(c.cq);
    c.sk = detail::silu(c.ck);
    c.sv = detail::silu(c.cv);
    if (cfg_.normalize_qk()) {
      detail::group_normalize<T>(c.sq, dk, T(1), eps(), c.qn, c.qs);
      detail::group_normalize<T>(c.sk, dk, T(1), eps(), c.kn, c.ks);
    }
    const Mat<T>& qk = cfg_.normalize_qk() ? c.qn : c.sq;
    const Mat<T>& kk = cfg_.normalize_qk() ? c.kn : c.sk;

    c.A.resize(H);
    c.I_prior.resize(H);
    c.b_scale.resize(H);
    for (Eigen::Index h = 0; h < H; ++h) {
      c.A(h) = detail::softplus(layout_.view(P, s.a_raw)(0, h));
      c.I_prior(h) = std::exp(layout_.view(P, s.ip_raw)(0, h));
      c.b_scale(h) = std::exp(layout_.view(P, s.bs_raw)(0, h));
    }

    c.z1.noalias() = c.u * layout_.view(P, s.wb1);
    c.z2.noalias() = c.z1 * layout_.view(P, s.wb2);
    c.z2.rowwise() += layout_.view(P, s.bb).row(0);
    c.beta = c.z2.unaryExpr([](T v) { return detail::softplus(v); });
    for (Eigen::Index h = 0; h < H; ++h) c.beta.middleCols(h * dv, dv) *= c.b_scale(h);

    c.zd.noalias() = c.u * layout_.view(P, s.wd);
    c.zd.rowwise() += layout_.view(P, s.bd).row(0);
    c.dt = c.zd.unaryExpr([](T v) { return detail::softplus(v); });

    c.w = c.sv;
    if (cfg_.input_gate()) {
      c.gb.noalias() = c.u * layout_.view(P, s.wgi);
      c.gb = c.gb.unaryExpr([](T v) { return detail::sigmoid(v); });
      for (Eigen::Index h = 0; h < H; ++h) c.w.middleCols(h * dv, dv).array().colwise() *= c.gb.col(h).array();
    } else {
      for (Eigen::Index h = 0; h < H; ++h) c.w.middleCols(h * dv, dv).array().colwise() *= c.dt.col(h).array();
    }

    // Recurrence, one task per (sample, head).
    const std::size_t tasks = batch.batch * cfg_.n_heads;
    c.seqs.assign(tasks, {});
    c.stores.assign(tasks, {});
    Mat<T> y(x.rows(), static_cast<Eigen::Index>(cfg_.value_dim()));
    std::vector<double> ratio(tasks), margin(tasks), log_n(tasks);
    const auto mode = cfg_.metaplastic() ? ImportanceMode::Metaplastic : ImportanceMode::Frozen;
    pool.run(tasks, [&](std::size_t task) {
      const auto b = static_cast<Eigen::Index>(task / cfg_.n_heads);
      const auto h = static_cast<Eigen::Index>(task % cfg_.n_heads);
      const auto hp = head_params(c, static_cast<std::size_t>(h));
      auto& seq = c.seqs[task];
      seq.k = kk.block(b * L, h * dk, L, dk);
      seq.q = qk.block(b * L, h * dk, L, dk);
      seq.w = c.w.block(b * L, h * dv, L, dv);
      seq.beta = c.beta.block(b * L, h * dv, L, dv);
      seq.d = c.dt.col(h).segment(b * L, L);
      WorkerPool serial(1);
      auto fwd = forward_with_tape(seq, DualState<T>::rest(hp), hp, ChunkPlan{cfg_.chunk_len, 1, false}, serial, mode);
      y.block(b * L, h * dv, L, dv) = fwd.outputs;
      c.stores[task] = std::move(fwd.store);
      const double imax = static_cast<double>(fwd.final_state.imp.maxCoeff());
      const double imin = static_cast<double>(fwd.final_state.imp.minCoeff());
      ratio[task] = (imax - imin) / imin;
      margin[task] = imin - static_cast<double>(hp.I_prior);
      double acc = 0;
      for (Eigen::Index t = 0; t < L; ++t)
        acc += MemoryWindow<double>::log_from_step(static_cast<double>(hp.A), static_cast<double>(seq.d(t)));
      log_n[task] = acc;
    });
    for (std::size_t task = 0; task < tasks; ++task) {
      const std::size_t slot = l * cfg_.n_heads + task % cfg_.n_heads;
      diag.ratio_per_head[slot] += ratio[task] / static_cast<double>(batch.batch);
      diag.imin_margin_per_head[slot] = std::min(diag.imin_margin_per_head[slot], margin[task]);
      log_n_sum += log_n[task];
    }

    c.y_kernel = y;
    for (Eigen::Index h = 0; h < H; ++h)
      y.middleCols(h * dv, dv) += layout_.view(P, s.resid)(0, h) * c.sv.middleCols(h * dv, dv);
    detail::group_normalize<T>(y, dv, T(1) / T(dv), eps(), c.yhat, c.rms_y);
    c.gate.noalias() = c.u * layout_.view(P, s.wg);
    c.gate = c.gate.unaryExpr([](T v) { return detail::sigmoid(v); });
    c.z = c.yhat.array().rowwise() * layout_.view(P, s.norm_y).row(0).array();
    c.z.array() *= c.gate.array();
    return c.z * layout_.view(P, s.wo);
  }

  Vec<T> backward(const Vec<T>& P, const ForwardCache<T>& c, const std::vector<std::size_t>& rows,
                  const Mat<T>& dlogits, WorkerPool& pool) const {
    Vec<T> G = Vec<T>::Zero(P.size());
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto n = static_cast<Eigen::Index>(c.tokens.size());
    const auto E = layout_.view(P, embed_);
    auto dE = layout_.view(G, embed_);

    Mat<T> dhf = Mat<T>::Zero(n, d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const auto row = static_cast<Eigen::Index>(rows[r]);
      dE.noalias() += dlogits.row(ri).transpose() * c.hf.row(row);
      dhf.row(row).noalias() = dlogits.row(ri) * E;
    }
    const auto wf = layout_.view(P, final_norm_).row(0);
    layout_.view(G, final_norm_).row(0) += (dhf.array() * c.fhat.array()).colwise().sum().matrix();
    Mat<T> dfhat = dhf.array().rowwise() * wf.array();
    Mat<T> dx = detail::group_normalize_backward<T>(c.fhat, c.frms, d, T(1) / T(d), dfhat);

    for (std::size_t l = cfg_.n_layers; l-- > 0;) dx = layer_backward(P, G, l, c, dx, pool);

    for (Eigen::Index i = 0; i < n; ++i) dE.row(c.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    if (!G.allFinite()) throw NumericError("model: non-finite gradient");
    return G;
  }

  Mat<T> layer_backward(const Vec<T>& P, Vec<T>& G, std::size_t l, const ForwardCache<T>& fc, const Mat<T>& dout,
                        WorkerPool& pool) const {
    const Slots& s = slots_[l];
    const LayerCache<T>& c = fc.layers[l];
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
    const auto dk = static_cast<Eigen::Index>(cfg_.head_dk());
    const auto dv = static_cast<Eigen::Index>(cfg_.head_dv());
    const auto L = static_cast<Eigen::Index>(fc.len);
    const auto rows = dout.rows();
    auto rowsum = [](const auto& m) { return m.colwise().sum(); };

    Mat<T> dx = dout;  // residual path

    // Output projection and gate.
    layout_.view(G, s.wo).noalias() += c.z.transpose() * dout;
    const Mat<T> dz = dout * layout_.view(P, s.wo).transpose();
    const auto wy = layout_.view(P, s.norm_y).row(0);
    const Mat<T> o = c.yhat.array().rowwise() * wy.array();
    const Mat<T> dgate_pre = (dz.array() * o.array() * c.gate.array() * (T(1) - c.gate.array())).matrix();
    layout_.view(G, s.wg).noalias() += c.u.transpose() * dgate_pre;
    Mat<T> du = dgate_pre * layout_.view(P, s.wg).transpose();
    const Mat<T> dout_norm = (dz.array() * c.gate.array()).matrix();
    layout_.view(G, s.norm_y).row(0) += rowsum((dout_norm.array() * c.yhat.array()).matrix());
    const Mat<T> dyhat = dout_norm.array().rowwise() * wy.array();
    const Mat<T> dy = detail::group_normalize_backward<T>(c.yhat, c.rms_y, dv, T(1) / T(dv), dyhat);

    // Value residual.
    Mat<T> dsv = Mat<T>::Zero(rows, static_cast<Eigen::Index>(cfg_.value_dim()));
    for (Eigen::Index h = 0; h < H; ++h) {
      layout_.view(G, s.resid)(0, h) += (dy.middleCols(h * dv, dv).array() * c.sv.middleCols(h * dv, dv).array()).sum();
      dsv.middleCols(h * dv, dv) += layout_.view(P, s.resid)(0, h) * dy.middleCols(h * dv, dv);
    }

    // Recurrence adjoints, one task per (sample, head).
    const std::size_t tasks = fc.batch * cfg_.n_heads;
    Mat<T> dqk(rows, static_cast<Eigen::Index>(cfg_.key_dim())), dkk(rows, static_cast<Eigen::Index>(cfg_.key_dim()));
    Mat<T> dw(rows, static_cast<Eigen::Index>(cfg_.value_dim())), dbeta(rows, static_cast<Eigen::Index>(cfg_.value_dim()));
    Mat<T> ddt(rows, H);
    std::vector<T> dA(tasks), dIp(tasks);
    pool.run(tasks, [&](std::size_t task) {
      const auto b = static_cast<Eigen::Index>(task / cfg_.n_heads);
      const auto h = static_cast<Eigen::Index>(task % cfg_.n_heads);
      const auto hp = head_params(c, static_cast<std::size_t>(h));
      const Mat<T> up = dy.block(b * L, h * dv, L, dv);
      const auto g = palimpsa::backward(c.stores[task], up, c.seqs[task], hp);
      dqk.block(b * L, h * dk, L, dk) = g.q;
      dkk.block(b * L, h * dk, L, dk) = g.k;
      dw.block(b * L, h * dv, L, dv) = g.w;
      dbeta.block(b * L, h * dv, L, dv) = g.beta;
      ddt.col(h).segment(b * L, L) = g.d;
      dA[task] = g.A;
      // The rest state's importance is I_prior itself.
      dIp[task] = g.I_prior + g.init.imp.sum();
    });
    for (std::size_t task = 0; task < tasks; ++task) {
      const auto h = static_cast<Eigen::Index>(task % cfg_.n_heads);
      const T araw = layout_.view(P, s.a_raw)(0, h);
      layout_.view(G, s.a_raw)(0, h) += dA[task] * detail::sigmoid(araw);
      layout_.view(G, s.ip_raw)(0, h) += dIp[task] * c.I_prior(h);
    }

    // Kernel value input w = gate_h * sv.
    if (cfg_.input_gate()) {
      Mat<T> dgb_pre(rows, H);
      for (Eigen::Index h = 0; h < H; ++h) {
        dsv.middleCols(h * dv, dv).array() += dw.middleCols(h * dv, dv).array().colwise() * c.gb.col(h).array();
        const auto dgb = (dw.middleCols(h * dv, dv).array() * c.sv.middleCols(h * dv, dv).array()).rowwise().sum();
        dgb_pre.col(h) = (dgb * c.gb.col(h).array() * (T(1) - c.gb.col(h).array())).matrix();
      }
      layout_.view(G, s.wgi).noalias() += c.u.transpose() * dgb_pre;
      du.noalias() += dgb_pre * layout_.view(P, s.wgi).transpose();
    } else {
      for (Eigen::Index h = 0; h < H; ++h) {
        dsv.middleCols(h * dv, dv).array() += dw.middleCols(h * dv, dv).array().colwise() * c.dt.col(h).array();
        ddt.col(h).array() += (dw.middleCols(h * dv, dv).array() * c.sv.middleCols(h * dv, dv).array()).rowwise().sum();
      }
    }

    // Step size.
    const Mat<T> dzd = (ddt.array() * c.zd.unaryExpr([](T v) { return detail::sigmoid(v); }).array()).matrix();
    layout_.view(G, s.wd).noalias() += c.u.transpose() * dzd;
    layout_.view(G, s.bd).row(0) += rowsum(dzd);
    du.noalias() += dzd * layout_.view(P, s.wd).transpose();

    // Beta.
    Mat<T> dz2 = (dbeta.array() * c.z2.unaryExpr([](T v) { return detail::sigmoid(v); }).array()).matrix();
    for (Eigen::Index h = 0; h < H; ++h) {
      layout_.view(G, s.bs_raw)(0, h) +=
          (dbeta.middleCols(h * dv, dv).array() * c.beta.middleCols(h * dv, dv).array()).sum();
      dz2.middleCols(h * dv, dv) *= c.b_scale(h);
    }
    layout_.view(G, s.bb).row(0) += rowsum(dz2);
    layout_.view(G, s.wb2).noalias() += c.z1.transpose() * dz2;
    const Mat<T> dz1 = dz2 * layout_.view(P, s.wb2).transpose();
    layout_.view(G, s.wb1).noalias() += c.u.transpose() * dz1;
    du.noalias() += dz1 * layout_.view(P, s.wb1).transpose();

    // Queries and keys.
    Mat<T> dsq, dsk;
    if (cfg_.normalize_qk()) {
      dsq = detail::group_normalize_backward<T>(c.qn, c.qs, dk, T(1), dqk);
      dsk = detail::group_normalize_backward<T>(c.kn, c.ks, dk, T(1), dkk);
    } else {
      dsq = dqk;
      dsk = dkk;
    }

    auto through_conv = [&](const Mat<T>& cpre, const Mat<T>& ppre, const Mat<T>& ds, std::size_t conv_slot,
                            std::size_t w_slot) {
      const Mat<T> dc = detail::silu_backward(cpre, ds);
      Mat<T> dp;
      detail::causal_conv_backward<T>(ppre, layout_.view(P, conv_slot), fc.len, dc, dp, layout_.view(G, conv_slot));
      layout_.view(G, w_slot).noalias() += c.u.transpose() * dp;
      du.noalias() += dp * layout_.view(P, w_slot).transpose();
    };
    through_conv(c.cq, c.pq, dsq, s.conv_q, s.wq);
    through_conv(c.ck, c.pk, dsk, s.conv_k, s.wk);
    through_conv(c.cv, c.pv, dsv, s.conv_v, s.wv);

    // Input norm.
    layout_.view(G, s.norm).row(0) += rowsum((du.array() * c.xhat.array()).matrix());
    const Mat<T> dxhat = du.array().rowwise() * layout_.view(P, s.norm).row(0).array();
    dx += detail::group_normalize_backward<T>(c.xhat, c.rms, d, T(1) / T(d), dxhat);
    return dx;
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  std::size_t embed_ = 0;
  std::size_t final_norm_ = 0;
  std::vector<Slots> slots_;
};

}  // namespace palimpsa::mqar
