#pragma once

// Single-step update rules for the gated linear attention family and their
// sequential composition. All rules are pure: they return a new state.

#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "palimpsa/types.hpp"

namespace palimpsa {

/// Forgetting gate alpha = exp(-A d), in (0, 1].
template <typename T>
T alpha_from_step(T A, T d) {
  if (!(A >= T(0)) || !(d >= T(0))) throw DomainError("alpha_from_step: A and d must be >= 0");
  return std::exp(-A * d);
}

/// Effective memory window N = 1 / (1 - alpha). alpha == 1 is reported as
/// unbounded instead of a huge float.
template <typename T>
struct MemoryWindow {
  bool unbounded = false;
  T value = T(0);

  static MemoryWindow from_alpha(T alpha) {
    if (!(alpha > T(0)) || alpha > T(1)) throw DomainError("MemoryWindow: alpha must lie in (0, 1]");
    if (alpha == T(1)) return {true, std::numeric_limits<T>::infinity()};
    return {false, T(1) / (T(1) - alpha)};
  }

  /// log N computed from A d without forming 1 - alpha.
  static T log_from_step(T A, T d) {
    const T ad = A * d;
    if (ad <= T(0)) return std::numeric_limits<T>::infinity();
    return -std::log(-std::expm1(-ad));
  }
};

namespace detail {

template <typename T>
T scalar_beta(const Vec<T>& beta) {
  if (beta.size() == 0) throw DomainError("scalar-beta rule: empty beta");
  const T b = beta(0);
  for (Eigen::Index i = 1; i < beta.size(); ++i)
    if (beta(i) != b) throw RuleContractError("scalar-beta rule received a non-uniform beta vector");
  if (!(b >= T(0))) throw DomainError("beta must be >= 0");
  return b;
}

template <typename T>
void check_matrix_shape(const Mat<T>& mu, const StepInput<T>& in) {
  if (mu.cols() != in.k.size() || mu.rows() != in.v.size() || in.q.size() != in.k.size() ||
      in.beta.size() != in.v.size())
    throw DomainError("step: shape mismatch between state and input");
}

template <typename M>
void require_finite(const M& m, const char* what) {
  if (!m.allFinite()) throw NumericError(what);
}

}  // namespace detail

template <typename T>
DualState<T> palimpsa_step(const DualState<T>& state, const StepInput<T>& in, const HeadParams<T>& hp) {
  in.validate(hp);
  const T alpha = alpha_from_step(hp.A, in.d);
  const Vec<T> k2 = in.k.cwiseProduct(in.k);
  DualState<T> next;
  next.imp = (alpha * state.imp.array() + (T(1) - alpha) * hp.I_prior).matrix() + in.beta * k2.transpose();
  const Mat<T> write = in.beta.cwiseProduct(in.v) * in.k.transpose();
  next.mu = (alpha * (state.imp.array() / next.imp.array()) * state.mu.array() + write.array() / next.imp.array())
                .matrix();
  detail::require_finite(next.imp, "palimpsa_step: non-finite importance");
  detail::require_finite(next.mu, "palimpsa_step: non-finite mean");
  return next;
}

/// Palimpsa with importance pinned at I_prior (the strong-forgetting limit):
/// mu' = alpha mu + ((beta (.) v) / I_prior) k^T. `imp` is passed through.
template <typename T>
DualState<T> mamba2_limit_step(const DualState<T>& state, const StepInput<T>& in, const HeadParams<T>& hp) {
  in.validate(hp);
  const T alpha = alpha_from_step(hp.A, in.d);
  DualState<T> next;
  next.mu = alpha * state.mu + (in.beta.cwiseProduct(in.v) / hp.I_prior) * in.k.transpose();
  next.imp = state.imp;
  detail::require_finite(next.mu, "mamba2_limit_step: non-finite mean");
  return next;
}

template <typename T>
Mat<T> deltanet_step(const Mat<T>& mu, const StepInput<T>& in) {
  detail::check_matrix_shape(mu, in);
  const T beta = detail::scalar_beta(in.beta);
  // mu (I - beta k k^T) + beta v k^T, without materializing the d_k x d_k matrix.
  const Vec<T> mu_k = mu * in.k;
  Mat<T> next = mu - beta * mu_k * in.k.transpose() + beta * in.v * in.k.transpose();
  detail::require_finite(next, "deltanet_step: non-finite mean");
  return next;
}

template <typename T>
Mat<T> gated_deltanet_step(const Mat<T>& mu, const StepInput<T>& in, const HeadParams<T>& hp) {
  detail::check_matrix_shape(mu, in);
  const T beta = detail::scalar_beta(in.beta);
  const T alpha = alpha_from_step(hp.A, in.d);
  const Vec<T> mu_k = mu * in.k;
  Mat<T> next = alpha * (mu - beta * mu_k * in.k.transpose()) + beta * in.v * in.k.transpose();
  detail::require_finite(next, "gated_deltanet_step: non-finite mean");
  return next;
}

/// Longhorn diagonal update. There is no forgetting input: `in.d` is ignored.
template <typename T>
Mat<T> longhorn_step(const Mat<T>& mu, const StepInput<T>& in) {
  detail::check_matrix_shape(mu, in);
  if (!(in.beta.array() >= T(0)).all()) throw DomainError("longhorn_step: beta must be >= 0");
  const T kk = in.k.squaredNorm();
  const Vec<T> k2 = in.k.cwiseProduct(in.k);
  Mat<T> next(mu.rows(), mu.cols());
  for (Eigen::Index i = 0; i < mu.rows(); ++i) {
    const T denom = T(1) + in.beta(i) * kk;
    const T g = in.beta(i) / denom;
    next.row(i) = (T(1) - g * k2.array().transpose()) * mu.row(i).array() +
                  (g * in.v(i)) * in.k.transpose().array();
  }
  detail::require_finite(next, "longhorn_step: non-finite mean");
  return next;
}

/// Full-precision Mesa update. Each mean row is obtained from a direct
/// Cholesky solve with the new precision; all rows share one factorization.
template <typename T>
MesaState<T> mesa_step(const MesaState<T>& state, const StepInput<T>& in, const HeadParams<T>& hp) {
  detail::check_matrix_shape(state.mu, in);
  const T beta = detail::scalar_beta(in.beta);
  const T alpha = alpha_from_step(hp.A, in.d);
  const auto dk = static_cast<Eigen::Index>(hp.d_k);
  MesaState<T> next;
  next.prec = alpha * state.prec + ((T(1) - alpha) * hp.I_prior) * Mat<T>::Identity(dk, dk) +
              beta * in.k * in.k.transpose();
  next.prec = T(0.5) * (next.prec + next.prec.transpose()).eval();
  // Right-hand sides as columns: alpha P mu_i + beta v_i k.
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> rhs =
      alpha * state.prec * state.mu.transpose() + beta * in.k * in.v.transpose();
  Eigen::LLT<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>> llt(next.prec);
  if (llt.info() != Eigen::Success) throw NumericError("mesa_step: precision factorization failed");
  next.mu = llt.solve(rhs).transpose();
  detail::require_finite(next.mu, "mesa_step: non-finite mean");
  return next;
}

template <typename T>
Vec<T> readout(const Mat<T>& mu, const Vec<T>& q) {
  if (mu.cols() != q.size()) throw DomainError("readout: q length must equal d_k");
  return mu * q;
}

// Rule tags used to compose step functions generically.

struct PalimpsaRule {
  static constexpr RuleKind kind = RuleKind::Palimpsa;
  template <typename T>
  using State = DualState<T>;
  template <typename T>
  static State<T> rest(const HeadParams<T>& hp) { return DualState<T>::rest(hp); }
  template <typename T>
  static State<T> step(const State<T>& s, const StepInput<T>& in, const HeadParams<T>& hp) {
    return palimpsa_step(s, in, hp);
  }
  template <typename T>
  static const Mat<T>& mean(const State<T>& s) { return s.mu; }
};

struct Mamba2LimitRule {
  static constexpr RuleKind kind = RuleKind::Mamba2Limit;
  template <typename T>
  using State = DualState<T>;
  template <typename T>
  static State<T> rest(const HeadParams<T>& hp) { return DualState<T>::rest(hp); }
  template <typename T>
  static State<T> step(const State<T>& s, const StepInput<T>& in, const HeadParams<T>& hp) {
    return mamba2_limit_step(s, in, hp);
  }
  template <typename T>
  static const Mat<T>& mean(const State<T>& s) { return s.mu; }
};

struct DeltanetRule {
  static constexpr RuleKind kind = RuleKind::Deltanet;
  template <typename T>
  using State = Mat<T>;
  template <typename T>
  static State<T> rest(const HeadParams<T>& hp) { return Mat<T>::Zero(hp.d_v, hp.d_k); }
  template <typename T>
  static State<T> step(const State<T>& s, const StepInput<T>& in, const HeadParams<T>&) {
    return deltanet_step(s, in);
  }
  template <typename T>
  static const Mat<T>& mean(const State<T>& s) { return s; }
};

struct GatedDeltanetRule {
  static constexpr RuleKind kind = RuleKind::GatedDeltanet;
  template <typename T>
  using State = Mat<T>;
  template <typename T>
  static State<T> rest(const HeadParams<T>& hp) { return Mat<T>::Zero(hp.d_v, hp.d_k); }
  template <typename T>
  static State<T> step(const State<T>& s, const StepInput<T>& in, const HeadParams<T>& hp) {
    return gated_deltanet_step(s, in, hp);
  }
  template <typename T>
  static const Mat<T>& mean(const State<T>& s) { return s; }
};

struct LonghornRule {
  static constexpr RuleKind kind = RuleKind::Longhorn;
  template <typename T>
  using State = Mat<T>;
  template <typename T>
  static State<T> rest(const HeadParams<T>& hp) { return Mat<T>::Zero(hp.d_v, hp.d_k); }
  template <typename T>
  static State<T> step(const State<T>& s, const StepInput<T>& in, const HeadParams<T>&) {
    return longhorn_step(s, in);
  }
  template <typename T>
  static const Mat<T>& mean(const State<T>& s) { return s; }
};

struct MesaRule {
  static constexpr RuleKind kind = RuleKind::Mesa;
  template <typename T>
  using State = MesaState<T>;
  template <typename T>
  static State<T> rest(const HeadParams<T>& hp) { return MesaState<T>::rest(hp); }
  template <typename T>
  static State<T> step(const State<T>& s, const StepInput<T>& in, const HeadParams<T>& hp) {
    return mesa_step(s, in, hp);
  }
  template <typename T>
  static const Mat<T>& mean(const State<T>& s) { return s.mu; }
};

/// Calls `f` with the rule tag matching `kind`.
template <typename F>
decltype(auto) visit_rule(RuleKind kind, F&& f) {
  switch (kind) {
    case RuleKind::Palimpsa: return std::forward<F>(f)(PalimpsaRule{});
    case RuleKind::Mamba2Limit: return std::forward<F>(f)(Mamba2LimitRule{});
    case RuleKind::Deltanet: return std::forward<F>(f)(DeltanetRule{});
    case RuleKind::GatedDeltanet: return std::forward<F>(f)(GatedDeltanetRule{});
    case RuleKind::Longhorn: return std::forward<F>(f)(LonghornRule{});
    case RuleKind::Mesa: return std::forward<F>(f)(MesaRule{});
  }
  throw DomainError("visit_rule: unknown rule");
}

template <typename State, typename T>
struct ScanResult {
  std::vector<Vec<T>> outputs;
  State final_state;
  std::vector<State> trace;  // state after every step; empty unless requested
};

/// Native recurrent evaluation: step, then read out with that step's query.
/// Keeping the trace costs one full state per token.
template <typename Rule, typename T>
ScanResult<typename Rule::template State<T>, T> sequential_scan(const typename Rule::template State<T>& init,
                                                                std::span<const StepInput<T>> inputs,
                                                                const HeadParams<T>& hp, bool keep_trace = false) {
  hp.validate();
  ScanResult<typename Rule::template State<T>, T> out;
  out.final_state = init;
  out.outputs.reserve(inputs.size());
  if (keep_trace) out.trace.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    try {
      out.final_state = Rule::step(out.final_state, inputs[t], hp);
    } catch (const NumericError& e) {
      throw e.at_step(t);
    }
    out.outputs.push_back(readout(Rule::mean(out.final_state), inputs[t].q));
    if (keep_trace) out.trace.push_back(out.final_state);
  }
  return out;
}

}  // namespace palimpsa
