#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "palimpsa/errors.hpp"

namespace palimpsa {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Memory matrices are d_v x d_k, stored row-major so that one output row
// (one value component) is contiguous.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct HeadParams {
  std::size_t d_k = 1;
  std::size_t d_v = 1;
  T A = T(0);        // decay coefficient
  T I_prior = T(1);  // prior importance, 1 / sigma_prior^2

  void validate() const {
    if (d_k < 1 || d_v < 1) throw DomainError("HeadParams: d_k and d_v must be >= 1");
    if (!(A >= T(0)) || !std::isfinite(A)) throw DomainError("HeadParams: A must be finite and >= 0");
    if (!(I_prior > T(0)) || !std::isfinite(I_prior))
      throw DomainError("HeadParams: I_prior must be finite and > 0");
  }

  T sigma_prior() const { return T(1) / std::sqrt(I_prior); }
};

/// One token's projected quantities. Rules that take a scalar beta read
/// beta[0] and require every entry to be equal.
template <typename T>
struct StepInput {
  Vec<T> k;     // d_k
  Vec<T> v;     // d_v
  Vec<T> q;     // d_k
  Vec<T> beta;  // d_v, non-negative
  T d = T(0);   // step size, non-negative

  void validate(const HeadParams<T>& hp) const {
    if (static_cast<std::size_t>(k.size()) != hp.d_k || static_cast<std::size_t>(q.size()) != hp.d_k)
      throw DomainError("StepInput: k/q length must equal d_k");
    if (static_cast<std::size_t>(v.size()) != hp.d_v || static_cast<std::size_t>(beta.size()) != hp.d_v)
      throw DomainError("StepInput: v/beta length must equal d_v");
    if (!(beta.array() >= T(0)).all()) throw DomainError("StepInput: beta entries must be >= 0");
    if (!(d >= T(0))) throw DomainError("StepInput: d must be >= 0");
  }
};

/// Palimpsa dual memory: first moment and per-element importance (precision).
template <typename T>
struct DualState {
  Mat<T> mu;   // d_v x d_k
  Mat<T> imp;  // d_v x d_k, > 0

  static DualState rest(const HeadParams<T>& hp) {
    DualState s;
    s.mu = Mat<T>::Zero(hp.d_v, hp.d_k);
    s.imp = Mat<T>::Constant(hp.d_v, hp.d_k, hp.I_prior);
    return s;
  }

  void validate(const HeadParams<T>& hp) const {
    if (static_cast<std::size_t>(mu.rows()) != hp.d_v || static_cast<std::size_t>(mu.cols()) != hp.d_k ||
        imp.rows() != mu.rows() || imp.cols() != mu.cols())
      throw DomainError("DualState: shape mismatch");
    if (!(imp.array() > T(0)).all()) throw DomainError("DualState: importance must be > 0");
    if (!mu.allFinite() || !imp.allFinite()) throw NumericError("DualState: non-finite entry");
  }
};

/// Mesa memory: mean rows plus one full precision matrix shared by all rows.
template <typename T>
struct MesaState {
  Mat<T> mu;    // d_v x d_k
  Mat<T> prec;  // d_k x d_k, symmetric positive definite

  static MesaState rest(const HeadParams<T>& hp) {
    MesaState s;
    s.mu = Mat<T>::Zero(hp.d_v, hp.d_k);
    s.prec = Mat<T>::Identity(hp.d_k, hp.d_k) * hp.I_prior;
    return s;
  }
};

enum class RuleKind { Palimpsa, Mamba2Limit, Deltanet, GatedDeltanet, Longhorn, Mesa };

inline constexpr std::array<RuleKind, 6> kAllRules = {RuleKind::Palimpsa,      RuleKind::Mamba2Limit,
                                                      RuleKind::Deltanet,      RuleKind::GatedDeltanet,
                                                      RuleKind::Longhorn,      RuleKind::Mesa};

constexpr std::string_view rule_name(RuleKind r) {
  switch (r) {
    case RuleKind::Palimpsa: return "palimpsa";
    case RuleKind::Mamba2Limit: return "mamba2_limit";
    case RuleKind::Deltanet: return "deltanet";
    case RuleKind::GatedDeltanet: return "gated_deltanet";
    case RuleKind::Longhorn: return "longhorn";
    case RuleKind::Mesa: return "mesa";
  }
  return "unknown";
}

constexpr bool requires_scalar_beta(RuleKind r) {
  return r == RuleKind::Deltanet || r == RuleKind::GatedDeltanet || r == RuleKind::Mesa;
}

/// Packed per-token kernel inputs for a whole sequence, one row per token.
/// `w` is the premultiplied value beta (.) v, which is what the dual-state
/// recurrence actually consumes; keeping it separate from beta lets a model
/// feed w directly (value reparameterization) without dividing by beta.
template <typename T>
struct KernelSequence {
  Mat<T> k;     // L x d_k
  Mat<T> w;     // L x d_v
  Mat<T> beta;  // L x d_v
  Mat<T> q;     // L x d_k
  Vec<T> d;     // L

  std::size_t length() const { return static_cast<std::size_t>(d.size()); }

  static KernelSequence zeros(std::size_t len, const HeadParams<T>& hp) {
    KernelSequence s;
    s.k = Mat<T>::Zero(len, hp.d_k);
    s.w = Mat<T>::Zero(len, hp.d_v);
    s.beta = Mat<T>::Zero(len, hp.d_v);
    s.q = Mat<T>::Zero(len, hp.d_k);
    s.d = Vec<T>::Zero(len);
    return s;
  }

  static KernelSequence from_steps(std::span<const StepInput<T>> steps, const HeadParams<T>& hp) {
    auto s = zeros(steps.size(), hp);
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& in = steps[t];
      in.validate(hp);
      s.k.row(t) = in.k.transpose();
      s.q.row(t) = in.q.transpose();
      s.beta.row(t) = in.beta.transpose();
      s.w.row(t) = in.beta.cwiseProduct(in.v).transpose();
      s.d(t) = in.d;
    }
    return s;
  }
};

}  // namespace palimpsa
