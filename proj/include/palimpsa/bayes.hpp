#pragma once

// Variational free energy of the weighted posterior for one memory row, its
// analytic gradients, Gaussian identities, and a non-recursive evaluation of
// the diagonal weighted posterior.
//
// Convention: the forgetting fraction 1/N is written 1 - alpha, so the
// coefficients are alpha on the previous posterior and (1 - alpha) on the
// prior re-injection. All terms carry the 1/2 of the Gaussian exponent.

#include <cmath>
#include <algorithm>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "palimpsa/types.hpp"

namespace palimpsa {

template <typename T>
using DMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
struct GaussianDiag {
  Vec<T> mean;
  Vec<T> var;

  void validate() const {
    if (mean.size() != var.size()) throw DomainError("GaussianDiag: shape mismatch");
    if (!(var.array() > T(0)).all()) throw DomainError("GaussianDiag: variances must be > 0");
  }
};

template <typename T>
struct GaussianFull {
  Vec<T> mean;
  DMat<T> cov;

  static GaussianFull from_diag(const GaussianDiag<T>& g) {
    g.validate();
    return {g.mean, g.var.asDiagonal()};
  }

  void validate() const {
    if (cov.rows() != cov.cols() || cov.rows() != mean.size()) throw DomainError("GaussianFull: shape mismatch");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > T(1e-12) * std::max(T(1), cov.cwiseAbs().maxCoeff()))
      throw DomainError("GaussianFull: covariance is not symmetric");
  }
};

namespace detail {

template <typename T>
Eigen::LLT<DMat<T>> factor_pd(const DMat<T>& m, const char* what) {
  Eigen::LLT<DMat<T>> llt(m);
  if (llt.info() != Eigen::Success) throw DomainError(std::string(what) + ": matrix is not positive definite");
  return llt;
}

template <typename T>
T log_det(const Eigen::LLT<DMat<T>>& llt) {
  return T(2) * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

}  // namespace detail

template <typename T>
T gaussian_entropy(const GaussianFull<T>& p) {
  p.validate();
  const auto llt = detail::factor_pd(p.cov, "gaussian_entropy");
  const T d = static_cast<T>(p.mean.size());
  return T(0.5) * d * std::log(T(2) * std::numbers::pi_v<T> * std::numbers::e_v<T>) + T(0.5) * detail::log_det(llt);
}

/// KL(p || q).
template <typename T>
T gaussian_kl(const GaussianFull<T>& p, const GaussianFull<T>& q) {
  p.validate();
  q.validate();
  if (p.mean.size() != q.mean.size()) throw DomainError("gaussian_kl: dimension mismatch");
  const auto lp = detail::factor_pd(p.cov, "gaussian_kl");
  const auto lq = detail::factor_pd(q.cov, "gaussian_kl");
  const Vec<T> diff = q.mean - p.mean;
  const T trace = lq.solve(p.cov).trace();
  const T maha = diff.dot(lq.solve(diff));
  const T d = static_cast<T>(p.mean.size());
  const T kl = T(0.5) * (trace + maha - d + detail::log_det(lq) - detail::log_det(lp));
  return std::max(kl, T(0));
}

/// H(p, q) = -E_p[log q], closed form.
template <typename T>
T gaussian_cross_entropy(const GaussianFull<T>& p, const GaussianFull<T>& q) {
  p.validate();
  q.validate();
  if (p.mean.size() != q.mean.size()) throw DomainError("gaussian_cross_entropy: dimension mismatch");
  const auto lq = detail::factor_pd(q.cov, "gaussian_cross_entropy");
  detail::factor_pd(p.cov, "gaussian_cross_entropy");
  const Vec<T> diff = q.mean - p.mean;
  const T d = static_cast<T>(p.mean.size());
  return T(0.5) * (lq.solve(p.cov).trace() + diff.dot(lq.solve(diff)) + d * std::log(T(2) * std::numbers::pi_v<T>) +
                   detail::log_det(lq));
}

/// H(p, q) through H(p) + KL(p || q).
template <typename T>
T gaussian_cross_entropy_via_kl(const GaussianFull<T>& p, const GaussianFull<T>& q) {
  return gaussian_entropy(p) + gaussian_kl(p, q);
}

/// Previous posterior of one row, held as mean and precision.
template <typename T>
struct RowBelief {
  Vec<T> mean;
  DMat<T> precision;

  static RowBelief diagonal(const Vec<T>& mean, const Vec<T>& importance) {
    if (!(importance.array() > T(0)).all()) throw DomainError("RowBelief: importance must be > 0");
    return {mean, importance.asDiagonal()};
  }
  static RowBelief full(const Vec<T>& mean, const DMat<T>& precision) { return {mean, precision}; }

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// One observation for row i: key, that row's value component, its beta.
template <typename T>
struct Datum {
  Vec<T> k;
  T v_i = T(0);
  T beta_i = T(0);
};

/// Full: exact expected likelihood, curvature beta k k^T.
/// Diagonal: each coordinate regresses the target on its own,
///   (beta/2) sum_j (k_j mu_j - v)^2,
/// whose curvature is beta diag(k^2). This is the objective whose exact
/// stationary point is the elementwise Palimpsa update; it differs from the
/// coupled likelihood only in the dropped off-diagonal curvature and a
/// mu-independent constant.
enum class Coupling { Full, Diagonal };

template <typename T>
struct FreeEnergyTerms {
  T plasticity = T(0);
  T forgetting = T(0);
  T stability = T(0);
  T cov_const = T(0);
  T total = T(0);
};

namespace detail {

template <typename T>
void check_free_energy_args(const Vec<T>& mu, const RowBelief<T>& prev, const Datum<T>& datum, T alpha) {
  if (!(alpha > T(0)) || alpha > T(1)) throw DomainError("free energy: alpha must lie in (0, 1]");
  if (mu.size() != prev.mean.size() || datum.k.size() != mu.size() || prev.precision.rows() != mu.size() ||
      prev.precision.cols() != mu.size())
    throw DomainError("free energy: dimension mismatch");
  if (!(datum.beta_i >= T(0))) throw DomainError("free energy: beta must be >= 0");
}

/// Curvature of the objective in mu: alpha P + (1 - alpha) I_prior + beta C,
/// with C = k k^T or diag(k^2).
template <typename T>
DMat<T> total_precision(const RowBelief<T>& prev, const Datum<T>& datum, T alpha, T i_prior, Coupling coupling) {
  const auto n = prev.mean.size();
  DMat<T> p = alpha * prev.precision + ((T(1) - alpha) * i_prior) * DMat<T>::Identity(n, n);
  if (coupling == Coupling::Full)
    p += datum.beta_i * datum.k * datum.k.transpose();
  else
    p.diagonal() += datum.beta_i * datum.k.cwiseAbs2();
  return p;
}

}  // namespace detail

/// Free energy of q = N(mu, cov) against the weighted posterior built from
/// `prev`, one datum and the prior N(0, I / I_prior):
///   F = -H(q) + alpha H(q, prev) + (1 - alpha) H(q, prior) + E_q[NLL]
/// with NLL = (beta/2)(S^T k - v)^2 (no log-normalizer).
template <typename T>
FreeEnergyTerms<T> free_energy(const Vec<T>& mu, const DMat<T>& cov, const RowBelief<T>& prev, const Datum<T>& datum,
                               T alpha, const HeadParams<T>& hp, Coupling coupling = Coupling::Full) {
  detail::check_free_energy_args(mu, prev, datum, alpha);
  if (cov.rows() != mu.size() || cov.cols() != mu.size()) throw DomainError("free_energy: covariance shape");
  const auto lprev = detail::factor_pd(prev.precision, "free_energy (previous precision)");
  const auto lcov = detail::factor_pd(cov, "free_energy (covariance)");
  const T d = static_cast<T>(mu.size());
  const T beta = datum.beta_i;
  const T ip = hp.I_prior;
  const T log2pi = std::log(T(2) * std::numbers::pi_v<T>);

  FreeEnergyTerms<T> f;
  if (coupling == Coupling::Full) {
    const T r = mu.dot(datum.k) - datum.v_i;
    f.plasticity = T(0.5) * beta * r * r;
  } else {
    f.plasticity = T(0.5) * beta * (datum.k.cwiseProduct(mu).array() - datum.v_i).square().sum();
  }
  f.forgetting = T(0.5) * (T(1) - alpha) * ip * mu.squaredNorm();
  const Vec<T> diff = prev.mean - mu;
  f.stability = T(0.5) * alpha * diff.dot(prev.precision * diff);

  const T neg_entropy = -(T(0.5) * d * (log2pi + T(1)) + T(0.5) * detail::log_det(lcov));
  const T prev_cross = T(0.5) * ((prev.precision * cov).trace() + d * log2pi - detail::log_det(lprev));
  const T prior_cross = T(0.5) * (ip * cov.trace() + d * log2pi - d * std::log(ip));
  const T lik_cov = coupling == Coupling::Full ? T(0.5) * beta * datum.k.dot(cov * datum.k)
                                               : T(0.5) * beta * datum.k.cwiseAbs2().dot(cov.diagonal());
  f.cov_const = neg_entropy + alpha * prev_cross + (T(1) - alpha) * prior_cross + lik_cov;
  f.total = f.plasticity + f.forgetting + f.stability + f.cov_const;
  return f;
}

/// dF/dmu = alpha P (mu - mu_prev) + (1 - alpha) I_prior mu + beta (C mu - v k).
template <typename T>
Vec<T> grad_free_energy_mu(const Vec<T>& mu, const RowBelief<T>& prev, const Datum<T>& datum, T alpha,
                           const HeadParams<T>& hp, Coupling coupling = Coupling::Full) {
  detail::check_free_energy_args(mu, prev, datum, alpha);
  Vec<T> g = alpha * (prev.precision * (mu - prev.mean)) + ((T(1) - alpha) * hp.I_prior) * mu -
             (datum.beta_i * datum.v_i) * datum.k;
  if (coupling == Coupling::Full)
    g += datum.beta_i * datum.k.dot(mu) * datum.k;
  else
    g += datum.beta_i * datum.k.cwiseAbs2().cwiseProduct(mu);
  return g;
}

/// dF/dA for cov = A A^T:
///   [alpha P + (1 - alpha) I_prior + beta C] A - A^{-T}.
template <typename T>
DMat<T> grad_free_energy_cov(const DMat<T>& a_factor, const RowBelief<T>& prev, const Datum<T>& datum, T alpha,
                             const HeadParams<T>& hp, Coupling coupling = Coupling::Full) {
  detail::check_free_energy_args(Vec<T>(prev.mean), prev, datum, alpha);
  if (a_factor.rows() != prev.mean.size() || a_factor.cols() != prev.mean.size())
    throw DomainError("grad_free_energy_cov: factor shape");
  Eigen::FullPivLU<DMat<T>> lu(a_factor);
  if (!lu.isInvertible()) throw DomainError("grad_free_energy_cov: covariance factor is singular");
  const DMat<T> p = detail::total_precision(prev, datum, alpha, hp.I_prior, coupling);
  return p * a_factor - lu.inverse().transpose();
}

/// Closed-form stationary covariance [alpha P + (1 - alpha) I_prior + beta C]^{-1}.
template <typename T>
DMat<T> stationary_covariance(const RowBelief<T>& prev, const Datum<T>& datum, T alpha, const HeadParams<T>& hp,
                              Coupling coupling = Coupling::Full) {
  detail::check_free_energy_args(Vec<T>(prev.mean), prev, datum, alpha);
  const DMat<T> p = detail::total_precision(prev, datum, alpha, hp.I_prior, coupling);
  const auto llt = detail::factor_pd(p, "stationary_covariance");
  return llt.solve(DMat<T>::Identity(p.rows(), p.cols()));
}

/// Diagonal weighted posterior of one row after a data sequence, evaluated by
/// direct discounted sums from the prior (no recursion):
///   imp  = (prod_s a_s) I_prior + sum_t w_t [(1 - a_t) I_prior + beta_t k_t^2]
///   imp (.) mean = sum_t w_t beta_t v_t k_t,     w_t = prod_{s>t} a_s
template <typename T>
GaussianDiag<T> weighted_posterior_oracle(std::span<const Datum<T>> data, std::span<const T> alphas,
                                          const HeadParams<T>& hp) {
  if (data.size() != alphas.size()) throw DomainError("weighted_posterior_oracle: one alpha per datum");
  const auto dk = static_cast<Eigen::Index>(hp.d_k);
  for (std::size_t t = 0; t < data.size(); ++t) {
    if (!(alphas[t] > T(0)) || alphas[t] > T(1)) throw DomainError("weighted_posterior_oracle: alpha in (0, 1]");
    if (data[t].k.size() != dk) throw DomainError("weighted_posterior_oracle: key length");
  }
  Vec<T> imp = Vec<T>::Zero(dk);
  Vec<T> moment = Vec<T>::Zero(dk);
  T all = T(1);
  for (T a : alphas) all *= a;
  imp.setConstant(all * hp.I_prior);
  for (std::size_t t = 0; t < data.size(); ++t) {
    T weight = T(1);
    for (std::size_t s = t + 1; s < data.size(); ++s) weight *= alphas[s];
    const auto& x = data[t];
    imp.array() += weight * ((T(1) - alphas[t]) * hp.I_prior + x.beta_i * x.k.array().square());
    moment += (weight * x.beta_i * x.v_i) * x.k;
  }
  return {moment.cwiseQuotient(imp), imp.cwiseInverse()};
}

}  // namespace palimpsa
