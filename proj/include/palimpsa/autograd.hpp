#pragma once

// Reverse-mode gradients of the chunked Palimpsa / Mamba2-limit forward pass.
//
// The backward pass differentiates the centered recurrence
//   M_t    = a_t M_{t-1}    + w_t k_t^T          (w = beta (.) v)
//   Ibar_t = a_t Ibar_{t-1} + beta_t (k_t^2)^T
//   mu_t   = M_t / (Ibar_t + I_prior),  y_t = mu_t q_t
// which is algebraically the Palimpsa update: the quotient rule through the
// importance in mu_t = M_t / I_t covers both the a (I_{t-1}/I_t) carry and the
// 1/I_t injection of the uncentered form. Per-token states are rebuilt chunk
// by chunk from the stored carry-in elements, last chunk first.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "palimpsa/chunked_scan.hpp"

namespace palimpsa {

template <typename T>
struct CheckpointStore {
  ChunkPlan plan;
  ImportanceMode mode = ImportanceMode::Metaplastic;
  DualState<T> init;
  std::size_t length = 0;
  std::vector<ScanElement<T>> boundaries;  // carry-in element of every chunk

  std::size_t num_chunks() const { return boundaries.size(); }

  /// Dual state at the start of chunk c. Chunk 0 is the initial state.
  DualState<T> state(std::size_t c, const HeadParams<T>& hp) const {
    return final_state_of(boundaries.at(c), init, hp, mode);
  }
};

template <typename T>
struct TapedForward {
  Mat<T> outputs;
  DualState<T> final_state;
  ScanElement<T> final_element;
  CheckpointStore<T> store;
};

template <typename T>
TapedForward<T> forward_with_tape(const KernelSequence<T>& seq, const DualState<T>& init, const HeadParams<T>& hp,
                                  ChunkPlan plan, WorkerPool& pool,
                                  ImportanceMode mode = ImportanceMode::Metaplastic) {
  plan.retain_checkpoints = true;
  auto fwd = chunked_forward(seq, init, hp, plan, pool, mode);
  TapedForward<T> out;
  out.outputs = std::move(fwd.outputs);
  out.final_state = std::move(fwd.final_state);
  out.final_element = std::move(fwd.final_element);
  out.store.plan = plan;
  out.store.mode = mode;
  out.store.init = init;
  out.store.length = seq.length();
  out.store.boundaries = std::move(fwd.checkpoints);
  if (out.store.boundaries.empty()) out.store.boundaries.push_back(initial_element(init, hp, mode));
  return out;
}

/// Gradients with respect to the packed kernel inputs (k, w, beta-direct, q, d).
/// `beta` here is only the importance path; the value path flows through `w`.
template <typename T>
struct KernelGrads {
  Mat<T> k, w, beta, q;
  Vec<T> d;
  T A = T(0);
  T I_prior = T(0);
  DualState<T> init;  // d/d mu_0 and d/d imp_0
};

/// Gradients with respect to every forward input in its natural
/// (k, v, q, beta, d) parameterization.
template <typename T>
struct GradBundle {
  std::vector<Vec<T>> d_k_in, d_v_in, d_q_in, d_beta;
  std::vector<T> d_d;
  T d_A = T(0);
  T d_I_prior = T(0);
  DualState<T> d_init;
};

/// Exact gradients of L = sum_t <upstream_t, y_t>, upstream is L x d_v.
template <typename T>
KernelGrads<T> backward(const CheckpointStore<T>& store, const Mat<T>& upstream, const KernelSequence<T>& seq,
                        const HeadParams<T>& hp) {
  const std::size_t len = seq.length();
  if (store.length != len) throw DomainError("backward: checkpoint store does not match the sequence");
  if (static_cast<std::size_t>(upstream.rows()) != len || static_cast<std::size_t>(upstream.cols()) != hp.d_v)
    throw DomainError("backward: upstream must be L x d_v");
  const auto dv = static_cast<Eigen::Index>(hp.d_v);
  const auto dk = static_cast<Eigen::Index>(hp.d_k);
  const bool meta = store.mode == ImportanceMode::Metaplastic;
  const T ip = hp.I_prior;

  KernelGrads<T> g;
  g.k = Mat<T>::Zero(len, dk);
  g.w = Mat<T>::Zero(len, dv);
  g.beta = Mat<T>::Zero(len, dv);
  g.q = Mat<T>::Zero(len, dk);
  g.d = Vec<T>::Zero(len);

  Mat<T> gM = Mat<T>::Zero(dv, dk);
  Mat<T> gIbar = Mat<T>::Zero(dv, dk);
  Mat<T> mean(dv, dk), gmu(dv, dk), gI(dv, dk);
  const std::size_t chunk_len = store.plan.chunk_len;
  std::vector<ScanElement<T>> states(chunk_len + 1, ScanElement<T>::identity(hp));

  for (std::size_t c = store.num_chunks(); c-- > 0;) {
    const std::size_t begin = c * chunk_len;
    const std::size_t end = std::min(len, begin + chunk_len);
    states[0] = store.boundaries[c];
    expand_chunk(seq, hp, store.mode, begin, end, store.boundaries[c], StandardCombine{},
                 [&](std::size_t t, const ScanElement<T>& e) {
                   auto& slot = states[t - begin + 1];
                   slot.M = e.M;
                   slot.Ibar = e.Ibar;
                 });
    for (std::size_t t = end; t-- > begin;) {
      const auto& cur = states[t - begin + 1];
      const auto& prev = states[t - begin];
      const auto ti = static_cast<Eigen::Index>(t);
      const Vec<T> gy = upstream.row(ti).transpose();
      const Vec<T> q = seq.q.row(ti).transpose();
      const Vec<T> k = seq.k.row(ti).transpose();
      if (meta)
        mean.array() = cur.M.array() / (cur.Ibar.array() + ip);
      else
        mean = cur.M / ip;
      g.q.row(ti).noalias() = (mean.transpose() * gy).transpose();
      gmu.noalias() = gy * q.transpose();
      if (meta) {
        const auto inv_i = (cur.Ibar.array() + ip).inverse();
        gM.array() += gmu.array() * inv_i;
        gI.array() = -gmu.array() * mean.array() * inv_i;
        gIbar += gI;
        g.I_prior += gI.sum();
      } else {
        gM += gmu / ip;
        g.I_prior -= gmu.cwiseProduct(mean).sum() / ip;
      }

      const T a = std::exp(-hp.A * seq.d(ti));
      T ga = gM.cwiseProduct(prev.M).sum();
      g.w.row(ti).noalias() = (gM * k).transpose();
      g.k.row(ti).noalias() = (gM.transpose() * seq.w.row(ti).transpose()).transpose();
      if (meta) {
        ga += gIbar.cwiseProduct(prev.Ibar).sum();
        const Vec<T> gib_beta = gIbar.transpose() * seq.beta.row(ti).transpose();
        g.k.row(ti).array() += (T(2) * k.array() * gib_beta.array()).transpose();
        g.beta.row(ti).noalias() = (gIbar * k.cwiseAbs2()).transpose();
        gIbar *= a;
      }
      gM *= a;
      g.d(ti) = -hp.A * a * ga;
      g.A -= seq.d(ti) * a * ga;
    }
    if (!gM.allFinite() || !gIbar.allFinite())
      throw NumericError("backward: non-finite adjoint").at_chunk(c, 0);
  }

  const auto& init = store.init;
  if (meta) {
    g.init.mu = init.imp.cwiseProduct(gM);
    g.init.imp = init.mu.cwiseProduct(gM) + gIbar;
    g.I_prior -= gIbar.sum();
  } else {
    g.init.mu = ip * gM;
    g.init.imp = Mat<T>::Zero(dv, dk);
    g.I_prior += init.mu.cwiseProduct(gM).sum();
  }
  return g;
}

/// Maps kernel gradients to the (v, beta) parameterization: w = beta (.) v.
template <typename T>
GradBundle<T> to_bundle(const KernelGrads<T>& g, std::span<const StepInput<T>> steps) {
  GradBundle<T> b;
  const std::size_t len = steps.size();
  b.d_k_in.reserve(len);
  b.d_v_in.reserve(len);
  b.d_q_in.reserve(len);
  b.d_beta.reserve(len);
  b.d_d.reserve(len);
  for (std::size_t t = 0; t < len; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    const Vec<T> gw = g.w.row(ti).transpose();
    b.d_k_in.push_back(g.k.row(ti).transpose());
    b.d_q_in.push_back(g.q.row(ti).transpose());
    b.d_v_in.push_back(steps[t].beta.cwiseProduct(gw));
    b.d_beta.push_back(g.beta.row(ti).transpose() + steps[t].v.cwiseProduct(gw));
    b.d_d.push_back(g.d(ti));
  }
  b.d_A = g.A;
  b.d_I_prior = g.I_prior;
  b.d_init = g.init;
  return b;
}

template <typename T>
GradBundle<T> backward(const CheckpointStore<T>& store, std::span<const Vec<T>> upstream,
                       std::span<const StepInput<T>> steps, const HeadParams<T>& hp) {
  if (upstream.size() != steps.size()) throw DomainError("backward: upstream length must equal sequence length");
  Mat<T> up(steps.size(), hp.d_v);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    if (static_cast<std::size_t>(upstream[t].size()) != hp.d_v) throw DomainError("backward: upstream shape");
    up.row(static_cast<Eigen::Index>(t)) = upstream[t].transpose();
  }
  const auto seq = KernelSequence<T>::from_steps(steps, hp);
  auto g = backward(store, up, seq, hp);
  auto b = to_bundle(g, steps);
  for (std::size_t t = 0; t < steps.size(); ++t)
    if (!b.d_k_in[t].allFinite() || !b.d_v_in[t].allFinite() || !b.d_q_in[t].allFinite() ||
        !b.d_beta[t].allFinite() || !std::isfinite(b.d_d[t]))
      throw NumericError("backward: non-finite gradient", t);
  return b;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

/// |a - b| / max(|a|, |b|, 1e-8).
template <typename T>
T symmetric_relative_error(T a, T b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), T(1e-8)});
}

/// Central difference of f at x along one coordinate, refined with one
/// Richardson step (combining spans h and h/2) to push truncation error
/// below the 1e-5 agreement threshold.
template <typename T, typename F>
T central_difference(F&& f, T x, T h) {
  auto diff = [&](T step) { return (f(x + step) - f(x - step)) / (T(2) * step); };
  const T coarse = diff(h);
  const T fine = diff(h / T(2));
  return (T(4) * fine - coarse) / T(3);
}

struct GradGroupError {
  std::string group;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

struct GradCheckReport {
  std::vector<GradGroupError> groups;
  double tolerance = 1e-5;

  double worst() const {
    double w = 0;
    for (const auto& g : groups) w = std::max(w, g.max_rel_error);
    return w;
  }
  bool passed() const { return worst() <= tolerance; }
};

/// Scalar loss sum_t <upstream_t, y_t> for a raw (unvalidated) parameter set,
/// so finite-difference probes may step outside beta >= 0 or d >= 0.
template <typename T>
T probe_loss(std::span<const StepInput<T>> steps, const DualState<T>& init, const HeadParams<T>& hp,
             const Mat<T>& upstream, ImportanceMode mode) {
  auto seq = KernelSequence<T>::zeros(steps.size(), hp);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    seq.k.row(ti) = steps[t].k.transpose();
    seq.q.row(ti) = steps[t].q.transpose();
    seq.beta.row(ti) = steps[t].beta.transpose();
    seq.w.row(ti) = steps[t].beta.cwiseProduct(steps[t].v).transpose();
    seq.d(ti) = steps[t].d;
  }
  // Sequential evaluation of the centered recurrence; independent of the
  // chunk machinery under test.
  const bool meta = mode == ImportanceMode::Metaplastic;
  Mat<T> M = meta ? Mat<T>(init.imp.cwiseProduct(init.mu)) : Mat<T>(init.mu * hp.I_prior);
  Mat<T> Ibar = meta ? Mat<T>((init.imp.array() - hp.I_prior).matrix()) : Mat<T>::Zero(hp.d_v, hp.d_k);
  T loss = T(0);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    const T a = std::exp(-hp.A * seq.d(ti));
    M = a * M + seq.w.row(ti).transpose() * seq.k.row(ti);
    if (meta) Ibar = a * Ibar + seq.beta.row(ti).transpose() * seq.k.row(ti).cwiseAbs2();
    const Mat<T> mu = (M.array() / (Ibar.array() + hp.I_prior)).matrix();
    loss += upstream.row(ti).dot(mu * seq.q.row(ti).transpose());
  }
  return loss;
}

/// Compares backward() against finite differences for every scalar input,
/// over `trials` random upstream gradients.
template <typename T>
GradCheckReport grad_check(std::span<const StepInput<T>> steps, const DualState<T>& init, const HeadParams<T>& hp,
                           const ChunkPlan& plan, std::size_t trials, std::uint64_t seed = 1,
                           ImportanceMode mode = ImportanceMode::Metaplastic, WorkerPool* pool = nullptr) {
  WorkerPool local(1);
  WorkerPool& wp = pool ? *pool : local;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::vector<StepInput<T>> base(steps.begin(), steps.end());
  const auto seq = KernelSequence<T>::from_steps(steps, hp);

  GradCheckReport report;
  const char* names[] = {"k", "v", "q", "beta", "d", "A", "I_prior", "init_mu", "init_imp"};
  for (const char* n : names) report.groups.push_back({n, 0.0, 0});
  auto record = [&](std::size_t group, T analytic, T numeric) {
    auto& g = report.groups[group];
    g.max_rel_error = std::max(g.max_rel_error, static_cast<double>(symmetric_relative_error(analytic, numeric)));
    ++g.entries;
  };

  for (std::size_t trial = 0; trial < trials; ++trial) {
    Mat<T> up(steps.size(), hp.d_v);
    for (Eigen::Index i = 0; i < up.size(); ++i) up.data()[i] = static_cast<T>(normal(rng));
    auto fwd = forward_with_tape(seq, init, hp, plan, wp, mode);
    const auto grads = to_bundle(backward(fwd.store, up, seq, hp), steps);

    auto steps_copy = base;
    auto init_copy = init;
    auto hp_copy = hp;
    auto loss = [&] { return probe_loss<T>(steps_copy, init_copy, hp_copy, up, mode); };
    auto check = [&](std::size_t group, T& slot, T analytic) {
      const T x0 = slot;
      const T h = T(1e-3) * (T(1) + std::abs(x0));
      const T numeric = central_difference(
          [&](T x) {
            slot = x;
            return loss();
          },
          x0, h);
      slot = x0;
      record(group, analytic, numeric);
    };

    for (std::size_t t = 0; t < steps.size(); ++t) {
      for (Eigen::Index j = 0; j < steps_copy[t].k.size(); ++j) check(0, steps_copy[t].k(j), grads.d_k_in[t](j));
      for (Eigen::Index j = 0; j < steps_copy[t].v.size(); ++j) check(1, steps_copy[t].v(j), grads.d_v_in[t](j));
      for (Eigen::Index j = 0; j < steps_copy[t].q.size(); ++j) check(2, steps_copy[t].q(j), grads.d_q_in[t](j));
      for (Eigen::Index j = 0; j < steps_copy[t].beta.size(); ++j)
        check(3, steps_copy[t].beta(j), grads.d_beta[t](j));
      check(4, steps_copy[t].d, grads.d_d[t]);
    }
    check(5, hp_copy.A, grads.d_A);
    check(6, hp_copy.I_prior, grads.d_I_prior);
    for (Eigen::Index j = 0; j < init_copy.mu.size(); ++j) check(7, init_copy.mu.data()[j], grads.d_init.mu.data()[j]);
    for (Eigen::Index j = 0; j < init_copy.imp.size(); ++j)
      check(8, init_copy.imp.data()[j], grads.d_init.imp.data()[j]);
  }
  return report;
}

}  // namespace palimpsa
