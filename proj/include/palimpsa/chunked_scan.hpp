#pragma once

// Chunk-parallel evaluation of the Palimpsa recurrence through the
// associative operator on (M, Ibar, a) triples, where M = I (.) mu and
// Ibar = I - I_prior. Both components follow x_t = a_t x_{t-1} + b_t, the
// (1 - alpha) I_prior re-injection cancels under the centering.
//
// Phase 1 reduces every chunk to its aggregate element (parallel over
// chunks), phase 2 folds the aggregates left to right into carry-in elements
// (serial), phase 3 expands every chunk against its carry-in and reads out
// (parallel over chunks). Inside a chunk the scan is a serial left-to-right
// fold, so results are bitwise independent of the worker count.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "palimpsa/recurrence.hpp"
#include "palimpsa/types.hpp"
#include "palimpsa/worker_pool.hpp"

namespace palimpsa {

/// Metaplastic: the full Palimpsa dual state. Frozen: importance pinned at
/// I_prior, which is the Mamba2-limit rule expressed in the same scan.
enum class ImportanceMode { Metaplastic, Frozen };

template <typename T>
struct ScanElement {
  Mat<T> M;
  Mat<T> Ibar;
  T a = T(1);

  static ScanElement identity(const HeadParams<T>& hp) {
    return {Mat<T>::Zero(hp.d_v, hp.d_k), Mat<T>::Zero(hp.d_v, hp.d_k), T(1)};
  }
};

struct ChunkPlan {
  std::size_t chunk_len = 64;
  std::size_t workers = 1;
  bool retain_checkpoints = false;

  void validate() const {
    if (chunk_len < 1) throw ConfigError("ChunkPlan: chunk_len must be >= 1");
    if (workers < 1) throw ConfigError("ChunkPlan: workers must be >= 1");
  }

  std::size_t num_chunks(std::size_t len) const { return len == 0 ? 0 : (len + chunk_len - 1) / chunk_len; }
};

/// out = newer (+) older. `out` may alias `older`.
struct StandardCombine {
  template <typename T>
  void operator()(const ScanElement<T>& newer, const ScanElement<T>& older, ScanElement<T>& out) const {
    out.M = newer.M + newer.a * older.M;
    out.Ibar = newer.Ibar + newer.a * older.Ibar;
    out.a = newer.a * older.a;
  }
};

template <typename T>
ScanElement<T> combine(const ScanElement<T>& newer, const ScanElement<T>& older) {
  if (newer.M.rows() != older.M.rows() || newer.M.cols() != older.M.cols())
    throw DomainError("combine: shape mismatch");
  ScanElement<T> out;
  StandardCombine{}(newer, older, out);
  return out;
}

namespace detail {

template <typename T>
void write_leaf(const KernelSequence<T>& seq, std::size_t t, const HeadParams<T>& hp, ImportanceMode mode,
                ScanElement<T>& leaf) {
  leaf.M.noalias() = seq.w.row(t).transpose() * seq.k.row(t);
  if (mode == ImportanceMode::Metaplastic)
    leaf.Ibar.noalias() = seq.beta.row(t).transpose() * seq.k.row(t).cwiseAbs2();
  else
    leaf.Ibar.setZero();
  leaf.a = std::exp(-hp.A * seq.d(t));
}

}  // namespace detail

template <typename T>
ScanElement<T> leaf_of_step(const StepInput<T>& in, const HeadParams<T>& hp) {
  in.validate(hp);
  ScanElement<T> e;
  e.M = in.beta.cwiseProduct(in.v) * in.k.transpose();
  e.Ibar = in.beta * in.k.cwiseAbs2().transpose();
  e.a = alpha_from_step(hp.A, in.d);
  return e;
}

template <typename T>
ScanElement<T> state_to_element(const DualState<T>& s, const HeadParams<T>& hp) {
  return {s.imp.cwiseProduct(s.mu), (s.imp.array() - hp.I_prior).matrix(), T(1)};
}

template <typename T>
DualState<T> element_to_state(const ScanElement<T>& e, const HeadParams<T>& hp) {
  DualState<T> s;
  s.imp = (e.Ibar.array() + hp.I_prior).matrix();
  if (!(s.imp.array() > T(0)).all()) throw NumericError("element_to_state: non-positive importance");
  s.mu = e.M.cwiseQuotient(s.imp);
  return s;
}

/// Scan element representing `init` under the given importance mode.
template <typename T>
ScanElement<T> initial_element(const DualState<T>& init, const HeadParams<T>& hp, ImportanceMode mode) {
  if (mode == ImportanceMode::Metaplastic) return state_to_element(init, hp);
  return {init.mu * hp.I_prior, Mat<T>::Zero(hp.d_v, hp.d_k), T(1)};
}

template <typename T>
DualState<T> final_state_of(const ScanElement<T>& e, const DualState<T>& init, const HeadParams<T>& hp,
                            ImportanceMode mode) {
  if (mode == ImportanceMode::Metaplastic) return element_to_state(e, hp);
  return {e.M / hp.I_prior, init.imp};
}

template <typename T>
struct ChunkedResult {
  Mat<T> outputs;  // L x d_v, row t is y_t
  DualState<T> final_state;
  ScanElement<T> final_element;
  std::vector<ScanElement<T>> checkpoints;  // carry-in element per chunk, when retained
};

/// Expands one chunk against its carry-in: for each token, the local prefix
/// is extended by the token's leaf, combined with the carry and read out.
/// `on_token(t, element)` sees every per-token state element.
template <typename T, typename Combine = StandardCombine, typename OnToken>
void expand_chunk(const KernelSequence<T>& seq, const HeadParams<T>& hp, ImportanceMode mode, std::size_t begin,
                  std::size_t end, const ScanElement<T>& carry, const Combine& op, OnToken&& on_token) {
  auto leaf = ScanElement<T>::identity(hp);
  auto prefix = ScanElement<T>::identity(hp);
  auto state = ScanElement<T>::identity(hp);
  for (std::size_t t = begin; t < end; ++t) {
    detail::write_leaf(seq, t, hp, mode, leaf);
    op(leaf, prefix, prefix);
    op(prefix, carry, state);
    on_token(t, state);
  }
}

template <typename T, typename Combine = StandardCombine>
ChunkedResult<T> chunked_forward(const KernelSequence<T>& seq, const DualState<T>& init, const HeadParams<T>& hp,
                                 const ChunkPlan& plan, WorkerPool& pool,
                                 ImportanceMode mode = ImportanceMode::Metaplastic, const Combine& op = {}) {
  hp.validate();
  plan.validate();
  init.validate(hp);
  const std::size_t len = seq.length();
  const std::size_t chunks = plan.num_chunks(len);
  const auto dv = static_cast<Eigen::Index>(hp.d_v);

  ChunkedResult<T> out;
  out.outputs = Mat<T>::Zero(static_cast<Eigen::Index>(len), dv);

  // Phase 1: chunk aggregates.
  std::vector<ScanElement<T>> aggregate(chunks, ScanElement<T>::identity(hp));
  pool.run(chunks, [&](std::size_t c) {
    const std::size_t begin = c * plan.chunk_len;
    const std::size_t end = std::min(len, begin + plan.chunk_len);
    auto leaf = ScanElement<T>::identity(hp);
    for (std::size_t t = begin; t < end; ++t) {
      detail::write_leaf(seq, t, hp, mode, leaf);
      op(leaf, aggregate[c], aggregate[c]);
    }
  });

  // Phase 2: carries, strictly left to right.
  std::vector<ScanElement<T>> carry;
  carry.reserve(chunks + 1);
  carry.push_back(initial_element(init, hp, mode));
  for (std::size_t c = 0; c < chunks; ++c) {
    ScanElement<T> next;
    op(aggregate[c], carry.back(), next);
    carry.push_back(std::move(next));
  }

  // Phase 3: per-token states and readouts.
  std::vector<std::ptrdiff_t> bad_offset(chunks, -1);
  pool.run(chunks, [&](std::size_t c) {
    const std::size_t begin = c * plan.chunk_len;
    const std::size_t end = std::min(len, begin + plan.chunk_len);
    Mat<T> mean(hp.d_v, hp.d_k);
    expand_chunk(seq, hp, mode, begin, end, carry[c], op, [&](std::size_t t, const ScanElement<T>& e) {
      if (mode == ImportanceMode::Metaplastic)
        mean.array() = e.M.array() / (e.Ibar.array() + hp.I_prior);
      else
        mean = e.M / hp.I_prior;
      auto y = out.outputs.row(static_cast<Eigen::Index>(t));
      y.noalias() = (mean * seq.q.row(t).transpose()).transpose();
      if (bad_offset[c] < 0 && !y.allFinite()) bad_offset[c] = static_cast<std::ptrdiff_t>(t - begin);
    });
  });
  for (std::size_t c = 0; c < chunks; ++c)
    if (bad_offset[c] >= 0)
      throw NumericError("chunked_forward: non-finite readout").at_chunk(c, static_cast<std::size_t>(bad_offset[c]));

  out.final_element = carry.back();
  out.final_state = final_state_of(out.final_element, init, hp, mode);
  if (plan.retain_checkpoints) {
    carry.pop_back();
    out.checkpoints = std::move(carry);
  }
  return out;
}

template <typename T, typename Combine = StandardCombine>
ChunkedResult<T> chunked_forward(std::span<const StepInput<T>> inputs, const DualState<T>& init,
                                 const HeadParams<T>& hp, const ChunkPlan& plan, WorkerPool& pool,
                                 ImportanceMode mode = ImportanceMode::Metaplastic, const Combine& op = {}) {
  return chunked_forward(KernelSequence<T>::from_steps(inputs, hp), init, hp, plan, pool, mode, op);
}

}  // namespace palimpsa
