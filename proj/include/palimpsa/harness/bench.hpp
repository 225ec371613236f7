#pragma once

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "palimpsa/chunked_scan.hpp"
#include "palimpsa/harness/config.hpp"
#include "palimpsa/harness/random_cases.hpp"
#include "palimpsa/recurrence.hpp"

namespace palimpsa::harness {

struct BenchRow {
  std::string rule;    // palimpsa | mamba2_limit
  std::string method;  // sequential | chunked
  std::size_t len = 0, d_model = 0, chunk_len = 0, workers = 0, repetitions = 0;
  double min_s = 0, median_s = 0, max_s = 0;
  double tokens_per_s() const { return median_s > 0 ? static_cast<double>(len) / median_s : 0.0; }
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::string environment;
  std::vector<std::string> warnings;

  const BenchRow* find(const std::string& rule, const std::string& method, std::size_t len, std::size_t d_model,
                       std::size_t chunk_len, std::size_t workers) const {
    for (const auto& r : rows)
      if (r.rule == rule && r.method == method && r.len == len && r.d_model == d_model &&
          (method == "sequential" || (r.chunk_len == chunk_len && r.workers == workers)))
        return &r;
    return nullptr;
  }
};

inline std::string environment_fingerprint() {
  utsname u{};
  uname(&u);
  std::string s = std::string(u.sysname) + " " + u.release + " " + u.machine;
  s += "; hardware threads " + std::to_string(std::thread::hardware_concurrency());
#if defined(__clang__)
  s += "; clang " __clang_version__;
#elif defined(__GNUC__)
  s += "; gcc " __VERSION__;
#endif
#ifdef NDEBUG
  s += "; optimized";
#else
  s += "; debug";
#endif
  return s;
}

namespace detail {

template <typename F>
BenchRow time_it(F&& fn, std::size_t warmup, std::size_t reps) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> t;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  BenchRow r;
  r.repetitions = reps;
  r.min_s = t.front();
  r.max_s = t.back();
  r.median_s = t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
  return r;
}

}  // namespace detail

/// Times sequential_scan and chunked_forward over the grid. Inputs are one
/// head with d_k = d_state and d_v = d_model, drawn from `seed`.
template <typename T>
BenchReport run_bench(const BenchConfig& cfg, std::uint64_t seed,
                      const std::function<void(const BenchRow&)>& on_row = {}) {
  BenchReport rep;
  rep.environment = environment_fingerprint();
  auto emit = [&](BenchRow r) {
    if (on_row) on_row(r);
    rep.rows.push_back(std::move(r));
  };
  for (std::size_t len : cfg.lengths)
    for (std::size_t dm : cfg.d_models) {
      cases::Rng rng(seed * 7919 + len * 31 + dm);
      const HeadParams<T> hp{cfg.d_state, dm, T(0.1), T(1)};
      const auto steps = cases::random_steps<T>(rng, hp, len, 0.5);
      const auto seq = KernelSequence<T>::from_steps(steps, hp);
      const auto init = DualState<T>::rest(hp);
      for (const auto& rule : cfg.rules) {
        const bool meta = rule == "palimpsa";
        BenchRow base = detail::time_it(
            [&] {
              if (meta)
                (void)sequential_scan<PalimpsaRule, T>(init, std::span<const StepInput<T>>(steps), hp);
              else
                (void)sequential_scan<Mamba2LimitRule, T>(init, std::span<const StepInput<T>>(steps), hp);
            },
            cfg.warmup, cfg.repetitions);
        base.rule = rule;
        base.method = "sequential";
        base.len = len;
        base.d_model = dm;
        base.workers = 1;
        emit(base);
        for (std::size_t chunk : cfg.chunk_lens) {
          std::vector<double> medians;
          for (std::size_t w : cfg.workers) {
            WorkerPool pool(w);
            const ChunkPlan plan{chunk, w, false};
            const auto mode = meta ? ImportanceMode::Metaplastic : ImportanceMode::Frozen;
            BenchRow r = detail::time_it([&] { (void)chunked_forward(seq, init, hp, plan, pool, mode); }, cfg.warmup,
                                         cfg.repetitions);
            r.rule = rule;
            r.method = "chunked";
            r.len = len;
            r.d_model = dm;
            r.chunk_len = chunk;
            r.workers = w;
            medians.push_back(r.median_s);
            emit(r);
          }
          std::size_t inversions = 0;
          for (std::size_t i = 1; i < medians.size(); ++i) inversions += medians[i] > medians[i - 1];
          if (inversions > 1)
            rep.warnings.push_back(rule + " L=" + std::to_string(len) + " d_model=" + std::to_string(dm) +
                                   " chunk_len=" + std::to_string(chunk) + ": medians not monotone in workers (" +
                                   std::to_string(inversions) + " inversions)");
        }
      }
    }
  return rep;
}

/// Median throughput ratio of `workers` over 1 worker for chunked_forward.
inline std::optional<double> worker_speedup(const BenchReport& r, const std::string& rule, std::size_t len,
                                            std::size_t d_model, std::size_t chunk, std::size_t workers) {
  const auto* one = r.find(rule, "chunked", len, d_model, chunk, 1);
  const auto* many = r.find(rule, "chunked", len, d_model, chunk, workers);
  if (!one || !many || many->median_s <= 0) return std::nullopt;
  return one->median_s / many->median_s;
}

/// Palimpsa median time over Mamba2-limit median time for the same method and point.
inline std::optional<double> rule_cost_ratio(const BenchReport& r, const std::string& method, std::size_t len,
                                             std::size_t d_model, std::size_t chunk, std::size_t workers) {
  const auto* p = r.find("palimpsa", method, len, d_model, chunk, workers);
  const auto* m = r.find("mamba2_limit", method, len, d_model, chunk, workers);
  if (!p || !m || m->median_s <= 0) return std::nullopt;
  return p->median_s / m->median_s;
}

}  // namespace palimpsa::harness
