#pragma once

// Subcommand bodies. The CLI parses flags into a RunConfig and calls these;
// tests call them directly with an output directory of their own.

#include <cmath>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "palimpsa/harness/bench.hpp"
#include "palimpsa/harness/config.hpp"
#include "palimpsa/harness/oracle.hpp"
#include "palimpsa/harness/report.hpp"
#include "palimpsa/harness/suites.hpp"
#include "palimpsa/mqar/train.hpp"

namespace palimpsa::harness {

enum ExitCode : int { kExitOk = 0, kExitSuiteFailure = 1, kExitConfigError = 2, kExitNumericAbort = 3 };

struct VerifyOptions {
  std::string filter;
  bool inject_fault = false;
};

inline int cmd_verify(const RunConfig& cfg, const VerifyOptions& vo, std::ostream& log) {
  ensure_dir(cfg.out);
  const auto digest = config_digest(cfg);
  NdjsonWriter nd(cfg.out + "/verify.ndjson", digest, cfg.seed);
  SuiteOptions opt;
  opt.seed = cfg.seed;
  opt.workers = cfg.verify.workers;
  opt.scan_cases = cfg.verify.scan_cases;
  opt.max_len = cfg.verify.max_len;
  opt.inject_fault = vo.inject_fault;
  bool all_passed = true;
  const auto results = run_suites(opt, vo.filter, [&](const SuiteResult& r) {
    all_passed = all_passed && r.passed;
    nd.write({{"suite", r.name},
              {"samples", r.samples},
              {"worst", number_or_null(r.worst)},
              {"tolerance", r.tolerance},
              {"passed", r.passed},
              {"note", r.note}});
    log << (r.passed ? "PASS " : "FAIL ") << r.name << "  samples=" << r.samples << " worst=" << format_double(r.worst, 3)
        << " tol=" << format_double(r.tolerance, 3) << " (" << format_double(r.seconds, 3) << " s)"
        << (r.note.empty() ? "" : "  " + r.note) << "\n";
  });
  if (results.empty()) {
    log << "no suite matches filter '" << vo.filter << "'\n";
    return kExitConfigError;
  }
  return all_passed ? kExitOk : kExitSuiteFailure;
}

// ---- train -------------------------------------------------------------------

struct RunSpec {
  mqar::Variant variant;
  double lr;
  std::uint64_t seed;
  std::string tag() const {
    return std::string(mqar::variant_name(variant)) + "_lr" + format_double(lr, 4) + "_seed" + std::to_string(seed);
  }
};

struct RunSummary {
  RunSpec spec;
  mqar::TrainResult result;
};

/// Digest of the configuration narrowed to a single (variant, lr, seed) run;
/// stored in that run's checkpoint so a resume may use a narrowed config.
inline std::string run_digest(const RunConfig& cfg, const RunSpec& r) {
  RunConfig one = cfg;
  one.train.variants = {r.variant};
  one.train.lrs = {r.lr};
  one.train.seeds = {r.seed};
  return config_digest(one);
}

inline mqar::TrainConfig train_config_for(const RunConfig& cfg, const RunSpec& r) {
  auto t = cfg.train.base;
  t.model.variant = r.variant;
  t.model.precision = cfg.train_precision();
  t.adam.lr = r.lr;
  t.seed = r.seed;
  return t;
}

inline std::vector<RunSpec> run_grid(const RunConfig& cfg) {
  std::vector<RunSpec> out;
  for (auto v : cfg.train.variants)
    for (double lr : cfg.train.lrs)
      for (auto s : cfg.train.seeds) out.push_back({v, lr, s});
  return out;
}

/// Trains one grid point, streaming metrics to `<out>/train/<tag>.ndjson` and
/// writing `<tag>.ckpt` (periodically when checkpoint_every is set, and at the end).
inline RunSummary train_one(const RunConfig& cfg, const RunSpec& spec, const std::string& digest, WorkerPool& pool,
                            std::ostream& log, const mqar::TrainState* resume = nullptr, std::size_t stop_after = 0) {
  const auto dir = cfg.out + "/train";
  ensure_dir(dir);
  const auto tc = train_config_for(cfg, spec);
  const auto rdigest = run_digest(cfg, spec);
  NdjsonWriter nd(dir + "/" + spec.tag() + ".ndjson", digest, spec.seed);
  const auto ckpt = dir + "/" + spec.tag() + ".ckpt";
  auto sink = [&](const mqar::MetricRecord& m) {
    auto j = to_json(m);
    j["variant"] = mqar::variant_name(spec.variant);
    j["lr_peak"] = spec.lr;
    nd.write(j);
    if (m.eval)
      log << "  " << spec.tag() << " step " << m.step << " stage " << m.stage << " loss " << format_double(m.loss, 4)
          << " eval_acc " << format_double(m.accuracy, 4) << "\n";
  };
  auto on_ckpt = [&](const mqar::TrainState& s) { mqar::save_checkpoint(ckpt, s, rdigest); };
  RunSummary out{spec, {}};
  if (cfg.train_precision() == mqar::Precision::F64)
    out.result = mqar::train<double>(tc, pool, sink, resume, stop_after, cfg.train.checkpoint_every, on_ckpt);
  else
    out.result = mqar::train<float>(tc, pool, sink, resume, stop_after, cfg.train.checkpoint_every, on_ckpt);
  mqar::save_checkpoint(ckpt, out.result.state, rdigest);
  if (out.result.aborted) {
    auto j = to_json(out.result.last_record);
    j["kind"] = "abort";
    j["reason"] = out.result.abort_reason;
    j["variant"] = mqar::variant_name(spec.variant);
    nd.write(j);
    log << "  " << spec.tag() << " aborted: " << out.result.abort_reason << "\n";
  }
  return out;
}

inline void write_summary(const RunConfig& cfg, const std::string& digest, const std::vector<RunSummary>& runs) {
  std::vector<std::string> header{"variant", "lr", "seed", "steps", "reached_target", "aborted", "diagnostic_violations",
                                  "final_accuracy"};
  const auto& stages = cfg.train.base.stages;
  for (std::size_t s = 0; s < stages.size(); ++s)
    header.push_back("acc_L" + std::to_string(stages[s].seq_len) + "_kv" + std::to_string(stages[s].num_kv));
  header.push_back("digest");
  CsvWriter csv(cfg.out + "/train/summary.csv", header);
  for (const auto& r : runs) {
    std::vector<std::string> row{mqar::variant_name(r.spec.variant),
                                 format_double(r.spec.lr, 6),
                                 std::to_string(r.spec.seed),
                                 std::to_string(r.result.state.step),
                                 r.result.reached_target ? "1" : "0",
                                 r.result.aborted ? "1" : "0",
                                 std::to_string(r.result.diagnostic_violations),
                                 format_double(r.result.final_accuracy, 6)};
    for (double a : r.result.stage_accuracy) row.push_back(format_double(a, 6));
    row.push_back(digest);
    csv.row(row);
  }

  // Mean and spread of the final accuracy per (variant, lr), plus the gap of
  // each variant to the Ablation at the same lr.
  if (cfg.train.variants.size() < 2 && cfg.train.seeds.size() < 2) return;
  CsvWriter cmp(cfg.out + "/train/comparison.csv",
                {"variant", "lr", "runs", "mean_accuracy", "std_accuracy", "gap_vs_ablation", "digest"});
  std::map<std::pair<std::string, double>, std::vector<double>> acc;
  for (const auto& r : runs) acc[{mqar::variant_name(r.spec.variant), r.spec.lr}].push_back(r.result.final_accuracy);
  auto mean_std = [](const std::vector<double>& x) {
    double m = 0, v = 0;
    for (double a : x) m += a;
    m /= static_cast<double>(x.size());
    for (double a : x) v += (a - m) * (a - m);
    return std::pair{m, x.size() > 1 ? std::sqrt(v / static_cast<double>(x.size() - 1)) : 0.0};
  };
  for (const auto& [key, xs] : acc) {
    const auto [m, s] = mean_std(xs);
    std::string gap = "";
    auto it = acc.find({"ablation", key.second});
    if (it != acc.end()) gap = format_double(m - mean_std(it->second).first, 6);
    cmp.row({key.first, format_double(key.second, 6), std::to_string(xs.size()), format_double(m, 6),
             format_double(s, 6), gap, digest});
  }
}

struct TrainOutcome {
  int exit_code = kExitOk;
  std::vector<RunSummary> runs;
};

inline TrainOutcome cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto digest = config_digest(cfg);
  const auto grid = run_grid(cfg);
  WorkerPool pool(cfg.workers);
  TrainOutcome out;
  mqar::TrainState resume;
  if (!cfg.train.resume.empty()) {
    if (grid.size() != 1) throw ConfigError("train.resume needs exactly one (variant, lr, seed) combination");
    resume = mqar::load_checkpoint(cfg.train.resume, run_digest(cfg, grid.front()));
    log << "resuming " << grid.front().tag() << " from step " << resume.step << "\n";
  }
  for (const auto& spec : grid) {
    log << "train " << spec.tag() << " (" << mqar::precision_name(cfg.train_precision()) << ", " << cfg.workers
        << " workers)\n";
    out.runs.push_back(train_one(cfg, spec, digest, pool, log, cfg.train.resume.empty() ? nullptr : &resume));
    const auto& r = out.runs.back().result;
    log << "  done at step " << r.state.step << " final_acc " << format_double(r.final_accuracy, 4)
        << (r.diagnostic_violations ? " diagnostic violations " + std::to_string(r.diagnostic_violations) : "") << "\n";
    if (r.aborted) out.exit_code = kExitNumericAbort;
  }
  write_summary(cfg, digest, out.runs);
  return out;
}

// ---- bench -------------------------------------------------------------------

inline int cmd_bench(const RunConfig& cfg, std::ostream& log, BenchReport* report_out = nullptr) {
  ensure_dir(cfg.out);
  const auto digest = config_digest(cfg);
  NdjsonWriter nd(cfg.out + "/bench.ndjson", digest, cfg.seed);
  CsvWriter csv(cfg.out + "/bench.csv", {"rule", "method", "L", "d_model", "chunk_len", "workers", "repetitions", "min_s",
                                         "median_s", "max_s", "tokens_per_s", "digest", "seed"});
  auto on_row = [&](const BenchRow& r) {
    nd.write({{"rule", r.rule},
              {"method", r.method},
              {"L", r.len},
              {"d_model", r.d_model},
              {"chunk_len", r.chunk_len},
              {"workers", r.workers},
              {"repetitions", r.repetitions},
              {"min_s", r.min_s},
              {"median_s", r.median_s},
              {"max_s", r.max_s},
              {"tokens_per_s", r.tokens_per_s()}});
    csv.row({r.rule, r.method, std::to_string(r.len), std::to_string(r.d_model), std::to_string(r.chunk_len),
             std::to_string(r.workers), std::to_string(r.repetitions), format_double(r.min_s), format_double(r.median_s),
             format_double(r.max_s), format_double(r.tokens_per_s()), digest, std::to_string(cfg.seed)});
    log << r.rule << " " << r.method << " L=" << r.len << " d_model=" << r.d_model;
    if (r.method == "chunked") log << " chunk=" << r.chunk_len << " workers=" << r.workers;
    log << "  median " << format_double(r.median_s, 4) << " s  (" << format_double(r.tokens_per_s(), 4) << " tok/s)\n";
  };
  const auto rep = cfg.bench_precision() == mqar::Precision::F64 ? run_bench<double>(cfg.bench, cfg.seed, on_row)
                                                                : run_bench<float>(cfg.bench, cfg.seed, on_row);
  nd.write({{"kind", "environment"}, {"fingerprint", rep.environment}});
  log << "environment: " << rep.environment << "\n";
  for (std::size_t len : cfg.bench.lengths)
    for (std::size_t dm : cfg.bench.d_models) {
      if (auto c = rule_cost_ratio(rep, "sequential", len, dm, 0, 1)) {
        nd.write({{"kind", "cost_ratio"}, {"method", "sequential"}, {"L", len}, {"d_model", dm}, {"palimpsa_over_mamba2", *c}});
        log << "palimpsa / mamba2_limit cost (sequential, L=" << len << ", d_model=" << dm << "): " << format_double(*c, 3)
            << "\n";
      }
      for (std::size_t chunk : cfg.bench.chunk_lens)
        for (std::size_t w : cfg.bench.workers)
          if (w > 1)
            for (const auto& rule : cfg.bench.rules)
              if (auto s = worker_speedup(rep, rule, len, dm, chunk, w))
                nd.write({{"kind", "speedup"},
                          {"rule", rule},
                          {"L", len},
                          {"d_model", dm},
                          {"chunk_len", chunk},
                          {"workers", w},
                          {"over_one_worker", *s}});
    }
  for (const auto& w : rep.warnings) {
    nd.write({{"kind", "warning"}, {"message", w}});
    log << "warning: " << w << "\n";
  }
  if (report_out) *report_out = rep;
  return kExitOk;
}

inline int cmd_oracle(const RunConfig& cfg, std::ostream& out) {
  print_oracle_table(oracle_table(cfg.seed), out);
  return kExitOk;
}

}  // namespace palimpsa::harness
