#pragma once

// Property suites behind `palimpsa verify` and the acceptance runner. Each
// suite draws seeded random cases, compares an implementation against an
// independent evaluation and reports the worst deviation seen.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "palimpsa/autograd.hpp"
#include "palimpsa/bayes.hpp"
#include "palimpsa/chunked_scan.hpp"
#include "palimpsa/harness/random_cases.hpp"
#include "palimpsa/mqar/model.hpp"
#include "palimpsa/recurrence.hpp"

namespace palimpsa::harness {

struct SuiteResult {
  std::string name;
  std::size_t samples = 0;
  double worst = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  double seconds = 0.0;
  std::string note;
};

struct SuiteOptions {
  std::uint64_t seed = 1;
  std::vector<std::size_t> workers{1, 2, 8};
  bool inject_fault = false;  // flips a sign inside the scan combine
  std::size_t scan_cases = 100;
  std::size_t max_len = 1024;
};

/// The test hook behind `--inject-fault`: the decay of older evidence enters
/// with the wrong sign.
struct FaultyCombine {
  template <typename T>
  void operator()(const ScanElement<T>& newer, const ScanElement<T>& older, ScanElement<T>& out) const {
    out.M = newer.M - newer.a * older.M;
    out.Ibar = newer.Ibar + newer.a * older.Ibar;
    out.a = newer.a * older.a;
  }
};

namespace detail {

using cases::Rng;

template <typename A, typename B>
double max_abs(const A& a, const B& b) {
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

inline DMat<double> random_spd(Rng& rng, Eigen::Index n, double floor = 0.5) {
  DMat<double> a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  return a * a.transpose() / static_cast<double>(n) + floor * DMat<double>::Identity(n, n);
}

struct RowCase {
  HeadParams<double> hp;
  Vec<double> mu_prev, imp_prev;
  Datum<double> datum;
  double alpha = 1;
};

inline RowCase random_row_case(Rng& rng) {
  const std::size_t dk = 1 + rng.index(8);
  RowCase c{{dk, 1, 0.5, rng.uniform(0.2, 3.0)}, {}, {}, {}, rng.uniform(0.05, 1.0)};
  c.mu_prev = rng.vec<double>(static_cast<Eigen::Index>(dk));
  c.imp_prev.resize(static_cast<Eigen::Index>(dk));
  for (Eigen::Index i = 0; i < c.imp_prev.size(); ++i) c.imp_prev(i) = rng.uniform(c.hp.I_prior, c.hp.I_prior + 3.0);
  c.datum = {rng.vec<double>(static_cast<Eigen::Index>(dk), 1.0 / std::sqrt(double(dk))), rng.normal(),
             rng.uniform(0.0, 2.0)};
  return c;
}

/// Central difference at h and h/2, combined to cancel the h^2 term.
template <typename F>
double refined_diff(F&& f, double& x, double h) {
  const double x0 = x;
  auto d = [&](double step) {
    x = x0 + step;
    const double fp = f();
    x = x0 - step;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2 * step);
  };
  const double coarse = d(h), fine = d(h / 2);
  return (4 * fine - coarse) / 3;
}

inline SuiteResult finish(std::string name, std::size_t samples, double worst, double tol, std::string note = {}) {
  return {std::move(name), samples, worst, tol, worst <= tol, 0.0, std::move(note)};
}

}  // namespace detail

/// chunked_forward against the step-by-step recurrence, and bitwise agreement
/// across worker counts at fixed chunk length.
inline SuiteResult suite_scan_equivalence(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 1);
  const std::size_t chunk_lens[] = {1, 2, 7, 16, 64};
  std::vector<std::unique_ptr<WorkerPool>> pools;
  for (std::size_t w : opt.workers) pools.push_back(std::make_unique<WorkerPool>(w));
  double worst = 0;
  std::size_t bitwise_mismatch = 0, samples = 0;
  for (std::size_t c = 0; c < opt.scan_cases; ++c) {
    const std::size_t len = c == 0 ? opt.max_len : 1 + rng.index(opt.max_len);
    const HeadParams<double> hp{1 + rng.index(4), 1 + rng.index(4), rng.uniform(0.05, 1.0), rng.uniform(0.3, 2.0)};
    const auto init = cases::random_state(rng, hp);
    const auto steps = cases::random_steps(rng, hp, len);
    const auto ref = sequential_scan<PalimpsaRule, double>(init, std::span<const StepInput<double>>(steps), hp);
    const auto seq = KernelSequence<double>::from_steps(steps, hp);
    for (std::size_t chunk : chunk_lens) {
      Mat<double> first;
      for (std::size_t p = 0; p < pools.size(); ++p) {
        const ChunkPlan plan{chunk, opt.workers[p], false};
        const Mat<double> out =
            opt.inject_fault
                ? chunked_forward(seq, init, hp, plan, *pools[p], ImportanceMode::Metaplastic, FaultyCombine{}).outputs
                : chunked_forward(seq, init, hp, plan, *pools[p]).outputs;
        for (std::size_t t = 0; t < len; ++t)
          worst = std::max(worst, detail::max_abs(Vec<double>(out.row(static_cast<Eigen::Index>(t)).transpose()),
                                                  ref.outputs[t]));
        if (!std::isfinite(out.sum())) worst = std::numeric_limits<double>::infinity();
        if (p == 0)
          first = out;
        else if (std::memcmp(first.data(), out.data(), sizeof(double) * static_cast<std::size_t>(out.size())) != 0)
          ++bitwise_mismatch;
        ++samples;
      }
    }
  }
  auto r = detail::finish("scan_equivalence", samples, worst, 1e-10,
                          "bitwise mismatches across workers: " + std::to_string(bitwise_mismatch));
  r.passed = r.passed && bitwise_mismatch == 0;
  return r;
}

/// Without forgetting, the recurrence's final state equals the direct
/// Bayesian regression posterior.
inline SuiteResult suite_oracle_closure(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 2);
  double worst = 0;
  const std::size_t cases_n = 50;
  for (std::size_t c = 0; c < cases_n; ++c) {
    const std::size_t dk = 1 + rng.index(6), dv = 1 + rng.index(4);
    const HeadParams<double> hp{dk, dv, rng.uniform(0.05, 1.5), rng.uniform(0.2, 3.0)};
    auto steps = cases::random_steps(rng, hp, 1 + rng.index(80));
    for (auto& s : steps) s.d = 0;
    const auto scan =
        sequential_scan<PalimpsaRule, double>(DualState<double>::rest(hp), std::span<const StepInput<double>>(steps), hp);
    const std::vector<double> alphas(steps.size(), 1.0);
    for (std::size_t i = 0; i < dv; ++i) {
      std::vector<Datum<double>> data;
      for (const auto& s : steps) data.push_back({s.k, s.v(static_cast<Eigen::Index>(i)), s.beta(static_cast<Eigen::Index>(i))});
      const auto post = weighted_posterior_oracle<double>(data, alphas, hp);
      const auto row = static_cast<Eigen::Index>(i);
      worst = std::max({worst, detail::max_abs(Vec<double>(scan.final_state.mu.row(row).transpose()), post.mean),
                        detail::max_abs(Vec<double>(scan.final_state.imp.row(row).transpose()),
                                        Vec<double>(post.var.cwiseInverse()))});
    }
  }
  return detail::finish("oracle_closure", cases_n, worst, 1e-12);
}

/// Analytic free-energy gradients vanish at the closed-form updates.
inline SuiteResult suite_free_energy_stationarity(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 3);
  double worst = 0;
  const std::size_t n_cases = 200;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto c = detail::random_row_case(rng);
    const auto& x = c.datum;
    // One memory row through the recurrence, with A = 1 so that d = -log alpha.
    const auto n = c.mu_prev.size();
    const HeadParams<double> row_hp{static_cast<std::size_t>(n), 1, 1.0, c.hp.I_prior};
    const DualState<double> row{c.mu_prev.transpose(), c.imp_prev.transpose()};
    const StepInput<double> in{x.k, Vec<double>::Constant(1, x.v_i), Vec<double>::Zero(n),
                               Vec<double>::Constant(1, x.beta_i), -std::log(c.alpha)};
    const auto next = palimpsa_step(row, in, row_hp);
    const Vec<double> imp = next.imp.row(0).transpose();
    const Vec<double> mu = next.mu.row(0).transpose();
    const auto prev = RowBelief<double>::diagonal(c.mu_prev, c.imp_prev);
    const DMat<double> a_factor = imp.cwiseInverse().cwiseSqrt().asDiagonal();
    worst = std::max({worst,
                      grad_free_energy_mu(mu, prev, x, c.alpha, c.hp, Coupling::Diagonal).cwiseAbs().maxCoeff(),
                      grad_free_energy_cov(a_factor, prev, x, c.alpha, c.hp, Coupling::Diagonal).cwiseAbs().maxCoeff()});
    // Full-precision update under the coupled likelihood.
    const DMat<double> prec = detail::random_spd(rng, n);
    const DMat<double> prec_next = c.alpha * prec + (1 - c.alpha) * c.hp.I_prior * DMat<double>::Identity(n, n) +
                              x.beta_i * x.k * x.k.transpose();
    const Vec<double> mu_full = prec_next.llt().solve(Vec<double>(c.alpha * prec * c.mu_prev + x.beta_i * x.v_i * x.k));
    const DMat<double> cov = prec_next.inverse();
    const DMat<double> a_full = cov.llt().matrixL();
    const auto prev_full = RowBelief<double>::full(c.mu_prev, prec);
    worst = std::max({worst, grad_free_energy_mu(mu_full, prev_full, x, c.alpha, c.hp).cwiseAbs().maxCoeff(),
                      grad_free_energy_cov(a_full, prev_full, x, c.alpha, c.hp).cwiseAbs().maxCoeff()});
  }
  return detail::finish("free_energy_stationarity", 2 * n_cases, worst, 1e-8);
}

/// Analytic free-energy gradients against central differences.
inline SuiteResult suite_free_energy_fd(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 4);
  double worst = 0;
  const std::size_t n_cases = 200;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto c = detail::random_row_case(rng);
    const auto n = c.mu_prev.size();
    const auto prev = RowBelief<double>::full(c.mu_prev, detail::random_spd(rng, n));
    const Coupling coupling = i % 2 ? Coupling::Full : Coupling::Diagonal;
    Vec<double> mu = rng.vec<double>(n);
    DMat<double> a;
    do {
      a = DMat<double>::Identity(n, n);
      for (Eigen::Index e = 0; e < a.size(); ++e) a.data()[e] += 0.3 * rng.normal();
    } while (Eigen::JacobiSVD<DMat<double>>(a).singularValues().minCoeff() < 0.3);
    const DMat<double> cov = a * a.transpose();
    const Vec<double> gmu = grad_free_energy_mu(mu, prev, c.datum, c.alpha, c.hp, coupling);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double h = 1e-4 * (1 + std::abs(mu(j)));
      const double fd = detail::refined_diff(
          [&] { return free_energy(mu, cov, prev, c.datum, c.alpha, c.hp, coupling).total; }, mu(j), h);
      worst = std::max(worst, detail::rel_err(gmu(j), fd));
    }
    const DMat<double> ga = grad_free_energy_cov(a, prev, c.datum, c.alpha, c.hp, coupling);
    auto f = [&](const DMat<double>& af) {
      return free_energy(mu, DMat<double>(af * af.transpose()), prev, c.datum, c.alpha, c.hp, coupling).total;
    };
    for (Eigen::Index e = 0; e < a.size(); ++e) {
      const double h = 1e-4 * (1 + std::abs(a.data()[e]));
      worst = std::max(worst, detail::rel_err(ga.data()[e], detail::refined_diff([&] { return f(a); }, a.data()[e], h)));
    }
  }
  return detail::finish("free_energy_fd", n_cases, worst, 1e-6);
}

/// Gap between the metaplastic rule and the Mamba2 limit over 32 steps when
/// beta is scaled by s and the written value by 1/s: gap(s)/gap(s/10).
inline std::vector<double> mamba2_gap_ratios(std::uint64_t seed) {
  detail::Rng rng(seed * 1000 + 5);
  const HeadParams<double> hp{4, 3, 0.6, 1.2};
  const auto steps = cases::random_steps(rng, hp, 32);
  auto gap = [&](double s) {
    auto pal = DualState<double>::rest(hp), lim = DualState<double>::rest(hp);
    for (const auto& base : steps) {
      auto scaled = base;
      scaled.beta = base.beta * s;
      scaled.v = base.v / s;
      pal = palimpsa_step(pal, scaled, hp);
      lim = mamba2_limit_step(lim, scaled, hp);
    }
    return detail::max_abs(pal.mu, lim.mu);
  };
  const double g2 = gap(1e-2), g3 = gap(1e-3), g4 = gap(1e-4);
  return {g2 / g3, g3 / g4};
}

inline SuiteResult suite_mamba2_limit(const SuiteOptions& opt) {
  const auto ratios = mamba2_gap_ratios(opt.seed);
  double worst = 0;  // distance outside [8, 12]
  for (double r : ratios) worst = std::max({worst, 8.0 - r, r - 12.0});
  auto res = detail::finish("mamba2_limit", ratios.size(), std::max(worst, 0.0), 0.0,
                            "ratios " + std::to_string(ratios[0]) + ", " + std::to_string(ratios[1]));
  return res;
}

inline SuiteResult suite_derivation_gated_deltanet(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 6);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const HeadParams<double> hp{1 + rng.index(6), 1 + rng.index(5), rng.uniform(0, 2), 1.0};
    const Mat<double> mu = rng.mat<double>(hp.d_v, hp.d_k);
    auto in = cases::random_step(rng, hp, 1.0, true);
    in.d = 0;
    worst = std::max(worst, detail::max_abs(gated_deltanet_step(mu, in, hp), deltanet_step(mu, in)));
  }
  return detail::finish("derivation_gated_deltanet", 100, worst, 1e-15);
}

/// Mesa's direct solve against a Sherman-Morrison maintained covariance.
inline SuiteResult suite_derivation_mesa(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 7);
  const HeadParams<double> hp{8, 3, 0.5, 1.0};
  const auto steps = cases::random_steps(rng, hp, 64, 0.4, true);
  auto s = MesaState<double>::rest(hp);
  Mat<double> cov = Mat<double>::Identity(8, 8) / hp.I_prior;
  Mat<double> g = Mat<double>::Zero(8, 3);
  double worst = 0;
  for (const auto& in : steps) {
    s = mesa_step(s, in, hp);
    const double a = std::exp(-hp.A * in.d);
    const double beta = in.beta(0);
    cov /= a;
    const double c = (1 - a) * hp.I_prior;
    for (int j = 0; j < 8; ++j) {
      const Vec<double> col = cov.col(j);
      cov -= (c / (1 + c * cov(j, j))) * col * col.transpose();
    }
    const Vec<double> ck = cov * in.k;
    cov -= (beta / (1 + beta * in.k.dot(ck))) * ck * ck.transpose();
    g = a * g + beta * in.k * in.v.transpose();
    worst = std::max(worst, detail::max_abs(Mat<double>((cov * g).transpose()), s.mu));
  }
  return detail::finish("derivation_mesa", steps.size(), worst, 1e-8);
}

inline SuiteResult suite_gaussian_identity(const SuiteOptions& opt) {
  detail::Rng rng(opt.seed * 1000 + 8);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const auto n = static_cast<Eigen::Index>(1 + rng.index(6));
    const GaussianFull<double> p{rng.vec<double>(n), detail::random_spd(rng, n)};
    const GaussianFull<double> q{rng.vec<double>(n), detail::random_spd(rng, n)};
    worst = std::max(worst, std::abs(gaussian_cross_entropy(p, q) - gaussian_entropy(p) - gaussian_kl(p, q)));
  }
  return detail::finish("gaussian_identity", 200, worst, 1e-12);
}

/// Kernel backward against finite differences, d_k = d_v = 4, L = 12.
inline SuiteResult suite_grad_kernel_fd(const SuiteOptions& opt) {
  double worst = 0;
  std::string worst_group;
  const std::size_t seeds = 50;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    detail::Rng rng(opt.seed * 100000 + seed);
    const HeadParams<double> hp{4, 4, rng.uniform(0.1, 1.0), rng.uniform(0.5, 2.0)};
    const auto init = cases::random_state(rng, hp);
    const auto steps = cases::random_steps(rng, hp, 12);
    const auto report = grad_check<double>(steps, init, hp, ChunkPlan{4, 1, false}, 1, seed);
    for (const auto& g : report.groups)
      if (g.max_rel_error > worst) {
        worst = g.max_rel_error;
        worst_group = g.group;
      }
  }
  return detail::finish("grad_kernel_fd", seeds, worst, 1e-5, "worst group " + worst_group);
}

inline SuiteResult suite_grad_chunk_invariance(const SuiteOptions& opt) {
  double worst = 0;
  const std::size_t n_cases = 10;
  WorkerPool pool(2);
  for (std::size_t c = 0; c < n_cases; ++c) {
    detail::Rng rng(opt.seed * 1000 + 9 + 31 * c);
    const HeadParams<double> hp{4, 4, rng.uniform(0.1, 1.0), rng.uniform(0.5, 2.0)};
    const auto init = cases::random_state(rng, hp);
    const auto steps = cases::random_steps(rng, hp, 24);
    const auto seq = KernelSequence<double>::from_steps(steps, hp);
    const Mat<double> up = rng.mat<double>(24, 4);
    auto grads = [&](std::size_t chunk) {
      const auto fwd = forward_with_tape(seq, init, hp, ChunkPlan{chunk, 2, false}, pool);
      return backward(fwd.store, up, seq, hp);
    };
    const auto g1 = grads(1);
    for (std::size_t chunk : {4u, 24u}) {
      const auto g = grads(chunk);
      worst = std::max({worst, detail::max_abs(g.k, g1.k), detail::max_abs(g.w, g1.w), detail::max_abs(g.q, g1.q),
                        detail::max_abs(g.beta, g1.beta), detail::max_abs(g.d, g1.d), std::abs(g.A - g1.A),
                        std::abs(g.I_prior - g1.I_prior), detail::max_abs(g.init.mu, g1.init.mu),
                        detail::max_abs(g.init.imp, g1.init.imp)});
    }
  }
  return detail::finish("grad_chunk_invariance", n_cases, worst, 1e-10);
}

/// Full model gradient against central differences at toy size.
inline SuiteResult suite_grad_model_fd(const SuiteOptions& opt) {
  mqar::MqarConfig data;
  data.seq_len = 16;
  data.num_kv = 4;
  data.key_vocab = 8;
  data.value_vocab = 16;
  data.batch = 2;
  data.seed = opt.seed;
  double worst = 0;
  std::string worst_block;
  for (auto variant : {mqar::Variant::PalimpsaD, mqar::Variant::PalimpsaM, mqar::Variant::Ablation}) {
    mqar::ModelConfig mc;
    mc.d_model = 8;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_state = 4;
    mc.beta_rank = 2;
    mc.vocab = 24;
    mc.chunk_len = 5;
    mc.variant = variant;
    const mqar::Model<double> m(mc);
    Vec<double> p = m.init_params(opt.seed);
    detail::Rng rng(opt.seed * 1000 + 10);
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) += rng.normal(0.3);
    const auto batch = mqar::make_batch(data, 0);
    WorkerPool pool(1);
    const Vec<double> g = m.loss_and_grads(p, batch, pool).grad;
    for (const auto& e : m.layout().entries()) {
      double max_fd = 0, max_diff = 0;
      for (std::size_t j = 0; j < e.size(); ++j) {
        const auto idx = static_cast<Eigen::Index>(e.offset + j);
        const double h = 1e-5 * (1 + std::abs(p(idx)));
        Vec<double> plus = p, minus = p;
        plus(idx) += h;
        minus(idx) -= h;
        const double fd =
            (m.loss_and_grads(plus, batch, pool, false).loss - m.loss_and_grads(minus, batch, pool, false).loss) / (2 * h);
        max_fd = std::max(max_fd, std::abs(fd));
        max_diff = std::max(max_diff, std::abs(g(idx) - fd));
      }
      const double rel = max_fd > 0 ? max_diff / max_fd : max_diff;
      if (rel > worst) {
        worst = rel;
        worst_block = std::string(mqar::variant_name(variant)) + "/" + e.name;
      }
    }
  }
  return detail::finish("grad_model_fd", 3, worst, 1e-5, "worst block " + worst_block);
}

struct SuiteEntry {
  std::string name;
  std::function<SuiteResult(const SuiteOptions&)> run;
};

inline std::vector<SuiteEntry> all_suites() {
  return {{"scan_equivalence", suite_scan_equivalence},
          {"oracle_closure", suite_oracle_closure},
          {"free_energy_stationarity", suite_free_energy_stationarity},
          {"free_energy_fd", suite_free_energy_fd},
          {"mamba2_limit", suite_mamba2_limit},
          {"derivation_gated_deltanet", suite_derivation_gated_deltanet},
          {"derivation_mesa", suite_derivation_mesa},
          {"gaussian_identity", suite_gaussian_identity},
          {"grad_kernel_fd", suite_grad_kernel_fd},
          {"grad_chunk_invariance", suite_grad_chunk_invariance},
          {"grad_model_fd", suite_grad_model_fd}};
}

/// Runs every suite whose name contains `filter` (all when empty), timing each.
inline std::vector<SuiteResult> run_suites(const SuiteOptions& opt, const std::string& filter = {},
                                           const std::function<void(const SuiteResult&)>& on_result = {}) {
  std::vector<SuiteResult> out;
  for (const auto& s : all_suites()) {
    if (!filter.empty() && s.name.find(filter) == std::string::npos) continue;
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r;
    try {
      r = s.run(opt);
    } catch (const std::exception& e) {
      r = {s.name, 0, std::numeric_limits<double>::infinity(), 0.0, false, 0.0, std::string("exception: ") + e.what()};
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace palimpsa::harness
