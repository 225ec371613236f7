#pragma once

// Closed-form reference values used as fixed constants in the unit tests.
// They are computed here in long double from their defining sums, without
// going through the recurrence code, so `palimpsa oracle` can regenerate them.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "palimpsa/harness/suites.hpp"
#include "palimpsa/recurrence.hpp"

namespace palimpsa::harness {

struct OracleRow {
  std::string name;
  std::string inputs;
  std::vector<std::pair<std::string, double>> values;
};

/// The fixed eight-step sequence behind the `palimpsa_8step` row: d_k = d_v = 2,
/// A = 0.5, I_prior = 1, starting from rest.
inline std::vector<StepInput<double>> oracle_eight_steps() {
  std::vector<StepInput<double>> steps;
  for (int t = 0; t < 8; ++t) {
    StepInput<double> in;
    in.k = Vec<double>(2);
    in.k << std::cos(0.7 * t), std::sin(0.7 * t);
    in.v = Vec<double>(2);
    in.v << 0.1 * (t + 1), -0.05 * t;
    in.beta = Vec<double>(2);
    in.beta << 0.5 + 0.1 * t, 1.0;
    in.q = Vec<double>::Zero(2);
    in.d = 0.2 + 0.05 * t;
    steps.push_back(in);
  }
  return steps;
}

inline HeadParams<double> oracle_eight_step_head() { return {2, 2, 0.5, 1.0}; }

inline std::vector<OracleRow> oracle_table(std::uint64_t seed = 1) {
  std::vector<OracleRow> rows;
  {
    const long double a = std::exp(-0.05L * 3.0L);
    rows.push_back({"alpha_from_step", "A=0.05 d=3",
                    {{"alpha", static_cast<double>(a)}, {"N", static_cast<double>(1.0L / (1.0L - a))}}});
  }
  {
    // imp_T = P imp_0 + sum_t W_t [(1 - a_t) I_prior + beta_t k_t^2], moment likewise with beta v k.
    const auto steps = oracle_eight_steps();
    const auto hp = oracle_eight_step_head();
    long double imp[2][2], mom[2][2];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) imp[i][j] = hp.I_prior, mom[i][j] = 0;
    std::vector<long double> a;
    for (const auto& s : steps) a.push_back(std::exp(-static_cast<long double>(hp.A) * s.d));
    long double all = 1;
    for (auto x : a) all *= x;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) imp[i][j] *= all;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      long double w = 1;
      for (std::size_t s = t + 1; s < steps.size(); ++s) w *= a[s];
      const auto& x = steps[t];
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
          const long double kj = x.k(j), bi = x.beta(i);
          imp[i][j] += w * ((1 - a[t]) * hp.I_prior + bi * kj * kj);
          mom[i][j] += w * bi * x.v(i) * kj;
        }
    }
    OracleRow r{"palimpsa_8step", "d_k=d_v=2 A=0.5 I_prior=1 from rest", {}};
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        r.values.push_back({"mu" + std::to_string(i) + std::to_string(j), static_cast<double>(mom[i][j] / imp[i][j])});
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        r.values.push_back({"imp" + std::to_string(i) + std::to_string(j), static_cast<double>(imp[i][j])});
    rows.push_back(r);
  }
  {
    SuiteOptions opt;
    opt.seed = seed;
    const auto m = suite_derivation_mesa(opt);
    rows.push_back({"mesa_solve_vs_sherman_morrison", "d_k=8 d_v=3 64 steps seed=" + std::to_string(seed),
                    {{"max_abs_residual", m.worst}}});
  }
  {
    const auto g = mamba2_gap_ratios(seed);
    OracleRow r{"mamba2_limit_gap_ratio", "T=32 seed=" + std::to_string(seed), {}};
    for (std::size_t i = 0; i < g.size(); ++i) r.values.push_back({"ratio" + std::to_string(i), g[i]});
    rows.push_back(r);
  }
  return rows;
}

inline void print_oracle_table(const std::vector<OracleRow>& rows, std::ostream& out) {
  char buf[64];
  for (const auto& r : rows) {
    out << r.name << "  [" << r.inputs << "]\n";
    for (const auto& [k, v] : r.values) {
      std::snprintf(buf, sizeof buf, "%.15g", v);
      out << "    " << k << " = " << buf << "\n";
    }
  }
}

}  // namespace palimpsa::harness
