#pragma once

// Seeded random inputs shared by the property suites and the unit tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "palimpsa/types.hpp"

namespace palimpsa::cases {

struct Rng {
  explicit Rng(std::uint64_t seed) : engine(seed) {}

  double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(engine); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine); }

  template <typename T>
  Vec<T> vec(Eigen::Index n, double sd = 1.0) {
    Vec<T> v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<T>(normal(sd));
    return v;
  }

  template <typename T>
  Mat<T> mat(Eigen::Index r, Eigen::Index c, double sd = 1.0) {
    Mat<T> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(sd));
    return m;
  }

  std::mt19937_64 engine;
};

/// Random token inputs; keys are scaled to unit expected norm.
template <typename T>
StepInput<T> random_step(Rng& rng, const HeadParams<T>& hp, double d_max = 1.0, bool scalar_beta = false) {
  StepInput<T> in;
  const auto dk = static_cast<Eigen::Index>(hp.d_k);
  const auto dv = static_cast<Eigen::Index>(hp.d_v);
  in.k = rng.vec<T>(dk, 1.0 / std::sqrt(static_cast<double>(hp.d_k)));
  in.q = rng.vec<T>(dk, 1.0 / std::sqrt(static_cast<double>(hp.d_k)));
  in.v = rng.vec<T>(dv);
  in.beta.resize(dv);
  const double b0 = rng.uniform(0.0, 1.0);
  for (Eigen::Index i = 0; i < dv; ++i) in.beta(i) = static_cast<T>(scalar_beta ? b0 : rng.uniform(0.0, 1.0));
  in.d = static_cast<T>(rng.uniform(0.0, d_max));
  return in;
}

template <typename T>
std::vector<StepInput<T>> random_steps(Rng& rng, const HeadParams<T>& hp, std::size_t n, double d_max = 1.0,
                                       bool scalar_beta = false) {
  std::vector<StepInput<T>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_step(rng, hp, d_max, scalar_beta));
  return out;
}

template <typename T>
DualState<T> random_state(Rng& rng, const HeadParams<T>& hp) {
  DualState<T> s;
  s.mu = rng.mat<T>(hp.d_v, hp.d_k);
  s.imp = Mat<T>(hp.d_v, hp.d_k);
  for (Eigen::Index i = 0; i < s.imp.size(); ++i) s.imp.data()[i] = static_cast<T>(hp.I_prior + rng.uniform(0, 2));
  return s;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace palimpsa::cases
