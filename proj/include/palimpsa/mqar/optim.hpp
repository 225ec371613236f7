#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "palimpsa/errors.hpp"
#include "palimpsa/mqar/params.hpp"

namespace palimpsa::mqar {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // global gradient norm clip; <= 0 disables

  void validate() const {
    if (!(lr > 0)) throw ConfigError("adamw: lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adamw: betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("adamw: eps must be > 0");
    if (weight_decay < 0) throw ConfigError("adamw: weight_decay must be >= 0");
  }
};

/// AdamW with bias correction and decoupled weight decay, applied only to
/// blocks whose layout entry has `decay` set. State is kept in double.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, const ParamLayout& layout) : cfg_(cfg) {
    cfg_.validate();
    decay_mask_.assign(layout.size(), false);
    for (const auto& e : layout.entries())
      for (std::size_t i = 0; i < e.size(); ++i) decay_mask_[e.offset + i] = e.decay;
    m_.assign(layout.size(), 0.0);
    v_.assign(layout.size(), 0.0);
  }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }

  void restore(std::size_t t, std::vector<double> m, std::vector<double> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ConfigError("adamw: restored state has the wrong size");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  /// Returns the pre-clip gradient norm.
  template <typename T>
  double step(Vec<T>& params, const Vec<T>& grad) {
    if (static_cast<std::size_t>(params.size()) != m_.size() || grad.size() != params.size())
      throw ConfigError("adamw: parameter or gradient size mismatch");
    double norm = 0;
    for (Eigen::Index i = 0; i < grad.size(); ++i) norm += static_cast<double>(grad(i)) * static_cast<double>(grad(i));
    norm = std::sqrt(norm);
    if (!std::isfinite(norm)) throw NumericError("adamw: non-finite gradient norm");
    const double scale = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double g = static_cast<double>(grad(ii)) * scale;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      double p = static_cast<double>(params(ii));
      if (decay_mask_[i]) p -= cfg_.lr * cfg_.weight_decay * p;
      p -= cfg_.lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
      params(ii) = static_cast<T>(p);
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::vector<bool> decay_mask_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace palimpsa::mqar
