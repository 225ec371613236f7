#pragma once

// Training loop, evaluation and checkpoints for the MQAR model.
//
// Step s trains on batch stream s of the active stage; evaluation batches come
// from a disjoint stream range. A run is therefore a pure function of its
// configuration, and resuming from a checkpoint taken at step s replays
// exactly the steps a full run would have taken.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "palimpsa/mqar/data.hpp"
#include "palimpsa/mqar/model.hpp"
#include "palimpsa/mqar/optim.hpp"

namespace palimpsa::mqar {

inline constexpr std::uint64_t kEvalStreamBase = 1ull << 40;

struct TrainConfig {
  ModelConfig model;
  MqarConfig data;  // seq_len / num_kv are overridden per stage
  std::vector<Stage> stages{{64, 16}};
  std::size_t epochs_per_stage = 1;
  std::size_t steps_per_epoch = 5000;
  AdamWConfig adam;
  std::size_t warmup_steps = 0;
  std::size_t log_every = 50;
  std::size_t eval_every = 250;
  std::size_t eval_batches = 4;
  double target_accuracy = 0.0;  // early stop on the final stage once reached; 0 disables
  std::uint64_t seed = 1;

  std::size_t total_steps() const { return stages.size() * epochs_per_stage * steps_per_epoch; }

  std::size_t stage_at(std::size_t step) const {
    return std::min(step / (epochs_per_stage * steps_per_epoch), stages.size() - 1);
  }

  MqarConfig data_for_stage(std::size_t stage) const {
    MqarConfig d = data;
    d.seq_len = stages.at(stage).seq_len;
    d.num_kv = stages.at(stage).num_kv;
    d.seed = seed;
    return d;
  }

  void validate() const {
    model.validate();
    adam.validate();
    if (stages.empty()) throw ConfigError("train: at least one stage is required");
    if (epochs_per_stage < 1 || steps_per_epoch < 1) throw ConfigError("train: epochs and steps must be >= 1");
    if (log_every < 1 || eval_every < 1 || eval_batches < 1) throw ConfigError("train: intervals must be >= 1");
    if (target_accuracy < 0 || target_accuracy > 1) throw ConfigError("train: target_accuracy must lie in [0, 1]");
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto d = data_for_stage(s);
      d.validate();
      if (d.vocab() != model.vocab) throw ConfigError("train: model vocab must equal key_vocab + value_vocab");
    }
  }
};

struct MetricRecord {
  std::size_t step = 0;  // optimizer steps completed
  std::size_t stage = 0;
  double loss = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // set on evaluation records
  double lr = 0;
  double grad_norm = 0;
  Diagnostics diag;
  bool eval = false;
};

/// Everything needed to continue a run bitwise.
struct TrainState {
  std::size_t step = 0;
  std::vector<double> params;
  std::size_t adam_steps = 0;
  std::vector<double> adam_m, adam_v;
};

struct TrainResult {
  TrainState state;
  std::vector<double> stage_accuracy;  // last evaluation per stage, NaN if never evaluated
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t diagnostic_violations = 0;
  bool reached_target = false;
  bool aborted = false;
  std::string abort_reason;
  MetricRecord last_record;
};

/// I_min >= I_prior - 1e-9, ratios finite and non-negative, mean log N finite.
inline bool diagnostics_ok(const Diagnostics& d) {
  if (!std::isfinite(d.mean_log_N)) return false;
  for (double r : d.ratio_per_head)
    if (!std::isfinite(r) || r < 0) return false;
  for (double m : d.imin_margin_per_head)
    if (!(m >= -1e-9)) return false;
  return true;
}

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Argmax restricted to the value-token range at every masked position.
template <typename T>
EvalResult evaluate(const Model<T>& model, const Vec<T>& params, const MqarConfig& data, std::uint64_t first_stream,
                    std::size_t batches, WorkerPool& pool) {
  EvalResult r;
  const int lo = static_cast<int>(data.key_vocab);
  const int hi = static_cast<int>(data.key_vocab + data.value_vocab);
  for (std::size_t b = 0; b < batches; ++b) {
    const auto batch = make_batch(data, first_stream + b);
    const auto res = model.loss_and_grads(params, batch, pool, false, lo, hi);
    r.correct += res.correct;
    r.total += res.counted;
  }
  return r;
}

template <typename T>
TrainResult train(const TrainConfig& cfg, WorkerPool& pool, const std::function<void(const MetricRecord&)>& sink = {},
                  const TrainState* resume = nullptr, std::size_t stop_after = 0, std::size_t checkpoint_every = 0,
                  const std::function<void(const TrainState&)>& on_checkpoint = {}) {
  cfg.validate();
  const Model<T> model(cfg.model);
  AdamW opt(cfg.adam, model.layout());
  Vec<T> params;
  std::size_t step = 0;
  if (resume) {
    if (resume->params.size() != model.num_params()) throw ConfigError("train: checkpoint does not match the model");
    params = Eigen::Map<const Vec<double>>(resume->params.data(), static_cast<Eigen::Index>(resume->params.size()))
                 .cast<T>();
    opt.restore(resume->adam_steps, resume->adam_m, resume->adam_v);
    step = resume->step;
  } else {
    params = model.init_params(cfg.seed);
  }

  TrainResult result;
  result.stage_accuracy.assign(cfg.stages.size(), std::numeric_limits<double>::quiet_NaN());
  const std::size_t total = cfg.total_steps();
  const std::size_t end = stop_after ? std::min(total, step + stop_after) : total;

  auto snapshot = [&] {
    result.state.step = step;
    const Vec<double> p64 = params.template cast<double>();
    result.state.params.assign(p64.data(), p64.data() + p64.size());
    result.state.adam_steps = opt.steps();
    result.state.adam_m = opt.first_moment();
    result.state.adam_v = opt.second_moment();
  };

  try {
    while (step < end) {
      const std::size_t stage = cfg.stage_at(step);
      const auto data = cfg.data_for_stage(stage);
      const double lr =
          cfg.warmup_steps && step < cfg.warmup_steps
              ? cfg.adam.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps)
              : cfg.adam.lr;
      opt.set_lr(lr);
      const auto batch = make_batch(data, step);
      const auto lg = model.loss_and_grads(params, batch, pool, true, static_cast<int>(data.key_vocab),
                                           static_cast<int>(data.vocab()));
      const double gnorm = opt.step(params, lg.grad);
      ++step;
      if (checkpoint_every && on_checkpoint && step % checkpoint_every == 0 && step < end) {
        snapshot();
        on_checkpoint(result.state);
      }
      if (!diagnostics_ok(lg.diag)) ++result.diagnostic_violations;

      MetricRecord rec;
      rec.step = step;
      rec.stage = stage;
      rec.loss = static_cast<double>(lg.loss);
      rec.lr = lr;
      rec.grad_norm = gnorm;
      rec.diag = lg.diag;
      rec.diag.query_accuracy = static_cast<double>(lg.correct) / static_cast<double>(lg.counted);
      result.last_record = rec;

      const bool stage_end = step % (cfg.epochs_per_stage * cfg.steps_per_epoch) == 0;
      if (step % cfg.eval_every == 0 || stage_end || step == end) {
        const auto ev = evaluate(model, params, data, kEvalStreamBase + stage * cfg.eval_batches, cfg.eval_batches, pool);
        rec.eval = true;
        rec.accuracy = ev.accuracy();
        result.stage_accuracy[stage] = rec.accuracy;
        result.final_accuracy = rec.accuracy;
        result.last_record = rec;
        if (sink) sink(rec);
        if (cfg.target_accuracy > 0 && stage + 1 == cfg.stages.size() && rec.accuracy >= cfg.target_accuracy) {
          result.reached_target = true;
          break;
        }
      } else if (sink && step % cfg.log_every == 0) {
        sink(rec);
      }
    }
  } catch (const NumericError& e) {
    result.aborted = true;
    result.abort_reason = e.what();
  }
  snapshot();
  return result;
}

// ---- checkpoint container ----------------------------------------------------
//
// little-endian: magic[8] "PLMPSACK", u32 version, char digest[64],
// u64 step, u64 n, f64 params[n], u64 adam_steps, f64 m[n], f64 v[n]

inline constexpr char kCheckpointMagic[8] = {'P', 'L', 'M', 'P', 'S', 'A', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename V>
void put(std::ostream& o, const V& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw ConfigError("checkpoint: truncated file");
  return v;
}
inline void put_doubles(std::ostream& o, const std::vector<double>& v) {
  o.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline std::vector<double> get_doubles(std::istream& in, std::size_t n) {
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw ConfigError("checkpoint: truncated file");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const TrainState& s, const std::string& digest) {
  if (digest.size() != 64) throw ConfigError("checkpoint: digest must be 64 hex characters");
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw ConfigError("checkpoint: cannot write " + path);
  o.write(kCheckpointMagic, 8);
  detail::put(o, kCheckpointVersion);
  o.write(digest.data(), 64);
  detail::put(o, static_cast<std::uint64_t>(s.step));
  detail::put(o, static_cast<std::uint64_t>(s.params.size()));
  detail::put_doubles(o, s.params);
  detail::put(o, static_cast<std::uint64_t>(s.adam_steps));
  detail::put_doubles(o, s.adam_m);
  detail::put_doubles(o, s.adam_v);
  if (!o) throw ConfigError("checkpoint: write failed for " + path);
}

/// Loads a checkpoint; when `expected_digest` is non-empty it must match.
inline TrainState load_checkpoint(const std::string& path, const std::string& expected_digest = {},
                                  std::string* digest_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ConfigError("checkpoint: bad magic in " + path);
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw ConfigError("checkpoint: unsupported version");
  std::string digest(64, '\0');
  in.read(digest.data(), 64);
  if (!in) throw ConfigError("checkpoint: truncated file");
  if (!expected_digest.empty() && digest != expected_digest)
    throw ConfigError("checkpoint: config digest mismatch (checkpoint " + digest + ")");
  if (digest_out) *digest_out = digest;
  TrainState s;
  s.step = detail::get<std::uint64_t>(in);
  const auto n = detail::get<std::uint64_t>(in);
  s.params = detail::get_doubles(in, n);
  s.adam_steps = detail::get<std::uint64_t>(in);
  s.adam_m = detail::get_doubles(in, n);
  s.adam_v = detail::get_doubles(in, n);
  return s;
}

}  // namespace palimpsa::mqar
