#pragma once

// Synthetic multi-query associative recall data.
//
// Layout of one sequence of length L with n pairs:
//   positions [0, 2n)      key_0 val_0 key_1 val_1 ...  (keys distinct)
//   positions [2n, L)      query slots: a previously seen key at an even
//                          offset, its value at the next position
// Keys are tokens [0, key_vocab), values are [key_vocab, key_vocab + value_vocab).
// The mask marks query-key positions; the model must predict the next token.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "palimpsa/errors.hpp"

namespace palimpsa::mqar {

struct MqarConfig {
  std::size_t seq_len = 64;
  std::size_t num_kv = 16;
  std::size_t key_vocab = 128;
  std::size_t value_vocab = 128;
  std::uint64_t seed = 1;
  std::size_t batch = 32;

  std::size_t vocab() const { return key_vocab + value_vocab; }
  std::size_t query_slots() const { return (seq_len - 2 * num_kv) / 2; }

  void validate() const {
    if (seq_len < 4) throw ConfigError("mqar: seq_len must be >= 4");
    if (num_kv < 1) throw ConfigError("mqar: num_kv must be >= 1");
    if (num_kv * 4 > seq_len) throw ConfigError("mqar: num_kv must not exceed seq_len / 4");
    if (key_vocab < num_kv) throw ConfigError("mqar: key_vocab must be >= num_kv");
    if (value_vocab < 1) throw ConfigError("mqar: value_vocab must be >= 1");
    if (batch < 1) throw ConfigError("mqar: batch must be >= 1");
  }
};

struct MqarSample {
  std::vector<int> tokens;
  std::vector<bool> query_mask;
  std::vector<int> answers;  // one per masked position, in position order
};

/// A batch flattened sample-major: entry b * len + t. `targets` holds the
/// answer token at masked positions and -1 elsewhere.
struct MqarBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> tokens;
  std::vector<int> targets;

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](int x) { return x >= 0; }));
  }
};

/// splitmix64 finalizer; derives independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline MqarSample generate_sample(const MqarConfig& cfg, std::mt19937_64& rng) {
  MqarSample s;
  s.tokens.assign(cfg.seq_len, 0);
  s.query_mask.assign(cfg.seq_len, false);

  std::vector<int> keys(cfg.key_vocab);
  std::iota(keys.begin(), keys.end(), 0);
  for (std::size_t i = 0; i < cfg.num_kv; ++i) {  // partial Fisher-Yates: num_kv distinct keys
    std::uniform_int_distribution<std::size_t> pick(i, keys.size() - 1);
    std::swap(keys[i], keys[pick(rng)]);
  }
  std::uniform_int_distribution<int> value_dist(0, static_cast<int>(cfg.value_vocab) - 1);
  std::vector<int> values(cfg.num_kv);
  for (std::size_t i = 0; i < cfg.num_kv; ++i) {
    values[i] = static_cast<int>(cfg.key_vocab) + value_dist(rng);
    s.tokens[2 * i] = keys[i];
    s.tokens[2 * i + 1] = values[i];
  }

  std::uniform_int_distribution<std::size_t> which(0, cfg.num_kv - 1);
  for (std::size_t slot = 0; slot < cfg.query_slots(); ++slot) {
    const std::size_t pos = 2 * cfg.num_kv + 2 * slot;
    const std::size_t pair = which(rng);
    s.tokens[pos] = keys[pair];
    s.tokens[pos + 1] = values[pair];
    s.query_mask[pos] = true;
    s.answers.push_back(values[pair]);
  }
  // An odd leftover position (odd seq_len) stays token 0 and unmasked.
  return s;
}

/// Deterministic in (cfg.seed, stream): batch `stream` of a run is always the
/// same regardless of what was generated before it.
inline std::vector<MqarSample> generate_mqar(const MqarConfig& cfg, std::uint64_t stream = 0) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed ^ mix_seed(stream)));
  std::vector<MqarSample> out;
  out.reserve(cfg.batch);
  for (std::size_t b = 0; b < cfg.batch; ++b) out.push_back(generate_sample(cfg, rng));
  return out;
}

inline MqarBatch to_batch(const std::vector<MqarSample>& samples) {
  MqarBatch b;
  b.batch = samples.size();
  b.len = samples.empty() ? 0 : samples.front().tokens.size();
  for (const auto& s : samples) {
    if (s.tokens.size() != b.len) throw ConfigError("mqar: samples in a batch must share their length");
    std::size_t answer = 0;
    for (std::size_t t = 0; t < b.len; ++t) {
      b.tokens.push_back(s.tokens[t]);
      b.targets.push_back(s.query_mask[t] ? s.answers[answer++] : -1);
    }
  }
  return b;
}

inline MqarBatch make_batch(const MqarConfig& cfg, std::uint64_t stream) { return to_batch(generate_mqar(cfg, stream)); }

/// One curriculum stage: sequence length and pair count.
struct Stage {
  std::size_t seq_len = 64;
  std::size_t num_kv = 16;
};

struct StageEpoch {
  std::size_t stage = 0;
  std::size_t epoch = 0;
};

/// The four-stage curriculum up to L = 1024; each stage uses the maximal pair count L / 4.
inline std::vector<Stage> full_curriculum_stages() { return {{128, 32}, {256, 64}, {512, 128}, {1024, 256}}; }

/// Stages in order, each repeated for `epochs_per_stage` epochs.
inline std::vector<StageEpoch> curriculum_schedule(const std::vector<Stage>& stages, std::size_t epochs_per_stage) {
  if (stages.empty()) throw ConfigError("curriculum: at least one stage is required");
  if (epochs_per_stage < 1) throw ConfigError("curriculum: epochs_per_stage must be >= 1");
  std::vector<StageEpoch> out;
  for (std::size_t s = 0; s < stages.size(); ++s)
    for (std::size_t e = 0; e < epochs_per_stage; ++e) out.push_back({s, e});
  return out;
}

}  // namespace palimpsa::mqar
