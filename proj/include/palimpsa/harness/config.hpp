#pragma once

// Run configuration: one YAML document with global keys and one section per
// subcommand. Unknown keys anywhere are rejected. The effective configuration
// (after command-line overrides) is rendered as canonical JSON, whose SHA-256
// is the config digest stamped into every output.

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "palimpsa/errors.hpp"
#include "palimpsa/harness/digest.hpp"
#include "palimpsa/mqar/train.hpp"

namespace palimpsa::harness {

struct VerifyConfig {
  std::size_t scan_cases = 100;
  std::size_t max_len = 1024;
  std::vector<std::size_t> workers{1, 2, 8};
};

struct TrainSection {
  mqar::TrainConfig base;  // model, data, curriculum and optimizer
  std::vector<mqar::Variant> variants{mqar::Variant::PalimpsaD};
  std::vector<double> lrs{3e-3};
  std::vector<std::uint64_t> seeds{1};
  std::string resume;  // checkpoint path, empty for a fresh run
  std::size_t checkpoint_every = 0;  // 0: only at the end
};

struct BenchConfig {
  std::vector<std::string> rules{"palimpsa", "mamba2_limit"};
  std::vector<std::size_t> lengths{16384};
  std::vector<std::size_t> d_models{64};
  std::size_t d_state = 16;
  std::vector<std::size_t> chunk_lens{16, 64, 256};
  std::vector<std::size_t> workers{1, 2, 4, 8};
  std::size_t repetitions = 5;
  std::size_t warmup = 2;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::optional<mqar::Precision> precision;  // unset: f32 for train, f64 for bench

  mqar::Precision train_precision() const { return precision.value_or(mqar::Precision::F32); }
  mqar::Precision bench_precision() const { return precision.value_or(mqar::Precision::F64); }
  std::size_t workers = 1;
  std::string out = "out";
  VerifyConfig verify;
  TrainSection train;
  BenchConfig bench;
};

namespace detail {

inline void check_keys(const YAML::Node& node, const std::string& where, const std::set<std::string>& allowed) {
  if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const YAML::Node& node, const char* key, V& out, const std::string& where) {
  if (!node[key]) return;
  try {
    out = node[key].as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline void read_stages(const YAML::Node& node, std::vector<mqar::Stage>& out, const std::string& where) {
  if (!node["stages"]) return;
  const auto& list = node["stages"];
  if (!list.IsSequence() || list.size() == 0) throw ConfigError(where + ".stages: expected a non-empty list");
  out.clear();
  for (const auto& s : list) {
    if (!s.IsSequence() || s.size() != 2) throw ConfigError(where + ".stages: each stage is [seq_len, num_kv]");
    out.push_back({s[0].as<std::size_t>(), s[1].as<std::size_t>()});
  }
}

inline void parse_model(const YAML::Node& n, mqar::ModelConfig& m) {
  const std::string w = "train.model";
  check_keys(n, w,
             {"d_model", "n_layers", "n_heads", "d_state", "expand_v", "expand_k", "beta_rank", "conv_size", "chunk_len",
              "b_scale_init", "init_std"});
  read(n, "d_model", m.d_model, w);
  read(n, "n_layers", m.n_layers, w);
  read(n, "n_heads", m.n_heads, w);
  read(n, "d_state", m.d_state, w);
  read(n, "expand_v", m.expand_v, w);
  read(n, "expand_k", m.expand_k, w);
  read(n, "beta_rank", m.beta_rank, w);
  read(n, "conv_size", m.conv_size, w);
  read(n, "chunk_len", m.chunk_len, w);
  read(n, "b_scale_init", m.b_scale_init, w);
  read(n, "init_std", m.init_std, w);
}

inline void parse_train(const YAML::Node& n, TrainSection& t) {
  const std::string w = "train";
  check_keys(n, w,
             {"variants", "lrs", "seeds", "model", "data", "stages", "epochs_per_stage", "steps_per_epoch", "warmup_steps",
              "log_every", "eval_every", "eval_batches", "target_accuracy", "adam", "resume", "checkpoint_every"});
  if (n["variants"]) {
    t.variants.clear();
    for (const auto& v : n["variants"]) t.variants.push_back(mqar::parse_variant(v.as<std::string>()));
    if (t.variants.empty()) throw ConfigError("train.variants: at least one variant");
  }
  read(n, "lrs", t.lrs, w);
  read(n, "seeds", t.seeds, w);
  if (t.lrs.empty() || t.seeds.empty()) throw ConfigError("train: lrs and seeds must be non-empty");
  auto& b = t.base;
  if (n["model"]) parse_model(n["model"], b.model);
  if (n["data"]) {
    check_keys(n["data"], "train.data", {"key_vocab", "value_vocab", "batch"});
    read(n["data"], "key_vocab", b.data.key_vocab, "train.data");
    read(n["data"], "value_vocab", b.data.value_vocab, "train.data");
    read(n["data"], "batch", b.data.batch, "train.data");
  }
  read_stages(n, b.stages, w);
  read(n, "epochs_per_stage", b.epochs_per_stage, w);
  read(n, "steps_per_epoch", b.steps_per_epoch, w);
  read(n, "warmup_steps", b.warmup_steps, w);
  read(n, "log_every", b.log_every, w);
  read(n, "eval_every", b.eval_every, w);
  read(n, "eval_batches", b.eval_batches, w);
  read(n, "target_accuracy", b.target_accuracy, w);
  if (n["adam"]) {
    check_keys(n["adam"], "train.adam", {"beta1", "beta2", "eps", "weight_decay", "clip_norm"});
    read(n["adam"], "beta1", b.adam.beta1, "train.adam");
    read(n["adam"], "beta2", b.adam.beta2, "train.adam");
    read(n["adam"], "eps", b.adam.eps, "train.adam");
    read(n["adam"], "weight_decay", b.adam.weight_decay, "train.adam");
    read(n["adam"], "clip_norm", b.adam.clip_norm, "train.adam");
  }
  read(n, "resume", t.resume, w);
  read(n, "checkpoint_every", t.checkpoint_every, w);
  b.model.vocab = b.data.vocab();
}

inline void parse_bench(const YAML::Node& n, BenchConfig& b) {
  const std::string w = "bench";
  check_keys(n, w, {"rules", "lengths", "d_models", "d_state", "chunk_lens", "workers", "repetitions", "warmup"});
  read(n, "rules", b.rules, w);
  read(n, "lengths", b.lengths, w);
  read(n, "d_models", b.d_models, w);
  read(n, "d_state", b.d_state, w);
  read(n, "chunk_lens", b.chunk_lens, w);
  read(n, "workers", b.workers, w);
  read(n, "repetitions", b.repetitions, w);
  read(n, "warmup", b.warmup, w);
}

}  // namespace detail

/// Checks every cross-field constraint; raised before any work starts.
inline void validate(const RunConfig& c) {
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.verify.scan_cases < 1 || c.verify.max_len < 1) throw ConfigError("verify: scan_cases and max_len must be >= 1");
  if (c.verify.workers.empty()) throw ConfigError("verify.workers must be non-empty");
  for (auto w : c.verify.workers)
    if (w < 1) throw ConfigError("verify.workers entries must be >= 1");
  for (double lr : c.train.lrs)
    if (!(lr > 0)) throw ConfigError("train.lrs entries must be > 0");
  for (auto v : c.train.variants) {
    auto t = c.train.base;
    t.model.variant = v;
    t.adam.lr = c.train.lrs.front();
    t.validate();
  }
  const auto& b = c.bench;
  for (const auto& r : b.rules)
    if (r != "palimpsa" && r != "mamba2_limit") throw ConfigError("bench.rules: unknown rule '" + r + "'");
  if (b.repetitions < 5) throw ConfigError("bench.repetitions must be >= 5");
  if (b.rules.empty() || b.lengths.empty() || b.d_models.empty() || b.chunk_lens.empty() || b.workers.empty())
    throw ConfigError("bench: every grid axis needs at least one value");
  for (auto x : b.lengths)
    if (x < 1) throw ConfigError("bench.lengths entries must be >= 1");
  for (auto x : b.d_models)
    if (x < 1) throw ConfigError("bench.d_models entries must be >= 1");
  for (auto x : b.chunk_lens)
    if (x < 1) throw ConfigError("bench.chunk_lens entries must be >= 1");
  for (auto x : b.workers)
    if (x < 1) throw ConfigError("bench.workers entries must be >= 1");
  if (b.d_state < 1) throw ConfigError("bench.d_state must be >= 1");
}

inline RunConfig parse_config(const YAML::Node& root) {
  RunConfig c;
  if (!root || root.IsNull()) return c;
  detail::check_keys(root, "config", {"seed", "precision", "workers", "out", "verify", "train", "bench", "oracle"});
  detail::read(root, "seed", c.seed, "config");
  if (root["precision"]) c.precision = mqar::parse_precision(root["precision"].as<std::string>());
  detail::read(root, "workers", c.workers, "config");
  detail::read(root, "out", c.out, "config");
  if (root["verify"]) {
    detail::check_keys(root["verify"], "verify", {"scan_cases", "max_len", "workers"});
    detail::read(root["verify"], "scan_cases", c.verify.scan_cases, "verify");
    detail::read(root["verify"], "max_len", c.verify.max_len, "verify");
    detail::read(root["verify"], "workers", c.verify.workers, "verify");
  }
  if (root["train"]) detail::parse_train(root["train"], c.train);
  c.train.base.model.vocab = c.train.base.data.vocab();
  if (root["bench"]) detail::parse_bench(root["bench"], c.bench);
  if (root["oracle"] && !(root["oracle"].IsNull() || (root["oracle"].IsMap() && root["oracle"].size() == 0)))
    throw ConfigError("oracle: section takes no keys");
  return c;
}

inline RunConfig load_config(const std::string& path) {
  try {
    return parse_config(YAML::LoadFile(path));
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot read config file " + path);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

inline RunConfig parse_config_text(const std::string& text) {
  try {
    return parse_config(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Canonical JSON of the effective configuration (keys sorted).
inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& t = c.train.base;
  json variants = json::array();
  for (auto v : c.train.variants) variants.push_back(mqar::variant_name(v));
  json stages = json::array();
  for (const auto& s : t.stages) stages.push_back({s.seq_len, s.num_kv});
  return json{
      {"seed", c.seed},
      {"precision", c.precision ? nlohmann::json(mqar::precision_name(*c.precision)) : nlohmann::json()},
      {"workers", c.workers},
      {"verify", {{"scan_cases", c.verify.scan_cases}, {"max_len", c.verify.max_len}, {"workers", c.verify.workers}}},
      {"train",
       {{"variants", variants},
        {"lrs", c.train.lrs},
        {"seeds", c.train.seeds},
        {"model",
         {{"d_model", t.model.d_model},
          {"n_layers", t.model.n_layers},
          {"n_heads", t.model.n_heads},
          {"d_state", t.model.d_state},
          {"expand_v", t.model.expand_v},
          {"expand_k", t.model.expand_k},
          {"beta_rank", t.model.beta_rank},
          {"conv_size", t.model.conv_size},
          {"chunk_len", t.model.chunk_len},
          {"b_scale_init", t.model.b_scale_init},
          {"init_std", t.model.init_std}}},
        {"data", {{"key_vocab", t.data.key_vocab}, {"value_vocab", t.data.value_vocab}, {"batch", t.data.batch}}},
        {"stages", stages},
        {"epochs_per_stage", t.epochs_per_stage},
        {"steps_per_epoch", t.steps_per_epoch},
        {"warmup_steps", t.warmup_steps},
        {"log_every", t.log_every},
        {"eval_every", t.eval_every},
        {"eval_batches", t.eval_batches},
        {"target_accuracy", t.target_accuracy},
        {"adam",
         {{"beta1", t.adam.beta1},
          {"beta2", t.adam.beta2},
          {"eps", t.adam.eps},
          {"weight_decay", t.adam.weight_decay},
          {"clip_norm", t.adam.clip_norm}}}}},
      {"bench",
       {{"rules", c.bench.rules},
        {"lengths", c.bench.lengths},
        {"d_models", c.bench.d_models},
        {"d_state", c.bench.d_state},
        {"chunk_lens", c.bench.chunk_lens},
        {"workers", c.bench.workers},
        {"repetitions", c.bench.repetitions},
        {"warmup", c.bench.warmup}}}};
}

/// The output directory and resume path are where results go, not what is
/// computed, so they stay out of the digest.
inline std::string config_digest(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

}  // namespace palimpsa::harness
