#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "palimpsa/harness/commands.hpp"

using namespace palimpsa;
using namespace palimpsa::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("palimpsa_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small enough that a training step takes milliseconds.
RunConfig tiny_train_config(const std::string& out) {
  RunConfig c = parse_config_text(R"(
seed: 3
precision: f64
workers: 2
train:
  variants: [palimpsa_d]
  lrs: [0.003]
  seeds: [5]
  model: {d_model: 16, n_layers: 1, n_heads: 2, d_state: 4, beta_rank: 2, chunk_len: 8}
  data: {key_vocab: 16, value_vocab: 16, batch: 4}
  stages: [[16, 4]]
  steps_per_epoch: 20
  eval_every: 10
  log_every: 1
  eval_batches: 1
)");
  c.out = out;
  validate(c);
  return c;
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(PALIMPSA_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const auto c = parse_config_text("");
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.train.base.model.vocab, 256u);
  EXPECT_EQ(c.train_precision(), mqar::Precision::F32);
  EXPECT_EQ(c.bench_precision(), mqar::Precision::F64);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(parse_config_text("sed: 1"), ConfigError);
  EXPECT_THROW(parse_config_text("verify: {cases: 3}"), ConfigError);
  EXPECT_THROW(parse_config_text("train: {model: {width: 3}}"), ConfigError);
  EXPECT_THROW(parse_config_text("train: {adam: {lr: 3}}"), ConfigError);
  EXPECT_THROW(parse_config_text("bench: {grid: 3}"), ConfigError);
  EXPECT_THROW(parse_config_text("oracle: {x: 1}"), ConfigError);
  EXPECT_NO_THROW(parse_config_text("oracle: {}"));
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(parse_config_text("seed: [1, 2]"), ConfigError);
  EXPECT_THROW(parse_config_text("precision: f16"), ConfigError);
  EXPECT_THROW(parse_config_text("train: {variants: [mamba]}"), ConfigError);
  EXPECT_THROW(parse_config_text("train: {stages: [[16]]}"), ConfigError);
  EXPECT_THROW(validate(parse_config_text("bench: {repetitions: 4}")), ConfigError);
  EXPECT_THROW(validate(parse_config_text("bench: {rules: [deltanet]}")), ConfigError);
  EXPECT_THROW(validate(parse_config_text("train: {stages: [[16, 5]]}")), ConfigError);  // num_kv > L/4
  EXPECT_THROW(validate(parse_config_text("train: {lrs: [0]}")), ConfigError);
  EXPECT_THROW(validate(parse_config_text("workers: 0")), ConfigError);
}

TEST(Config, DigestTracksContentNotDestination) {
  const auto a = parse_config_text("seed: 4\nout: here");
  const auto b = parse_config_text("seed: 4\nout: there");
  const auto c = parse_config_text("seed: 5");
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_NE(config_digest(a), config_digest(c));
  EXPECT_EQ(config_digest(a).size(), 64u);
  auto r = a;
  r.train.resume = "x.ckpt";
  EXPECT_EQ(config_digest(a), config_digest(r));
}

TEST(Digest, KnownSha256) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Csv, Escaping) {
  EXPECT_EQ(CsvWriter::escape("plain"), "plain");
  EXPECT_EQ(CsvWriter::escape("a,b"), "\"a,b\"");
  EXPECT_EQ(CsvWriter::escape("say \"hi\""), "\"say \"\"hi\"\"\"");
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto dir = scratch_dir("ckpt");
  mqar::TrainState s;
  s.step = 17;
  s.params = {1.5, -2.25, 3e-300};
  s.adam_steps = 17;
  s.adam_m = {0.1, 0.2, 0.3};
  s.adam_v = {1, 2, 3};
  const std::string digest(64, 'a');
  const auto path = (dir / "x.ckpt").string();
  mqar::save_checkpoint(path, s, digest);
  std::string seen;
  const auto back = mqar::load_checkpoint(path, digest, &seen);
  EXPECT_EQ(seen, digest);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(back.params, s.params);
  EXPECT_EQ(back.adam_m, s.adam_m);
  EXPECT_EQ(back.adam_v, s.adam_v);
  EXPECT_THROW(mqar::load_checkpoint(path, std::string(64, 'b')), ConfigError);
  EXPECT_THROW(mqar::save_checkpoint(path, s, "short"), ConfigError);

  std::ofstream((dir / "bad.ckpt").string()) << "NOTACKPT";
  EXPECT_THROW(mqar::load_checkpoint((dir / "bad.ckpt").string()), ConfigError);
  const auto bytes = slurp(path);
  std::ofstream((dir / "trunc.ckpt").string(), std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW(mqar::load_checkpoint((dir / "trunc.ckpt").string()), ConfigError);
}

TEST(Train, ResumeReproducesNextTenStepsBitwise) {
  const auto cfg = tiny_train_config(scratch_dir("resume").string());
  auto tc = train_config_for(cfg, run_grid(cfg).front());
  WorkerPool pool(2);
  std::vector<mqar::MetricRecord> full_log, resumed_log;
  const auto full = mqar::train<double>(tc, pool, [&](const mqar::MetricRecord& r) { full_log.push_back(r); });
  const auto head = mqar::train<double>(tc, pool, {}, nullptr, 10);
  ASSERT_EQ(head.state.step, 10u);
  const auto tail =
      mqar::train<double>(tc, pool, [&](const mqar::MetricRecord& r) { resumed_log.push_back(r); }, &head.state, 10);
  ASSERT_EQ(tail.state.step, 20u);
  EXPECT_EQ(tail.state.params, full.state.params);
  EXPECT_EQ(tail.state.adam_m, full.state.adam_m);
  EXPECT_EQ(tail.state.adam_v, full.state.adam_v);

  std::vector<mqar::MetricRecord> later;
  for (const auto& r : full_log)
    if (r.step > 10) later.push_back(r);
  ASSERT_EQ(later.size(), resumed_log.size());
  for (std::size_t i = 0; i < later.size(); ++i) {
    EXPECT_EQ(later[i].step, resumed_log[i].step);
    EXPECT_EQ(later[i].loss, resumed_log[i].loss);
    EXPECT_EQ(later[i].grad_norm, resumed_log[i].grad_norm);
  }
}

TEST(Train, ResumeThroughCheckpointFile) {
  auto cfg = tiny_train_config(scratch_dir("resume_file").string());
  std::ostringstream log;
  const auto spec = run_grid(cfg).front();
  WorkerPool pool(cfg.workers);
  const auto digest = config_digest(cfg);
  const auto full = train_one(cfg, spec, digest, pool, log);
  const auto head = train_one(cfg, spec, digest, pool, log, nullptr, 10);
  const auto ckpt = cfg.out + "/train/" + spec.tag() + ".ckpt";
  cfg.train.resume = ckpt;
  const auto out = cmd_train(cfg, log);
  ASSERT_EQ(out.exit_code, kExitOk);
  EXPECT_EQ(out.runs.front().result.state.params, full.result.state.params);

  auto other = cfg;
  other.train.base.steps_per_epoch = 30;  // different run, different digest
  EXPECT_THROW(cmd_train(other, log), ConfigError);
}

TEST(Train, MetricsAreByteIdenticalAcrossReruns) {
  const auto a = scratch_dir("rerun_a").string(), b = scratch_dir("rerun_b").string();
  std::ostringstream log;
  ASSERT_EQ(cmd_train(tiny_train_config(a), log).exit_code, kExitOk);
  ASSERT_EQ(cmd_train(tiny_train_config(b), log).exit_code, kExitOk);
  const auto tag = run_grid(tiny_train_config(a)).front().tag();
  const auto nd = slurp(a + "/train/" + tag + ".ndjson");
  EXPECT_FALSE(nd.empty());
  EXPECT_EQ(nd, slurp(b + "/train/" + tag + ".ndjson"));
  EXPECT_EQ(slurp(a + "/train/summary.csv"), slurp(b + "/train/summary.csv"));
  EXPECT_EQ(slurp(a + "/train/" + tag + ".ckpt"), slurp(b + "/train/" + tag + ".ckpt"));

  // Every record carries the digest and seed.
  std::istringstream lines(nd);
  std::string line;
  const auto digest = config_digest(tiny_train_config(a));
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("digest"), digest);
    EXPECT_EQ(j.at("seed"), 5);
    EXPECT_TRUE(j.contains("diagnostics"));
  }
}

TEST(Train, SummaryHasOneRowPerGridPoint) {
  auto cfg = tiny_train_config(scratch_dir("grid").string());
  cfg.train.variants = {mqar::Variant::PalimpsaD, mqar::Variant::Ablation};
  cfg.train.seeds = {1, 2};
  cfg.train.base.steps_per_epoch = 4;
  std::ostringstream log;
  const auto out = cmd_train(cfg, log);
  ASSERT_EQ(out.runs.size(), 4u);
  std::istringstream csv(slurp(cfg.out + "/train/summary.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  EXPECT_NE(line.find("acc_L16_kv4"), std::string::npos);
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);
  const auto cmp = slurp(cfg.out + "/train/comparison.csv");
  EXPECT_NE(cmp.find("gap_vs_ablation"), std::string::npos);
}

TEST(Evaluate, UntrainedModelIsAtChance) {
  mqar::MqarConfig data;
  data.key_vocab = 64;
  data.value_vocab = 256;
  data.seq_len = 64;
  data.num_kv = 16;
  data.batch = 32;
  data.seed = 9;
  mqar::ModelConfig mc;
  mc.d_model = 32;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_state = 8;
  mc.vocab = data.vocab();
  const mqar::Model<float> model(mc);
  const auto params = model.init_params(4);
  WorkerPool pool(1);
  const auto ev = mqar::evaluate(model, params, data, 0, 20, pool);
  ASSERT_GE(ev.total, 10000u);
  const double p = 1.0 / 256, n = static_cast<double>(ev.total);
  EXPECT_LE(std::abs(ev.accuracy() - p), 3 * std::sqrt(p * (1 - p) / n));
}

TEST(Evaluate, InvariantToBatchPartitioning) {
  mqar::MqarConfig data;
  data.key_vocab = 16;
  data.value_vocab = 16;
  data.seq_len = 16;
  data.num_kv = 4;
  data.batch = 6;
  mqar::ModelConfig mc;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_state = 4;
  mc.vocab = data.vocab();
  const mqar::Model<double> model(mc);
  auto params = model.init_params(2);
  params *= 20.0;  // a model whose answers vary across samples
  WorkerPool pool(1);
  const auto samples = mqar::generate_mqar(data, 0);
  const auto whole = model.loss_and_grads(params, mqar::to_batch(samples), pool, false, 16, 32);
  std::size_t parts = 0;
  for (std::size_t i = 0; i < samples.size(); i += 2) {
    const std::vector<mqar::MqarSample> two(samples.begin() + static_cast<long>(i), samples.begin() + static_cast<long>(i + 2));
    parts += model.loss_and_grads(params, mqar::to_batch(two), pool, false, 16, 32).correct;
  }
  EXPECT_EQ(whole.correct, parts);
}

TEST(Evaluate, OracleLogitsScorePerfectly) {
  mqar::MqarConfig data;
  data.batch = 3;
  const auto batch = mqar::make_batch(data, 0);
  std::vector<int> answers;
  for (int t : batch.targets)
    if (t >= 0) answers.push_back(t);
  Mat<double> logits = Mat<double>::Zero(static_cast<Eigen::Index>(answers.size()), 256);
  for (std::size_t i = 0; i < answers.size(); ++i) logits(static_cast<Eigen::Index>(i), answers[i]) = 50;
  const auto ce = mqar::cross_entropy(logits, answers, 128, 256);
  EXPECT_EQ(ce.correct, batch.masked_count());
}

TEST(Verify, InjectedFaultBreaksScanEquivalence) {
  SuiteOptions opt;
  opt.scan_cases = 6;
  opt.max_len = 64;
  const auto clean = run_suites(opt, "scan_equivalence");
  ASSERT_EQ(clean.size(), 1u);
  EXPECT_TRUE(clean.front().passed);
  opt.inject_fault = true;
  const auto broken = run_suites(opt, "scan_equivalence");
  EXPECT_FALSE(broken.front().passed);
  EXPECT_GT(broken.front().worst, 1e-3);
}

TEST(Verify, FilterSelectsGradientSuites) {
  SuiteOptions opt;
  std::vector<std::string> names;
  for (const auto& s : all_suites())
    if (s.name.find("grad") != std::string::npos) names.push_back(s.name);
  EXPECT_EQ(names, (std::vector<std::string>{"grad_kernel_fd", "grad_chunk_invariance", "grad_model_fd"}));
  const auto res = run_suites(opt, "grad_chunk");
  ASSERT_EQ(res.size(), 1u);
  EXPECT_EQ(res.front().name, "grad_chunk_invariance");
  EXPECT_TRUE(res.front().passed);
}

TEST(Verify, CommandWritesReportAndExitCode) {
  auto cfg = parse_config_text("verify: {scan_cases: 3, max_len: 32}");
  cfg.out = scratch_dir("verify").string();
  std::ostringstream log;
  EXPECT_EQ(cmd_verify(cfg, {"derivation", false}, log), kExitOk);
  const auto nd = slurp(cfg.out + "/verify.ndjson");
  EXPECT_NE(nd.find("derivation_mesa"), std::string::npos);
  EXPECT_NE(nd.find("\"digest\""), std::string::npos);
  EXPECT_EQ(cmd_verify(cfg, {"scan", true}, log), kExitSuiteFailure);
  EXPECT_EQ(cmd_verify(cfg, {"no_such_suite", false}, log), kExitConfigError);
}

TEST(Oracle, EightStepStateMatchesPrintedConstants) {
  const auto hp = oracle_eight_step_head();
  auto s = DualState<double>::rest(hp);
  for (const auto& in : oracle_eight_steps()) s = palimpsa_step(s, in, hp);
  const double mu[4] = {-0.267123421464817, -0.381623132035457, 0.107360311975211, 0.139228239464597};
  const double imp[4] = {2.4455526649195, 3.43426854127979, 2.67348528829759, 3.38743017501107};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(s.mu(i, j), mu[2 * i + j], 1e-14);
      EXPECT_NEAR(s.imp(i, j), imp[2 * i + j], 1e-13);
    }
  const auto rows = oracle_table();
  ASSERT_GE(rows.size(), 2u);
  EXPECT_NEAR(rows[0].values[0].second, 0.860707976425058, 1e-15);
  EXPECT_NEAR(rows[0].values[1].second, 7.17916198167642, 1e-13);
  EXPECT_NEAR(rows[1].values[0].second, mu[0], 1e-15);
}

TEST(Bench, SmokeGridCompletesQuickly) {
  auto cfg = parse_config_text(
      "bench: {lengths: [512], d_models: [8], d_state: 4, chunk_lens: [64], workers: [1, 2], repetitions: 5}");
  cfg.out = scratch_dir("bench").string();
  std::ostringstream log;
  BenchReport rep;
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(cmd_bench(cfg, log, &rep), kExitOk);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 60.0);
  ASSERT_EQ(rep.rows.size(), 2u * 3u);  // per rule: sequential + two worker counts
  for (const auto& r : rep.rows) {
    EXPECT_GE(r.repetitions, 5u);
    EXPECT_LE(r.min_s, r.median_s);
    EXPECT_LE(r.median_s, r.max_s);
    EXPECT_GT(r.tokens_per_s(), 0.0);
  }
  EXPECT_TRUE(rule_cost_ratio(rep, "sequential", 512, 8, 0, 1).has_value());
  EXPECT_TRUE(worker_speedup(rep, "palimpsa", 512, 8, 64, 2).has_value());
  EXPECT_NE(slurp(cfg.out + "/bench.csv").find("tokens_per_s"), std::string::npos);
  EXPECT_FALSE(rep.environment.empty());
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli");
  const auto good = (dir / "good.yaml").string(), bad = (dir / "bad.yaml").string();
  std::ofstream(good) << "train: {steps_per_epoch: 3}\n";
  std::ofstream(bad) << "train: {steps_per_epok: 3}\n";
  EXPECT_EQ(run_cli("train --dry-run --config " + good), 0);
  EXPECT_FALSE(fs::exists(dir / "train"));
  EXPECT_EQ(run_cli("train --dry-run --config " + bad), 2);
  EXPECT_EQ(run_cli("verify --precision f16"), 2);
  EXPECT_EQ(run_cli("verify --filter derivation --out " + (dir / "v").string()), 0);
  EXPECT_EQ(run_cli("verify --inject-fault --filter scan_equiv --out " + (dir / "v").string()), 1);
  EXPECT_EQ(run_cli("oracle"), 0);
}
