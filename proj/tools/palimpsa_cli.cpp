#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "palimpsa/errors.hpp"
#include "palimpsa/harness/commands.hpp"

using namespace palimpsa;
using namespace palimpsa::harness;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> precision;
  std::optional<std::string> out;
  std::string filter;
  bool inject_fault = false;
  bool dry_run = false;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "YAML run configuration")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "global seed (train: replaces the seed list)");
  sub->add_option("--workers", f.workers, "worker pool size");
  sub->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  sub->add_option("--out", f.out, "output directory");
  sub->add_flag("--dry-run", f.dry_run, "validate the configuration and exit");
}

RunConfig effective_config(const Flags& f, const std::string& command) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) {
    c.seed = *f.seed;
    if (command == "train") c.train.seeds = {*f.seed};
  }
  if (f.workers) c.workers = *f.workers;
  if (f.precision) c.precision = mqar::parse_precision(*f.precision);
  if (f.out) c.out = *f.out;
  validate(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Palimpsa recurrence toolkit: property suites, MQAR training, throughput benchmark"};
  app.require_subcommand(1);
  Flags f;
  auto* verify = app.add_subcommand("verify", "run the invariant suites");
  auto* train = app.add_subcommand("train", "train MQAR models over a variant x lr x seed grid");
  auto* bench = app.add_subcommand("bench", "time sequential and chunked scans");
  auto* oracle = app.add_subcommand("oracle", "print closed-form reference values");
  for (auto* s : {verify, train, bench, oracle}) add_common(s, f);
  verify->add_option("--filter", f.filter, "run only suites whose name contains this text");
  verify->add_flag("--inject-fault", f.inject_fault, "test hook: corrupt the scan combine");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfigError;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    cfg = effective_config(f, command);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  }
  if (f.dry_run) {
    std::cout << "config ok, digest " << config_digest(cfg) << "\n";
    if (command == "train")
      for (const auto& r : run_grid(cfg)) std::cout << "  would train " << r.tag() << "\n";
    return kExitOk;
  }

  try {
    if (command == "verify") return cmd_verify(cfg, {f.filter, f.inject_fault}, std::cout);
    if (command == "train") return cmd_train(cfg, std::cout).exit_code;
    if (command == "bench") return cmd_bench(cfg, std::cout);
    return cmd_oracle(cfg, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumericAbort;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfigError;
  }
}
