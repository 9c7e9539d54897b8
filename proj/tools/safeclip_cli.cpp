// safeclip: run experiments, ablation suites and presets from the command line.
//
// Exit codes: 0 success, 1 config error, 2 training fault, 3 failed checks (--check).

#include "safeclip/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

using namespace safeclip;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitFault = 2;
constexpr int kExitChecks = 3;

struct Common {
  std::string config_path;
  std::string preset_name;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  int verbose = 0;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool allow_preset) {
  auto* cfg = cmd->add_option("-c,--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  if (allow_preset) {
    auto* pre = cmd->add_option("-p,--preset", c.preset_name, "Built-in preset instead of a config file");
    cfg->excludes(pre);
  } else {
    cfg->required();
  }
  cmd->add_option("-o,--output-dir", c.output_dir,
                  std::string("Output directory (default: config output_dir, then $") + kOutputDirEnv +
                      ", then runs/<name>)");
  cmd->add_option("-s,--seed", c.seed, "Override the top-level seed");
  cmd->add_flag("-v,--verbose", c.verbose, "More log output (repeatable)");
  cmd->add_flag("-q,--quiet", c.quiet, "Errors only");
}

RunOptions run_options(const Common& c) {
  RunOptions o;
  o.verbosity = c.quiet ? Verbosity::quiet : (c.verbose > 0 ? Verbosity::verbose : Verbosity::normal);
  return o;
}

std::filesystem::path resolve_output_dir(const Common& c, const ExperimentConfig& config) {
  if (!c.output_dir.empty()) return c.output_dir;
  if (config.output_dir) return *config.output_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return std::filesystem::path(env) / config.name;
  return std::filesystem::path("runs") / config.name;
}

ExperimentConfig load(const Common& c) {
  if (c.config_path.empty() && c.preset_name.empty()) throw ConfigError("one of --config or --preset is required");
  auto config = c.config_path.empty() ? preset(c.preset_name) : load_config(c.config_path);
  if (c.seed) config.seed = *c.seed;
  return config;
}

int cmd_run(const Common& c, bool check) {
  const auto config = load(c);
  const auto out = resolve_output_dir(c, config);
  const auto opts = run_options(c);
  const auto result = run_experiment(config, out, opts);
  if (opts.verbosity >= Verbosity::normal) std::cerr << "wrote " << out.string() << '\n';
  for (const auto& ch : result.checks)
    if (opts.verbosity >= Verbosity::normal || !ch.passed)
      std::cout << (ch.passed ? "PASS " : "FAIL ") << ch.name << "  " << ch.detail << '\n';
  if (check && !result.checks_passed()) return kExitChecks;
  return kExitOk;
}

int cmd_suite(const Common& c) {
  auto suite = load_suite(c.config_path);
  if (c.seed) suite.base.seed = *c.seed;
  std::filesystem::path out = c.output_dir;
  if (out.empty()) {
    if (const char* env = std::getenv(kOutputDirEnv); env && *env)
      out = std::filesystem::path(env) / (suite.base.name + "_suite");
    else
      out = std::filesystem::path("runs") / (suite.base.name + "_suite");
  }
  std::cout << run_ablation_suite(suite, out, run_options(c));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SafeCLIP experiments on synthetic image-caption corpora"};
  app.require_subcommand(1);

  Common run_args;
  bool check = false;
  auto* run = app.add_subcommand("run", "Train and evaluate one experiment");
  add_common(run, run_args, true);
  run->add_flag("--check", check, "Exit with status 3 if any configured check fails");

  Common suite_args;
  auto* suite = app.add_subcommand("suite", "Run a sweep/ablation suite and print a markdown report");
  add_common(suite, suite_args, false);

  auto* presets = app.add_subcommand("preset", "Inspect built-in presets");
  presets->require_subcommand(1);
  presets->add_subcommand("list", "Print preset names");
  std::string dump_name;
  auto* dump = presets->add_subcommand("dump", "Print a preset as a JSON config");
  dump->add_option("name", dump_name, "Preset name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_args, check);
    if (*suite) return cmd_suite(suite_args);
    if (presets->got_subcommand("list")) {
      for (const auto& n : preset_names()) std::cout << n << '\n';
      return kExitOk;
    }
    std::cout << serialize_config(preset(dump_name));
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrainingFault& e) {
    std::cerr << "training fault: " << e.what() << '\n';
    return kExitFault;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFault;
  }
}
