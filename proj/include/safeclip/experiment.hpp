#pragma once

#include "safeclip/eval.hpp"
#include "safeclip/synthdata.hpp"
#include "safeclip/trainer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace safeclip {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutputDirEnv = "SAFECLIP_OUTPUT_DIR";

enum class TrainerKind { clip_baseline, safeclip };
std::string_view to_string(TrainerKind kind);

// Pass/fail thresholds evaluated after a run (check mode).
struct ExperimentChecks {
  std::optional<double> safeclip_max_asr;          // every arm of every attack
  std::optional<double> baseline_min_asr;          // mean over arms, every attack
  std::optional<double> max_zero_shot_gap;         // |safeclip - clean baseline|
  std::optional<double> max_initial_safe_poison_fraction;  // fraction of poisons

  bool empty() const {
    return !safeclip_max_asr && !baseline_min_asr && !max_zero_shot_gap && !max_initial_safe_poison_fraction;
  }
  bool operator==(const ExperimentChecks&) const = default;
};

// A fully specified run. Corpus, attack, model and training seeds are all
// derived from the single top-level seed.
struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  std::optional<std::string> output_dir;
  CorpusSpec corpus;
  std::vector<AttackSpec> attacks;
  ModelDims model;  // image shape and vocab size follow the corpus
  TrainConfig train;
  std::vector<TrainerKind> trainers;
  bool clean_reference = false;  // also train the baseline on the unpoisoned corpus
  EvalSpec eval;
  ExperimentChecks checks;

  bool operator==(const ExperimentConfig&) const = default;
};

// Malformed JSON is reported as "<source>:<line>:<col>: ..."; schema violations
// name the offending field path (e.g. "train.lr").
ExperimentConfig parse_config(std::string_view text, std::string_view source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical JSON with every field spelled out; parse(serialize(c)) == c.
std::string serialize_config(const ExperimentConfig& config);
// SHA-256 of the canonical form without output_dir.
std::string config_hash(const ExperimentConfig& config);

// Seeds and shapes as the run uses them.
CorpusSpec resolved_corpus_spec(const ExperimentConfig& config);
std::vector<AttackSpec> resolved_attacks(const ExperimentConfig& config);
ModelDims resolved_model_dims(const ExperimentConfig& config);
TrainConfig resolved_train_config(const ExperimentConfig& config);
std::uint64_t model_seed(const ExperimentConfig& config);

// Poisoned training corpus (clean corpus plus every configured attack).
PairCorpus build_corpus(const ExperimentConfig& config);
std::string sha256_hex(std::string_view bytes);

std::vector<std::string> preset_names();
ExperimentConfig preset(std::string_view name);

enum class Verbosity { quiet = 0, normal = 1, verbose = 2 };

struct RunOptions {
  Verbosity verbosity = Verbosity::normal;
  std::function<void(std::string_view)> log;  // defaults to stderr
};

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ExperimentResult {
  std::string summary_json;  // also written to summary.json
  std::vector<CheckOutcome> checks;
  bool checks_passed() const;
};

// Writes config.json, corpus.bin, checkpoints/, partitions/, metrics.jsonl,
// metrics.csv, plot_data.csv and summary.json under `output_dir`.
// TrainingFault messages are prefixed with the trainer and phase.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& output_dir,
                                const RunOptions& options = {});

// Sweeps over a base config. Axes: warmup_epochs, clip_warmup_passes and
// gmm_threshold measure the initial safe set; ablation runs full SafeCLIP.
struct SuiteSweep {
  std::string axis;
  std::vector<std::string> values;  // as written in the suite file
};

struct SuiteConfig {
  ExperimentConfig base;
  std::vector<SuiteSweep> sweeps;
};

SuiteConfig parse_suite(std::string_view text, std::string_view source = "<suite>");
SuiteConfig load_suite(const std::filesystem::path& path);
// Markdown report, one table per sweep; also written to report.md.
std::string run_ablation_suite(const SuiteConfig& suite, const std::filesystem::path& output_dir,
                               const RunOptions& options = {});

// Initial-partition statistics after warmup and the low-lr pass, at each threshold.
struct InitialPartitionStats {
  double threshold = 0.0;
  bool empty = false;
  std::size_t safe_size = 0;
  double safe_percent = 0.0;
  SafeSetPoisonStats poison;
};
std::vector<InitialPartitionStats> probe_initial_partitions(const PairCorpus& corpus, const ModelDims& dims,
                                                            std::uint64_t init_seed, const TrainConfig& train,
                                                            std::span<const double> thresholds);

}  // namespace safeclip
