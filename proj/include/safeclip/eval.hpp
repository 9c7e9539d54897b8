#pragma once

#include "safeclip/gmm.hpp"
#include "safeclip/model.hpp"
#include "safeclip/synthdata.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace safeclip {

// Predicted class per image row: argmax_c <image_i, prompt_c>, ties to the lowest c.
// Only the argmax is scale-invariant, so image rows need not be unit norm.
std::vector<int> zero_shot_predict_reps(const Matrix& image_reps, const Matrix& prompt_reps);
std::vector<int> zero_shot_predict(const ModelState& state, const Matrix& images, std::span<const Caption> prompts);

// `prompts` must hold one caption per class in [0, class_count).
double zero_shot(const ModelState& state, const LabeledImages& test, std::span<const Caption> prompts,
                 int class_count);

struct LinearProbeOptions {
  int max_iters = 3000;
  double grad_tol = 1e-6;
  double l2 = 1e-4;
};

struct LinearProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Multinomial logistic regression (with bias) on fixed features.
LinearProbeResult fit_linear_probe(const Matrix& train_x, std::span<const int> train_y, const Matrix& test_x,
                                   std::span<const int> test_y, const LinearProbeOptions& opts = {});
// Same, on frozen image representations.
LinearProbeResult linear_probe(const ModelState& state, const LabeledImages& train, const LabeledImages& test,
                               const LinearProbeOptions& opts = {});

// Fraction of `images` predicted as `adversarial_class`.
double attack_success_rate(const ModelState& state, const Matrix& images, int adversarial_class,
                           std::span<const Caption> prompts);

struct ArmRate {
  std::string name;
  int adversarial_class = 0;
  std::size_t evaluated = 0;
  double rate = 0.0;
};

struct AttackEval {
  std::string attack;
  std::vector<ArmRate> arms;
  double mean_rate = 0.0;
};

// Evaluation images of one attack arm: the designated targets for tdpa,
// otherwise held-out images of every other class with the arm's triggers applied.
std::vector<Image> attack_eval_images(const PairCorpus& corpus, const AttackRecord& record, std::size_t arm,
                                      int per_class, std::uint64_t stream);
std::vector<AttackEval> evaluate_attacks(const ModelState& state, const PairCorpus& corpus, int per_class,
                                         std::uint64_t stream);

struct SafeSetPoisonStats {
  std::size_t safe_size = 0;
  std::size_t poisons_in_safe = 0;
  std::size_t poisons_total = 0;
  double fraction_of_safe = 0.0;     // poisons in safe / |safe|
  double fraction_of_corpus = 0.0;   // poisons in safe / n
  double fraction_of_poisons = 0.0;  // poisons in safe / poisons
};

SafeSetPoisonStats safe_set_poison_stats(const Partition& partition, const PairCorpus& corpus);
SafeSetPoisonStats safe_set_poison_stats(std::span<const std::size_t> safe_indices, const PairCorpus& corpus);

struct SimilarityMeans {
  double clean = 0.0;
  std::optional<double> poison;
};
SimilarityMeans similarity_means(std::span<const double> similarities, const PairCorpus& corpus);

struct EvalSpec {
  int zero_shot_per_class = 100;
  int probe_train_per_class = 50;
  int probe_test_per_class = 50;
  int asr_per_class = 50;
  bool every_epoch = true;  // zero-shot and ASR after each epoch, not only at the end

  bool operator==(const EvalSpec&) const = default;
};

struct MetricsRecord {
  std::string trainer;
  std::string phase;
  int epoch = 0;
  double loss = 0.0;
  double clip_term = 0.0;
  double image_unimodal_term = 0.0;
  double text_unimodal_term = 0.0;
  double temperature = 0.0;
  std::optional<double> zero_shot_acc;
  std::optional<double> linear_probe_acc;
  std::vector<std::pair<std::string, double>> asr;  // "<attack>/<arm>" -> rate
  std::optional<double> safe_ratio;
  std::optional<std::size_t> safe_size;
  std::optional<double> safe_poison_fraction_of_safe;
  std::optional<double> safe_poison_fraction_of_corpus;
  std::optional<double> safe_poison_fraction_of_poisons;
  std::optional<double> mean_clean_similarity;
  std::optional<double> mean_poison_similarity;
};

using MetricsTrace = std::vector<MetricsRecord>;

// Line-delimited JSON, one record per line.
std::string metrics_jsonl_line(const MetricsRecord& r);
// Flat CSV with a fixed column set; ASR columns are the union over the trace.
void write_metrics_csv(std::ostream& out, const MetricsTrace& trace);
// Long format: trainer,epoch,metric,value. One row per defined numeric value.
void write_plot_data(std::ostream& out, const MetricsTrace& trace);

}  // namespace safeclip
