#pragma once

#include "safeclip/gmm.hpp"
#include "safeclip/losses.hpp"
#include "safeclip/model.hpp"
#include "safeclip/nn_pool.hpp"
#include "safeclip/synthdata.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace safeclip {

struct TrainConfig {
  int warmup_epochs = 5;  // r
  int total_epochs = 20;  // T; mixed training runs epochs r..T-1
  double lr = 0.03;
  double lr_low = 0.0003;
  std::size_t batch_size = 128;
  double gmm_threshold = 0.9;  // t
  double growth_s = 1.0;       // percent per epoch
  std::size_t pool_capacity = kDefaultPoolCapacity;
  std::optional<double> fast_reeval_q;  // percent; nullopt re-encodes the whole corpus
  int clip_warmup_passes = 1;           // epochs at lr_low
  bool disable_risky_unimodal = false;
  bool disable_nn_pool = false;
  std::uint64_t seed = 0;
  EmOptions em;
  ImageAugmentation image_aug;
  CaptionAugmentation caption_aug;
  int max_empty_safe_retries = 3;

  // Full pipeline checks (r < T, lr_low < lr, t in (0,1), s > 0, ...).
  void validate() const;
  // The subset the undefended baseline reads.
  void validate_baseline() const;

  bool operator==(const TrainConfig&) const = default;
};

struct Pools {
  NNPool image;
  NNPool text;
};

// Pools of `capacity` random unit vectors, then overwritten with the current
// representations of a random sample of the corpus.
Pools init_pools(const ModelState& state, const PairCorpus& corpus, const TrainConfig& config);

struct PartitionRecord {
  int epoch = 0;
  int schedule_origin = 0;  // epoch of the first successful partition
  Partition partition;
  std::vector<double> similarities;
  std::vector<double> posteriors;
  std::array<double, 2> gmm_means{};
  std::array<double, 2> gmm_variances{};
  std::array<double, 2> gmm_weights{};
  int em_iterations = 0;
  bool em_converged = false;
  std::size_t refreshed = 0;  // pairs whose similarity was recomputed
};

struct EpochReport {
  std::string phase;  // warmup | clip_low | mixed | unimodal_retry | baseline
  int epoch = 0;
  std::size_t steps = 0;
  double loss = 0.0;  // per-step means
  double clip_term = 0.0;
  double image_unimodal_term = 0.0;
  double text_unimodal_term = 0.0;
  double temperature = 0.0;
  const PartitionRecord* partition = nullptr;  // mixed epochs only
  const ModelState* state = nullptr;           // after the epoch
};

struct TrainHooks {
  std::function<void(const EpochReport&)> epoch_end;
  std::function<void(std::string_view phase, const ModelState&)> phase_end;
  std::function<void(std::string_view message)> log;
};

struct WarmupResult {
  ModelState state;
  Pools pools;
};

WarmupResult warmup_unimodal(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                             const TrainHooks& hooks = {});

// `clip_warmup_passes` epochs of plain CLIP over all pairs at lr_low.
ModelState low_lr_clip_pass(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                            const TrainHooks& hooks = {});

struct SafeClipResult {
  ModelState state;
  std::vector<PartitionRecord> partitions;
  std::vector<EpochReport> epochs;  // partition/state pointers cleared
};

SafeClipResult train_safeclip(ModelState state, Pools pools, const PairCorpus& corpus,
                              const TrainConfig& config, const TrainHooks& hooks = {});

// Warmup, low-lr pass, and mixed training in sequence.
SafeClipResult run_safeclip(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                            const TrainHooks& hooks = {});

// T epochs of undefended CLIP at lr.
ModelState train_clip_baseline(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                               const TrainHooks& hooks = {});

// Similarities, GMM fit, and threshold partition of the current model, without training.
struct PartitionProbe {
  std::vector<double> similarities;
  GmmFit fit;
  std::optional<Partition> partition;
};
PartitionProbe probe_partition(const ModelState& state, const PairCorpus& corpus, double threshold,
                               const EmOptions& em = {});

// Full-corpus representations, encoded in chunks.
Matrix encode_corpus_images(const ModelState& state, const PairCorpus& corpus);
Matrix encode_corpus_texts(const ModelState& state, const PairCorpus& corpus);

}  // namespace safeclip
