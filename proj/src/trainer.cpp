#include "safeclip/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace safeclip {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kAugImageStream = 0x61756769ULL;
constexpr std::uint64_t kAugTextStream = 0x61756774ULL;
constexpr std::uint64_t kPoolStream = 0x706f6f6cULL;
constexpr std::size_t kEncodeChunk = 2048;

enum class Phase : std::uint64_t { warmup = 1, clip_low = 2, mixed_safe = 3, mixed_risky = 4, baseline = 5, retry = 6 };

std::vector<std::size_t> shuffled_range(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> items, std::uint64_t seed) {
  Rng rng(seed);
  std::shuffle(items.begin(), items.end(), rng);
  return items;
}

// Draws consecutive batches from a shuffled index set, reshuffling on wrap.
class Cursor {
 public:
  Cursor(std::vector<std::size_t> items, std::uint64_t seed) : items_(std::move(items)), seed_(seed) {
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch && !items_.empty()) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = shuffled(items_, mix_seed(seed_, round_++));
    pos_ = 0;
  }

  std::vector<std::size_t> items_;
  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  std::uint64_t round_ = 0;
  std::size_t pos_ = 0;
};

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed) {
  const auto order = shuffled_range(n, seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

Matrix augmented_images(const PairCorpus& corpus, std::span<const std::size_t> idx, std::uint64_t seed,
                        const ImageAugmentation& opts) {
  std::vector<Image> imgs;
  imgs.reserve(idx.size());
  for (auto i : idx) imgs.push_back(augment_image(corpus.pairs[i].image, mix_seed(seed, i), opts));
  return stack_images(imgs);
}

std::vector<Caption> augmented_captions(const PairCorpus& corpus, std::span<const std::size_t> idx,
                                        std::uint64_t seed, const CaptionAugmentation& opts) {
  std::vector<Caption> caps;
  caps.reserve(idx.size());
  for (auto i : idx) caps.push_back(augment_caption(corpus.pairs[i].caption, corpus.vocab, mix_seed(seed, i), opts));
  return caps;
}

// Loss sums of one epoch, averaged on report.
struct EpochAccumulator {
  std::size_t steps = 0;
  double loss = 0, clip = 0, img = 0, txt = 0;

  EpochReport report(std::string phase, int epoch, const ModelState& state) const {
    const double n = steps > 0 ? static_cast<double>(steps) : 1.0;
    EpochReport r;
    r.phase = std::move(phase);
    r.epoch = epoch;
    r.steps = steps;
    r.loss = loss / n;
    r.clip_term = clip / n;
    r.image_unimodal_term = img / n;
    r.text_unimodal_term = txt / n;
    r.temperature = state.temperature();
    r.state = &state;
    return r;
  }
};

void emit(const TrainHooks& hooks, const EpochReport& r) {
  if (hooks.epoch_end) hooks.epoch_end(r);
}

void log(const TrainHooks& hooks, const std::string& msg) {
  if (hooks.log) hooks.log(msg);
}

struct UnimodalStep {
  double image_term = 0.0;
  double text_term = 0.0;
  Matrix image_reps;  // originals, pre-step
  Matrix text_reps;
};

// Unimodal contrastive terms on both modalities of `idx`; accumulates into grads.
UnimodalStep unimodal_terms(const ModelState& state, const PairCorpus& corpus, std::span<const std::size_t> idx,
                            const Pools& pools, const TrainConfig& cfg, std::uint64_t aug_seed, ModelParams& grads) {
  UnimodalStep out;
  const auto& p = state.params;
  const double tau = state.temperature();

  const Matrix images = stack_pair_images(corpus, idx);
  const Matrix aug_images = augmented_images(corpus, idx, mix_seed(aug_seed, kAugImageStream), cfg.image_aug);
  const auto captions = gather_captions(corpus, idx);
  const auto aug_captions = augmented_captions(corpus, idx, mix_seed(aug_seed, kAugTextStream), cfg.caption_aug);

  const auto fi = forward_images(p, images);
  const auto fia = forward_images(p, aug_images);
  const auto ft = forward_texts(p, captions, state.dims.vocab_size);
  const auto fta = forward_texts(p, aug_captions, state.dims.vocab_size);

  const auto li = cfg.disable_nn_pool ? unimodal_self_loss(fi.reps, fia.reps, tau)
                                      : unimodal_nn_loss(fi.reps, fia.reps, pools.image, tau);
  const auto lt = cfg.disable_nn_pool ? unimodal_self_loss(ft.reps, fta.reps, tau)
                                      : unimodal_nn_loss(ft.reps, fta.reps, pools.text, tau);

  backward_images(p, aug_images, fia, li.grad_augmented_reps, grads);
  backward_texts(p, aug_captions, fta, lt.grad_augmented_reps, grads);
  if (cfg.disable_nn_pool) {
    backward_images(p, images, fi, li.grad_reps, grads);
    backward_texts(p, captions, ft, lt.grad_reps, grads);
  }
  grads.log_temperature += li.grad_log_temperature + lt.grad_log_temperature;

  out.image_term = li.value;
  out.text_term = lt.value;
  out.image_reps = fi.reps;
  out.text_reps = ft.reps;
  return out;
}

// CLIP term on a batch of pairs, optionally on augmented views; accumulates into grads.
double clip_term(const ModelState& state, const PairCorpus& corpus, std::span<const std::size_t> idx,
                 const TrainConfig& cfg, std::optional<std::uint64_t> aug_seed, ModelParams& grads) {
  const auto& p = state.params;
  Matrix images;
  std::vector<Caption> captions;
  if (aug_seed) {
    images = augmented_images(corpus, idx, mix_seed(*aug_seed, kAugImageStream), cfg.image_aug);
    captions = augmented_captions(corpus, idx, mix_seed(*aug_seed, kAugTextStream), cfg.caption_aug);
  } else {
    images = stack_pair_images(corpus, idx);
    captions = gather_captions(corpus, idx);
  }
  const auto fi = forward_images(p, images);
  const auto ft = forward_texts(p, captions, state.dims.vocab_size);
  const auto loss = clip_loss(fi.reps, ft.reps, state.temperature());
  backward_images(p, images, fi, loss.grad_image_reps, grads);
  backward_texts(p, captions, ft, loss.grad_text_reps, grads);
  grads.log_temperature += loss.grad_log_temperature;
  return loss.value;
}

void check_corpus(const PairCorpus& corpus, const ModelState& state) {
  if (corpus.pairs.empty()) throw InputError("training corpus is empty");
  if (corpus.spec.image_shape != state.dims.image)
    throw ConfigError("corpus image shape does not match the model");
  if (corpus.vocab.vocab_size > state.dims.vocab_size)
    throw ConfigError("corpus vocabulary is larger than the model's");
}

// Plain CLIP epochs over all pairs, shared by the low-lr pass and the baseline.
ModelState clip_epochs(ModelState state, const PairCorpus& corpus, const TrainConfig& cfg, int epochs, double lr,
                       Phase phase, const std::string& name, int epoch_offset, const TrainHooks& hooks) {
  for (int e = 0; e < epochs; ++e) {
    EpochAccumulator acc;
    const auto seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(phase), kShuffleStream, static_cast<std::uint64_t>(e));
    for (const auto& batch : epoch_batches(corpus.size(), cfg.batch_size, seed)) {
      if (batch.size() < 2) continue;  // a single pair has no negatives
      auto grads = ModelParams::zeros(state.dims);
      const double v = clip_term(state, corpus, batch, cfg, std::nullopt, grads);
      apply_gradients(state, grads, lr);
      acc.steps++;
      acc.loss += v;
      acc.clip += v;
    }
    emit(hooks, acc.report(name, epoch_offset + e, state));
  }
  return state;
}

// One epoch of unimodal training over all pairs, pools updated after each step.
EpochAccumulator unimodal_epoch(ModelState& state, Pools& pools, const PairCorpus& corpus, const TrainConfig& cfg,
                                double lr, Phase phase, int epoch) {
  EpochAccumulator acc;
  const auto seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(phase), static_cast<std::uint64_t>(epoch));
  std::uint64_t step = 0;
  for (const auto& batch : epoch_batches(corpus.size(), cfg.batch_size, mix_seed(seed, kShuffleStream))) {
    auto grads = ModelParams::zeros(state.dims);
    const auto u = unimodal_terms(state, corpus, batch, pools, cfg, mix_seed(seed, step++), grads);
    apply_gradients(state, grads, lr);
    pools.image.push(u.image_reps);
    pools.text.push(u.text_reps);
    acc.steps++;
    acc.loss += u.image_term + u.text_term;
    acc.img += u.image_term;
    acc.txt += u.text_term;
  }
  return acc;
}

std::vector<double> corpus_similarities(const ModelState& state, const PairCorpus& corpus) {
  return cosine_similarities(encode_corpus_images(state, corpus), encode_corpus_texts(state, corpus));
}

std::vector<double> refreshed_similarities(const ModelState& state, const PairCorpus& corpus,
                                           const PartitionRecord& prev, double q, std::size_t& refreshed) {
  const auto idx = select_reevaluation_set(prev.posteriors, prev.partition, q);
  refreshed = idx.size();
  std::vector<double> out = prev.similarities;
  for (std::size_t b = 0; b < idx.size(); b += kEncodeChunk) {
    const std::span<const std::size_t> chunk(idx.data() + b, std::min(kEncodeChunk, idx.size() - b));
    const auto imgs = encode_images(state, stack_pair_images(corpus, chunk));
    const auto caps = gather_captions(corpus, chunk);
    const auto txts = encode_texts(state, caps);
    const auto fresh = cosine_similarities(imgs.reps, txts.reps);
    for (std::size_t k = 0; k < chunk.size(); ++k) out[chunk[k]] = fresh[k];
  }
  return out;
}

PartitionRecord make_record(int epoch, std::vector<double> sims, const GmmFit& fit) {
  PartitionRecord r;
  r.epoch = epoch;
  r.similarities = std::move(sims);
  r.posteriors = fit.posteriors;
  r.gmm_means = fit.means;
  r.gmm_variances = fit.variances;
  r.gmm_weights = fit.weights;
  r.em_iterations = fit.iterations;
  r.em_converged = fit.converged;
  return r;
}

}  // namespace

void TrainConfig::validate_baseline() const {
  if (total_epochs < 0) throw ConfigError("total_epochs must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive and finite");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
}

void TrainConfig::validate() const {
  validate_baseline();
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  if (!(warmup_epochs < total_epochs))
    throw ConfigError("warmup_epochs (r=" + std::to_string(warmup_epochs) + ") must be < total_epochs (T=" +
                      std::to_string(total_epochs) + ")");
  if (!(lr_low >= 0.0) || !(lr_low < lr)) throw ConfigError("lr_low must satisfy 0 <= lr_low < lr");
  if (!(gmm_threshold > 0.0 && gmm_threshold < 1.0)) throw ConfigError("gmm_threshold must lie in (0,1)");
  if (!(growth_s > 0.0)) throw ConfigError("growth_s must be > 0");
  if (pool_capacity == 0) throw ConfigError("pool_capacity must be > 0");
  if (clip_warmup_passes < 0) throw ConfigError("clip_warmup_passes must be >= 0");
  if (fast_reeval_q && !(*fast_reeval_q > 0.0 && *fast_reeval_q <= 100.0))
    throw ConfigError("fast_reeval_q must lie in (0,100]");
  if (max_empty_safe_retries < 1) throw ConfigError("max_empty_safe_retries must be >= 1");
}

Matrix encode_corpus_images(const ModelState& state, const PairCorpus& corpus) {
  Matrix out(static_cast<Eigen::Index>(corpus.size()), state.dims.d);
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < corpus.size(); b += kEncodeChunk) {
    idx.resize(std::min(kEncodeChunk, corpus.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    out.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(idx.size())) =
        encode_images(state, stack_pair_images(corpus, idx)).reps;
  }
  return out;
}

Matrix encode_corpus_texts(const ModelState& state, const PairCorpus& corpus) {
  Matrix out(static_cast<Eigen::Index>(corpus.size()), state.dims.d);
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < corpus.size(); b += kEncodeChunk) {
    idx.resize(std::min(kEncodeChunk, corpus.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    const auto caps = gather_captions(corpus, idx);
    out.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(idx.size())) =
        encode_texts(state, caps).reps;
  }
  return out;
}

Pools init_pools(const ModelState& state, const PairCorpus& corpus, const TrainConfig& config) {
  const auto seed = mix_seed(config.seed, kPoolStream);
  Pools pools{NNPool::random(config.pool_capacity, mix_seed(seed, 1), state.dims.d),
              NNPool::random(config.pool_capacity, mix_seed(seed, 2), state.dims.d)};
  auto order = shuffled_range(corpus.size(), mix_seed(seed, 3));
  order.resize(std::min(order.size(), config.pool_capacity));
  const auto caps = gather_captions(corpus, order);
  pools.image.push(encode_images(state, stack_pair_images(corpus, order)).reps);
  pools.text.push(encode_texts(state, caps).reps);
  return pools;
}

WarmupResult warmup_unimodal(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                             const TrainHooks& hooks) {
  check_corpus(corpus, state);
  auto pools = init_pools(state, corpus, config);
  for (int e = 0; e < config.warmup_epochs; ++e) {
    const auto acc = unimodal_epoch(state, pools, corpus, config, config.lr, Phase::warmup, e);
    emit(hooks, acc.report("warmup", e, state));
  }
  if (hooks.phase_end) hooks.phase_end("warmup", state);
  return {std::move(state), std::move(pools)};
}

ModelState low_lr_clip_pass(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                            const TrainHooks& hooks) {
  check_corpus(corpus, state);
  state = clip_epochs(std::move(state), corpus, config, config.clip_warmup_passes, config.lr_low, Phase::clip_low,
                      "clip_low", config.warmup_epochs, hooks);
  if (hooks.phase_end) hooks.phase_end("clip_low", state);
  return state;
}

SafeClipResult train_safeclip(ModelState state, Pools pools, const PairCorpus& corpus, const TrainConfig& config,
                              const TrainHooks& hooks) {
  config.validate();
  check_corpus(corpus, state);
  SafeClipResult result;
  int failures = 0;
  std::optional<int> origin;

  for (int e = config.warmup_epochs; e < config.total_epochs; ++e) {
    // Partition at the start of the epoch with the current model.
    std::size_t refreshed = corpus.size();
    std::vector<double> sims;
    if (origin && config.fast_reeval_q)
      sims = refreshed_similarities(state, corpus, result.partitions.back(), *config.fast_reeval_q, refreshed);
    else
      sims = corpus_similarities(state, corpus);
    const auto fit = em_fit(sims, config.em);

    std::optional<Partition> part;
    if (!origin) {
      part = initial_partition(fit, config.gmm_threshold, config.growth_s);
      if (!part) {
        ++failures;
        log(hooks, "epoch " + std::to_string(e) + ": no pair has posterior above t=" +
                       std::to_string(config.gmm_threshold) + "; running a unimodal-only epoch (attempt " +
                       std::to_string(failures) + "/" + std::to_string(config.max_empty_safe_retries) + ")");
        if (failures >= config.max_empty_safe_retries)
          throw TrainingFault("initial partition produced an empty safe set " + std::to_string(failures) +
                              " times; similarity distribution has no confident high component");
        const auto acc = unimodal_epoch(state, pools, corpus, config, config.lr, Phase::retry, e);
        auto rep = acc.report("unimodal_retry", e, state);
        emit(hooks, rep);
        rep.state = nullptr;
        result.epochs.push_back(rep);
        continue;
      }
      origin = e;
    } else {
      part = update_partition(fit, result.partitions.back().partition);
    }

    auto record = make_record(e, std::move(sims), fit);
    record.schedule_origin = *origin;
    record.partition = std::move(*part);
    record.refreshed = refreshed;
    result.partitions.push_back(std::move(record));
    const auto& P = result.partitions.back().partition;

    // Mixed steps: one safe batch and one risky batch per step.
    const bool use_risky = !config.disable_risky_unimodal && !P.risky_indices.empty();
    const std::size_t b = config.batch_size;
    const auto safe_steps = (P.safe_indices.size() + b - 1) / b;
    const auto risky_steps = use_risky ? (P.risky_indices.size() + b - 1) / b : 0;
    const auto steps = std::max(safe_steps, risky_steps);
    const auto epoch_seed = mix_seed(config.seed, static_cast<std::uint64_t>(e));
    Cursor safe_cursor(P.safe_indices, mix_seed(epoch_seed, static_cast<std::uint64_t>(Phase::mixed_safe)));
    Cursor risky_cursor(P.risky_indices, mix_seed(epoch_seed, static_cast<std::uint64_t>(Phase::mixed_risky)));

    EpochAccumulator acc;
    for (std::size_t s = 0; s < steps; ++s) {
      auto grads = ModelParams::zeros(state.dims);
      double clip_v = 0.0;
      const auto safe = safe_cursor.next(b);
      if (safe.size() >= 2)
        clip_v = clip_term(state, corpus, safe, config,
                           mix_seed(epoch_seed, static_cast<std::uint64_t>(Phase::mixed_safe), s), grads);
      UnimodalStep u;
      if (use_risky) {
        const auto risky = risky_cursor.next(b);
        u = unimodal_terms(state, corpus, risky, pools, config,
                           mix_seed(epoch_seed, static_cast<std::uint64_t>(Phase::mixed_risky), s), grads);
      }
      apply_gradients(state, grads, config.lr);
      if (use_risky) {
        pools.image.push(u.image_reps);
        pools.text.push(u.text_reps);
      }
      acc.steps++;
      acc.clip += clip_v;
      acc.img += u.image_term;
      acc.txt += u.text_term;
      acc.loss += clip_v + u.image_term + u.text_term;
    }
    auto rep = acc.report("mixed", e, state);
    rep.partition = &result.partitions.back();
    emit(hooks, rep);
    rep.partition = nullptr;
    rep.state = nullptr;
    result.epochs.push_back(rep);
  }
  if (hooks.phase_end) hooks.phase_end("final", state);
  result.state = std::move(state);
  return result;
}

SafeClipResult run_safeclip(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                            const TrainHooks& hooks) {
  config.validate();
  auto warm = warmup_unimodal(std::move(state), corpus, config, hooks);
  auto low = low_lr_clip_pass(std::move(warm.state), corpus, config, hooks);
  return train_safeclip(std::move(low), std::move(warm.pools), corpus, config, hooks);
}

ModelState train_clip_baseline(ModelState state, const PairCorpus& corpus, const TrainConfig& config,
                               const TrainHooks& hooks) {
  config.validate_baseline();
  check_corpus(corpus, state);
  state = clip_epochs(std::move(state), corpus, config, config.total_epochs, config.lr, Phase::baseline, "baseline",
                      0, hooks);
  if (hooks.phase_end) hooks.phase_end("final", state);
  return state;
}

PartitionProbe probe_partition(const ModelState& state, const PairCorpus& corpus, double threshold,
                               const EmOptions& em) {
  PartitionProbe probe;
  probe.similarities = corpus_similarities(state, corpus);
  probe.fit = em_fit(probe.similarities, em);
  probe.partition = initial_partition(probe.fit, threshold);
  return probe;
}

}  // namespace safeclip
