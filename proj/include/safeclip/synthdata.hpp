#pragma once

#include "safeclip/common.hpp"
#include "safeclip/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace safeclip {

struct Image {
  ImageShape shape;
  std::vector<double> pixels;  // row-major, values in [0,1]

  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r * shape.width + c)]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r * shape.width + c)]; }
  bool operator==(const Image&) const = default;
};

// ---------------------------------------------------------------------------
// Attack vocabulary. Lives with the corpus because injected pairs carry their
// provenance, and the corpus keeps the evaluator-only attack records.

enum class AttackKind : std::uint8_t {
  tdpa,
  badnet,
  blended,
  warp,
  label_consistent,
  htba,
  pba_all2one,
  pba_all2all,
};

enum class TriggerKind : std::uint8_t { badnet, blended, warp };

struct TriggerParams {
  int patch_size = 4;          // badnet: square patch in the bottom-right corner
  double patch_value = 1.0;
  double blend_alpha = 0.2;    // blended: (1-a) x + a noise
  std::uint64_t pattern_seed = 0x5eed;  // blended noise image and warp field
  double warp_max_shift = 1.5;          // pixels

  bool operator==(const TriggerParams&) const = default;
};

struct AttackSpec {
  AttackKind kind = AttackKind::tdpa;
  double poison_rate = 0.005;            // fraction of the clean corpus
  int adversarial_class = 0;
  std::vector<int> adversarial_classes;  // pba_all2all: one per trigger kind
  int target_count = 4;                  // tdpa
  TriggerKind trigger = TriggerKind::badnet;  // label_consistent
  TriggerParams trigger_params;
  std::uint64_t seed = 0;

  bool operator==(const AttackSpec&) const = default;
};

enum class PoisonKind : std::uint8_t { none, tdpa, backdoor };

// Evaluator-only provenance of a pair.
struct PoisonTag {
  PoisonKind kind = PoisonKind::none;
  std::int32_t attack_id = -1;  // index into PairCorpus::attacks
  std::int32_t arm = -1;        // trigger group within the attack (pba); 0 otherwise

  bool is_poison() const { return kind != PoisonKind::none; }
  bool operator==(const PoisonTag&) const = default;
};

// One ASR evaluation target of an injected attack: a set of triggers that are
// applied together, and the class the attacker wants predicted.
struct AttackArm {
  std::string name;
  std::vector<TriggerKind> triggers;  // empty for tdpa
  int adversarial_class = 0;
  std::size_t injected = 0;

  bool operator==(const AttackArm&) const = default;
};

struct AttackRecord {
  AttackSpec spec;
  std::vector<AttackArm> arms;
  std::vector<Image> target_images;  // tdpa only
  std::vector<int> target_classes;

  bool operator==(const AttackRecord&) const = default;
};

// ---------------------------------------------------------------------------

struct CorpusSpec {
  std::uint64_t seed = 7;
  std::size_t n_pairs = 1000;
  int class_count = 10;
  ImageShape image_shape;
  int vocab_size = 100;
  int caption_len_min = 4;
  int caption_len_max = 8;
  double noise_sigma = 0.1;
  int prototype_cell = 4;  // side of the square blocks a prototype mask is drawn on
  // Loosely matched pairs: the image shows its class at reduced contrast.
  double weak_fraction = 0.0;
  double weak_contrast = 0.25;

  bool operator==(const CorpusSpec&) const = default;
};

// Token layout: class c owns [c*k, (c+1)*k); the last ~20% of ids are shared filler.
struct Vocabulary {
  int vocab_size = 0;
  int class_count = 0;
  int tokens_per_class = 0;
  int filler_begin = 0;

  static Vocabulary make(int vocab_size, int class_count);
  Token class_begin(int cls) const { return cls * tokens_per_class; }
  Token class_end(int cls) const { return (cls + 1) * tokens_per_class; }
  bool is_class_token(Token t) const { return t >= 0 && t < filler_begin; }
  int class_of(Token t) const { return is_class_token(t) ? t / tokens_per_class : -1; }
  int filler_count() const { return vocab_size - filler_begin; }
  bool operator==(const Vocabulary&) const = default;
};

struct Pair {
  Image image;
  Caption caption;
  int true_class = 0;
  PoisonTag poison;  // hidden from the trainer

  bool operator==(const Pair&) const = default;
};

struct PairCorpus {
  CorpusSpec spec;
  Vocabulary vocab;
  std::vector<Image> prototypes;  // one per class, the noise-free pattern
  std::vector<Pair> pairs;
  std::vector<AttackRecord> attacks;

  std::size_t size() const { return pairs.size(); }
  std::size_t clean_size() const;
  std::size_t poison_count() const;
  bool operator==(const PairCorpus&) const = default;
};

struct LabeledImages {
  std::vector<Image> images;
  std::vector<int> labels;
};

PairCorpus generate_corpus(const CorpusSpec& spec);

// Fresh images from the corpus distribution that never appear in the corpus.
// Distinct `stream` ids give disjoint, reproducible draws.
Image sample_heldout_image(const PairCorpus& corpus, int cls, std::uint64_t stream, std::uint64_t index);
Caption sample_heldout_caption(const PairCorpus& corpus, int cls, std::uint64_t stream, std::uint64_t index);
LabeledImages heldout_images(const PairCorpus& corpus, int per_class, std::uint64_t stream);

// The canonical prompt for a class: its whole token range in order.
Caption class_prompt(const Vocabulary& vocab, int cls);
std::vector<Caption> class_prompts(const Vocabulary& vocab);

Matrix stack_images(std::span<const Image> images);
Matrix stack_pair_images(const PairCorpus& corpus, std::span<const std::size_t> indices);
std::vector<Caption> gather_captions(const PairCorpus& corpus, std::span<const std::size_t> indices);

struct ImageAugmentation {
  int max_shift = 2;
  double flip_p = 0.5;
  double brightness = 0.1;
  double blur_p = 0.2;

  bool operator==(const ImageAugmentation&) const = default;
};

struct CaptionAugmentation {
  double replace_p = 0.1;
  double delete_p = 0.1;

  bool operator==(const CaptionAugmentation&) const = default;
};

Image flip_horizontal(const Image& image);
Image augment_image(const Image& image, std::uint64_t seed, const ImageAugmentation& opts = {});
Caption augment_caption(const Caption& caption, const Vocabulary& vocab, std::uint64_t seed,
                        const CaptionAugmentation& opts = {});

// Versioned binary format; save(load(f)) reproduces f byte for byte.
void save_corpus(const PairCorpus& corpus, const std::filesystem::path& path);
PairCorpus load_corpus(const std::filesystem::path& path);
std::string serialize_corpus(const PairCorpus& corpus);
PairCorpus deserialize_corpus(const std::string& bytes);

}  // namespace safeclip
