#pragma once

#include "safeclip/synthdata.hpp"

#include <string_view>
#include <vector>

namespace safeclip {

std::string_view to_string(AttackKind kind);
std::string_view to_string(TriggerKind kind);
AttackKind parse_attack_kind(std::string_view name);
TriggerKind parse_trigger_kind(std::string_view name);

// All clean training captions of `adversarial_class`.
std::vector<Caption> build_adversarial_captions(const PairCorpus& corpus, int adversarial_class);

// Element j of a reshuffled cycle over `captions` (each used ceil(n/|captions|) times at most).
class CaptionCycle {
 public:
  CaptionCycle(std::vector<Caption> captions, std::uint64_t seed);
  const Caption& next();

 private:
  std::vector<Caption> captions_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

// floor(rate * n) with a small guard against representation error in `rate`.
std::size_t poison_budget(double rate, std::size_t n);

Image apply_trigger(const Image& image, TriggerKind kind, const TriggerParams& params);
// Applies triggers in the fixed order warp -> blended -> badnet.
Image apply_triggers(const Image& image, std::span<const TriggerKind> kinds, const TriggerParams& params);

// The fixed noise image of the blended trigger and the warp displacement field.
Image blend_pattern(ImageShape shape, const TriggerParams& params);
struct WarpField {
  ImageShape shape;
  std::vector<double> dy;
  std::vector<double> dx;
};
WarpField warp_field(ImageShape shape, const TriggerParams& params);

PairCorpus inject_tdpa(const PairCorpus& corpus, const AttackSpec& spec);
PairCorpus inject_backdoor(const PairCorpus& corpus, const AttackSpec& spec);
// Dispatches on spec.kind.
PairCorpus inject_attack(const PairCorpus& corpus, const AttackSpec& spec);

}  // namespace safeclip
