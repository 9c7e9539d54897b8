#include "safeclip/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>

namespace safeclip {

namespace {

constexpr std::uint64_t kAttackStream = 0x61747461636bULL;
constexpr std::uint64_t kBlendTag = 0x626c656e64ULL;
constexpr std::uint64_t kWarpTag = 0x77617270ULL;
constexpr std::array<TriggerKind, 3> kAllTriggers{TriggerKind::badnet, TriggerKind::blended, TriggerKind::warp};

void validate(const PairCorpus& corpus, const AttackSpec& spec) {
  if (!(spec.poison_rate > 0.0) || spec.poison_rate > 0.01)
    throw ConfigError("poison_rate must lie in (0, 0.01]");
  const int classes = corpus.spec.class_count;
  if (spec.adversarial_class < 0 || spec.adversarial_class >= classes)
    throw ConfigError("adversarial_class out of range");
  for (int c : spec.adversarial_classes)
    if (c < 0 || c >= classes) throw ConfigError("adversarial_classes entry out of range");
  if (spec.trigger_params.patch_size < 1 || spec.trigger_params.patch_size > corpus.spec.image_shape.height ||
      spec.trigger_params.patch_size > corpus.spec.image_shape.width)
    throw ConfigError("badnet patch does not fit the image");
  if (spec.trigger_params.blend_alpha < 0.0 || spec.trigger_params.blend_alpha > 1.0)
    throw ConfigError("blend_alpha must lie in [0,1]");
  if (spec.trigger_params.warp_max_shift < 0.0) throw ConfigError("warp_max_shift must be >= 0");
}

int random_other_class(Rng& rng, int classes, int excluded) {
  std::uniform_int_distribution<int> pick(0, classes - 2);
  int c = pick(rng);
  return c >= excluded ? c + 1 : c;
}

std::uint64_t attack_stream(const AttackSpec& spec, std::size_t attack_id, std::size_t arm) {
  return mix_seed(kAttackStream, spec.seed, attack_id, arm);
}

double bilinear(const Image& img, double r, double c) {
  const int h = img.shape.height, w = img.shape.width;
  r = std::clamp(r, 0.0, static_cast<double>(h - 1));
  c = std::clamp(c, 0.0, static_cast<double>(w - 1));
  const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(c));
  const int r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  const double fr = r - r0, fc = c - c0;
  return (1 - fr) * ((1 - fc) * img.at(r0, c0) + fc * img.at(r0, c1)) +
         fr * ((1 - fc) * img.at(r1, c0) + fc * img.at(r1, c1));
}

}  // namespace

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::tdpa: return "tdpa";
    case AttackKind::badnet: return "badnet";
    case AttackKind::blended: return "blended";
    case AttackKind::warp: return "warp";
    case AttackKind::label_consistent: return "label_consistent";
    case AttackKind::htba: return "htba";
    case AttackKind::pba_all2one: return "pba_all2one";
    case AttackKind::pba_all2all: return "pba_all2all";
  }
  return "?";
}

std::string_view to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::badnet: return "badnet";
    case TriggerKind::blended: return "blended";
    case TriggerKind::warp: return "warp";
  }
  return "?";
}

AttackKind parse_attack_kind(std::string_view name) {
  for (auto k : {AttackKind::tdpa, AttackKind::badnet, AttackKind::blended, AttackKind::warp,
                 AttackKind::label_consistent, AttackKind::htba, AttackKind::pba_all2one, AttackKind::pba_all2all})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown attack kind '" + std::string(name) + "'");
}

TriggerKind parse_trigger_kind(std::string_view name) {
  for (auto k : kAllTriggers)
    if (to_string(k) == name) return k;
  throw ConfigError("unknown trigger kind '" + std::string(name) + "'");
}

std::vector<Caption> build_adversarial_captions(const PairCorpus& corpus, int adversarial_class) {
  std::vector<Caption> out;
  for (const auto& p : corpus.pairs)
    if (!p.poison.is_poison() && p.true_class == adversarial_class) out.push_back(p.caption);
  if (out.empty())
    throw InputError("corpus has no clean caption of adversarial class " + std::to_string(adversarial_class));
  return out;
}

CaptionCycle::CaptionCycle(std::vector<Caption> captions, std::uint64_t seed)
    : captions_(std::move(captions)), order_(captions_.size()), rng_(seed) {
  if (captions_.empty()) throw InputError("CaptionCycle needs at least one caption");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
}

const Caption& CaptionCycle::next() {
  if (cursor_ == order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  return captions_[order_[cursor_++]];
}

std::size_t poison_budget(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

Image blend_pattern(ImageShape shape, const TriggerParams& params) {
  Rng rng(mix_seed(params.pattern_seed, kBlendTag));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image img{shape, std::vector<double>(static_cast<std::size_t>(shape.pixels()))};
  for (auto& p : img.pixels) p = unit(rng);
  return img;
}

WarpField warp_field(ImageShape shape, const TriggerParams& params) {
  Rng rng(mix_seed(params.pattern_seed, kWarpTag));
  std::uniform_int_distribution<int> freq(1, 2);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const int fy_r = freq(rng), fy_c = freq(rng), fx_r = freq(rng), fx_c = freq(rng);
  const double py = phase(rng), px = phase(rng);
  WarpField f{shape, std::vector<double>(static_cast<std::size_t>(shape.pixels())),
              std::vector<double>(static_cast<std::size_t>(shape.pixels()))};
  double peak = 0.0;
  for (int r = 0; r < shape.height; ++r)
    for (int c = 0; c < shape.width; ++c) {
      const double u = static_cast<double>(r) / shape.height, v = static_cast<double>(c) / shape.width;
      const auto k = static_cast<std::size_t>(r * shape.width + c);
      f.dy[k] = std::sin(2.0 * std::numbers::pi * (fy_r * u + fy_c * v) + py);
      f.dx[k] = std::sin(2.0 * std::numbers::pi * (fx_r * u + fx_c * v) + px);
      peak = std::max({peak, std::abs(f.dy[k]), std::abs(f.dx[k])});
    }
  const double scale = peak > 0.0 ? params.warp_max_shift / peak : 0.0;
  for (auto& v : f.dy) v *= scale;
  for (auto& v : f.dx) v *= scale;
  return f;
}

Image apply_trigger(const Image& image, TriggerKind kind, const TriggerParams& params) {
  Image out = image;
  const auto& shape = image.shape;
  switch (kind) {
    case TriggerKind::badnet: {
      const int k = params.patch_size;
      if (k > shape.height || k > shape.width) throw ConfigError("badnet patch does not fit the image");
      for (int r = shape.height - k; r < shape.height; ++r)
        for (int c = shape.width - k; c < shape.width; ++c) out.at(r, c) = params.patch_value;
      break;
    }
    case TriggerKind::blended: {
      const auto noise = blend_pattern(shape, params);
      const double a = params.blend_alpha;
      for (std::size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = (1.0 - a) * image.pixels[i] + a * noise.pixels[i];
      break;
    }
    case TriggerKind::warp: {
      const auto field = warp_field(shape, params);
      for (int r = 0; r < shape.height; ++r)
        for (int c = 0; c < shape.width; ++c) {
          const auto k = static_cast<std::size_t>(r * shape.width + c);
          out.at(r, c) = bilinear(image, r + field.dy[k], c + field.dx[k]);
        }
      break;
    }
    default:
      throw ConfigError("unknown trigger kind");
  }
  return out;
}

Image apply_triggers(const Image& image, std::span<const TriggerKind> kinds, const TriggerParams& params) {
  Image out = image;
  for (auto k : {TriggerKind::warp, TriggerKind::blended, TriggerKind::badnet})
    if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) out = apply_trigger(out, k, params);
  return out;
}

PairCorpus inject_tdpa(const PairCorpus& corpus, const AttackSpec& spec) {
  if (spec.kind != AttackKind::tdpa) throw ConfigError("inject_tdpa called with a non-tdpa spec");
  validate(corpus, spec);
  if (spec.target_count < 1) throw ConfigError("tdpa needs at least one target image");
  const auto budget = poison_budget(spec.poison_rate, corpus.clean_size());
  if (budget < 1) throw ConfigError("tdpa poison budget rate x n is below one pair");
  if (budget < static_cast<std::size_t>(spec.target_count))
    throw ConfigError("tdpa poison budget smaller than the number of target images");

  PairCorpus out = corpus;
  const auto attack_id = out.attacks.size();
  const auto stream = attack_stream(spec, attack_id, 0);
  Rng rng(stream);

  AttackRecord rec;
  rec.spec = spec;
  for (int k = 0; k < spec.target_count; ++k) {
    const int cls = random_other_class(rng, corpus.spec.class_count, spec.adversarial_class);
    rec.target_classes.push_back(cls);
    rec.target_images.push_back(sample_heldout_image(corpus, cls, stream, static_cast<std::uint64_t>(k)));
  }
  CaptionCycle captions(build_adversarial_captions(corpus, spec.adversarial_class), mix_seed(stream, 1));
  for (std::size_t j = 0; j < budget; ++j) {
    const auto t = j % static_cast<std::size_t>(spec.target_count);
    Pair p;
    p.image = rec.target_images[t];
    p.caption = captions.next();
    p.true_class = rec.target_classes[t];
    p.poison = {PoisonKind::tdpa, static_cast<std::int32_t>(attack_id), 0};
    out.pairs.push_back(std::move(p));
  }
  rec.arms.push_back({"tdpa", {}, spec.adversarial_class, budget});
  out.attacks.push_back(std::move(rec));
  return out;
}

PairCorpus inject_backdoor(const PairCorpus& corpus, const AttackSpec& spec) {
  validate(corpus, spec);
  const int classes = corpus.spec.class_count;
  const auto n = corpus.clean_size();

  AttackRecord rec;
  rec.spec = spec;
  switch (spec.kind) {
    case AttackKind::badnet:
    case AttackKind::blended:
    case AttackKind::warp: {
      const auto trig = spec.kind == AttackKind::badnet    ? TriggerKind::badnet
                        : spec.kind == AttackKind::blended ? TriggerKind::blended
                                                           : TriggerKind::warp;
      rec.arms.push_back({std::string(to_string(spec.kind)), {trig}, spec.adversarial_class, poison_budget(spec.poison_rate, n)});
      break;
    }
    case AttackKind::label_consistent:
      rec.arms.push_back({"label_consistent", {spec.trigger}, spec.adversarial_class, poison_budget(spec.poison_rate, n)});
      break;
    case AttackKind::htba:
      rec.arms.push_back({"htba", {kAllTriggers.begin(), kAllTriggers.end()}, spec.adversarial_class,
                          poison_budget(spec.poison_rate, n)});
      break;
    case AttackKind::pba_all2one: {
      const auto per = poison_budget(spec.poison_rate / 3.0, n);
      for (auto t : kAllTriggers)
        rec.arms.push_back({"pba_all2one/" + std::string(to_string(t)), {t}, spec.adversarial_class, per});
      break;
    }
    case AttackKind::pba_all2all: {
      std::vector<int> targets = spec.adversarial_classes;
      if (targets.empty())
        for (int k = 0; k < 3; ++k) targets.push_back((spec.adversarial_class + k) % classes);
      if (targets.size() != kAllTriggers.size()) throw ConfigError("pba_all2all needs one adversarial class per trigger (3)");
      if (std::set<int>(targets.begin(), targets.end()).size() != targets.size())
        throw ConfigError("pba_all2all adversarial classes must be distinct");
      rec.spec.adversarial_classes = targets;
      const auto per = poison_budget(spec.poison_rate, n);
      for (std::size_t k = 0; k < kAllTriggers.size(); ++k)
        rec.arms.push_back({"pba_all2all/" + std::string(to_string(kAllTriggers[k])), {kAllTriggers[k]}, targets[k], per});
      break;
    }
    case AttackKind::tdpa:
      throw ConfigError("inject_backdoor called with a tdpa spec");
  }
  for (const auto& arm : rec.arms)
    if (arm.injected < 1) throw ConfigError("backdoor poison budget below one pair for trigger group '" + arm.name + "'");

  PairCorpus out = corpus;
  const auto attack_id = out.attacks.size();
  for (std::size_t a = 0; a < rec.arms.size(); ++a) {
    const auto& arm = rec.arms[a];
    const auto stream = attack_stream(spec, attack_id, a);
    Rng rng(stream);
    const bool consistent = spec.kind == AttackKind::label_consistent;
    std::optional<CaptionCycle> captions;
    if (!consistent) captions.emplace(build_adversarial_captions(corpus, arm.adversarial_class), mix_seed(stream, 1));
    for (std::size_t j = 0; j < arm.injected; ++j) {
      const int cls = consistent ? arm.adversarial_class : random_other_class(rng, classes, arm.adversarial_class);
      Pair p;
      p.image = apply_triggers(sample_heldout_image(corpus, cls, stream, j), arm.triggers, spec.trigger_params);
      p.caption = consistent ? sample_heldout_caption(corpus, cls, stream, j) : captions->next();
      p.true_class = cls;
      p.poison = {PoisonKind::backdoor, static_cast<std::int32_t>(attack_id), static_cast<std::int32_t>(a)};
      out.pairs.push_back(std::move(p));
    }
  }
  out.attacks.push_back(std::move(rec));
  return out;
}

PairCorpus inject_attack(const PairCorpus& corpus, const AttackSpec& spec) {
  return spec.kind == AttackKind::tdpa ? inject_tdpa(corpus, spec) : inject_backdoor(corpus, spec);
}

}  // namespace safeclip
