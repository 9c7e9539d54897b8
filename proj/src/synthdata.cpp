#include "safeclip/synthdata.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace safeclip {

namespace {

constexpr double kPrototypeLow = 0.2;
constexpr double kPrototypeHigh = 0.7;
constexpr double kClassTokenShare = 0.6;
constexpr int kMinPrototypeDistance = 4;

constexpr std::uint64_t kPrototypeStream = 0x70726f746fULL;
constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kHeldoutStream = 0x68656c64ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kWeakStream = 0x7765616bULL;

constexpr char kCorpusMagic[9] = "SCLPCORP";
constexpr std::uint32_t kCorpusVersion = 2;

void validate(const CorpusSpec& s) {
  if (s.class_count < 2) throw ConfigError("class_count must be >= 2");
  if (s.n_pairs < static_cast<std::size_t>(s.class_count)) throw ConfigError("n_pairs must be >= class_count");
  if (s.image_shape.height < 3 || s.image_shape.width < 3) throw ConfigError("image shape must be at least 3x3");
  if (s.caption_len_min < 1 || s.caption_len_max < s.caption_len_min)
    throw ConfigError("caption length range must satisfy 1 <= min <= max");
  if (!(s.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (s.prototype_cell < 1 || s.prototype_cell > std::min(s.image_shape.height, s.image_shape.width))
    throw ConfigError("prototype_cell must lie in [1, min(height, width)]");
  if (!(s.weak_fraction >= 0.0 && s.weak_fraction < 1.0)) throw ConfigError("weak_fraction must lie in [0,1)");
  if (!(s.weak_contrast >= 0.0 && s.weak_contrast <= 1.0)) throw ConfigError("weak_contrast must lie in [0,1]");
}

Image faded(const Image& prototype, double contrast) {
  constexpr double mid = 0.5 * (kPrototypeLow + kPrototypeHigh);
  Image img = prototype;
  for (auto& p : img.pixels) p = mid + contrast * (p - mid);
  return img;
}

// Binary masks drawn on a grid of prototype_cell-sized blocks, so that small
// shifts keep an image correlated with its own class. Masks closer than
// kMinPrototypeDistance cells to an earlier class are redrawn.
std::vector<Image> make_prototypes(const CorpusSpec& spec) {
  const int ch = (spec.image_shape.height + spec.prototype_cell - 1) / spec.prototype_cell;
  const int cw = (spec.image_shape.width + spec.prototype_cell - 1) / spec.prototype_cell;
  const int cells = ch * cw;
  const int min_distance = std::min(kMinPrototypeDistance, cells / 4);
  std::vector<std::vector<bool>> grids;
  std::vector<Image> out;
  for (int cls = 0; cls < spec.class_count; ++cls) {
    Rng rng(mix_seed(spec.seed, kPrototypeStream, static_cast<std::uint64_t>(cls)));
    std::bernoulli_distribution on(0.5);
    std::vector<bool> grid(static_cast<std::size_t>(cells));
    for (int attempt = 0;; ++attempt) {
      for (auto&& g : grid) g = on(rng);
      int closest = cells;
      for (const auto& other : grids) {
        int d = 0;
        for (int k = 0; k < cells; ++k) d += grid[static_cast<std::size_t>(k)] != other[static_cast<std::size_t>(k)];
        closest = std::min(closest, d);
      }
      if (closest >= min_distance || attempt >= 1000) break;
    }
    Image img{spec.image_shape, std::vector<double>(static_cast<std::size_t>(spec.image_shape.pixels()))};
    for (int r = 0; r < spec.image_shape.height; ++r)
      for (int c = 0; c < spec.image_shape.width; ++c)
        img.at(r, c) = grid[static_cast<std::size_t>((r / spec.prototype_cell) * cw + c / spec.prototype_cell)]
                           ? kPrototypeHigh
                           : kPrototypeLow;
    grids.push_back(std::move(grid));
    out.push_back(std::move(img));
  }
  return out;
}

Image noisy_copy(const Image& prototype, double sigma, Rng& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  Image img = prototype;
  for (auto& p : img.pixels) p = std::clamp(p + sigma * noise(rng), 0.0, 1.0);
  return img;
}

Caption make_caption(const CorpusSpec& spec, const Vocabulary& vocab, int cls, Rng& rng) {
  std::uniform_int_distribution<int> len_dist(spec.caption_len_min, spec.caption_len_max);
  std::uniform_int_distribution<Token> class_tok(vocab.class_begin(cls), vocab.class_end(cls) - 1);
  std::uniform_int_distribution<Token> filler_tok(vocab.filler_begin, vocab.vocab_size - 1);
  std::bernoulli_distribution is_class(kClassTokenShare);
  const int len = len_dist(rng);
  Caption cap(static_cast<std::size_t>(len));
  bool has_class = false;
  for (auto& t : cap) {
    const bool pick_class = is_class(rng);
    const Token ct = class_tok(rng);
    const Token ft = filler_tok(rng);
    t = pick_class ? ct : ft;
    has_class = has_class || pick_class;
  }
  if (!has_class) {
    std::uniform_int_distribution<std::size_t> pos(0, cap.size() - 1);
    cap[pos(rng)] = class_tok(rng);
  }
  return cap;
}

}  // namespace

Vocabulary Vocabulary::make(int vocab_size, int class_count) {
  if (class_count < 1) throw ConfigError("class_count must be >= 1");
  const int filler = std::max(1, static_cast<int>(std::lround(0.2 * vocab_size)));
  const int per_class = (vocab_size - filler) / class_count;
  if (per_class < 1)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small for " +
                      std::to_string(class_count) + " classes plus shared filler");
  Vocabulary v;
  v.vocab_size = vocab_size;
  v.class_count = class_count;
  v.tokens_per_class = per_class;
  v.filler_begin = per_class * class_count;
  return v;
}

std::size_t PairCorpus::clean_size() const { return size() - poison_count(); }

std::size_t PairCorpus::poison_count() const {
  return static_cast<std::size_t>(
      std::count_if(pairs.begin(), pairs.end(), [](const Pair& p) { return p.poison.is_poison(); }));
}

PairCorpus generate_corpus(const CorpusSpec& spec) {
  validate(spec);
  PairCorpus c;
  c.spec = spec;
  c.vocab = Vocabulary::make(spec.vocab_size, spec.class_count);
  c.prototypes = make_prototypes(spec);

  std::vector<int> classes(spec.n_pairs);
  for (std::size_t i = 0; i < spec.n_pairs; ++i) classes[i] = static_cast<int>(i % static_cast<std::size_t>(spec.class_count));
  Rng shuffle_rng(mix_seed(spec.seed, kShuffleStream));
  std::shuffle(classes.begin(), classes.end(), shuffle_rng);

  c.pairs.resize(spec.n_pairs);
  for (std::size_t i = 0; i < spec.n_pairs; ++i) {
    Rng rng(mix_seed(spec.seed, kTrainStream, i));
    auto& p = c.pairs[i];
    p.true_class = classes[i];
    const auto& proto = c.prototypes[static_cast<std::size_t>(p.true_class)];
    Rng weak_rng(mix_seed(spec.seed, kWeakStream, i));
    const bool weak = std::bernoulli_distribution(spec.weak_fraction)(weak_rng);
    p.image = noisy_copy(weak ? faded(proto, spec.weak_contrast) : proto, spec.noise_sigma, rng);
    p.caption = make_caption(spec, c.vocab, p.true_class, rng);
  }
  return c;
}

Image sample_heldout_image(const PairCorpus& corpus, int cls, std::uint64_t stream, std::uint64_t index) {
  if (cls < 0 || cls >= corpus.spec.class_count) throw InputError("class id out of range");
  Rng rng(mix_seed(corpus.spec.seed, kHeldoutStream, stream, index));
  return noisy_copy(corpus.prototypes[static_cast<std::size_t>(cls)], corpus.spec.noise_sigma, rng);
}

Caption sample_heldout_caption(const PairCorpus& corpus, int cls, std::uint64_t stream, std::uint64_t index) {
  if (cls < 0 || cls >= corpus.spec.class_count) throw InputError("class id out of range");
  Rng rng(mix_seed(corpus.spec.seed, kHeldoutStream, stream, index, 0x636170ULL));
  return make_caption(corpus.spec, corpus.vocab, cls, rng);
}

LabeledImages heldout_images(const PairCorpus& corpus, int per_class, std::uint64_t stream) {
  LabeledImages out;
  std::uint64_t index = 0;
  for (int k = 0; k < corpus.spec.class_count; ++k) {
    for (int j = 0; j < per_class; ++j) {
      out.images.push_back(sample_heldout_image(corpus, k, stream, index++));
      out.labels.push_back(k);
    }
  }
  return out;
}

Caption class_prompt(const Vocabulary& vocab, int cls) {
  if (cls < 0 || cls >= vocab.class_count) throw ConfigError("no prompt for class " + std::to_string(cls));
  Caption c;
  for (Token t = vocab.class_begin(cls); t < vocab.class_end(cls); ++t) c.push_back(t);
  return c;
}

std::vector<Caption> class_prompts(const Vocabulary& vocab) {
  std::vector<Caption> out;
  for (int k = 0; k < vocab.class_count; ++k) out.push_back(class_prompt(vocab, k));
  return out;
}

Matrix stack_images(std::span<const Image> images) {
  if (images.empty()) return Matrix(0, 0);
  const auto px = static_cast<Eigen::Index>(images.front().pixels.size());
  Matrix m(static_cast<Eigen::Index>(images.size()), px);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (static_cast<Eigen::Index>(images[i].pixels.size()) != px) throw InputError("images differ in shape");
    m.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(images[i].pixels.data(), px);
  }
  return m;
}

Matrix stack_pair_images(const PairCorpus& corpus, std::span<const std::size_t> indices) {
  const auto px = static_cast<Eigen::Index>(corpus.spec.image_shape.pixels());
  Matrix m(static_cast<Eigen::Index>(indices.size()), px);
  for (std::size_t i = 0; i < indices.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(corpus.pairs[indices[i]].image.pixels.data(), px);
  return m;
}

std::vector<Caption> gather_captions(const PairCorpus& corpus, std::span<const std::size_t> indices) {
  std::vector<Caption> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(corpus.pairs[i].caption);
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out = image;
  for (int r = 0; r < image.shape.height; ++r)
    for (int c = 0; c < image.shape.width; ++c) out.at(r, c) = image.at(r, image.shape.width - 1 - c);
  return out;
}

namespace {

Image box_blur(const Image& image) {
  Image out = image;
  const int h = image.shape.height, w = image.shape.width;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double sum = 0.0;
      int count = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          sum += image.at(rr, cc);
          ++count;
        }
      out.at(r, c) = sum / count;
    }
  }
  return out;
}

}  // namespace

Image augment_image(const Image& image, std::uint64_t seed, const ImageAugmentation& opts) {
  Rng rng(seed);
  std::uniform_int_distribution<int> shift(-opts.max_shift, opts.max_shift);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Draw everything up front so the stream does not depend on which branches fire.
  const int dy = shift(rng);
  const int dx = shift(rng);
  const bool flip = unit(rng) < opts.flip_p;
  const double jitter = (2.0 * unit(rng) - 1.0) * opts.brightness;
  const bool blur = unit(rng) < opts.blur_p;

  const int h = image.shape.height, w = image.shape.width;
  Image out{image.shape, std::vector<double>(image.pixels.size(), 0.0)};
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int sr = r - dy, sc = c - dx;
      if (sr >= 0 && sr < h && sc >= 0 && sc < w) out.at(r, c) = image.at(sr, sc);
    }
  if (flip) out = flip_horizontal(out);
  for (auto& p : out.pixels) p = std::clamp(p + jitter, 0.0, 1.0);
  if (blur) out = box_blur(out);
  return out;
}

Caption augment_caption(const Caption& caption, const Vocabulary& vocab, std::uint64_t seed,
                        const CaptionAugmentation& opts) {
  if (caption.empty()) throw InputError("augment_caption: empty caption");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Caption replaced = caption;
  for (auto& t : replaced) {
    const double u = unit(rng);
    if (!vocab.is_class_token(t) || vocab.tokens_per_class < 2 || !(u < opts.replace_p)) continue;
    const int cls = vocab.class_of(t);
    std::uniform_int_distribution<Token> other(vocab.class_begin(cls), vocab.class_end(cls) - 2);
    Token pick = other(rng);
    if (pick >= t) ++pick;  // uniform over the class range minus t
    t = pick;
  }
  Caption out;
  std::size_t remaining = replaced.size();
  for (Token t : replaced) {
    if (unit(rng) < opts.delete_p && remaining > 1) {
      --remaining;
      continue;
    }
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void write_image(io::Writer& w, const Image& img) {
  w.scalar<std::int32_t>(img.shape.height);
  w.scalar<std::int32_t>(img.shape.width);
  w.vec(img.pixels);
}

Image read_image(io::Reader& r) {
  Image img;
  img.shape.height = r.scalar<std::int32_t>();
  img.shape.width = r.scalar<std::int32_t>();
  img.pixels = r.vec<double>();
  if (img.pixels.size() != static_cast<std::size_t>(img.shape.pixels())) throw InputError("corrupt image record");
  return img;
}

void write_attack(io::Writer& w, const AttackRecord& a) {
  const auto& s = a.spec;
  w.scalar<std::uint8_t>(static_cast<std::uint8_t>(s.kind));
  w.scalar(s.poison_rate);
  w.scalar<std::int32_t>(s.adversarial_class);
  w.vec(std::vector<std::int32_t>(s.adversarial_classes.begin(), s.adversarial_classes.end()));
  w.scalar<std::int32_t>(s.target_count);
  w.scalar<std::uint8_t>(static_cast<std::uint8_t>(s.trigger));
  w.scalar<std::int32_t>(s.trigger_params.patch_size);
  w.scalar(s.trigger_params.patch_value);
  w.scalar(s.trigger_params.blend_alpha);
  w.scalar(s.trigger_params.pattern_seed);
  w.scalar(s.trigger_params.warp_max_shift);
  w.scalar(s.seed);
  w.scalar<std::uint64_t>(a.arms.size());
  for (const auto& arm : a.arms) {
    w.str(arm.name);
    std::vector<std::uint8_t> trig;
    for (auto t : arm.triggers) trig.push_back(static_cast<std::uint8_t>(t));
    w.vec(trig);
    w.scalar<std::int32_t>(arm.adversarial_class);
    w.scalar<std::uint64_t>(arm.injected);
  }
  w.scalar<std::uint64_t>(a.target_images.size());
  for (const auto& img : a.target_images) write_image(w, img);
  w.vec(std::vector<std::int32_t>(a.target_classes.begin(), a.target_classes.end()));
}

AttackRecord read_attack(io::Reader& r) {
  AttackRecord a;
  auto& s = a.spec;
  s.kind = static_cast<AttackKind>(r.scalar<std::uint8_t>());
  s.poison_rate = r.scalar<double>();
  s.adversarial_class = r.scalar<std::int32_t>();
  for (auto v : r.vec<std::int32_t>()) s.adversarial_classes.push_back(v);
  s.target_count = r.scalar<std::int32_t>();
  s.trigger = static_cast<TriggerKind>(r.scalar<std::uint8_t>());
  s.trigger_params.patch_size = r.scalar<std::int32_t>();
  s.trigger_params.patch_value = r.scalar<double>();
  s.trigger_params.blend_alpha = r.scalar<double>();
  s.trigger_params.pattern_seed = r.scalar<std::uint64_t>();
  s.trigger_params.warp_max_shift = r.scalar<double>();
  s.seed = r.scalar<std::uint64_t>();
  const auto n_arms = r.scalar<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_arms; ++i) {
    AttackArm arm;
    arm.name = r.str();
    for (auto t : r.vec<std::uint8_t>()) arm.triggers.push_back(static_cast<TriggerKind>(t));
    arm.adversarial_class = r.scalar<std::int32_t>();
    arm.injected = r.scalar<std::uint64_t>();
    a.arms.push_back(std::move(arm));
  }
  const auto n_targets = r.scalar<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_targets; ++i) a.target_images.push_back(read_image(r));
  for (auto v : r.vec<std::int32_t>()) a.target_classes.push_back(v);
  return a;
}

}  // namespace

std::string serialize_corpus(const PairCorpus& c) {
  std::ostringstream out(std::ios::binary);
  io::Writer w(out);
  w.magic(kCorpusMagic);
  w.scalar(kCorpusVersion);
  const auto& s = c.spec;
  w.scalar(s.seed);
  w.scalar<std::uint64_t>(s.n_pairs);
  w.scalar<std::int32_t>(s.class_count);
  w.scalar<std::int32_t>(s.image_shape.height);
  w.scalar<std::int32_t>(s.image_shape.width);
  w.scalar<std::int32_t>(s.vocab_size);
  w.scalar<std::int32_t>(s.caption_len_min);
  w.scalar<std::int32_t>(s.caption_len_max);
  w.scalar(s.noise_sigma);
  w.scalar<std::int32_t>(s.prototype_cell);
  w.scalar(s.weak_fraction);
  w.scalar(s.weak_contrast);
  w.scalar<std::uint64_t>(c.prototypes.size());
  for (const auto& p : c.prototypes) write_image(w, p);
  w.scalar<std::uint64_t>(c.pairs.size());
  for (const auto& p : c.pairs) {
    write_image(w, p.image);
    w.vec(p.caption);
    w.scalar<std::int32_t>(p.true_class);
    w.scalar<std::uint8_t>(static_cast<std::uint8_t>(p.poison.kind));
    w.scalar<std::int32_t>(p.poison.attack_id);
    w.scalar<std::int32_t>(p.poison.arm);
  }
  w.scalar<std::uint64_t>(c.attacks.size());
  for (const auto& a : c.attacks) write_attack(w, a);
  return std::move(out).str();
}

PairCorpus deserialize_corpus(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  io::Reader r(in);
  r.expect_magic(kCorpusMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kCorpusVersion) throw InputError("unsupported corpus version " + std::to_string(version));
  PairCorpus c;
  auto& s = c.spec;
  s.seed = r.scalar<std::uint64_t>();
  s.n_pairs = r.scalar<std::uint64_t>();
  s.class_count = r.scalar<std::int32_t>();
  s.image_shape.height = r.scalar<std::int32_t>();
  s.image_shape.width = r.scalar<std::int32_t>();
  s.vocab_size = r.scalar<std::int32_t>();
  s.caption_len_min = r.scalar<std::int32_t>();
  s.caption_len_max = r.scalar<std::int32_t>();
  s.noise_sigma = r.scalar<double>();
  s.prototype_cell = r.scalar<std::int32_t>();
  s.weak_fraction = r.scalar<double>();
  s.weak_contrast = r.scalar<double>();
  c.vocab = Vocabulary::make(s.vocab_size, s.class_count);
  const auto n_proto = r.scalar<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_proto; ++i) c.prototypes.push_back(read_image(r));
  const auto n_pairs = r.scalar<std::uint64_t>();
  c.pairs.resize(n_pairs);
  for (auto& p : c.pairs) {
    p.image = read_image(r);
    p.caption = r.vec<Token>();
    p.true_class = r.scalar<std::int32_t>();
    p.poison.kind = static_cast<PoisonKind>(r.scalar<std::uint8_t>());
    p.poison.attack_id = r.scalar<std::int32_t>();
    p.poison.arm = r.scalar<std::int32_t>();
  }
  const auto n_attacks = r.scalar<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_attacks; ++i) c.attacks.push_back(read_attack(r));
  return c;
}

void save_corpus(const PairCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write corpus file: " + path.string());
  const auto bytes = serialize_corpus(corpus);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

PairCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open corpus file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_corpus(buf.str());
}

}  // namespace safeclip
