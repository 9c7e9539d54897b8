#include "safeclip/experiment.hpp"

#include "safeclip/attacks.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace safeclip {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr std::uint64_t kCorpusTag = 0x636f72707573ULL;
constexpr std::uint64_t kAttackTag = 0x61747461636bULL;
constexpr std::uint64_t kModelTag = 0x6d6f64656cULL;
constexpr std::uint64_t kTrainTag = 0x747261696eULL;
constexpr std::uint64_t kZeroShotStream = 0x7a65726f;
constexpr std::uint64_t kProbeTrainStream = 0x70726f62;
constexpr std::uint64_t kProbeTestStream = 0x70746573;
constexpr std::uint64_t kAsrStream = 0x61737273;

// ---------------------------------------------------------------------------
// Strict JSON field access

class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where_self() + " must be an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  const json& require(const std::string& key) {
    if (!has(key)) throw ConfigError("missing required field '" + join(key) + "'");
    return raw(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return as<T>(raw(key), join(key));
  }

  template <typename T>
  T need(const std::string& key) {
    return as<T>(require(key), join(key));
  }

  std::optional<double> opt_number(const std::string& key) {
    if (!has(key) || raw(key).is_null()) {
      seen_.insert(key);
      return std::nullopt;
    }
    return as<double>(raw(key), join(key));
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  // Unknown keys are errors.
  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown field '" + join(it.key()) + "'");
  }

  template <typename T>
  static T as(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("field '" + path + "' must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("field '" + path + "' must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("field '" + path + "' must be a number");
      const double d = v.get<double>();
      if (!std::isfinite(d)) throw ConfigError("field '" + path + "' must be finite");
      return static_cast<T>(d);
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError("field '" + path + "' must be a non-negative integer");
      return static_cast<T>(v.get<std::uint64_t>());
    } else {
      if (!v.is_number_integer()) throw ConfigError("field '" + path + "' must be an integer");
      const auto i = v.get<std::int64_t>();
      if (i < std::numeric_limits<T>::min() || i > std::numeric_limits<T>::max())
        throw ConfigError("field '" + path + "' is out of range");
      return static_cast<T>(i);
    }
  }

 private:
  std::string where_self() const { return path_.empty() ? "document" : "field '" + path_ + "'"; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

json parse_json(std::string_view text, std::string_view source) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t limit = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < limit; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string msg = e.what();
    if (const auto p = msg.find("syntax error"); p != std::string::npos) msg = msg.substr(p);
    throw ConfigError(std::string(source) + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + msg);
  }
}

TriggerParams parse_trigger_params(Fields f) {
  TriggerParams t;
  t.patch_size = f.get("patch_size", t.patch_size);
  t.patch_value = f.get("patch_value", t.patch_value);
  t.blend_alpha = f.get("blend_alpha", t.blend_alpha);
  t.pattern_seed = f.get("pattern_seed", t.pattern_seed);
  t.warp_max_shift = f.get("warp_max_shift", t.warp_max_shift);
  f.finish();
  return t;
}

AttackSpec parse_attack(Fields f) {
  AttackSpec a;
  a.kind = parse_attack_kind(f.need<std::string>("kind"));
  a.poison_rate = f.get("poison_rate", a.poison_rate);
  a.adversarial_class = f.get("adversarial_class", a.adversarial_class);
  if (f.has("adversarial_classes")) {
    const auto& arr = f.raw("adversarial_classes");
    if (!arr.is_array()) throw ConfigError("field '" + f.join("adversarial_classes") + "' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      a.adversarial_classes.push_back(Fields::as<int>(arr[i], f.join("adversarial_classes") + "[" + std::to_string(i) + "]"));
  }
  a.target_count = f.get("target_count", a.target_count);
  if (f.has("trigger")) a.trigger = parse_trigger_kind(f.need<std::string>("trigger"));
  if (f.has("trigger_params")) a.trigger_params = parse_trigger_params(Fields(f.raw("trigger_params"), f.join("trigger_params")));
  f.finish();
  return a;
}

TrainConfig parse_train(Fields f) {
  TrainConfig t;
  t.warmup_epochs = f.get("warmup_epochs", t.warmup_epochs);
  t.total_epochs = f.get("total_epochs", t.total_epochs);
  t.lr = f.get("lr", t.lr);
  t.lr_low = f.get("lr_low", t.lr / 100.0);
  t.batch_size = f.get("batch_size", t.batch_size);
  t.gmm_threshold = f.get("gmm_threshold", t.gmm_threshold);
  t.growth_s = f.get("growth_s", t.growth_s);
  t.pool_capacity = f.get("pool_capacity", t.pool_capacity);
  t.fast_reeval_q = f.opt_number("fast_reeval_q");
  t.clip_warmup_passes = f.get("clip_warmup_passes", t.clip_warmup_passes);
  t.disable_risky_unimodal = f.get("disable_risky_unimodal", t.disable_risky_unimodal);
  t.disable_nn_pool = f.get("disable_nn_pool", t.disable_nn_pool);
  t.max_empty_safe_retries = f.get("max_empty_safe_retries", t.max_empty_safe_retries);
  if (f.has("em")) {
    Fields e(f.raw("em"), f.join("em"));
    t.em.max_iters = e.get("max_iters", t.em.max_iters);
    t.em.tol = e.get("tol", t.em.tol);
    t.em.variance_floor = e.get("variance_floor", t.em.variance_floor);
    t.em.monotone_tails = e.get("monotone_tails", t.em.monotone_tails);
    e.finish();
  }
  if (f.has("image_augmentation")) {
    Fields a(f.raw("image_augmentation"), f.join("image_augmentation"));
    t.image_aug.max_shift = a.get("max_shift", t.image_aug.max_shift);
    t.image_aug.flip_p = a.get("flip_p", t.image_aug.flip_p);
    t.image_aug.brightness = a.get("brightness", t.image_aug.brightness);
    t.image_aug.blur_p = a.get("blur_p", t.image_aug.blur_p);
    a.finish();
  }
  if (f.has("caption_augmentation")) {
    Fields a(f.raw("caption_augmentation"), f.join("caption_augmentation"));
    t.caption_aug.replace_p = a.get("replace_p", t.caption_aug.replace_p);
    t.caption_aug.delete_p = a.get("delete_p", t.caption_aug.delete_p);
    a.finish();
  }
  f.finish();
  return t;
}

json trigger_params_json(const TriggerParams& t) {
  return {{"patch_size", t.patch_size},
          {"patch_value", t.patch_value},
          {"blend_alpha", t.blend_alpha},
          {"pattern_seed", t.pattern_seed},
          {"warp_max_shift", t.warp_max_shift}};
}

json attack_json(const AttackSpec& a) {
  return {{"kind", std::string(to_string(a.kind))},
          {"poison_rate", a.poison_rate},
          {"adversarial_class", a.adversarial_class},
          {"adversarial_classes", a.adversarial_classes},
          {"target_count", a.target_count},
          {"trigger", std::string(to_string(a.trigger))},
          {"trigger_params", trigger_params_json(a.trigger_params)}};
}

json train_json(const TrainConfig& t) {
  json j;
  j["warmup_epochs"] = t.warmup_epochs;
  j["total_epochs"] = t.total_epochs;
  j["lr"] = t.lr;
  j["lr_low"] = t.lr_low;
  j["batch_size"] = t.batch_size;
  j["gmm_threshold"] = t.gmm_threshold;
  j["growth_s"] = t.growth_s;
  j["pool_capacity"] = t.pool_capacity;
  j["fast_reeval_q"] = t.fast_reeval_q ? json(*t.fast_reeval_q) : json(nullptr);
  j["clip_warmup_passes"] = t.clip_warmup_passes;
  j["disable_risky_unimodal"] = t.disable_risky_unimodal;
  j["disable_nn_pool"] = t.disable_nn_pool;
  j["max_empty_safe_retries"] = t.max_empty_safe_retries;
  j["em"] = {{"max_iters", t.em.max_iters}, {"tol", t.em.tol}, {"variance_floor", t.em.variance_floor},
             {"monotone_tails", t.em.monotone_tails}};
  j["image_augmentation"] = {{"max_shift", t.image_aug.max_shift},
                             {"flip_p", t.image_aug.flip_p},
                             {"brightness", t.image_aug.brightness},
                             {"blur_p", t.image_aug.blur_p}};
  j["caption_augmentation"] = {{"replace_p", t.caption_aug.replace_p}, {"delete_p", t.caption_aug.delete_p}};
  return j;
}

json config_json(const ExperimentConfig& c, bool with_output_dir) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["name"] = c.name;
  j["seed"] = c.seed;
  if (with_output_dir && c.output_dir) j["output_dir"] = *c.output_dir;
  j["corpus"] = {{"n_pairs", c.corpus.n_pairs},
                 {"class_count", c.corpus.class_count},
                 {"image_height", c.corpus.image_shape.height},
                 {"image_width", c.corpus.image_shape.width},
                 {"vocab_size", c.corpus.vocab_size},
                 {"caption_len_min", c.corpus.caption_len_min},
                 {"caption_len_max", c.corpus.caption_len_max},
                 {"noise_sigma", c.corpus.noise_sigma},
                 {"prototype_cell", c.corpus.prototype_cell},
                 {"weak_fraction", c.corpus.weak_fraction},
                 {"weak_contrast", c.corpus.weak_contrast}};
  json attacks = json::array();
  for (const auto& a : c.attacks) attacks.push_back(attack_json(a));
  j["attacks"] = attacks;
  j["model"] = {{"hidden", c.model.hidden}, {"embed_dim", c.model.embed_dim}, {"d", c.model.d}};
  j["train"] = train_json(c.train);
  json trainers = json::array();
  for (auto t : c.trainers) trainers.push_back(std::string(to_string(t)));
  j["trainers"] = trainers;
  j["clean_reference"] = c.clean_reference;
  j["eval"] = {{"zero_shot_per_class", c.eval.zero_shot_per_class},
               {"probe_train_per_class", c.eval.probe_train_per_class},
               {"probe_test_per_class", c.eval.probe_test_per_class},
               {"asr_per_class", c.eval.asr_per_class},
               {"every_epoch", c.eval.every_epoch}};
  json checks = json::object();
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) checks[k] = *v;
  };
  put("safeclip_max_asr", c.checks.safeclip_max_asr);
  put("baseline_min_asr", c.checks.baseline_min_asr);
  put("max_zero_shot_gap", c.checks.max_zero_shot_gap);
  put("max_initial_safe_poison_fraction", c.checks.max_initial_safe_poison_fraction);
  j["checks"] = checks;
  return j;
}

ExperimentConfig config_from_json(const json& doc) {
  Fields f(doc, "");
  const auto version = f.need<int>("schema_version");
  if (version != kConfigSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  ExperimentConfig c;
  c.name = f.need<std::string>("name");
  c.seed = f.need<std::uint64_t>("seed");
  if (f.has("output_dir")) c.output_dir = f.need<std::string>("output_dir");

  {
    Fields cf(f.require("corpus"), "corpus");
    auto& s = c.corpus;
    s.n_pairs = cf.need<std::size_t>("n_pairs");
    s.class_count = cf.need<int>("class_count");
    s.image_shape.height = cf.get("image_height", s.image_shape.height);
    s.image_shape.width = cf.get("image_width", s.image_shape.width);
    s.vocab_size = cf.get("vocab_size", s.vocab_size);
    s.caption_len_min = cf.get("caption_len_min", s.caption_len_min);
    s.caption_len_max = cf.get("caption_len_max", s.caption_len_max);
    s.noise_sigma = cf.get("noise_sigma", s.noise_sigma);
    s.prototype_cell = cf.get("prototype_cell", s.prototype_cell);
    s.weak_fraction = cf.get("weak_fraction", s.weak_fraction);
    s.weak_contrast = cf.get("weak_contrast", s.weak_contrast);
    cf.finish();
  }
  if (f.has("attacks")) {
    const auto& arr = f.raw("attacks");
    if (!arr.is_array()) throw ConfigError("field 'attacks' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      c.attacks.push_back(parse_attack(Fields(arr[i], "attacks[" + std::to_string(i) + "]")));
  }
  if (f.has("model")) {
    Fields m(f.raw("model"), "model");
    c.model.hidden = m.get("hidden", c.model.hidden);
    c.model.embed_dim = m.get("embed_dim", c.model.embed_dim);
    c.model.d = m.get("d", c.model.d);
    m.finish();
  }
  if (f.has("train")) c.train = parse_train(Fields(f.raw("train"), "train"));
  {
    const auto& arr = f.require("trainers");
    if (!arr.is_array() || arr.empty()) throw ConfigError("field 'trainers' must be a non-empty array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto name = Fields::as<std::string>(arr[i], "trainers[" + std::to_string(i) + "]");
      TrainerKind k;
      if (name == "clip_baseline")
        k = TrainerKind::clip_baseline;
      else if (name == "safeclip")
        k = TrainerKind::safeclip;
      else
        throw ConfigError("field 'trainers[" + std::to_string(i) + "]': unknown trainer '" + name + "'");
      if (std::find(c.trainers.begin(), c.trainers.end(), k) != c.trainers.end())
        throw ConfigError("field 'trainers' lists '" + name + "' twice");
      c.trainers.push_back(k);
    }
  }
  c.clean_reference = f.get("clean_reference", c.clean_reference);
  if (f.has("eval")) {
    Fields e(f.raw("eval"), "eval");
    c.eval.zero_shot_per_class = e.get("zero_shot_per_class", c.eval.zero_shot_per_class);
    c.eval.probe_train_per_class = e.get("probe_train_per_class", c.eval.probe_train_per_class);
    c.eval.probe_test_per_class = e.get("probe_test_per_class", c.eval.probe_test_per_class);
    c.eval.asr_per_class = e.get("asr_per_class", c.eval.asr_per_class);
    c.eval.every_epoch = e.get("every_epoch", c.eval.every_epoch);
    e.finish();
  }
  if (f.has("checks")) {
    Fields k(f.raw("checks"), "checks");
    c.checks.safeclip_max_asr = k.opt_number("safeclip_max_asr");
    c.checks.baseline_min_asr = k.opt_number("baseline_min_asr");
    c.checks.max_zero_shot_gap = k.opt_number("max_zero_shot_gap");
    c.checks.max_initial_safe_poison_fraction = k.opt_number("max_initial_safe_poison_fraction");
    k.finish();
  }
  f.finish();
  return c;
}

bool has_trainer(const ExperimentConfig& c, TrainerKind k) {
  return std::find(c.trainers.begin(), c.trainers.end(), k) != c.trainers.end();
}

void validate_experiment(const ExperimentConfig& c) {
  if (c.trainers.empty()) throw ConfigError("field 'trainers' must be a non-empty array");
  const auto t = resolved_train_config(c);
  try {
    if (has_trainer(c, TrainerKind::safeclip))
      t.validate();
    else
      t.validate_baseline();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (c.eval.zero_shot_per_class < 1 || c.eval.asr_per_class < 1 || c.eval.probe_train_per_class < 1 ||
      c.eval.probe_test_per_class < 1)
    throw ConfigError("eval: per-class counts must be >= 1");
  if (c.checks.max_zero_shot_gap && !(c.clean_reference && has_trainer(c, TrainerKind::safeclip)))
    throw ConfigError("checks.max_zero_shot_gap needs clean_reference and the safeclip trainer");
  if (c.checks.safeclip_max_asr && !has_trainer(c, TrainerKind::safeclip))
    throw ConfigError("checks.safeclip_max_asr needs the safeclip trainer");
  if (c.checks.max_initial_safe_poison_fraction && !has_trainer(c, TrainerKind::safeclip))
    throw ConfigError("checks.max_initial_safe_poison_fraction needs the safeclip trainer");
  if (c.checks.baseline_min_asr && !has_trainer(c, TrainerKind::clip_baseline))
    throw ConfigError("checks.baseline_min_asr needs the clip_baseline trainer");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(TrainerKind kind) {
  return kind == TrainerKind::safeclip ? "safeclip" : "clip_baseline";
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
  auto c = config_from_json(parse_json(text, source));
  validate_experiment(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path) { return parse_config(read_file(path), path.string()); }

std::string serialize_config(const ExperimentConfig& config) { return config_json(config, true).dump(2) + "\n"; }

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(config_json(config, false).dump()); }

CorpusSpec resolved_corpus_spec(const ExperimentConfig& c) {
  auto s = c.corpus;
  s.seed = mix_seed(c.seed, kCorpusTag);
  return s;
}

std::vector<AttackSpec> resolved_attacks(const ExperimentConfig& c) {
  auto out = c.attacks;
  for (std::size_t k = 0; k < out.size(); ++k) out[k].seed = mix_seed(c.seed, kAttackTag, k);
  return out;
}

ModelDims resolved_model_dims(const ExperimentConfig& c) {
  auto d = c.model;
  d.image = c.corpus.image_shape;
  d.vocab_size = c.corpus.vocab_size;
  return d;
}

TrainConfig resolved_train_config(const ExperimentConfig& c) {
  auto t = c.train;
  t.seed = mix_seed(c.seed, kTrainTag);
  return t;
}

std::uint64_t model_seed(const ExperimentConfig& c) { return mix_seed(c.seed, kModelTag); }

PairCorpus build_corpus(const ExperimentConfig& config) {
  auto corpus = generate_corpus(resolved_corpus_spec(config));
  for (const auto& a : resolved_attacks(config)) corpus = inject_attack(corpus, a);
  return corpus;
}

// ---------------------------------------------------------------------------
// Presets

std::vector<std::string> preset_names() {
  return {"smoke",         "tdpa_desk", "badnet_desk",     "blended_desk",    "warp_desk",
          "label_consistent_desk", "htba_desk", "pba_all2one_desk", "pba_all2all_desk"};
}

ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;
  c.name = std::string(name);
  c.seed = 1;
  c.corpus.n_pairs = 20000;
  c.corpus.class_count = 10;
  c.corpus.vocab_size = 100;
  c.model.hidden = 128;
  c.model.embed_dim = 32;
  c.model.d = 32;
  c.train.warmup_epochs = 5;
  c.train.total_epochs = 20;
  c.train.lr = 0.03;
  c.train.lr_low = c.train.lr / 100.0;
  c.train.batch_size = 128;
  c.trainers = {TrainerKind::clip_baseline, TrainerKind::safeclip};

  AttackSpec attack;
  attack.poison_rate = 0.005;
  attack.adversarial_class = 0;

  auto backdoor = [&](AttackKind kind) {
    attack.kind = kind;
    c.attacks = {attack};
    c.checks.safeclip_max_asr = 0.05;
  };

  if (name == "smoke") {
    c.corpus.n_pairs = 2000;
    c.train.warmup_epochs = 1;
    c.train.total_epochs = 3;
    c.train.pool_capacity = 512;
    attack.kind = AttackKind::tdpa;
    attack.poison_rate = 0.01;
    attack.target_count = 2;
    c.attacks = {attack};
    c.eval = {20, 10, 10, 5, true};
    c.clean_reference = true;
  } else if (name == "tdpa_desk") {
    attack.kind = AttackKind::tdpa;
    attack.target_count = 4;
    c.attacks = {attack};
    c.clean_reference = true;
    c.checks.safeclip_max_asr = 0.05;
    c.checks.baseline_min_asr = 0.5;
    c.checks.max_zero_shot_gap = 0.05;
    c.checks.max_initial_safe_poison_fraction = 0.10;
  } else if (name == "badnet_desk") {
    backdoor(AttackKind::badnet);
    c.checks.baseline_min_asr = 0.5;
  } else if (name == "blended_desk") {
    backdoor(AttackKind::blended);
  } else if (name == "warp_desk") {
    backdoor(AttackKind::warp);
  } else if (name == "label_consistent_desk") {
    backdoor(AttackKind::label_consistent);
  } else if (name == "htba_desk") {
    backdoor(AttackKind::htba);
    c.trainers = {TrainerKind::safeclip};
  } else if (name == "pba_all2one_desk") {
    backdoor(AttackKind::pba_all2one);
    c.trainers = {TrainerKind::safeclip};
  } else if (name == "pba_all2all_desk") {
    backdoor(AttackKind::pba_all2all);
    c.trainers = {TrainerKind::safeclip};
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Running

bool ExperimentResult::checks_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckOutcome& c) { return c.passed; });
}

namespace {

struct EvalSets {
  LabeledImages zero_shot;
  LabeledImages probe_train;
  LabeledImages probe_test;
  std::vector<Caption> prompts;
};

struct RunRecord {
  std::string run;  // clip_baseline | clip_baseline_clean | safeclip
  double zero_shot = 0.0;
  double linear_probe = 0.0;
  std::vector<AttackEval> attacks;
  double temperature = 0.0;
  std::uint64_t steps = 0;
  std::vector<PartitionRecord> partitions;  // safeclip only
};

class Runner {
 public:
  Runner(const ExperimentConfig& config, fs::path out, const RunOptions& opts)
      : config_(config), out_(std::move(out)), opts_(opts), hash_(config_hash(config)) {}

  ExperimentResult run() {
    validate_experiment(config_);
    fs::create_directories(out_ / "checkpoints");
    fs::create_directories(out_ / "partitions");
    write_file(out_ / "config.json", serialize_config(config_));
    wrote(out_ / "config.json");

    corpus_ = build_corpus(config_);
    const auto corpus_bytes = serialize_corpus(corpus_);
    corpus_hash_ = sha256_hex(corpus_bytes);
    write_file(out_ / "corpus.bin", corpus_bytes);
    wrote(out_ / "corpus.bin");
    info("config " + hash_.substr(0, 12) + ", corpus " + corpus_hash_.substr(0, 12) + ": " +
         std::to_string(corpus_.size()) + " pairs, " + std::to_string(corpus_.poison_count()) + " poisoned");

    sets_.prompts = class_prompts(corpus_.vocab);
    sets_.zero_shot = heldout_images(corpus_, config_.eval.zero_shot_per_class, kZeroShotStream);
    sets_.probe_train = heldout_images(corpus_, config_.eval.probe_train_per_class, kProbeTrainStream);
    sets_.probe_test = heldout_images(corpus_, config_.eval.probe_test_per_class, kProbeTestStream);

    jsonl_.open(out_ / "metrics.jsonl", std::ios::trunc);
    if (!jsonl_) throw std::runtime_error("cannot write metrics.jsonl");

    const auto dims = resolved_model_dims(config_);
    const auto train = resolved_train_config(config_);
    std::vector<RunRecord> runs;
    if (has_trainer(config_, TrainerKind::clip_baseline)) runs.push_back(run_baseline("clip_baseline", corpus_, dims, train));
    if (config_.clean_reference) {
      PairCorpus clean = generate_corpus(resolved_corpus_spec(config_));
      clean.attacks = corpus_.attacks;  // evaluate the same triggers/targets on the clean model
      runs.push_back(run_baseline("clip_baseline_clean", clean, dims, train));
    }
    if (has_trainer(config_, TrainerKind::safeclip)) runs.push_back(run_safeclip_arm(dims, train));

    {
      std::ofstream csv(out_ / "metrics.csv", std::ios::trunc);
      csv << "# config " << hash_ << '\n';
      write_metrics_csv(csv, trace_);
      std::ofstream plot(out_ / "plot_data.csv", std::ios::trunc);
      plot << "# config " << hash_ << '\n';
      write_plot_data(plot, trace_);
    }
    wrote(out_ / "metrics.jsonl");
    wrote(out_ / "metrics.csv");
    wrote(out_ / "plot_data.csv");

    ExperimentResult result;
    result.checks = evaluate_checks(runs);
    result.summary_json = summary(runs, result.checks).dump(2) + "\n";
    write_file(out_ / "summary.json", result.summary_json);
    wrote(out_ / "summary.json");
    jsonl_.close();
    write_manifest();
    return result;
  }

 private:
  void info(const std::string& msg) const { say(Verbosity::normal, msg); }
  void debug(const std::string& msg) const { say(Verbosity::verbose, msg); }
  void say(Verbosity level, const std::string& msg) const {
    if (opts_.verbosity < level) return;
    if (opts_.log)
      opts_.log(msg);
    else
      std::cerr << msg << '\n';
  }

  void emit(MetricsRecord rec) {
    auto line = json::parse(metrics_jsonl_line(rec));
    line["config_hash"] = hash_;
    jsonl_ << line.dump() << '\n';
    jsonl_.flush();
    trace_.push_back(std::move(rec));
  }

  void fill_eval(MetricsRecord& rec, const ModelState& state, const PairCorpus& corpus) {
    rec.zero_shot_acc = zero_shot(state, sets_.zero_shot, sets_.prompts, corpus.spec.class_count);
    for (const auto& ev : evaluate_attacks(state, corpus, config_.eval.asr_per_class, kAsrStream))
      for (const auto& arm : ev.arms) rec.asr.emplace_back(ev.attack + "/" + arm.name, arm.rate);
  }

  TrainHooks hooks(const std::string& run, const PairCorpus& corpus, std::string& where) {
    TrainHooks h;
    h.epoch_end = [this, run, &corpus, &where](const EpochReport& r) {
      where = r.phase + " epoch " + std::to_string(r.epoch);
      MetricsRecord rec;
      rec.trainer = run;
      rec.phase = r.phase;
      rec.epoch = r.epoch;
      rec.loss = r.loss;
      rec.clip_term = r.clip_term;
      rec.image_unimodal_term = r.image_unimodal_term;
      rec.text_unimodal_term = r.text_unimodal_term;
      rec.temperature = r.temperature;
      if (config_.eval.every_epoch) {
        fill_eval(rec, *r.state, corpus);
        if (!r.partition) {
          const auto sm = similarity_means(
              cosine_similarities(encode_corpus_images(*r.state, corpus), encode_corpus_texts(*r.state, corpus)), corpus);
          rec.mean_clean_similarity = sm.clean;
          rec.mean_poison_similarity = sm.poison;
        }
      }
      if (r.partition) {
        const auto& p = *r.partition;
        const auto stats = safe_set_poison_stats(p.partition, corpus);
        const auto sm = similarity_means(p.similarities, corpus);
        rec.safe_ratio = p.partition.safe_ratio();
        rec.safe_size = stats.safe_size;
        rec.safe_poison_fraction_of_safe = stats.fraction_of_safe;
        rec.safe_poison_fraction_of_corpus = stats.fraction_of_corpus;
        rec.safe_poison_fraction_of_poisons = stats.fraction_of_poisons;
        rec.mean_clean_similarity = sm.clean;
        rec.mean_poison_similarity = sm.poison;
        char name[64];
        std::snprintf(name, sizeof name, "%s_epoch_%03d.csv", run.c_str(), p.epoch);
        write_partition_csv(out_ / "partitions" / name, p.partition, p.similarities, p.posteriors,
                            "config " + hash_ + " epoch " + std::to_string(p.epoch) + " safe_ratio " +
                                json(p.partition.safe_ratio()).dump());
        wrote(out_ / "partitions" / name);
      }
      std::ostringstream line;
      line << "[" << run << "] " << r.phase << " epoch " << r.epoch << ": loss " << std::setprecision(4) << r.loss
           << ", tau " << r.temperature;
      if (rec.safe_ratio) line << ", safe " << *rec.safe_ratio << "% (" << *rec.safe_size << " pairs)";
      if (rec.zero_shot_acc) line << ", zero-shot " << *rec.zero_shot_acc;
      for (const auto& [k, v] : rec.asr) line << ", asr " << k << " " << v;
      info(line.str());
      emit(std::move(rec));
    };
    h.phase_end = [this, run](std::string_view phase, const ModelState& state) {
      const auto path = out_ / "checkpoints" / (run + "_" + std::string(phase) + ".ckpt");
      save_checkpoint(state, path, "config " + hash_);
      wrote(path);
      debug("[" + run + "] checkpoint " + path.filename().string());
    };
    h.log = [this, run](std::string_view msg) { info("[" + run + "] " + std::string(msg)); };
    return h;
  }

  void finish_run(RunRecord& rec, const ModelState& state, const PairCorpus& corpus, int last_epoch) {
    rec.zero_shot = zero_shot(state, sets_.zero_shot, sets_.prompts, corpus.spec.class_count);
    rec.linear_probe = linear_probe(state, sets_.probe_train, sets_.probe_test).test_accuracy;
    rec.attacks = evaluate_attacks(state, corpus, config_.eval.asr_per_class, kAsrStream);
    rec.temperature = state.temperature();
    rec.steps = state.step;
    MetricsRecord m;
    m.trainer = rec.run;
    m.phase = "final";
    m.epoch = last_epoch;
    m.temperature = rec.temperature;
    m.zero_shot_acc = rec.zero_shot;
    m.linear_probe_acc = rec.linear_probe;
    for (const auto& ev : rec.attacks)
      for (const auto& arm : ev.arms) m.asr.emplace_back(ev.attack + "/" + arm.name, arm.rate);
    emit(std::move(m));
  }

  template <typename F>
  auto guarded(const std::string& run, std::string& where, F&& body) {
    try {
      return body();
    } catch (const TrainingFault& e) {
      throw TrainingFault(run + " (" + (where.empty() ? std::string("before the first epoch") : "after " + where) +
                          "): " + e.what());
    }
  }

  RunRecord run_baseline(const std::string& run, const PairCorpus& corpus, const ModelDims& dims,
                         const TrainConfig& train) {
    info("[" + run + "] " + std::to_string(train.total_epochs) + " epochs of CLIP");
    std::string where;
    auto state = guarded(run, where, [&] {
      return train_clip_baseline(init_model(model_seed(config_), dims), corpus, train, hooks(run, corpus, where));
    });
    RunRecord rec;
    rec.run = run;
    finish_run(rec, state, corpus, train.total_epochs - 1);
    return rec;
  }

  RunRecord run_safeclip_arm(const ModelDims& dims, const TrainConfig& train) {
    const std::string run = "safeclip";
    info("[safeclip] r=" + std::to_string(train.warmup_epochs) + " T=" + std::to_string(train.total_epochs) +
         " t=" + json(train.gmm_threshold).dump());
    std::string where;
    auto result = guarded(run, where, [&] {
      return run_safeclip(init_model(model_seed(config_), dims), corpus_, train, hooks(run, corpus_, where));
    });
    RunRecord rec;
    rec.run = run;
    rec.partitions = std::move(result.partitions);
    finish_run(rec, result.state, corpus_, train.total_epochs - 1);
    return rec;
  }

  std::vector<CheckOutcome> evaluate_checks(const std::vector<RunRecord>& runs) const {
    std::vector<CheckOutcome> out;
    const auto find = [&](const std::string& name) -> const RunRecord* {
      for (const auto& r : runs)
        if (r.run == name) return &r;
      return nullptr;
    };
    const auto fmt = [](double v) { return json(v).dump(); };
    const auto& ch = config_.checks;
    if (ch.safeclip_max_asr) {
      const auto* s = find("safeclip");
      for (const auto& ev : s->attacks)
        for (const auto& arm : ev.arms)
          out.push_back({"safeclip_asr:" + ev.attack + "/" + arm.name, arm.rate <= *ch.safeclip_max_asr,
                         fmt(arm.rate) + " <= " + fmt(*ch.safeclip_max_asr)});
    }
    if (ch.baseline_min_asr) {
      const auto* b = find("clip_baseline");
      for (const auto& ev : b->attacks)
        out.push_back({"baseline_asr:" + ev.attack, ev.mean_rate >= *ch.baseline_min_asr,
                       fmt(ev.mean_rate) + " >= " + fmt(*ch.baseline_min_asr)});
    }
    if (ch.max_zero_shot_gap) {
      const auto* s = find("safeclip");
      const auto* c = find("clip_baseline_clean");
      const double gap = std::abs(s->zero_shot - c->zero_shot);
      out.push_back({"zero_shot_gap", gap <= *ch.max_zero_shot_gap, fmt(gap) + " <= " + fmt(*ch.max_zero_shot_gap)});
    }
    if (ch.max_initial_safe_poison_fraction) {
      const auto* s = find("safeclip");
      const double f = s->partitions.empty() ? 0.0
                                             : safe_set_poison_stats(s->partitions.front().partition, corpus_)
                                                   .fraction_of_poisons;
      out.push_back({"initial_safe_poison_fraction", f <= *ch.max_initial_safe_poison_fraction,
                     fmt(f) + " <= " + fmt(*ch.max_initial_safe_poison_fraction)});
    }
    return out;
  }

  json partition_json(const PartitionRecord& p) const {
    const auto s = safe_set_poison_stats(p.partition, corpus_);
    return {{"epoch", p.epoch},
            {"safe_ratio", p.partition.safe_ratio()},
            {"safe_size", s.safe_size},
            {"poisons_in_safe", s.poisons_in_safe},
            {"poison_fraction_of_safe", s.fraction_of_safe},
            {"poison_fraction_of_corpus", s.fraction_of_corpus},
            {"poison_fraction_of_poisons", s.fraction_of_poisons},
            {"gmm_means", p.gmm_means},
            {"gmm_weights", p.gmm_weights}};
  }

  json summary(const std::vector<RunRecord>& runs, const std::vector<CheckOutcome>& checks) const {
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["name"] = config_.name;
    j["config_hash"] = hash_;
    j["corpus_sha256"] = corpus_hash_;
    j["seed"] = config_.seed;
    json attacks = json::array();
    for (const auto& a : corpus_.attacks) {
      json arms = json::array();
      for (const auto& arm : a.arms)
        arms.push_back({{"name", arm.name}, {"adversarial_class", arm.adversarial_class}, {"injected", arm.injected}});
      attacks.push_back({{"kind", std::string(to_string(a.spec.kind))}, {"arms", arms}});
    }
    j["corpus"] = {{"pairs", corpus_.size()}, {"poisons", corpus_.poison_count()}, {"attacks", attacks}};
    json jr = json::object();
    for (const auto& r : runs) {
      json o;
      o["zero_shot_acc"] = r.zero_shot;
      o["linear_probe_acc"] = r.linear_probe;
      json asr = json::array();
      for (const auto& ev : r.attacks)
        for (const auto& arm : ev.arms)
          asr.push_back({{"attack", ev.attack},
                         {"arm", arm.name},
                         {"adversarial_class", arm.adversarial_class},
                         {"evaluated", arm.evaluated},
                         {"rate", arm.rate}});
      o["asr"] = asr;
      o["temperature"] = r.temperature;
      o["optimizer_steps"] = r.steps;
      if (r.run == "safeclip") {
        if (!r.partitions.empty()) {
          o["schedule_origin"] = r.partitions.front().schedule_origin;
          o["initial_partition"] = partition_json(r.partitions.front());
          o["final_partition"] = partition_json(r.partitions.back());
        }
        json trace = json::array();
        for (const auto& p : r.partitions)
          trace.push_back({{"epoch", p.epoch}, {"safe_ratio", p.partition.safe_ratio()}, {"safe_size", p.partition.safe_indices.size()}});
        o["safe_ratio_trace"] = trace;
      }
      jr[r.run] = o;
    }
    j["runs"] = jr;
    if (!checks.empty()) {
      json jc = json::array();
      for (const auto& c : checks) jc.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
      j["checks"] = jc;
    }
    return j;
  }

  // Every artifact with its digest, under the config hash that produced it.
  void write_manifest() {
    std::sort(written_.begin(), written_.end());
    json arts = json::array();
    for (const auto& f : written_) arts.push_back({{"path", f}, {"sha256", sha256_hex(read_file(out_ / f))}});
    json m;
    m["config_hash"] = hash_;
    m["artifacts"] = arts;
    write_file(out_ / "manifest.json", m.dump(2) + "\n");
  }

  void wrote(const fs::path& p) { written_.push_back(fs::relative(p, out_).generic_string()); }

  const ExperimentConfig& config_;
  fs::path out_;
  RunOptions opts_;
  std::string hash_;
  std::string corpus_hash_;
  PairCorpus corpus_;
  EvalSets sets_;
  std::ofstream jsonl_;
  MetricsTrace trace_;
  std::vector<std::string> written_;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const fs::path& output_dir, const RunOptions& options) {
  return Runner(config, output_dir, options).run();
}

// ---------------------------------------------------------------------------
// Suites

std::vector<InitialPartitionStats> probe_initial_partitions(const PairCorpus& corpus, const ModelDims& dims,
                                                            std::uint64_t init_seed, const TrainConfig& train,
                                                            std::span<const double> thresholds) {
  auto warm = warmup_unimodal(init_model(init_seed, dims), corpus, train);
  const auto state = low_lr_clip_pass(std::move(warm.state), corpus, train);
  const auto sims = cosine_similarities(encode_corpus_images(state, corpus), encode_corpus_texts(state, corpus));
  const auto fit = em_fit(sims, train.em);
  std::vector<InitialPartitionStats> out;
  for (double t : thresholds) {
    InitialPartitionStats s;
    s.threshold = t;
    const auto p = initial_partition(fit, t, train.growth_s);
    s.empty = !p.has_value();
    if (p) {
      s.poison = safe_set_poison_stats(*p, corpus);
      s.safe_size = s.poison.safe_size;
      s.safe_percent = p->initial_ratio;
    } else {
      s.poison = safe_set_poison_stats(std::span<const std::size_t>{}, corpus);
    }
    out.push_back(s);
  }
  return out;
}

SuiteConfig parse_suite(std::string_view text, std::string_view source) {
  const auto doc = parse_json(text, source);
  Fields f(doc, "");
  const auto version = f.need<int>("schema_version");
  if (version != kConfigSchemaVersion) throw ConfigError("unsupported schema_version " + std::to_string(version));
  SuiteConfig s;
  const auto& base = f.require("base");
  if (base.is_string()) {
    const auto ref = base.get<std::string>();
    if (ref.rfind("preset:", 0) != 0) throw ConfigError("field 'base' must be a config object or \"preset:<name>\"");
    s.base = preset(ref.substr(7));
  } else {
    try {
      s.base = config_from_json(base);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("base: ") + e.what());
    }
  }
  const auto& sweeps = f.require("sweeps");
  if (!sweeps.is_array()) throw ConfigError("field 'sweeps' must be an array");
  const std::set<std::string> axes{"warmup_epochs", "clip_warmup_passes", "gmm_threshold", "ablation"};
  for (std::size_t i = 0; i < sweeps.size(); ++i) {
    const auto path = "sweeps[" + std::to_string(i) + "]";
    Fields sf(sweeps[i], path);
    SuiteSweep sw;
    sw.axis = sf.need<std::string>("axis");
    if (!axes.count(sw.axis)) throw ConfigError("field '" + path + ".axis': unknown axis '" + sw.axis + "'");
    const auto& vals = sf.require("values");
    if (!vals.is_array() || vals.empty()) throw ConfigError("field '" + path + ".values' must be a non-empty array");
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const auto vpath = path + ".values[" + std::to_string(k) + "]";
      if (sw.axis == "ablation") {
        const auto v = Fields::as<std::string>(vals[k], vpath);
        if (v != "default" && v != "disable_risky_unimodal" && v != "disable_nn_pool")
          throw ConfigError("field '" + vpath + "': unknown ablation '" + v + "'");
        sw.values.push_back(v);
      } else if (sw.axis == "gmm_threshold") {
        const auto v = Fields::as<double>(vals[k], vpath);
        if (!(v > 0.0 && v < 1.0)) throw ConfigError("field '" + vpath + "' must lie in (0,1)");
        sw.values.push_back(json(v).dump());
      } else {
        const auto v = Fields::as<int>(vals[k], vpath);
        if (v < 0) throw ConfigError("field '" + vpath + "' must be >= 0");
        sw.values.push_back(std::to_string(v));
      }
    }
    sf.finish();
    s.sweeps.push_back(std::move(sw));
  }
  f.finish();
  return s;
}

SuiteConfig load_suite(const fs::path& path) { return parse_suite(read_file(path), path.string()); }

namespace {

std::string pct(double v) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4) << 100.0 * v;
  return o.str();
}

std::string probe_table(const std::string& axis, const std::string& label,
                        const std::vector<std::pair<std::string, InitialPartitionStats>>& rows) {
  std::ostringstream o;
  o << "## " << axis << "\n\n";
  o << "| " << label << " | safe set % | safe set size | poisons in safe set | poison % of safe set | poison % of corpus | poisons kept % |\n";
  o << "|---|---|---|---|---|---|---|\n";
  for (const auto& [v, s] : rows) {
    o << "| " << v << " | " << (s.empty ? std::string("empty") : pct(s.safe_percent / 100.0)) << " | " << s.safe_size
      << " | " << s.poison.poisons_in_safe << " | " << pct(s.poison.fraction_of_safe) << " | "
      << pct(s.poison.fraction_of_corpus) << " | " << pct(s.poison.fraction_of_poisons) << " |\n";
  }
  o << '\n';
  return o.str();
}

}  // namespace

std::string run_ablation_suite(const SuiteConfig& suite, const fs::path& output_dir, const RunOptions& options) {
  fs::create_directories(output_dir);
  const auto& base = suite.base;
  validate_experiment(base);
  const auto log = [&](const std::string& msg) {
    if (options.verbosity < Verbosity::normal) return;
    if (options.log)
      options.log(msg);
    else
      std::cerr << msg << '\n';
  };

  std::string report;
  if (!suite.sweeps.empty()) {
    report += "# Ablation report: " + base.name + "\n\nbase config " + config_hash(base) + "\n\n";
  }
  std::optional<PairCorpus> corpus;
  const auto get_corpus = [&]() -> const PairCorpus& {
    if (!corpus) corpus = build_corpus(base);
    return *corpus;
  };
  const auto dims = resolved_model_dims(base);
  const auto train = resolved_train_config(base);

  for (const auto& sw : suite.sweeps) {
    log("suite: sweeping " + sw.axis);
    if (sw.axis == "warmup_epochs" || sw.axis == "clip_warmup_passes") {
      std::vector<std::pair<std::string, InitialPartitionStats>> rows;
      for (const auto& v : sw.values) {
        auto t = train;
        (sw.axis == "warmup_epochs" ? t.warmup_epochs : t.clip_warmup_passes) = std::stoi(v);
        const double thr[] = {t.gmm_threshold};
        rows.emplace_back(v, probe_initial_partitions(get_corpus(), dims, model_seed(base), t, thr).front());
        log("suite: " + sw.axis + "=" + v + " done");
      }
      report += probe_table(sw.axis, sw.axis == "warmup_epochs" ? "unimodal epochs r" : "low-lr CLIP passes", rows);
    } else if (sw.axis == "gmm_threshold") {
      std::vector<double> thr;
      for (const auto& v : sw.values) thr.push_back(std::stod(v));
      const auto stats = probe_initial_partitions(get_corpus(), dims, model_seed(base), train, thr);
      std::ostringstream o;
      o << "## gmm_threshold\n\n| metric |";
      for (const auto& v : sw.values) o << " t=" << v << " |";
      o << "\n|---|";
      for (std::size_t k = 0; k < sw.values.size(); ++k) o << "---|";
      o << "\n| safe set size |";
      for (const auto& s : stats) o << ' ' << s.safe_size << " |";
      o << "\n| safe set % |";
      for (const auto& s : stats) o << ' ' << pct(s.safe_percent / 100.0) << " |";
      o << "\n| poisons in safe set |";
      for (const auto& s : stats) o << ' ' << s.poison.poisons_in_safe << " |";
      o << "\n| poison % of corpus |";
      for (const auto& s : stats) o << ' ' << pct(s.poison.fraction_of_corpus) << " |";
      o << "\n| poison % of safe set |";
      for (const auto& s : stats) o << ' ' << pct(s.poison.fraction_of_safe) << " |";
      o << "\n\n";
      report += o.str();
    } else {
      std::ostringstream o;
      std::vector<std::string> cols;
      std::vector<std::pair<std::string, json>> rows;
      for (const auto& v : sw.values) {
        auto c = base;
        c.trainers = {TrainerKind::safeclip};
        c.clean_reference = false;
        c.checks = {};
        c.train.disable_risky_unimodal = v == "disable_risky_unimodal";
        c.train.disable_nn_pool = v == "disable_nn_pool";
        c.name = base.name + "/" + v;
        RunOptions quiet = options;
        if (quiet.verbosity == Verbosity::normal) quiet.verbosity = Verbosity::quiet;
        const auto res = run_experiment(c, output_dir / ("ablation_" + v), quiet);
        rows.emplace_back(v, json::parse(res.summary_json)["runs"]["safeclip"]);
        log("suite: ablation " + v + " done");
      }
      o << "## ablation\n\n| variant | zero-shot % |";
      const auto& first = rows.front().second["asr"];
      for (const auto& a : first) o << " ASR " << a["attack"].get<std::string>() << "/" << a["arm"].get<std::string>() << " % |";
      o << "\n|---|---|";
      for (std::size_t k = 0; k < first.size(); ++k) o << "---|";
      o << '\n';
      for (const auto& [v, r] : rows) {
        o << "| " << v << " | " << pct(r["zero_shot_acc"].get<double>()) << " |";
        for (const auto& a : r["asr"]) o << ' ' << pct(a["rate"].get<double>()) << " |";
        o << '\n';
      }
      o << '\n';
      report += o.str();
    }
  }
  write_file(output_dir / "report.md", report);
  return report;
}

}  // namespace safeclip
