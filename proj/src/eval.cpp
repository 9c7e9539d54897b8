#include "safeclip/eval.hpp"

#include "safeclip/attacks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace safeclip {

namespace {

int argmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (Eigen::Index c = 1; c < row.size(); ++c)
    if (row(c) > row(best)) best = static_cast<int>(c);
  return best;
}

Matrix prompt_reps(const ModelState& state, std::span<const Caption> prompts) {
  if (prompts.empty()) throw ConfigError("zero-shot needs at least one class prompt");
  return encode_texts(state, prompts).reps;
}

// Softmax probabilities of X W, row-wise.
Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

struct ProbeObjective {
  const Matrix& x;  // n x (d+1)
  const Matrix& y;  // one-hot n x C
  double l2;

  double value(const Matrix& w) const {
    const Matrix logits = x * w;
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = logits.row(i).maxCoeff();
      const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
      total += lse - logits.row(i).dot(y.row(i));
    }
    return total / static_cast<double>(x.rows()) + 0.5 * l2 * w.squaredNorm();
  }

  Matrix gradient(const Matrix& w) const {
    return x.transpose() * (softmax_rows(x * w) - y) / static_cast<double>(x.rows()) + l2 * w;
  }
};

Matrix with_bias(const Matrix& x) {
  Matrix out(x.rows(), x.cols() + 1);
  out << x, Matrix::Ones(x.rows(), 1);
  return out;
}

double accuracy(const Matrix& x, const Matrix& w, std::span<const int> y) {
  if (y.empty()) return 0.0;
  const Matrix logits = x * w;
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) hit += argmax_row(logits.row(i)) == y[static_cast<std::size_t>(i)];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

}  // namespace

std::vector<int> zero_shot_predict_reps(const Matrix& image_reps, const Matrix& prompt_reps) {
  if (image_reps.cols() != prompt_reps.cols()) throw InputError("zero-shot: representation widths differ");
  const Matrix scores = image_reps * prompt_reps.transpose();
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_row(scores.row(i));
  return out;
}

std::vector<int> zero_shot_predict(const ModelState& state, const Matrix& images, std::span<const Caption> prompts) {
  return zero_shot_predict_reps(encode_images(state, images).reps, prompt_reps(state, prompts));
}

double zero_shot(const ModelState& state, const LabeledImages& test, std::span<const Caption> prompts,
                 int class_count) {
  if (static_cast<int>(prompts.size()) != class_count)
    throw ConfigError("zero-shot: expected " + std::to_string(class_count) + " class prompts, got " +
                      std::to_string(prompts.size()));
  if (test.images.empty()) throw InputError("zero-shot: empty test set");
  const auto pred = zero_shot_predict(state, stack_images(test.images), prompts);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

LinearProbeResult fit_linear_probe(const Matrix& train_x, std::span<const int> train_y, const Matrix& test_x,
                                   std::span<const int> test_y, const LinearProbeOptions& opts) {
  if (static_cast<std::size_t>(train_x.rows()) != train_y.size() ||
      static_cast<std::size_t>(test_x.rows()) != test_y.size())
    throw InputError("linear probe: features and labels disagree in length");
  if (train_y.empty()) throw InputError("linear probe: empty training split");
  const std::set<int> classes(train_y.begin(), train_y.end());
  if (classes.size() < 2) throw ConfigError("linear probe: training split has a single class");
  if (*classes.begin() < 0) throw InputError("linear probe: negative label");
  const int n_classes = std::max(*classes.rbegin(), *std::max_element(test_y.begin(), test_y.end())) + 1;

  const Matrix x = with_bias(train_x);
  Matrix y = Matrix::Zero(x.rows(), n_classes);
  for (std::size_t i = 0; i < train_y.size(); ++i) y(static_cast<Eigen::Index>(i), train_y[i]) = 1.0;
  const ProbeObjective f{x, y, opts.l2};

  Matrix w = Matrix::Zero(x.cols(), n_classes);
  double fw = f.value(w);
  double step = 1.0;
  LinearProbeResult r;
  for (int it = 0; it < opts.max_iters; ++it) {
    const Matrix g = f.gradient(w);
    const double gn2 = g.squaredNorm();
    r.iterations = it;
    if (std::sqrt(gn2) < opts.grad_tol) {
      r.converged = true;
      break;
    }
    // Armijo backtracking, starting from twice the last accepted step.
    step *= 2.0;
    Matrix cand;
    double fc = 0.0;
    for (;;) {
      cand = w - step * g;
      fc = f.value(cand);
      if (fc <= fw - 1e-4 * step * gn2 || step < 1e-12) break;
      step *= 0.5;
    }
    w = std::move(cand);
    fw = fc;
    r.iterations = it + 1;
  }
  r.train_accuracy = accuracy(x, w, train_y);
  r.test_accuracy = accuracy(with_bias(test_x), w, test_y);
  return r;
}

LinearProbeResult linear_probe(const ModelState& state, const LabeledImages& train, const LabeledImages& test,
                               const LinearProbeOptions& opts) {
  if (train.images.empty() || test.images.empty()) throw InputError("linear probe: empty split");
  return fit_linear_probe(encode_images(state, stack_images(train.images)).reps, train.labels,
                          encode_images(state, stack_images(test.images)).reps, test.labels, opts);
}

double attack_success_rate(const ModelState& state, const Matrix& images, int adversarial_class,
                           std::span<const Caption> prompts) {
  if (images.rows() == 0) throw InputError("attack success rate: empty evaluation set");
  if (adversarial_class < 0 || adversarial_class >= static_cast<int>(prompts.size()))
    throw ConfigError("attack success rate: adversarial class has no prompt");
  const auto pred = zero_shot_predict(state, images, prompts);
  const auto hits = std::count(pred.begin(), pred.end(), adversarial_class);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::vector<Image> attack_eval_images(const PairCorpus& corpus, const AttackRecord& record, std::size_t arm,
                                      int per_class, std::uint64_t stream) {
  if (arm >= record.arms.size()) throw InputError("attack arm out of range");
  if (record.spec.kind == AttackKind::tdpa) return record.target_images;
  const auto& a = record.arms[arm];
  std::vector<Image> out;
  for (int c = 0; c < corpus.spec.class_count; ++c) {
    if (c == a.adversarial_class) continue;
    for (int k = 0; k < per_class; ++k)
      out.push_back(apply_triggers(sample_heldout_image(corpus, c, stream, static_cast<std::uint64_t>(k)), a.triggers,
                                   record.spec.trigger_params));
  }
  return out;
}

std::vector<AttackEval> evaluate_attacks(const ModelState& state, const PairCorpus& corpus, int per_class,
                                         std::uint64_t stream) {
  const auto prompts = class_prompts(corpus.vocab);
  std::vector<AttackEval> out;
  for (const auto& rec : corpus.attacks) {
    AttackEval ev;
    ev.attack = std::string(to_string(rec.spec.kind));
    for (std::size_t a = 0; a < rec.arms.size(); ++a) {
      const auto images = attack_eval_images(corpus, rec, a, per_class, stream);
      ArmRate r;
      r.name = rec.arms[a].name;
      r.adversarial_class = rec.arms[a].adversarial_class;
      r.evaluated = images.size();
      r.rate = attack_success_rate(state, stack_images(images), r.adversarial_class, prompts);
      ev.mean_rate += r.rate;
      ev.arms.push_back(std::move(r));
    }
    if (!ev.arms.empty()) ev.mean_rate /= static_cast<double>(ev.arms.size());
    out.push_back(std::move(ev));
  }
  return out;
}

SafeSetPoisonStats safe_set_poison_stats(std::span<const std::size_t> safe, const PairCorpus& corpus) {
  SafeSetPoisonStats s;
  s.safe_size = safe.size();
  s.poisons_total = corpus.poison_count();
  for (auto i : safe) {
    if (i >= corpus.size()) throw InputError("safe index out of range");
    s.poisons_in_safe += corpus.pairs[i].poison.is_poison() ? 1 : 0;
  }
  const auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  s.fraction_of_safe = frac(s.poisons_in_safe, s.safe_size);
  s.fraction_of_corpus = frac(s.poisons_in_safe, corpus.size());
  s.fraction_of_poisons = frac(s.poisons_in_safe, s.poisons_total);
  return s;
}

SafeSetPoisonStats safe_set_poison_stats(const Partition& partition, const PairCorpus& corpus) {
  if (partition.corpus_size != corpus.size()) throw InputError("partition does not cover this corpus");
  return safe_set_poison_stats(partition.safe_indices, corpus);
}

SimilarityMeans similarity_means(std::span<const double> sims, const PairCorpus& corpus) {
  if (sims.size() != corpus.size()) throw InputError("similarity count does not match the corpus");
  double clean = 0.0, poison = 0.0;
  std::size_t nc = 0, np = 0;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    if (corpus.pairs[i].poison.is_poison()) {
      poison += sims[i];
      ++np;
    } else {
      clean += sims[i];
      ++nc;
    }
  }
  SimilarityMeans m;
  m.clean = nc ? clean / static_cast<double>(nc) : 0.0;
  if (np) m.poison = poison / static_cast<double>(np);
  return m;
}

// ---------------------------------------------------------------------------
// Metric export

namespace {

using json = nlohmann::ordered_json;

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  j[key] = v ? json(*v) : json(nullptr);
}

std::vector<std::pair<std::string, std::optional<double>>> flat_values(const MetricsRecord& r) {
  return {{"loss", r.loss},
          {"clip_term", r.clip_term},
          {"image_unimodal_term", r.image_unimodal_term},
          {"text_unimodal_term", r.text_unimodal_term},
          {"temperature", r.temperature},
          {"zero_shot_acc", r.zero_shot_acc},
          {"linear_probe_acc", r.linear_probe_acc},
          {"safe_ratio", r.safe_ratio},
          {"safe_size", r.safe_size ? std::optional<double>(static_cast<double>(*r.safe_size)) : std::nullopt},
          {"safe_poison_fraction_of_safe", r.safe_poison_fraction_of_safe},
          {"safe_poison_fraction_of_corpus", r.safe_poison_fraction_of_corpus},
          {"safe_poison_fraction_of_poisons", r.safe_poison_fraction_of_poisons},
          {"mean_clean_similarity", r.mean_clean_similarity},
          {"mean_poison_similarity", r.mean_poison_similarity}};
}

std::string fmt_double(double v) { return json(v).dump(); }

}  // namespace

std::string metrics_jsonl_line(const MetricsRecord& r) {
  json j;
  j["trainer"] = r.trainer;
  j["phase"] = r.phase;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["clip_term"] = r.clip_term;
  j["image_unimodal_term"] = r.image_unimodal_term;
  j["text_unimodal_term"] = r.text_unimodal_term;
  j["temperature"] = r.temperature;
  put(j, "zero_shot_acc", r.zero_shot_acc);
  put(j, "linear_probe_acc", r.linear_probe_acc);
  json asr = json::object();
  for (const auto& [k, v] : r.asr) asr[k] = v;
  j["asr"] = asr;
  put(j, "safe_ratio", r.safe_ratio);
  put(j, "safe_size", r.safe_size);
  put(j, "safe_poison_fraction_of_safe", r.safe_poison_fraction_of_safe);
  put(j, "safe_poison_fraction_of_corpus", r.safe_poison_fraction_of_corpus);
  put(j, "safe_poison_fraction_of_poisons", r.safe_poison_fraction_of_poisons);
  put(j, "mean_clean_similarity", r.mean_clean_similarity);
  put(j, "mean_poison_similarity", r.mean_poison_similarity);
  return j.dump();
}

void write_metrics_csv(std::ostream& out, const MetricsTrace& trace) {
  std::vector<std::string> asr_cols;
  for (const auto& r : trace)
    for (const auto& [k, v] : r.asr)
      if (std::find(asr_cols.begin(), asr_cols.end(), k) == asr_cols.end()) asr_cols.push_back(k);

  out << "trainer,phase,epoch";
  for (const auto& [name, v] : flat_values(MetricsRecord{})) out << ',' << name;
  for (const auto& c : asr_cols) out << ",asr:" << c;
  out << '\n';
  for (const auto& r : trace) {
    out << r.trainer << ',' << r.phase << ',' << r.epoch;
    for (const auto& [name, v] : flat_values(r)) {
      out << ',';
      if (v) out << fmt_double(*v);
    }
    for (const auto& c : asr_cols) {
      out << ',';
      for (const auto& [k, v] : r.asr)
        if (k == c) out << fmt_double(v);
    }
    out << '\n';
  }
}

void write_plot_data(std::ostream& out, const MetricsTrace& trace) {
  out << "trainer,phase,epoch,metric,value\n";
  for (const auto& r : trace) {
    const auto prefix = r.trainer + ',' + r.phase + ',' + std::to_string(r.epoch) + ',';
    for (const auto& [name, v] : flat_values(r))
      if (v) out << prefix << name << ',' << fmt_double(*v) << '\n';
    for (const auto& [k, v] : r.asr) out << prefix << "asr:" << k << ',' << fmt_double(v) << '\n';
  }
}

}  // namespace safeclip
