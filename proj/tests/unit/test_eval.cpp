#include "helpers.hpp"
#include "safeclip/attacks.hpp"
#include "safeclip/eval.hpp"

#include <doctest.h>

#include <sstream>

using namespace safeclip;

namespace {

PairCorpus small_corpus(std::size_t n = 400) {
  CorpusSpec s;
  s.seed = 3;
  s.n_pairs = n;
  return generate_corpus(s);
}

ModelDims dims_for(const PairCorpus& c) {
  ModelDims d;
  d.image = c.spec.image_shape;
  d.vocab_size = c.spec.vocab_size;
  d.hidden = 16;
  d.embed_dim = 8;
  d.d = 8;
  return d;
}

// Image tower that ignores its input and points at the prompt of `cls`.
ModelState constant_image_model(const PairCorpus& c, int cls) {
  auto s = init_model(1, dims_for(c));
  const auto prompts = class_prompts(c.vocab);
  const Matrix p = encode_texts(s, prompts).reps;
  s.params.image_proj_w.setZero();
  s.params.image_proj_b = 10.0 * p.row(cls).transpose();
  return s;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("zero-shot argmax examples and ties") {
    Matrix img(3, 2), prompts(2, 2);
    img << 1, 0, 0, 1, 1, 1;
    prompts << 1, 0, 0, 1;
    CHECK(zero_shot_predict_reps(img, prompts) == std::vector<int>{0, 1, 0});
  }

  TEST_CASE("zero-shot predictions ignore positive row scaling") {
    const auto img = testutil::random_unit_rows(50, 6, 1);
    const auto prompts = testutil::random_unit_rows(5, 6, 2);
    Matrix scaled = img;
    for (Eigen::Index i = 0; i < scaled.rows(); ++i) scaled.row(i) *= 0.1 + static_cast<double>(i);
    CHECK(zero_shot_predict_reps(scaled, prompts) == zero_shot_predict_reps(img, prompts));
  }

  TEST_CASE("zero-shot of a random model is near chance") {
    const auto c = small_corpus();
    const auto s = init_model(9, dims_for(c));
    const auto test = heldout_images(c, 100, 77);
    const double acc = zero_shot(s, test, class_prompts(c.vocab), c.spec.class_count);
    CHECK(acc >= 0.0);
    CHECK(acc <= 0.35);
    CHECK_THROWS_AS(zero_shot(s, test, std::vector<Caption>(3, Caption{1}), c.spec.class_count), ConfigError);
  }

  TEST_CASE("linear probe separates separable features") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 0.1);
    const int per = 30, k = 3;
    Matrix x(per * k, 2);
    std::vector<int> y;
    const double cx[3] = {0, 2, 0}, cy[3] = {0, 0, 2};
    for (int c = 0; c < k; ++c)
      for (int i = 0; i < per; ++i) {
        x(c * per + i, 0) = cx[c] + g(rng);
        x(c * per + i, 1) = cy[c] + g(rng);
        y.push_back(c);
      }
    const auto r = fit_linear_probe(x, y, x, y);
    CHECK(r.train_accuracy == 1.0);
    CHECK(r.test_accuracy == 1.0);
    CHECK(r.iterations > 0);

    const std::vector<int> one(static_cast<std::size_t>(x.rows()), 0);
    CHECK_THROWS_AS(fit_linear_probe(x, one, x, one), ConfigError);
  }

  TEST_CASE("ASR is one for a model that always predicts the adversarial class") {
    const auto c = small_corpus();
    const auto prompts = class_prompts(c.vocab);
    const auto s = constant_image_model(c, 4);
    const auto imgs = heldout_images(c, 5, 11);
    CHECK(attack_success_rate(s, stack_images(imgs.images), 4, prompts) == 1.0);
    CHECK(attack_success_rate(s, stack_images(imgs.images), 2, prompts) == 0.0);
    CHECK_THROWS_AS(attack_success_rate(s, Matrix(0, c.spec.image_shape.pixels()), 4, prompts), InputError);
  }

  TEST_CASE("backdoor eval images exclude the adversarial class and carry the trigger") {
    auto c = small_corpus(2000);
    AttackSpec a;
    a.kind = AttackKind::badnet;
    a.poison_rate = 0.01;
    a.adversarial_class = 2;
    a.seed = 3;
    c = inject_attack(c, a);
    const auto imgs = attack_eval_images(c, c.attacks[0], 0, 4, 5);
    CHECK(imgs.size() == 4u * 9u);
    for (const auto& img : imgs) CHECK(apply_trigger(img, TriggerKind::badnet, a.trigger_params) == img);
    const auto evals = evaluate_attacks(constant_image_model(c, 2), c, 4, 5);
    REQUIRE(evals.size() == 1);
    CHECK(evals[0].mean_rate == 1.0);
    CHECK(evals[0].arms[0].evaluated == 36);
  }

  TEST_CASE("safe-set poison stats arithmetic") {
    auto c = small_corpus(10);
    c.pairs[1].poison.kind = PoisonKind::tdpa;
    c.pairs[4].poison.kind = PoisonKind::tdpa;
    c.pairs[7].poison.kind = PoisonKind::backdoor;
    const std::vector<std::size_t> safe{0, 1, 2, 4};
    const auto st = safe_set_poison_stats(safe, c);
    CHECK(st.safe_size == 4);
    CHECK(st.poisons_in_safe == 2);
    CHECK(st.poisons_total == 3);
    CHECK(st.fraction_of_safe == doctest::Approx(0.5));
    CHECK(st.fraction_of_corpus == doctest::Approx(0.2));
    CHECK(st.fraction_of_poisons == doctest::Approx(2.0 / 3.0));

    const auto none = safe_set_poison_stats(std::vector<std::size_t>{}, c);
    CHECK(none.fraction_of_safe == 0.0);
    CHECK(none.fraction_of_poisons == 0.0);
  }

  TEST_CASE("poison stats match a brute-force recount") {
    auto c = small_corpus(300);
    std::mt19937_64 rng(12);
    for (auto& p : c.pairs)
      if (rng() % 7 == 0) p.poison.kind = PoisonKind::backdoor;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::size_t> safe;
      for (std::size_t i = 0; i < c.size(); ++i)
        if (rng() % 3 == 0) safe.push_back(i);
      std::size_t in = 0, total = 0;
      for (std::size_t i = 0; i < c.size(); ++i) total += c.pairs[i].poison.is_poison();
      for (auto i : safe) in += c.pairs[i].poison.is_poison();
      const auto st = safe_set_poison_stats(safe, c);
      CHECK(st.poisons_in_safe == in);
      CHECK(st.poisons_total == total);
    }
  }

  TEST_CASE("similarity means split clean and poison pairs") {
    auto c = small_corpus(10);
    c.pairs[3].poison.kind = PoisonKind::tdpa;
    c.pairs[8].poison.kind = PoisonKind::tdpa;
    std::vector<double> s(10, 0.4);
    s[0] = 0.2;
    s[1] = 0.6;
    s[3] = -0.5;
    s[8] = -0.3;
    const auto m = similarity_means(s, c);
    CHECK(m.clean == doctest::Approx(0.4));
    REQUIRE(m.poison.has_value());
    CHECK(*m.poison == doctest::Approx(-0.4));
    CHECK_FALSE(similarity_means(s, small_corpus(10)).poison.has_value());
  }

  TEST_CASE("metrics writers") {
    MetricsRecord a;
    a.trainer = "safeclip";
    a.phase = "mixed";
    a.epoch = 6;
    a.loss = 1.5;
    a.zero_shot_acc = 0.9;
    a.asr = {{"tdpa/target0", 0.0}};
    MetricsRecord b = a;
    b.epoch = 7;
    b.asr = {{"badnet/badnet", 0.25}};
    b.zero_shot_acc.reset();

    const auto line = metrics_jsonl_line(a);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(line.find("\"trainer\":\"safeclip\"") != std::string::npos);
    CHECK(line.find("\"epoch\":6") != std::string::npos);

    std::ostringstream csv;
    write_metrics_csv(csv, {a, b});
    const auto rows = lines_of(csv.str());
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].find("asr:tdpa/target0") != std::string::npos);
    CHECK(rows[0].find("asr:badnet/badnet") != std::string::npos);

    std::ostringstream plot;
    write_plot_data(plot, {a, b});
    const auto p = lines_of(plot.str());
    REQUIRE(!p.empty());
    CHECK(p[0] == "trainer,phase,epoch,metric,value");
    bool saw_zs = false;
    for (const auto& l : p) saw_zs = saw_zs || l == "safeclip,mixed,6,zero_shot_acc,0.9";
    CHECK(saw_zs);
  }
}
