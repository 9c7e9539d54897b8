#include "helpers.hpp"
#include "safeclip/attacks.hpp"

#include <doctest.h>

#include <map>
#include <set>

using namespace safeclip;

namespace {

PairCorpus corpus_of(std::size_t n, std::uint64_t seed = 7) {
  CorpusSpec s;
  s.seed = seed;
  s.n_pairs = n;
  return generate_corpus(s);
}

AttackSpec spec_of(AttackKind kind, double rate, int adv = 0) {
  AttackSpec a;
  a.kind = kind;
  a.poison_rate = rate;
  a.adversarial_class = adv;
  a.seed = 5;
  return a;
}

int caption_class(const Vocabulary& v, const Caption& c) {
  for (Token t : c)
    if (v.is_class_token(t)) return v.class_of(t);
  return -1;
}

bool patched(const Image& img, const TriggerParams& p) {
  for (int r = img.shape.height - p.patch_size; r < img.shape.height; ++r)
    for (int c = img.shape.width - p.patch_size; c < img.shape.width; ++c)
      if (img.at(r, c) != p.patch_value) return false;
  return true;
}

}  // namespace

TEST_SUITE("attacks") {
  TEST_CASE("adversarial captions") {
    const auto c = corpus_of(1000);
    const auto adv = build_adversarial_captions(c, 3);
    CHECK(adv.size() == 100);
    for (const auto& cap : adv)
      CHECK(std::any_of(cap.begin(), cap.end(), [&](Token t) { return c.vocab.class_of(t) == 3; }));
    CHECK_THROWS_AS(build_adversarial_captions(c, 11), InputError);
  }

  TEST_CASE("caption cycling uses each caption ceil(k/n) times at most") {
    std::vector<Caption> caps;
    for (int i = 0; i < 100; ++i) caps.push_back({i});
    CaptionCycle cycle(caps, 3);
    std::map<Token, int> uses;
    for (int j = 0; j < 150; ++j) uses[cycle.next()[0]]++;
    CHECK(uses.size() == 100);
    for (const auto& [tok, n] : uses) CHECK((n == 1 || n == 2));
  }

  TEST_CASE("poison budget") {
    CHECK(poison_budget(0.005, 20000) == 100);
    CHECK(poison_budget(0.0005, 60000) == 30);
    CHECK(poison_budget(0.001, 999) == 0);
  }

  TEST_CASE("tdpa injection") {
    const auto c = corpus_of(20000);
    auto spec = spec_of(AttackKind::tdpa, 0.005, 2);
    spec.target_count = 4;
    const auto p = inject_tdpa(c, spec);
    CHECK(p.size() == 20100);
    CHECK(p.poison_count() == 100);
    REQUIRE(p.attacks.size() == 1);
    const auto& rec = p.attacks[0];
    CHECK(rec.target_images.size() == 4);
    std::map<std::size_t, int> per_target;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto& pr = p.pairs[i];
      const auto t = std::find(rec.target_images.begin(), rec.target_images.end(), pr.image);
      if (i < 20000) {
        CHECK_FALSE(pr.poison.is_poison());
        CHECK(t == rec.target_images.end());
      } else {
        CHECK(pr.poison.kind == PoisonKind::tdpa);
        CHECK(caption_class(p.vocab, pr.caption) == 2);
        REQUIRE(t != rec.target_images.end());
        per_target[static_cast<std::size_t>(t - rec.target_images.begin())]++;
        CHECK(pr.true_class != 2);
      }
    }
    for (const auto& [k, n] : per_target) CHECK(n == 25);
    for (int cls : rec.target_classes) CHECK(cls != 2);
  }

  TEST_CASE("attack spec errors") {
    const auto c = corpus_of(1000);
    CHECK_THROWS_AS(inject_attack(c, spec_of(AttackKind::tdpa, 0.02)), ConfigError);
    CHECK_THROWS_AS(inject_attack(c, spec_of(AttackKind::tdpa, 0.0)), ConfigError);
    CHECK_THROWS_AS(inject_attack(c, spec_of(AttackKind::tdpa, 0.0005)), ConfigError);
    CHECK_THROWS_AS(inject_attack(c, spec_of(AttackKind::badnet, 0.005, 10)), ConfigError);
    CHECK_THROWS_AS(inject_attack(c, spec_of(AttackKind::pba_all2one, 0.002)), ConfigError);
    CHECK_THROWS_AS(parse_attack_kind("wanet"), ConfigError);
    CHECK_THROWS_AS(parse_trigger_kind("sig"), ConfigError);
  }

  TEST_CASE("trigger application") {
    const auto c = corpus_of(100);
    const auto& img = c.pairs[0].image;
    TriggerParams p;
    const auto b = apply_trigger(img, TriggerKind::badnet, p);
    CHECK(patched(b, p));
    CHECK(apply_trigger(b, TriggerKind::badnet, p) == b);
    CHECK(apply_trigger(img, TriggerKind::blended, p) == apply_trigger(img, TriggerKind::blended, p));
    CHECK(apply_trigger(img, TriggerKind::warp, p) == apply_trigger(img, TriggerKind::warp, p));

    TriggerParams zero = p;
    zero.blend_alpha = 0.0;
    zero.warp_max_shift = 0.0;
    CHECK(apply_trigger(img, TriggerKind::blended, zero) == img);
    CHECK(apply_trigger(img, TriggerKind::warp, zero) == img);

    for (auto k : {TriggerKind::badnet, TriggerKind::blended, TriggerKind::warp})
      for (double v : apply_trigger(img, k, p).pixels) CHECK((v >= 0.0 && v <= 1.0));

    const auto field = warp_field(img.shape, p);
    double mx = 0.0;
    for (std::size_t i = 0; i < field.dx.size(); ++i) mx = std::max({mx, std::abs(field.dx[i]), std::abs(field.dy[i])});
    CHECK(mx == doctest::Approx(p.warp_max_shift));
  }

  TEST_CASE("blended trigger is the documented convex mix") {
    const auto c = corpus_of(100);
    const auto& img = c.pairs[0].image;
    TriggerParams p;
    const auto noise = blend_pattern(img.shape, p);
    const auto out = apply_trigger(img, TriggerKind::blended, p);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      CHECK(out.pixels[i] == doctest::Approx((1 - p.blend_alpha) * img.pixels[i] + p.blend_alpha * noise.pixels[i]));
  }

  TEST_CASE("badnet backdoor") {
    const auto c = corpus_of(20000);
    const auto spec = spec_of(AttackKind::badnet, 0.005, 4);
    const auto p = inject_backdoor(c, spec);
    CHECK(p.poison_count() == 100);
    for (std::size_t i = 20000; i < p.size(); ++i) {
      const auto& pr = p.pairs[i];
      CHECK(pr.poison.kind == PoisonKind::backdoor);
      CHECK(pr.true_class != 4);
      CHECK(caption_class(p.vocab, pr.caption) == 4);
      CHECK(patched(pr.image, spec.trigger_params));
    }
    for (std::size_t i = 0; i < 20000; ++i) CHECK_FALSE(p.pairs[i].poison.is_poison());
  }

  TEST_CASE("label consistent backdoor keeps captions in class") {
    const auto c = corpus_of(20000);
    const auto p = inject_backdoor(c, spec_of(AttackKind::label_consistent, 0.005, 1));
    CHECK(p.poison_count() == 100);
    for (std::size_t i = 20000; i < p.size(); ++i) {
      CHECK(p.pairs[i].true_class == 1);
      CHECK(caption_class(p.vocab, p.pairs[i].caption) == 1);
    }
  }

  TEST_CASE("htba carries all three triggers") {
    const auto c = corpus_of(20000);
    const auto spec = spec_of(AttackKind::htba, 0.005);
    const auto p = inject_backdoor(c, spec);
    REQUIRE(p.attacks[0].arms.size() == 1);
    CHECK(p.attacks[0].arms[0].triggers.size() == 3);
    CHECK(p.poison_count() == 100);
    for (std::size_t i = 20000; i < p.size(); ++i) CHECK(patched(p.pairs[i].image, spec.trigger_params));
  }

  TEST_CASE("pba all2one splits the budget") {
    const auto c = corpus_of(20000);
    const auto p = inject_backdoor(c, spec_of(AttackKind::pba_all2one, 0.005, 6));
    REQUIRE(p.attacks[0].arms.size() == 3);
    for (const auto& arm : p.attacks[0].arms) {
      CHECK(arm.injected == 33);
      CHECK(arm.adversarial_class == 6);
      CHECK(arm.triggers.size() == 1);
    }
    CHECK(p.poison_count() == 99);
  }

  TEST_CASE("pba all2all at 0.05% each on 60000 pairs") {
    const auto c = corpus_of(60000);
    const auto p = inject_backdoor(c, spec_of(AttackKind::pba_all2all, 0.0005, 2));
    REQUIRE(p.attacks[0].arms.size() == 3);
    std::set<int> classes;
    for (const auto& arm : p.attacks[0].arms) {
      CHECK(arm.injected == 30);
      classes.insert(arm.adversarial_class);
    }
    CHECK(classes.size() == 3);
    CHECK(p.poison_count() == 90);
    std::map<int, int> per_arm;
    for (std::size_t i = 60000; i < p.size(); ++i) {
      const auto& pr = p.pairs[i];
      const auto& arm = p.attacks[0].arms[static_cast<std::size_t>(pr.poison.arm)];
      per_arm[pr.poison.arm]++;
      CHECK(pr.true_class != arm.adversarial_class);
      CHECK(caption_class(p.vocab, pr.caption) == arm.adversarial_class);
    }
    CHECK(per_arm.size() == 3);
  }

  TEST_CASE("injection is deterministic and stacks") {
    const auto c = corpus_of(5000);
    const auto a = inject_attack(c, spec_of(AttackKind::blended, 0.004, 3));
    CHECK(a == inject_attack(c, spec_of(AttackKind::blended, 0.004, 3)));
    auto w = spec_of(AttackKind::warp, 0.004, 5);
    const auto both = inject_attack(a, w);
    CHECK(both.attacks.size() == 2);
    CHECK(both.poison_count() == 40);
    CHECK(both.pairs.back().poison.attack_id == 1);
  }
}
