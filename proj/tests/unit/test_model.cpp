#include "helpers.hpp"
#include "safeclip/model.hpp"

#include <doctest.h>

using namespace safeclip;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.image = {6, 5};
  d.hidden = 7;
  d.embed_dim = 4;
  d.vocab_size = 12;
  d.d = 5;
  return d;
}

Matrix random_images(int n, int pixels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(n, pixels);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

double max_row_norm_error(const Matrix& m) {
  return (m.rowwise().norm().array() - 1.0).abs().maxCoeff();
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("init_model sets tau to 0.07 and is deterministic") {
    ModelDims d;
    d.vocab_size = 64;
    const auto a = init_model(0, d);
    const auto b = init_model(0, d);
    CHECK(a.temperature() == doctest::Approx(0.07).epsilon(1e-12));
    CHECK(a == b);
    CHECK(a.step == 0);
    CHECK_FALSE(init_model(1, d) == a);
  }

  TEST_CASE("init_model rejects d < 2") {
    ModelDims d;
    d.d = 1;
    CHECK_THROWS_AS(init_model(0, d), ConfigError);
  }

  TEST_CASE("encoders return unit rows") {
    const auto dims = small_dims();
    const auto s = init_model(3, dims);
    const auto imgs = random_images(9, dims.image.pixels(), 5);
    CHECK(max_row_norm_error(encode_images(s, imgs).reps) < 1e-6);
    std::vector<Caption> caps{{1, 2, 3}, {4}, {11, 0, 0, 7}};
    CHECK(max_row_norm_error(encode_texts(s, caps).reps) < 1e-6);
    // determinism
    CHECK(encode_images(s, imgs).reps == encode_images(s, imgs).reps);
  }

  TEST_CASE("zero projection falls back to the first basis vector") {
    const auto dims = small_dims();
    auto s = init_model(3, dims);
    s.params.image_proj_w.setZero();
    s.params.image_proj_b.setZero();
    const Matrix zero = Matrix::Zero(2, dims.image.pixels());
    const auto reps = encode_images(s, zero).reps;
    for (int i = 0; i < 2; ++i) {
      CHECK(reps(i, 0) == 1.0);
      CHECK(reps.row(i).tail(dims.d - 1).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("mean pooling: repeated and permuted tokens") {
    const auto s = init_model(4, small_dims());
    std::vector<Caption> caps{{5, 5, 5}, {5}, {1, 2, 3}, {3, 1, 2}};
    const auto r = encode_texts(s, caps).reps;
    CHECK((r.row(0) - r.row(1)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((r.row(2) - r.row(3)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("encoder input errors") {
    const auto dims = small_dims();
    const auto s = init_model(4, dims);
    CHECK_THROWS_AS(encode_texts(s, std::vector<Caption>{{}}), InputError);
    CHECK_THROWS_AS(encode_texts(s, std::vector<Caption>{{12}}), InputError);
    CHECK_THROWS_AS(encode_texts(s, std::vector<Caption>{{-1}}), InputError);
    Matrix bad = random_images(2, dims.image.pixels(), 1);
    bad(1, 3) = std::nan("");
    CHECK_THROWS_AS(encode_images(s, bad), InputError);
    CHECK_THROWS_AS(encode_images(s, random_images(2, dims.image.pixels() + 1, 1)), InputError);
  }

  TEST_CASE("image backward matches finite differences") {
    const auto dims = small_dims();
    const auto s = init_model(11, dims);
    const auto imgs = random_images(4, dims.image.pixels(), 12);
    const Matrix G = testutil::random_unit_rows(4, dims.d, 13);
    auto loss = [&](const ModelParams& p) { return (forward_images(p, imgs).reps.array() * G.array()).sum(); };
    auto grads = ModelParams::zeros(dims);
    backward_images(s.params, imgs, forward_images(s.params, imgs), G, grads);

    auto check_tensor = [&](auto member) {
      auto p = s.params;
      Matrix& x = member(p);
      const Matrix& g = member(grads);
      for (Eigen::Index k = 0; k < x.size(); k += std::max<Eigen::Index>(1, x.size() / 25)) {
        const double v = x.data()[k];
        x.data()[k] = v + 1e-5;
        const double fp = loss(p);
        x.data()[k] = v - 1e-5;
        const double fm = loss(p);
        x.data()[k] = v;
        CHECK(testutil::relative_error(g.data()[k], (fp - fm) / 2e-5) < 1e-6);
      }
    };
    check_tensor([](ModelParams& p) -> Matrix& { return p.image_hidden_w; });
    check_tensor([](ModelParams& p) -> Matrix& { return p.image_proj_w; });
    // bias vectors
    for (int which = 0; which < 2; ++which) {
      auto p = s.params;
      Vector& b = which == 0 ? p.image_hidden_b : p.image_proj_b;
      const Vector& gb = which == 0 ? grads.image_hidden_b : grads.image_proj_b;
      for (Eigen::Index k = 0; k < b.size(); ++k) {
        const double v = b(k);
        b(k) = v + 1e-5;
        const double fp = loss(p);
        b(k) = v - 1e-5;
        const double fm = loss(p);
        b(k) = v;
        CHECK(testutil::relative_error(gb(k), (fp - fm) / 2e-5) < 1e-6);
      }
    }
  }

  TEST_CASE("text backward matches finite differences") {
    const auto dims = small_dims();
    const auto s = init_model(21, dims);
    const std::vector<Caption> caps{{0, 1, 1}, {4, 9}, {11}, {2, 3, 4, 5}};
    const Matrix G = testutil::random_unit_rows(4, dims.d, 22);
    auto loss = [&](const ModelParams& p) {
      return (forward_texts(p, caps, dims.vocab_size).reps.array() * G.array()).sum();
    };
    auto grads = ModelParams::zeros(dims);
    backward_texts(s.params, caps, forward_texts(s.params, caps, dims.vocab_size), G, grads);
    for (int which = 0; which < 2; ++which) {
      auto p = s.params;
      Matrix& x = which == 0 ? p.token_embedding : p.text_proj_w;
      const Matrix& g = which == 0 ? grads.token_embedding : grads.text_proj_w;
      for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double v = x.data()[k];
        x.data()[k] = v + 1e-5;
        const double fp = loss(p);
        x.data()[k] = v - 1e-5;
        const double fm = loss(p);
        x.data()[k] = v;
        CHECK(testutil::relative_error(g.data()[k], (fp - fm) / 2e-5) < 1e-6);
      }
    }
  }

  TEST_CASE("apply_gradients identity cases") {
    const auto dims = small_dims();
    const auto s0 = init_model(1, dims);
    auto s = s0;
    apply_gradients(s, ModelParams::zeros(dims), 0.1);
    CHECK(s.params == s0.params);
    CHECK(s.step == 1);

    auto g = ModelParams::zeros(dims);
    g.image_proj_w.setConstant(0.3);
    auto t = s0;
    apply_gradients(t, g, 0.0);
    CHECK(t.params == s0.params);
  }

  TEST_CASE("momentum SGD on a scalar quadratic matches the hand-computed update") {
    // f(w) = a/2 (w - c)^2 on one weight; v <- 0.9 v + g; w <- w - lr v.
    const auto dims = small_dims();
    auto s = init_model(2, dims);
    const double a = 3.0, c = 0.25, lr = 0.05;
    double w = s.params.image_proj_b(0), v = 0.0;
    for (int step = 0; step < 5; ++step) {
      auto g = ModelParams::zeros(dims);
      g.image_proj_b(0) = a * (s.params.image_proj_b(0) - c);
      apply_gradients(s, g, lr);
      const double gw = a * (w - c);
      v = 0.9 * v + gw;
      w = w - lr * v;
      CHECK(s.params.image_proj_b(0) == doctest::Approx(w).epsilon(1e-14));
    }
  }

  TEST_CASE("temperature stays clamped under arbitrary updates") {
    const auto dims = small_dims();
    auto s = init_model(2, dims);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 50.0);
    for (int i = 0; i < 200; ++i) {
      auto g = ModelParams::zeros(dims);
      g.log_temperature = n(rng);
      apply_gradients(s, g, 0.5);
      CHECK(s.temperature() >= kMinTemperature * (1 - 1e-12));
      CHECK(s.temperature() <= kMaxTemperature * (1 + 1e-12));
    }
  }

  TEST_CASE("non-finite gradient is a training fault") {
    const auto dims = small_dims();
    auto s = init_model(2, dims);
    auto g = ModelParams::zeros(dims);
    g.text_proj_b(1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(apply_gradients(s, g, 0.1), TrainingFault);
  }

  TEST_CASE("checkpoint round trip is exact") {
    testutil::TempDir dir("ckpt");
    const auto dims = small_dims();
    auto s = init_model(5, dims);
    auto g = ModelParams::zeros(dims);
    g.image_hidden_w.setConstant(0.01);
    apply_gradients(s, g, 0.1);
    save_checkpoint(s, dir.path() / "a.ckpt", "config abc");
    std::string tag;
    const auto r = load_checkpoint(dir.path() / "a.ckpt", &tag);
    CHECK(r == s);
    CHECK(tag == "config abc");
  }
}
