#include "helpers.hpp"
#include "safeclip/losses.hpp"

#include <doctest.h>

#include <cmath>

using namespace safeclip;
using testutil::numeric_gradient;
using testutil::random_unit_rows;
using testutil::relative_error;

namespace {

// Symmetric InfoNCE written as two explicit double loops.
double clip_reference(const Matrix& I, const Matrix& T, double tau) {
  const auto n = I.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double den_it = 0.0, den_ti = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      den_it += std::exp(I.row(i).dot(T.row(k)) / tau);
      den_ti += std::exp(T.row(i).dot(I.row(k)) / tau);
    }
    const double pos = I.row(i).dot(T.row(i)) / tau;
    total += -(pos - std::log(den_it)) - (pos - std::log(den_ti));
  }
  return total / (2.0 * static_cast<double>(n));
}

double anchor_reference(const Matrix& A, const Matrix& Z, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    double den = 0.0;
    for (Eigen::Index k = 0; k < Z.rows(); ++k) den += std::exp(A.row(i).dot(Z.row(k)) / tau);
    total += -(A.row(i).dot(Z.row(i)) / tau - std::log(den));
  }
  return total / static_cast<double>(A.rows());
}

NNPool pool_of(const Matrix& rows, std::size_t capacity) {
  NNPool p(capacity, static_cast<int>(rows.cols()));
  p.push(rows);
  return p;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("clip_loss worked examples") {
    const Matrix e = Matrix::Identity(2, 2);
    CHECK(clip_loss(e, e, 1.0).value == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
    CHECK(std::log1p(std::exp(-1.0)) == doctest::Approx(0.313262).epsilon(1e-6));

    const Matrix one = random_unit_rows(1, 6, 3);
    const auto out = clip_loss(one, random_unit_rows(1, 6, 4), 0.07);
    CHECK(out.value == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(out.grad_image_reps.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(out.grad_text_reps.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(std::abs(out.grad_log_temperature) < 1e-15);
  }

  TEST_CASE("clip_loss matches the double-loop reference") {
    for (int trial = 0; trial < 10; ++trial) {
      const auto I = random_unit_rows(5, 8, 100 + trial);
      const auto T = random_unit_rows(5, 8, 200 + trial);
      const double tau = 0.05 + 0.1 * trial;
      CHECK(clip_loss(I, T, tau).value == doctest::Approx(clip_reference(I, T, tau)).epsilon(1e-12));
    }
  }

  TEST_CASE("clip_loss input errors") {
    CHECK_THROWS_AS(clip_loss(Matrix(0, 4), Matrix(0, 4), 0.1), InputError);
    CHECK_THROWS_AS(clip_loss(random_unit_rows(2, 4, 1), random_unit_rows(3, 4, 1), 0.1), InputError);
    CHECK_THROWS_AS(clip_loss(random_unit_rows(2, 4, 1), random_unit_rows(2, 4, 1), 0.0), InputError);
    CHECK_THROWS_AS(clip_loss(random_unit_rows(2, 4, 1), random_unit_rows(2, 4, 1), -1.0), InputError);
  }

  TEST_CASE("clip_loss gradients match central differences") {
    const int sizes[] = {2, 4, 8};
    const int dims[] = {4, 8, 16};
    int instance = 0;
    for (int n : sizes) {
      for (int d : dims) {
        const auto I = random_unit_rows(n, d, 300 + instance);
        const auto T = random_unit_rows(n, d, 400 + instance);
        const double tau = 0.1 + 0.05 * instance;
        ++instance;
        const auto out = clip_loss(I, T, tau);
        CHECK(relative_error(out.grad_image_reps,
                             numeric_gradient([&](const Matrix& x) { return clip_loss(x, T, tau).value; }, I)) < 1e-4);
        CHECK(relative_error(out.grad_text_reps,
                             numeric_gradient([&](const Matrix& x) { return clip_loss(I, x, tau).value; }, T)) < 1e-4);
        const double h = 1e-5;
        const double fd = (clip_loss(I, T, std::exp(std::log(tau) + h)).value -
                           clip_loss(I, T, std::exp(std::log(tau) - h)).value) /
                          (2 * h);
        CHECK(relative_error(out.grad_log_temperature, fd) < 1e-4);
      }
    }
  }

  TEST_CASE("clip_loss is permutation invariant and non-negative") {
    const auto I = random_unit_rows(6, 8, 7);
    const auto T = random_unit_rows(6, 8, 8);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
    perm.indices() << 3, 0, 5, 1, 4, 2;
    const double base = clip_loss(I, T, 0.2).value;
    CHECK(clip_loss(perm * I, perm * T, 0.2).value == doctest::Approx(base).epsilon(1e-12));
    CHECK(base >= 0.0);
  }

  TEST_CASE("swapping one caption raises the loss of a matched batch") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto I = random_unit_rows(6, 8, 900 + trial);
      const Matrix T = I;
      const double matched = clip_loss(I, T, 0.1).value;
      Matrix swapped = T;
      const int a = trial % 6, b = (trial + 1 + trial / 6) % 6;
      if (a == b) continue;
      swapped.row(a).swap(swapped.row(b));
      CHECK(matched < clip_loss(I, swapped, 0.1).value);
    }
  }

  TEST_CASE("single-precision path agrees to 1e-3") {
    const auto I = random_unit_rows(16, 8, 41);
    const auto T = random_unit_rows(16, 8, 42);
    const auto d = clip_loss(I, T, 0.07);
    const auto f = clip_loss_f32(I.cast<float>(), T.cast<float>(), 0.07f);
    CHECK(std::abs(f.value - d.value) / d.value < 1e-3);
    CHECK((f.grad_image_reps.cast<double>() - d.grad_image_reps).cwiseAbs().maxCoeff() /
              d.grad_image_reps.cwiseAbs().maxCoeff() <
          1e-3);
  }

  TEST_CASE("unimodal_nn_loss worked examples") {
    const Matrix e = Matrix::Identity(2, 2);
    const auto pool = pool_of(e, 4);
    CHECK(unimodal_nn_loss(e, e, pool, 1.0).value == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));

    const auto z = random_unit_rows(1, 5, 2);
    const auto one = unimodal_nn_loss(z, z, pool_of(z, 3), 0.3);
    CHECK(one.value == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("unimodal_nn_loss takes anchors from the pool") {
    const auto reps = random_unit_rows(4, 6, 51);
    const auto aug = random_unit_rows(4, 6, 52);
    const auto pool_rows = random_unit_rows(32, 6, 53);
    const auto pool = pool_of(pool_rows, 32);
    const auto out = unimodal_nn_loss(reps, aug, pool, 0.2);
    Matrix anchors(4, 6);
    for (int i = 0; i < 4; ++i) {
      // brute-force nearest by L2
      Eigen::Index best = 0;
      (pool_rows.rowwise() - reps.row(i)).rowwise().squaredNorm().minCoeff(&best);
      CHECK(out.anchor_indices[static_cast<std::size_t>(i)] == static_cast<std::size_t>(best));
      anchors.row(i) = pool_rows.row(best);
    }
    CHECK(out.value == doctest::Approx(anchor_reference(anchors, aug, 0.2)).epsilon(1e-12));
    CHECK(out.grad_reps.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("unimodal gradients match central differences") {
    int instance = 0;
    for (int n : {2, 4, 8}) {
      for (int d : {4, 8, 16}) {
        const auto reps = random_unit_rows(n, d, 600 + instance);
        const auto aug = random_unit_rows(n, d, 700 + instance);
        const auto pool = pool_of(random_unit_rows(20, d, 800 + instance), 20);
        const double tau = 0.1 + 0.04 * instance;
        ++instance;
        const auto out = unimodal_nn_loss(reps, aug, pool, tau);
        CHECK(relative_error(out.grad_augmented_reps,
                             numeric_gradient([&](const Matrix& x) { return unimodal_nn_loss(reps, x, pool, tau).value; },
                                              aug)) < 1e-4);
        const double h = 1e-5;
        const double fd = (unimodal_nn_loss(reps, aug, pool, std::exp(std::log(tau) + h)).value -
                           unimodal_nn_loss(reps, aug, pool, std::exp(std::log(tau) - h)).value) /
                          (2 * h);
        CHECK(relative_error(out.grad_log_temperature, fd) < 1e-4);

        const auto self = unimodal_self_loss(reps, aug, tau);
        CHECK(relative_error(self.grad_reps,
                             numeric_gradient([&](const Matrix& x) { return unimodal_self_loss(x, aug, tau).value; },
                                              reps)) < 1e-4);
        CHECK(relative_error(self.grad_augmented_reps,
                             numeric_gradient([&](const Matrix& x) { return unimodal_self_loss(reps, x, tau).value; },
                                              aug)) < 1e-4);
      }
    }
  }

  TEST_CASE("unimodal loss on an empty pool is a state error") {
    NNPool empty(4, 3);
    const auto z = random_unit_rows(2, 3, 1);
    CHECK_THROWS_AS(unimodal_nn_loss(z, z, empty, 0.1), StateError);
  }

  TEST_CASE("safeclip_loss is the sum of its parts") {
    const int d = 8;
    SafeClipLossInputs in;
    in.risky_image = random_unit_rows(5, d, 1);
    in.risky_image_aug = random_unit_rows(5, d, 2);
    in.risky_text = random_unit_rows(5, d, 3);
    in.risky_text_aug = random_unit_rows(5, d, 4);
    const auto ip = pool_of(random_unit_rows(16, d, 5), 16);
    const auto tp = pool_of(random_unit_rows(16, d, 6), 16);
    in.image_pool = &ip;
    in.text_pool = &tp;
    in.safe_image_aug = random_unit_rows(4, d, 7);
    in.safe_text_aug = random_unit_rows(4, d, 8);
    in.temperature = 0.15;

    const auto out = safeclip_loss(in);
    const double ci = unimodal_nn_loss(in.risky_image, in.risky_image_aug, ip, 0.15).value;
    const double ct = unimodal_nn_loss(in.risky_text, in.risky_text_aug, tp, 0.15).value;
    const double cc = clip_loss(in.safe_image_aug, in.safe_text_aug, 0.15).value;
    CHECK(out.image_unimodal_term == doctest::Approx(ci).epsilon(1e-12));
    CHECK(out.text_unimodal_term == doctest::Approx(ct).epsilon(1e-12));
    CHECK(out.clip_term == doctest::Approx(cc).epsilon(1e-12));
    CHECK(out.value == doctest::Approx(ci + ct + cc).epsilon(1e-12));

    CHECK(relative_error(out.grad_safe_image_aug, numeric_gradient([&](const Matrix& x) {
                           auto j = in;
                           j.safe_image_aug = x;
                           return safeclip_loss(j).value;
                         }, in.safe_image_aug)) < 1e-4);
    CHECK(relative_error(out.grad_risky_text_aug, numeric_gradient([&](const Matrix& x) {
                           auto j = in;
                           j.risky_text_aug = x;
                           return safeclip_loss(j).value;
                         }, in.risky_text_aug)) < 1e-4);

    SUBCASE("empty risky side") {
      auto j = in;
      j.risky_image = Matrix(0, d);
      j.risky_image_aug = Matrix(0, d);
      j.risky_text = Matrix(0, d);
      j.risky_text_aug = Matrix(0, d);
      CHECK(safeclip_loss(j).value == doctest::Approx(cc).epsilon(1e-12));
    }
    SUBCASE("empty safe side") {
      auto j = in;
      j.safe_image_aug = Matrix(0, d);
      j.safe_text_aug = Matrix(0, d);
      CHECK(safeclip_loss(j).value == doctest::Approx(ci + ct).epsilon(1e-12));
    }
    SUBCASE("both empty") {
      SafeClipLossInputs j;
      j.risky_image = j.risky_image_aug = j.risky_text = j.risky_text_aug = Matrix(0, d);
      j.safe_image_aug = j.safe_text_aug = Matrix(0, d);
      j.image_pool = &ip;
      j.text_pool = &tp;
      CHECK_THROWS_AS(safeclip_loss(j), InputError);
    }
  }
}
