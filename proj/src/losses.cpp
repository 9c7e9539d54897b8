#include "safeclip/losses.hpp"

#include <cmath>

namespace safeclip {

namespace {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Row-wise softmax and per-row log-sum-exp of `logits`.
template <typename Scalar>
void row_softmax(const Mat<Scalar>& logits, Mat<Scalar>& probs, Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& lse) {
  const auto n = logits.rows();
  probs.resize(n, logits.cols());
  lse.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    auto e = (logits.row(i).array() - mx).exp();
    const Scalar sum = e.sum();
    probs.row(i) = e / sum;
    lse(i) = mx + std::log(sum);
  }
}

template <typename Scalar>
struct ClipCore {
  Scalar value;
  Mat<Scalar> grad_image;
  Mat<Scalar> grad_text;
  Scalar grad_log_temperature;
};

template <typename Scalar>
ClipCore<Scalar> clip_core(const Mat<Scalar>& image, const Mat<Scalar>& text, Scalar temperature) {
  if (image.rows() == 0) throw InputError("clip_loss on an empty batch");
  if (image.rows() != text.rows() || image.cols() != text.cols())
    throw InputError("clip_loss: image and text batches differ in shape");
  if (!(temperature > 0)) throw InputError("clip_loss: temperature must be positive");

  const auto n = image.rows();
  const Scalar inv_tau = Scalar(1) / temperature;
  // logits(j, k) = <z_j^I, z_k^T> / tau
  const Mat<Scalar> logits = (image * text.transpose()) * inv_tau;

  Mat<Scalar> p_rows, p_cols_t;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lse_rows, lse_cols;
  row_softmax<Scalar>(logits, p_rows, lse_rows);
  const Mat<Scalar> logits_t = logits.transpose();
  row_softmax<Scalar>(logits_t, p_cols_t, lse_cols);

  const Scalar scale = Scalar(1) / (Scalar(2) * static_cast<Scalar>(n));
  Scalar value = 0;
  for (Eigen::Index j = 0; j < n; ++j) value += (lse_rows(j) - logits(j, j)) + (lse_cols(j) - logits(j, j));
  value *= scale;

  // d(value)/d(logits) = scale * [(P_rows - I) + (P_cols - I)]
  Mat<Scalar> g = p_rows + p_cols_t.transpose();
  g.diagonal().array() -= Scalar(2);
  g *= scale;

  ClipCore<Scalar> out;
  out.value = value;
  out.grad_image = (g * text) * inv_tau;
  out.grad_text = (g.transpose() * image) * inv_tau;
  // logits = S * exp(-theta)  =>  d logits / d theta = -logits
  out.grad_log_temperature = -(g.array() * logits.array()).sum();
  return out;
}

}  // namespace

ClipLossOutput clip_loss(const Matrix& image_reps, const Matrix& text_reps, double temperature) {
  auto core = clip_core<double>(image_reps, text_reps, temperature);
  return {core.value, std::move(core.grad_image), std::move(core.grad_text), core.grad_log_temperature};
}

ClipLossOutputF clip_loss_f32(const Eigen::MatrixXf& image_reps, const Eigen::MatrixXf& text_reps,
                              float temperature) {
  auto core = clip_core<float>(image_reps, text_reps, temperature);
  return {core.value, std::move(core.grad_image), std::move(core.grad_text), core.grad_log_temperature};
}

UnimodalLossOutput unimodal_anchor_loss(const Matrix& anchors, const Matrix& augmented, double temperature) {
  if (augmented.rows() == 0) throw InputError("unimodal loss on an empty batch");
  if (anchors.rows() != augmented.rows() || anchors.cols() != augmented.cols())
    throw InputError("unimodal loss: anchors and augmented views differ in shape");
  if (!(temperature > 0)) throw InputError("unimodal loss: temperature must be positive");

  const auto n = augmented.rows();
  const double inv_tau = 1.0 / temperature;
  const Matrix logits = (anchors * augmented.transpose()) * inv_tau;
  Matrix probs;
  Vector lse;
  row_softmax<double>(logits, probs, lse);

  UnimodalLossOutput out;
  double value = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) value += lse(i) - logits(i, i);
  out.value = value / static_cast<double>(n);

  Matrix g = probs;
  g.diagonal().array() -= 1.0;
  g /= static_cast<double>(n);
  out.grad_augmented_reps = (g.transpose() * anchors) * inv_tau;
  out.grad_reps = (g * augmented) * inv_tau;  // w.r.t. anchors; callers decide where it flows
  out.grad_log_temperature = -(g.array() * logits.array()).sum();
  return out;
}

UnimodalLossOutput unimodal_nn_loss(const Matrix& reps, const Matrix& augmented_reps, const NNPool& pool,
                                    double temperature) {
  if (pool.empty()) throw StateError("unimodal_nn_loss: pool must be warmed before use");
  if (reps.rows() != augmented_reps.rows()) throw InputError("unimodal_nn_loss: reps and augmented views misaligned");
  auto idx = pool.nearest_indices(reps);
  auto out = unimodal_anchor_loss(pool.gather(idx), augmented_reps, temperature);
  out.grad_reps = Matrix::Zero(reps.rows(), reps.cols());
  out.anchor_indices = std::move(idx);
  return out;
}

UnimodalLossOutput unimodal_self_loss(const Matrix& reps, const Matrix& augmented_reps, double temperature) {
  return unimodal_anchor_loss(reps, augmented_reps, temperature);
}

SafeClipLossOutput safeclip_loss(const SafeClipLossInputs& in) {
  const bool has_risky = in.risky_image.rows() > 0 || in.risky_text.rows() > 0;
  const bool has_safe = in.safe_image_aug.rows() > 0;
  if (!has_risky && !has_safe) throw InputError("safeclip_loss: both safe and risky batches are empty");

  SafeClipLossOutput out;
  auto unimodal = [&](const Matrix& reps, const Matrix& aug, const NNPool* pool) {
    if (in.anchor_mode == AnchorMode::self) return unimodal_self_loss(reps, aug, in.temperature);
    if (pool == nullptr) throw StateError("safeclip_loss: nearest-neighbor pool missing");
    return unimodal_nn_loss(reps, aug, *pool, in.temperature);
  };

  out.grad_risky_image = Matrix::Zero(in.risky_image.rows(), in.risky_image.cols());
  out.grad_risky_image_aug = Matrix::Zero(in.risky_image_aug.rows(), in.risky_image_aug.cols());
  out.grad_risky_text = Matrix::Zero(in.risky_text.rows(), in.risky_text.cols());
  out.grad_risky_text_aug = Matrix::Zero(in.risky_text_aug.rows(), in.risky_text_aug.cols());
  out.grad_safe_image_aug = Matrix::Zero(in.safe_image_aug.rows(), in.safe_image_aug.cols());
  out.grad_safe_text_aug = Matrix::Zero(in.safe_text_aug.rows(), in.safe_text_aug.cols());

  if (in.risky_image.rows() > 0) {
    auto l = unimodal(in.risky_image, in.risky_image_aug, in.image_pool);
    out.image_unimodal_term = l.value;
    out.grad_risky_image = std::move(l.grad_reps);
    out.grad_risky_image_aug = std::move(l.grad_augmented_reps);
    out.grad_log_temperature += l.grad_log_temperature;
  }
  if (in.risky_text.rows() > 0) {
    auto l = unimodal(in.risky_text, in.risky_text_aug, in.text_pool);
    out.text_unimodal_term = l.value;
    out.grad_risky_text = std::move(l.grad_reps);
    out.grad_risky_text_aug = std::move(l.grad_augmented_reps);
    out.grad_log_temperature += l.grad_log_temperature;
  }
  if (has_safe) {
    auto l = clip_loss(in.safe_image_aug, in.safe_text_aug, in.temperature);
    out.clip_term = l.value;
    out.grad_safe_image_aug = std::move(l.grad_image_reps);
    out.grad_safe_text_aug = std::move(l.grad_text_reps);
    out.grad_log_temperature += l.grad_log_temperature;
  }
  out.value = out.clip_term + out.image_unimodal_term + out.text_unimodal_term;
  return out;
}

}  // namespace safeclip
