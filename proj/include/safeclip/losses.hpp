#pragma once

#include "safeclip/common.hpp"
#include "safeclip/nn_pool.hpp"

#include <vector>

namespace safeclip {

// Symmetric image/text InfoNCE over a batch of N matched pairs.
struct ClipLossOutput {
  double value = 0.0;
  Matrix grad_image_reps;  // N x d
  Matrix grad_text_reps;   // N x d
  double grad_log_temperature = 0.0;
};

ClipLossOutput clip_loss(const Matrix& image_reps, const Matrix& text_reps, double temperature);

// Single-precision evaluation of the same objective. Intended for fast
// screening; agrees with the double path to ~1e-3 relative.
struct ClipLossOutputF {
  float value = 0.0f;
  Eigen::MatrixXf grad_image_reps;
  Eigen::MatrixXf grad_text_reps;
  float grad_log_temperature = 0.0f;
};

ClipLossOutputF clip_loss_f32(const Eigen::MatrixXf& image_reps, const Eigen::MatrixXf& text_reps,
                              float temperature);

// Where the unimodal loss takes its anchor for row i.
enum class AnchorMode {
  nearest_pool,  // NN(z_i, pool); a hard, non-differentiable selection
  self,          // z_i itself; gradient flows into `reps`
};

struct UnimodalLossOutput {
  double value = 0.0;
  Matrix grad_reps;            // zero in nearest_pool mode
  Matrix grad_augmented_reps;  // N x d
  double grad_log_temperature = 0.0;
  std::vector<std::size_t> anchor_indices;  // pool positions (nearest_pool mode)
};

// Batch mean over i of
//   -log exp(<a_i, z_i^+>/tau) / sum_k exp(<a_i, z_k^+>/tau),
// with k running over the whole batch including i.
UnimodalLossOutput unimodal_nn_loss(const Matrix& reps, const Matrix& augmented_reps,
                                    const NNPool& pool, double temperature);
UnimodalLossOutput unimodal_self_loss(const Matrix& reps, const Matrix& augmented_reps,
                                      double temperature);

// Loss on explicit anchors; the two entry points above reduce to this.
UnimodalLossOutput unimodal_anchor_loss(const Matrix& anchors, const Matrix& augmented_reps,
                                        double temperature);

struct SafeClipLossInputs {
  Matrix risky_image;
  Matrix risky_image_aug;
  Matrix risky_text;
  Matrix risky_text_aug;
  const NNPool* image_pool = nullptr;
  const NNPool* text_pool = nullptr;
  Matrix safe_image_aug;
  Matrix safe_text_aug;
  double temperature = 0.07;
  AnchorMode anchor_mode = AnchorMode::nearest_pool;
};

struct SafeClipLossOutput {
  double value = 0.0;
  double clip_term = 0.0;
  double image_unimodal_term = 0.0;
  double text_unimodal_term = 0.0;
  Matrix grad_risky_image;
  Matrix grad_risky_image_aug;
  Matrix grad_risky_text;
  Matrix grad_risky_text_aug;
  Matrix grad_safe_image_aug;
  Matrix grad_safe_text_aug;
  double grad_log_temperature = 0.0;
};

// Unimodal terms on the risky images and texts plus the CLIP term on the
// augmented safe pairs. An empty side contributes zero; both empty is an error.
SafeClipLossOutput safeclip_loss(const SafeClipLossInputs& in);

}  // namespace safeclip
