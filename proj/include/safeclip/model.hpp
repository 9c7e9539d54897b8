#pragma once

#include "safeclip/common.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace safeclip {

using Token = std::int32_t;
using Caption = std::vector<Token>;

struct ImageShape {
  int height = 16;
  int width = 16;

  int pixels() const { return height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct ModelDims {
  ImageShape image;
  int hidden = 128;     // image encoder hidden width
  int embed_dim = 32;   // token embedding width
  int vocab_size = 64;
  int d = 32;           // shared representation dimension

  bool operator==(const ModelDims&) const = default;
};

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;
inline constexpr double kInitialTemperature = 0.07;
inline constexpr double kMomentum = 0.9;
inline constexpr double kNormFloor = 1e-8;
// Subtracted from every pixel before the first image layer.
inline constexpr double kPixelCenter = 0.5;

// Every trainable tensor of the dual encoder. Also used for gradients and
// optimizer moments, which share the parameter shapes.
struct ModelParams {
  Matrix image_hidden_w;   // hidden x pixels
  Vector image_hidden_b;   // hidden
  Matrix image_proj_w;     // d x hidden
  Vector image_proj_b;     // d
  Matrix token_embedding;  // vocab x embed_dim
  Matrix text_proj_w;      // d x embed_dim
  Vector text_proj_b;      // d
  double log_temperature = 0.0;

  static ModelParams zeros(const ModelDims& dims);

  void set_zero();
  bool all_finite() const;
  ModelParams& operator+=(const ModelParams& other);
  bool operator==(const ModelParams& other) const;

  // Visits every dense tensor (not log_temperature) in a fixed order.
  void for_each_tensor(const std::function<void(Eigen::Ref<Matrix>)>& fn);
  void for_each_tensor(const std::function<void(const Eigen::Ref<const Matrix>&)>& fn) const;
};

struct ModelState {
  ModelDims dims;
  ModelParams params;
  ModelParams moments;
  std::uint64_t step = 0;

  double temperature() const;
  bool operator==(const ModelState&) const = default;
};

// Unit-norm representations for one modality of one batch.
struct ReprBatch {
  Matrix reps;  // N x d
  std::vector<std::size_t> source_indices;
};

ModelState init_model(std::uint64_t seed, const ModelDims& dims);

// Images are rows of a N x pixels matrix with values in [0,1].
ReprBatch encode_images(const ModelState& state, const Matrix& images,
                        std::vector<std::size_t> source_indices = {});
ReprBatch encode_texts(const ModelState& state, std::span<const Caption> captions,
                       std::vector<std::size_t> source_indices = {});

// Forward caches used for backpropagation through the encoders.
struct ImageForward {
  Matrix hidden;     // N x hidden, post-tanh
  Matrix projected;  // N x d, before normalization
  Vector norms;      // N
  Matrix reps;       // N x d
};

struct TextForward {
  Matrix pooled;     // N x embed_dim
  Matrix projected;  // N x d
  Vector norms;
  Matrix reps;
};

ImageForward forward_images(const ModelParams& params, const Matrix& images);
TextForward forward_texts(const ModelParams& params, std::span<const Caption> captions,
                          int vocab_size);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(reps).
void backward_images(const ModelParams& params, const Matrix& images,
                     const ImageForward& fwd, const Matrix& grad_reps, ModelParams& grads);
void backward_texts(const ModelParams& params, std::span<const Caption> captions,
                    const TextForward& fwd, const Matrix& grad_reps, ModelParams& grads);

// SGD with momentum; clamps the temperature into [kMinTemperature, kMaxTemperature].
// Throws TrainingFault on a non-finite gradient.
void apply_gradients(ModelState& state, const ModelParams& grads, double learning_rate);

// Versioned binary checkpoint. `tag` is free text (e.g. the config hash).
void save_checkpoint(const ModelState& state, const std::filesystem::path& path,
                     const std::string& tag = {});
ModelState load_checkpoint(const std::filesystem::path& path, std::string* tag = nullptr);

}  // namespace safeclip
