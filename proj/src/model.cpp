#include "safeclip/model.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace safeclip {

namespace {

constexpr char kCheckpointMagic[9] = "SCLPCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

void fill_normal(Matrix& m, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
}

void validate_dims(const ModelDims& dims) {
  if (dims.d < 2) throw ConfigError("representation dimension d must be >= 2");
  if (dims.image.height < 1 || dims.image.width < 1) throw ConfigError("image shape must be positive");
  if (dims.hidden < 1) throw ConfigError("hidden width must be >= 1");
  if (dims.embed_dim < 1) throw ConfigError("embedding width must be >= 1");
  if (dims.vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
}

// Row-wise L2 normalization with the basis-vector fallback for tiny norms.
void normalize_rows(const Matrix& projected, Vector& norms, Matrix& reps) {
  norms = projected.rowwise().norm();
  reps.resize(projected.rows(), projected.cols());
  for (Eigen::Index i = 0; i < projected.rows(); ++i) {
    if (norms(i) < kNormFloor) {
      reps.row(i).setZero();
      reps(i, 0) = 1.0;
    } else {
      reps.row(i) = projected.row(i) / norms(i);
    }
  }
}

// d(loss)/d(projected) from d(loss)/d(reps); zero on floored rows.
Matrix normalize_backward(const Vector& norms, const Matrix& reps, const Matrix& grad_reps) {
  Matrix out(reps.rows(), reps.cols());
  for (Eigen::Index i = 0; i < reps.rows(); ++i) {
    if (norms(i) < kNormFloor) {
      out.row(i).setZero();
      continue;
    }
    const double radial = reps.row(i).dot(grad_reps.row(i));
    out.row(i) = (grad_reps.row(i) - radial * reps.row(i)) / norms(i);
  }
  return out;
}

void validate_captions(std::span<const Caption> captions, int vocab_size) {
  for (const auto& c : captions) {
    if (c.empty()) throw InputError("empty caption");
    for (Token t : c)
      if (t < 0 || t >= vocab_size) throw InputError("token id " + std::to_string(t) + " out of vocabulary");
  }
}

// Mean pooling as a bag of tokens: (token, count / length) in increasing token
// order, so duplicated or permuted captions pool to bit-identical vectors.
std::vector<std::pair<Token, double>> token_bag(const Caption& cap) {
  Caption sorted = cap;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<Token, double>> bag;
  const double len = static_cast<double>(cap.size());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    bag.emplace_back(sorted[i], static_cast<double>(j - i) / len);
    i = j;
  }
  return bag;
}

std::vector<std::size_t> default_indices(std::vector<std::size_t> given, Eigen::Index n) {
  if (!given.empty()) {
    if (static_cast<Eigen::Index>(given.size()) != n) throw InputError("source_indices size mismatch");
    return given;
  }
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

}  // namespace

ModelParams ModelParams::zeros(const ModelDims& dims) {
  ModelParams p;
  p.image_hidden_w = Matrix::Zero(dims.hidden, dims.image.pixels());
  p.image_hidden_b = Vector::Zero(dims.hidden);
  p.image_proj_w = Matrix::Zero(dims.d, dims.hidden);
  p.image_proj_b = Vector::Zero(dims.d);
  p.token_embedding = Matrix::Zero(dims.vocab_size, dims.embed_dim);
  p.text_proj_w = Matrix::Zero(dims.d, dims.embed_dim);
  p.text_proj_b = Vector::Zero(dims.d);
  p.log_temperature = 0.0;
  return p;
}

void ModelParams::set_zero() {
  for_each_tensor([](Eigen::Ref<Matrix> m) { m.setZero(); });
  log_temperature = 0.0;
}

bool ModelParams::all_finite() const {
  bool ok = std::isfinite(log_temperature);
  for_each_tensor([&](const Eigen::Ref<const Matrix>& m) { ok = ok && m.allFinite(); });
  return ok;
}

ModelParams& ModelParams::operator+=(const ModelParams& o) {
  image_hidden_w += o.image_hidden_w;
  image_hidden_b += o.image_hidden_b;
  image_proj_w += o.image_proj_w;
  image_proj_b += o.image_proj_b;
  token_embedding += o.token_embedding;
  text_proj_w += o.text_proj_w;
  text_proj_b += o.text_proj_b;
  log_temperature += o.log_temperature;
  return *this;
}

bool ModelParams::operator==(const ModelParams& o) const {
  return image_hidden_w == o.image_hidden_w && image_hidden_b == o.image_hidden_b &&
         image_proj_w == o.image_proj_w && image_proj_b == o.image_proj_b &&
         token_embedding == o.token_embedding && text_proj_w == o.text_proj_w &&
         text_proj_b == o.text_proj_b && log_temperature == o.log_temperature;
}

void ModelParams::for_each_tensor(const std::function<void(Eigen::Ref<Matrix>)>& fn) {
  fn(image_hidden_w);
  fn(image_hidden_b);
  fn(image_proj_w);
  fn(image_proj_b);
  fn(token_embedding);
  fn(text_proj_w);
  fn(text_proj_b);
}

void ModelParams::for_each_tensor(
    const std::function<void(const Eigen::Ref<const Matrix>&)>& fn) const {
  fn(image_hidden_w);
  fn(image_hidden_b);
  fn(image_proj_w);
  fn(image_proj_b);
  fn(token_embedding);
  fn(text_proj_w);
  fn(text_proj_b);
}

double ModelState::temperature() const { return std::exp(params.log_temperature); }

ModelState init_model(std::uint64_t seed, const ModelDims& dims) {
  validate_dims(dims);
  ModelState s;
  s.dims = dims;
  s.params = ModelParams::zeros(dims);
  s.moments = ModelParams::zeros(dims);
  Rng rng(seed);
  fill_normal(s.params.image_hidden_w, rng, 1.0 / std::sqrt(static_cast<double>(dims.image.pixels())));
  fill_normal(s.params.image_proj_w, rng, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
  fill_normal(s.params.token_embedding, rng, 1.0);
  fill_normal(s.params.text_proj_w, rng, 1.0 / std::sqrt(static_cast<double>(dims.embed_dim)));
  s.params.log_temperature = std::log(kInitialTemperature);
  return s;
}

ImageForward forward_images(const ModelParams& params, const Matrix& images) {
  if (images.cols() != params.image_hidden_w.cols())
    throw InputError("image batch has " + std::to_string(images.cols()) + " pixels, model expects " +
                     std::to_string(params.image_hidden_w.cols()));
  if (!images.allFinite()) throw InputError("non-finite pixel value in image batch");
  ImageForward f;
  Matrix pre = (images.array() - kPixelCenter).matrix() * params.image_hidden_w.transpose();
  pre.rowwise() += params.image_hidden_b.transpose();
  f.hidden = pre.array().tanh().matrix();
  f.projected = f.hidden * params.image_proj_w.transpose();
  f.projected.rowwise() += params.image_proj_b.transpose();
  normalize_rows(f.projected, f.norms, f.reps);
  return f;
}

TextForward forward_texts(const ModelParams& params, std::span<const Caption> captions,
                          int vocab_size) {
  validate_captions(captions, vocab_size);
  TextForward f;
  const auto n = static_cast<Eigen::Index>(captions.size());
  f.pooled = Matrix::Zero(n, params.token_embedding.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (const auto& [token, weight] : token_bag(captions[static_cast<std::size_t>(i)]))
      f.pooled.row(i) += weight * params.token_embedding.row(token);
  }
  f.projected = f.pooled * params.text_proj_w.transpose();
  f.projected.rowwise() += params.text_proj_b.transpose();
  normalize_rows(f.projected, f.norms, f.reps);
  return f;
}

void backward_images(const ModelParams& params, const Matrix& images, const ImageForward& fwd,
                     const Matrix& grad_reps, ModelParams& grads) {
  const Matrix g_proj = normalize_backward(fwd.norms, fwd.reps, grad_reps);
  grads.image_proj_w.noalias() += g_proj.transpose() * fwd.hidden;
  grads.image_proj_b += g_proj.colwise().sum().transpose();
  Matrix g_hidden = g_proj * params.image_proj_w;
  g_hidden.array() *= (1.0 - fwd.hidden.array().square());
  grads.image_hidden_w.noalias() += g_hidden.transpose() * (images.array() - kPixelCenter).matrix();
  grads.image_hidden_b += g_hidden.colwise().sum().transpose();
}

void backward_texts(const ModelParams& params, std::span<const Caption> captions,
                    const TextForward& fwd, const Matrix& grad_reps, ModelParams& grads) {
  const Matrix g_proj = normalize_backward(fwd.norms, fwd.reps, grad_reps);
  grads.text_proj_w.noalias() += g_proj.transpose() * fwd.pooled;
  grads.text_proj_b += g_proj.colwise().sum().transpose();
  const Matrix g_pooled = g_proj * params.text_proj_w;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    for (const auto& [token, weight] : token_bag(captions[i]))
      grads.token_embedding.row(token) += weight * g_pooled.row(static_cast<Eigen::Index>(i));
  }
}

ReprBatch encode_images(const ModelState& state, const Matrix& images,
                        std::vector<std::size_t> source_indices) {
  auto f = forward_images(state.params, images);
  return {std::move(f.reps), default_indices(std::move(source_indices), images.rows())};
}

ReprBatch encode_texts(const ModelState& state, std::span<const Caption> captions,
                       std::vector<std::size_t> source_indices) {
  auto f = forward_texts(state.params, captions, state.dims.vocab_size);
  return {std::move(f.reps),
          default_indices(std::move(source_indices), static_cast<Eigen::Index>(captions.size()))};
}

void apply_gradients(ModelState& state, const ModelParams& grads, double learning_rate) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be finite and non-negative");
  if (!grads.all_finite())
    throw TrainingFault("non-finite gradient at optimizer step " + std::to_string(state.step));

  auto& p = state.params;
  auto& v = state.moments;
  auto update = [&](auto& param, auto& moment, const auto& g) {
    moment = kMomentum * moment + g;
    param -= learning_rate * moment;
  };
  update(p.image_hidden_w, v.image_hidden_w, grads.image_hidden_w);
  update(p.image_hidden_b, v.image_hidden_b, grads.image_hidden_b);
  update(p.image_proj_w, v.image_proj_w, grads.image_proj_w);
  update(p.image_proj_b, v.image_proj_b, grads.image_proj_b);
  update(p.token_embedding, v.token_embedding, grads.token_embedding);
  update(p.text_proj_w, v.text_proj_w, grads.text_proj_w);
  update(p.text_proj_b, v.text_proj_b, grads.text_proj_b);

  v.log_temperature = kMomentum * v.log_temperature + grads.log_temperature;
  p.log_temperature -= learning_rate * v.log_temperature;
  p.log_temperature = std::clamp(p.log_temperature, std::log(kMinTemperature), std::log(kMaxTemperature));

  if (!p.all_finite()) throw TrainingFault("non-finite weight after optimizer step " + std::to_string(state.step));
  ++state.step;
}

namespace {

void write_params(io::Writer& w, const ModelParams& p) {
  w.matrix(p.image_hidden_w);
  w.vector(p.image_hidden_b);
  w.matrix(p.image_proj_w);
  w.vector(p.image_proj_b);
  w.matrix(p.token_embedding);
  w.matrix(p.text_proj_w);
  w.vector(p.text_proj_b);
  w.scalar(p.log_temperature);
}

ModelParams read_params(io::Reader& r) {
  ModelParams p;
  p.image_hidden_w = r.matrix();
  p.image_hidden_b = r.vector();
  p.image_proj_w = r.matrix();
  p.image_proj_b = r.vector();
  p.token_embedding = r.matrix();
  p.text_proj_w = r.matrix();
  p.text_proj_b = r.vector();
  p.log_temperature = r.scalar<double>();
  return p;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path, const std::string& tag) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open checkpoint for writing: " + path.string());
  io::Writer w(out);
  w.magic(kCheckpointMagic);
  w.scalar(kCheckpointVersion);
  w.str(tag);
  const auto& d = state.dims;
  for (int v : {d.image.height, d.image.width, d.hidden, d.embed_dim, d.vocab_size, d.d})
    w.scalar<std::int32_t>(v);
  w.scalar<std::uint64_t>(state.step);
  write_params(w, state.params);
  write_params(w, state.moments);
  if (!out) throw InputError("failed writing checkpoint: " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path, std::string* tag) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path.string());
  io::Reader r(in);
  r.expect_magic(kCheckpointMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  auto t = r.str();
  if (tag) *tag = std::move(t);
  ModelState s;
  s.dims.image.height = r.scalar<std::int32_t>();
  s.dims.image.width = r.scalar<std::int32_t>();
  s.dims.hidden = r.scalar<std::int32_t>();
  s.dims.embed_dim = r.scalar<std::int32_t>();
  s.dims.vocab_size = r.scalar<std::int32_t>();
  s.dims.d = r.scalar<std::int32_t>();
  s.step = r.scalar<std::uint64_t>();
  s.params = read_params(r);
  s.moments = read_params(r);
  return s;
}

}  // namespace safeclip
