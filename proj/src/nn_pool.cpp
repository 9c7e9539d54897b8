#include "safeclip/nn_pool.hpp"

#include <limits>

namespace safeclip {

NNPool::NNPool(std::size_t capacity, int dim) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("pool capacity must be >= 1");
  if (dim < 1) throw ConfigError("pool dimension must be >= 1");
  storage_.setZero(static_cast<Eigen::Index>(capacity), dim);
}

NNPool NNPool::random(std::size_t capacity, std::uint64_t seed, int dim) {
  NNPool pool(capacity, dim);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix rows(static_cast<Eigen::Index>(capacity), dim);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    double norm = 0.0;
    do {
      for (Eigen::Index j = 0; j < dim; ++j) rows(i, j) = normal(rng);
      norm = rows.row(i).norm();
    } while (norm < 1e-12);
    rows.row(i) /= norm;
  }
  pool.push(rows);
  return pool;
}

void NNPool::push(const Matrix& batch) {
  if (batch.rows() == 0) return;
  if (batch.cols() != storage_.cols()) throw InputError("pool push dimension mismatch");
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    if (size_ < capacity_) {
      storage_.row(static_cast<Eigen::Index>(physical(size_))) = batch.row(i);
      ++size_;
    } else {
      storage_.row(static_cast<Eigen::Index>(head_)) = batch.row(i);
      head_ = (head_ + 1) % capacity_;
    }
    ++insertions_;
  }
}

std::size_t NNPool::nearest_scan(const double* query) const {
  const auto dim = storage_.cols();
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_logical = 0;
  for (std::size_t l = 0; l < size_; ++l) {
    const double* p = storage_.data() + physical(l) * static_cast<std::size_t>(dim);
    double dist = 0.0;
    for (Eigen::Index j = 0; j < dim; ++j) {
      const double diff = query[j] - p[j];
      dist += diff * diff;
    }
    if (dist < best) {  // strict: earlier (older) entry keeps ties
      best = dist;
      best_logical = l;
    }
  }
  return best_logical;
}

Neighbor NNPool::nearest(const Eigen::Ref<const Vector>& query) const {
  if (empty()) throw StateError("nearest() on an empty pool");
  if (query.size() != storage_.cols()) throw InputError("query dimension mismatch");
  const Vector q = query;
  const auto l = nearest_scan(q.data());
  return {storage_.row(static_cast<Eigen::Index>(physical(l))).transpose(), l};
}

std::vector<std::size_t> NNPool::nearest_indices(const Matrix& queries) const {
  if (empty()) throw StateError("nearest() on an empty pool");
  if (queries.cols() != storage_.cols()) throw InputError("query dimension mismatch");
  std::vector<std::size_t> out(static_cast<std::size_t>(queries.rows()));
  Vector q;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    q = queries.row(i).transpose();
    out[static_cast<std::size_t>(i)] = nearest_scan(q.data());
  }
  return out;
}

Eigen::RowVectorXd NNPool::entry(std::size_t logical_index) const {
  if (logical_index >= size_) throw InputError("pool index out of range");
  return storage_.row(static_cast<Eigen::Index>(physical(logical_index)));
}

Matrix NNPool::entries() const {
  Matrix out(static_cast<Eigen::Index>(size_), storage_.cols());
  for (std::size_t l = 0; l < size_; ++l)
    out.row(static_cast<Eigen::Index>(l)) = storage_.row(static_cast<Eigen::Index>(physical(l)));
  return out;
}

Matrix NNPool::gather(const std::vector<std::size_t>& logical) const {
  Matrix out(static_cast<Eigen::Index>(logical.size()), storage_.cols());
  for (std::size_t i = 0; i < logical.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = entry(logical[i]);
  return out;
}

}  // namespace safeclip
