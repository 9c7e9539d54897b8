#pragma once

#include "safeclip/common.hpp"

#include <cstdint>
#include <vector>

namespace safeclip {

inline constexpr std::size_t kDefaultPoolCapacity = 4096;

struct Neighbor {
  Vector vector;
  std::size_t index = 0;  // position in oldest-first order
};

// Fixed-capacity FIFO of unit vectors with an exact nearest-neighbor query.
// Backed by a ring buffer; logical index 0 is always the oldest entry.
class NNPool {
 public:
  NNPool(std::size_t capacity, int dim);

  // A pool pre-filled with `capacity` random unit vectors.
  static NNPool random(std::size_t capacity, std::uint64_t seed, int dim);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  int dim() const { return static_cast<int>(storage_.cols()); }
  std::uint64_t insertion_count() const { return insertions_; }

  // Appends rows in order, evicting the oldest entries beyond capacity.
  void push(const Matrix& batch);

  // argmin_p ||query - p||_2 over the entries; ties go to the oldest entry.
  Neighbor nearest(const Eigen::Ref<const Vector>& query) const;
  std::vector<std::size_t> nearest_indices(const Matrix& queries) const;

  Eigen::RowVectorXd entry(std::size_t logical_index) const;
  Matrix entries() const;                                   // oldest first
  Matrix gather(const std::vector<std::size_t>& logical) const;

 private:
  std::size_t physical(std::size_t logical) const { return (head_ + logical) % capacity_; }
  std::size_t nearest_scan(const double* query) const;

  std::size_t capacity_;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> storage_;  // capacity x dim
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  std::uint64_t insertions_ = 0;
};

}  // namespace safeclip
