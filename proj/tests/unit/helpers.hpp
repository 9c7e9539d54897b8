#pragma once

#include "safeclip/common.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testutil {

using safeclip::Matrix;

inline Matrix random_unit_rows(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = g(rng);
    m.row(i).normalize();
  }
  return m;
}

// Central difference of f with respect to every entry of x.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  Matrix xp = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double v = xp(i, j);
      xp(i, j) = v + h;
      const double fp = f(xp);
      xp(i, j) = v - h;
      const double fm = f(xp);
      xp(i, j) = v;
      g(i, j) = (fp - fm) / (2 * h);
    }
  }
  return g;
}

// max |a-b| / max(1, max|b|): relative to the gradient scale, absolute near zero.
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
  const double scale = std::max(1.0, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("safeclip_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
