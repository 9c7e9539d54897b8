#pragma once

#include "safeclip/common.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace safeclip {

struct EmOptions {
  int max_iters = 100;
  double tol = 1e-6;  // absolute log-likelihood improvement
  double variance_floor = 1e-6;
  // Posterior is 0 below the low mean and 1 above the high mean. Without it a
  // wide component also claims the far tail on the other side.
  bool monotone_tails = true;

  bool operator==(const EmOptions&) const = default;
};

// Two-component 1-D Gaussian mixture. Component 0 has the smaller mean,
// component 1 (kHi) the larger one.
struct GmmFit {
  static constexpr int kLo = 0;
  static constexpr int kHi = 1;

  std::array<double, 2> weights{0.5, 0.5};
  std::array<double, 2> means{0.0, 0.0};
  std::array<double, 2> variances{1.0, 1.0};
  std::vector<double> log_likelihood_trace;  // total log-likelihood after each M-step
  std::vector<double> posteriors;            // p_i of the larger-mean component
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;  // all inputs identical
  bool monotone_tails = false;

  // Posterior of the larger-mean component at an arbitrary point, tail-clamped
  // when monotone_tails is set.
  double posterior_hi(double x) const;
  double log_likelihood(std::span<const double> x) const;
};

// s_i = <z_i^I, z_i^T> for aligned unit-norm rows.
std::vector<double> cosine_similarities(const Matrix& image_reps, const Matrix& text_reps);

GmmFit em_fit(std::span<const double> similarities, const EmOptions& options = {});

// Safe/risky split of the corpus. The safe ratio follows
//   m = min(initial_ratio + growth_s * growth_steps, 100)
// so the schedule is an exact function of the number of updates.
struct Partition {
  std::vector<std::size_t> safe_indices;   // ascending
  std::vector<std::size_t> risky_indices;  // ascending
  std::size_t corpus_size = 0;
  double initial_ratio = 0.0;  // m0, percent
  double growth_s = 1.0;       // percent per update
  int growth_steps = 0;
  double threshold_t = 0.9;

  double safe_ratio() const;
  std::vector<bool> safe_mask() const;
};

// Number of items in the top `percent`% of n: round to nearest, at least 1 when percent > 0.
std::size_t top_count(double percent, std::size_t n);

// Indices sorted by posterior, descending; ties broken by lower index.
std::vector<std::size_t> rank_by_posterior(std::span<const double> posteriors);

// safe = {i : p_i > t}. Returns nullopt when no pair clears the threshold.
std::optional<Partition> initial_partition(const GmmFit& fit, double threshold, double growth_s = 1.0);

// m <- min(m + s, 100); safe = top-m% of pairs by the new posteriors.
Partition update_partition(const GmmFit& fit, const Partition& previous);

// Pairs whose similarities are refreshed under the fast update: the top-q% by
// the previous posteriors. Requires q >= m + s of the previous partition.
std::vector<std::size_t> select_reevaluation_set(std::span<const double> previous_posteriors,
                                                 const Partition& previous, double q_percent);

// Previous similarities with the entries at `refreshed` replaced by fresh
// cosine similarities of the given (row-aligned) representations.
std::vector<double> fast_reevaluate(std::span<const double> previous_similarities,
                                    const std::vector<std::size_t>& refreshed,
                                    const Matrix& image_reps, const Matrix& text_reps);

// CSV audit snapshot: pair_index,similarity,posterior,safe
void write_partition_csv(const std::filesystem::path& path, const Partition& partition,
                         std::span<const double> similarities, std::span<const double> posteriors,
                         const std::string& header_comment = {});

}  // namespace safeclip
