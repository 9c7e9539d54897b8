#include "safeclip/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

namespace safeclip {

namespace {

double log_normal_pdf(double x, double mean, double var) {
  const double diff = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + diff * diff / var);
}

double log_add(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Linear-interpolated percentile of sorted data, q in [0,1].
double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct ComponentLogs {
  double lo;
  double hi;
};

ComponentLogs weighted_logs(const GmmFit& g, double x) {
  return {std::log(g.weights[0]) + log_normal_pdf(x, g.means[0], g.variances[0]),
          std::log(g.weights[1]) + log_normal_pdf(x, g.means[1], g.variances[1])};
}

}  // namespace

double GmmFit::posterior_hi(double x) const {
  if (degenerate) return 0.5;
  if (monotone_tails) {
    if (x <= means[kLo]) return 0.0;
    if (x >= means[kHi]) return 1.0;
  }
  const auto l = weighted_logs(*this, x);
  return std::exp(l.hi - log_add(l.lo, l.hi));
}

double GmmFit::log_likelihood(std::span<const double> x) const {
  double total = 0.0;
  for (double v : x) {
    const auto l = weighted_logs(*this, v);
    total += log_add(l.lo, l.hi);
  }
  return total;
}

std::vector<double> cosine_similarities(const Matrix& image_reps, const Matrix& text_reps) {
  if (image_reps.rows() != text_reps.rows() || image_reps.cols() != text_reps.cols())
    throw InputError("cosine_similarities: misaligned image/text representations");
  std::vector<double> s(static_cast<std::size_t>(image_reps.rows()));
  for (Eigen::Index i = 0; i < image_reps.rows(); ++i)
    s[static_cast<std::size_t>(i)] = std::clamp(image_reps.row(i).dot(text_reps.row(i)), -1.0, 1.0);
  return s;
}

GmmFit em_fit(std::span<const double> x, const EmOptions& opt) {
  if (x.size() < 4) throw InputError("em_fit needs at least 4 data points");
  if (opt.max_iters < 1) throw ConfigError("em_fit: max_iters must be >= 1");
  for (double v : x)
    if (!std::isfinite(v)) throw InputError("em_fit: non-finite similarity");

  const auto n = x.size();
  const double nd = static_cast<double>(n);
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());

  GmmFit g;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / nd;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= nd;

  if (sorted.front() == sorted.back()) {
    g.degenerate = true;
    g.means = {sorted.front(), sorted.front()};
    g.variances = {opt.variance_floor, opt.variance_floor};
    g.posteriors.assign(n, 0.5);
    g.converged = true;
    return g;
  }

  g.means = {percentile(sorted, 0.25), percentile(sorted, 0.75)};
  g.variances = {std::max(var, opt.variance_floor), std::max(var, opt.variance_floor)};
  g.weights = {0.5, 0.5};

  std::vector<double> resp_hi(n);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iters; ++it) {
    // E-step
    for (std::size_t i = 0; i < n; ++i) {
      const auto l = weighted_logs(g, x[i]);
      resp_hi[i] = std::exp(l.hi - log_add(l.lo, l.hi));
    }
    // M-step
    double n_hi = 0.0, sum_hi = 0.0, sum_lo = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      n_hi += resp_hi[i];
      sum_hi += resp_hi[i] * x[i];
      sum_lo += (1.0 - resp_hi[i]) * x[i];
    }
    const double n_lo = nd - n_hi;
    // Keep both components alive; a collapsed weight would make log(w) = -inf.
    const double min_mass = 1e-12 * nd;
    const double eff_hi = std::max(n_hi, min_mass);
    const double eff_lo = std::max(n_lo, min_mass);
    g.means = {sum_lo / eff_lo, sum_hi / eff_hi};
    double ss_hi = 0.0, ss_lo = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dh = x[i] - g.means[1];
      const double dl = x[i] - g.means[0];
      ss_hi += resp_hi[i] * dh * dh;
      ss_lo += (1.0 - resp_hi[i]) * dl * dl;
    }
    g.variances = {std::max(ss_lo / eff_lo, opt.variance_floor), std::max(ss_hi / eff_hi, opt.variance_floor)};
    g.weights = {eff_lo / (eff_lo + eff_hi), eff_hi / (eff_lo + eff_hi)};

    const double ll = g.log_likelihood(x);
    g.log_likelihood_trace.push_back(ll);
    g.iterations = it + 1;
    if (ll - prev_ll < opt.tol) {
      g.converged = true;
      break;
    }
    prev_ll = ll;
  }

  if (g.means[0] > g.means[1]) {
    std::swap(g.means[0], g.means[1]);
    std::swap(g.variances[0], g.variances[1]);
    std::swap(g.weights[0], g.weights[1]);
  }
  g.monotone_tails = opt.monotone_tails;
  g.posteriors.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.posteriors[i] = g.posterior_hi(x[i]);
  return g;
}

double Partition::safe_ratio() const {
  return std::min(initial_ratio + growth_s * static_cast<double>(growth_steps), 100.0);
}

std::vector<bool> Partition::safe_mask() const {
  std::vector<bool> mask(corpus_size, false);
  for (auto i : safe_indices) mask[i] = true;
  return mask;
}

std::size_t top_count(double percent, std::size_t n) {
  if (percent <= 0.0) return 0;
  const double raw = std::round(percent / 100.0 * static_cast<double>(n));
  const auto count = static_cast<std::size_t>(std::max(raw, 1.0));
  return std::min(count, n);
}

std::vector<std::size_t> rank_by_posterior(std::span<const double> posteriors) {
  std::vector<std::size_t> order(posteriors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return posteriors[a] > posteriors[b]; });
  return order;
}

namespace {

Partition split_from_mask(const std::vector<bool>& safe, Partition p) {
  p.safe_indices.clear();
  p.risky_indices.clear();
  for (std::size_t i = 0; i < safe.size(); ++i) (safe[i] ? p.safe_indices : p.risky_indices).push_back(i);
  p.corpus_size = safe.size();
  return p;
}

}  // namespace

std::optional<Partition> initial_partition(const GmmFit& fit, double threshold, double growth_s) {
  const auto n = fit.posteriors.size();
  if (n == 0) throw InputError("initial_partition: fit carries no posteriors");
  std::vector<bool> safe(n);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    safe[i] = fit.posteriors[i] > threshold;
    count += safe[i] ? 1 : 0;
  }
  if (count == 0) return std::nullopt;
  Partition p;
  p.threshold_t = threshold;
  p.growth_s = growth_s;
  p.growth_steps = 0;
  p.initial_ratio = 100.0 * static_cast<double>(count) / static_cast<double>(n);
  return split_from_mask(safe, std::move(p));
}

Partition update_partition(const GmmFit& fit, const Partition& previous) {
  const auto n = fit.posteriors.size();
  if (n != previous.corpus_size) throw InputError("update_partition: corpus size changed between epochs");
  Partition next = previous;
  next.growth_steps = previous.growth_steps + 1;
  const auto count = top_count(next.safe_ratio(), n);
  const auto order = rank_by_posterior(fit.posteriors);
  std::vector<bool> safe(n, false);
  for (std::size_t k = 0; k < count; ++k) safe[order[k]] = true;
  return split_from_mask(safe, std::move(next));
}

std::vector<std::size_t> select_reevaluation_set(std::span<const double> previous_posteriors,
                                                 const Partition& previous, double q_percent) {
  const double needed = std::min(previous.safe_ratio() + previous.growth_s, 100.0);
  if (q_percent < needed || q_percent > 100.0)
    throw ConfigError("fast re-evaluation window q=" + std::to_string(q_percent) +
                      "% must lie in [m+s, 100] = [" + std::to_string(needed) + ", 100]");
  if (previous_posteriors.size() != previous.corpus_size)
    throw InputError("select_reevaluation_set: posterior count does not match the partition");
  auto order = rank_by_posterior(previous_posteriors);
  order.resize(top_count(q_percent, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<double> fast_reevaluate(std::span<const double> previous_similarities,
                                    const std::vector<std::size_t>& refreshed, const Matrix& image_reps,
                                    const Matrix& text_reps) {
  if (static_cast<std::size_t>(image_reps.rows()) != refreshed.size())
    throw InputError("fast_reevaluate: one representation row per refreshed pair expected");
  const auto fresh = cosine_similarities(image_reps, text_reps);
  std::vector<double> out(previous_similarities.begin(), previous_similarities.end());
  for (std::size_t k = 0; k < refreshed.size(); ++k) {
    if (refreshed[k] >= out.size()) throw InputError("fast_reevaluate: index out of range");
    out[refreshed[k]] = fresh[k];
  }
  return out;
}

void write_partition_csv(const std::filesystem::path& path, const Partition& partition,
                         std::span<const double> similarities, std::span<const double> posteriors,
                         const std::string& header_comment) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write partition snapshot: " + path.string());
  if (!header_comment.empty()) out << "# " << header_comment << '\n';
  out << "pair_index,similarity,posterior,safe\n";
  const auto mask = partition.safe_mask();
  out.precision(17);
  for (std::size_t i = 0; i < partition.corpus_size; ++i)
    out << i << ',' << similarities[i] << ',' << posteriors[i] << ',' << (mask[i] ? 1 : 0) << '\n';
}

}  // namespace safeclip
