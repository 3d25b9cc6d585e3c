#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace protogap {

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
  double point = 0.0;
  std::size_t resamples = 0;
  double level = 0.95;
  bool degenerate = false;  // fewer than two samples: lo == hi == point
};

/// Percentile bootstrap over `n` resampling units. `statistic` receives
/// the drawn indices (with replacement). The interval is widened to
/// contain the full-sample statistic. Deterministic per seed.
ConfidenceInterval bootstrap_percentile(std::size_t n, std::size_t resamples, double level, std::uint64_t seed,
                                        const std::function<double(std::span<const std::size_t>)>& statistic);

enum class BootstrapStatistic {
  weighted_mean,      // e.g. mean KL over prompts
  exp_weighted_mean,  // perplexity from per-window mean NLLs
};

/// Bootstrap CI of a weighted mean (or its exponential) of per-unit
/// samples. Empty `weights` means unit weights.
ConfidenceInterval bootstrap_ci(std::span<const double> samples, std::span<const double> weights,
                                std::size_t resamples, double level, std::uint64_t seed,
                                BootstrapStatistic statistic = BootstrapStatistic::weighted_mean);

enum class RankKind { spearman, kendall };

/// 1-based ranks, ties get the average of the ranks they span.
std::vector<double> average_ranks(std::span<const double> xs);

/// Spearman rho (Pearson on average ranks) or Kendall tau-b. NaN when one
/// side is constant.
double rank_correlation(std::span<const double> a, std::span<const double> b, RankKind kind);

struct SignTestResult {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t zeros = 0;    // dropped before testing
  double p_one_sided = 1.0; // P(X >= positives), X ~ Binomial(n, 1/2)
  double p_two_sided = 1.0;
  bool undefined = false;   // every delta was zero
};

SignTestResult sign_test(std::span<const double> deltas);

/// Linear-interpolation quantile (q in [0,1]) of a nonempty sample.
double quantile(std::vector<double> xs, double q);
double median(std::vector<double> xs);

}  // namespace protogap
