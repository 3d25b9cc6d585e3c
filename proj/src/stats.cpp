#include "protogap/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "protogap/error.hpp"

namespace protogap {

double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw DomainError("quantile of an empty sample");
  if (q < 0.0 || q > 1.0) throw DomainError("quantile level outside [0, 1]");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return xs[lo] + frac * (xs[hi] - xs[lo]);
}

double median(std::vector<double> xs) { return quantile(std::move(xs), 0.5); }

ConfidenceInterval bootstrap_percentile(std::size_t n, std::size_t resamples, double level, std::uint64_t seed,
                                        const std::function<double(std::span<const std::size_t>)>& statistic) {
  if (n == 0) throw DomainError("bootstrap needs at least one sample");
  if (!(level > 0.0 && level < 1.0)) throw DomainError("confidence level must lie in (0, 1)");
  if (resamples < 100) throw DomainError("bootstrap needs at least 100 resamples");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  ConfidenceInterval ci;
  ci.level = level;
  ci.point = statistic(idx);
  if (n < 2) {
    ci.lo = ci.hi = ci.point;
    ci.degenerate = true;
    return ci;
  }
  ci.resamples = resamples;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> stats(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& k : idx) k = pick(rng);
    stats[r] = statistic(idx);
  }
  const double alpha = 1.0 - level;
  ci.lo = std::min(quantile(stats, alpha / 2.0), ci.point);
  ci.hi = std::max(quantile(stats, 1.0 - alpha / 2.0), ci.point);
  return ci;
}

ConfidenceInterval bootstrap_ci(std::span<const double> samples, std::span<const double> weights,
                                std::size_t resamples, double level, std::uint64_t seed,
                                BootstrapStatistic statistic) {
  if (!weights.empty() && weights.size() != samples.size()) {
    throw DimensionError("bootstrap: one weight per sample required");
  }
  auto stat = [&](std::span<const std::size_t> idx) {
    double num = 0.0, den = 0.0;
    for (std::size_t k : idx) {
      const double w = weights.empty() ? 1.0 : weights[k];
      num += w * samples[k];
      den += w;
    }
    const double m = num / den;
    return statistic == BootstrapStatistic::exp_weighted_mean ? std::exp(m) : m;
  };
  return bootstrap_percentile(samples.size(), resamples, level, seed, stat);
}

std::vector<double> average_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s;
    while (e + 1 < n && xs[order[e + 1]] == xs[order[s]]) ++e;
    const double r = 0.5 * static_cast<double>(s + e) + 1.0;
    for (std::size_t k = s; k <= e; ++k) ranks[order[k]] = r;
    s = e + 1;
  }
  return ranks;
}

namespace {

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

/// Counts inversions of `v` by merge sort (Knight's algorithm core).
std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + lo, buf.begin() + hi, v.begin() + lo);
  return swaps;
}

std::uint64_t tied_pairs_sorted(std::span<const double> sorted) {
  std::uint64_t ties = 0;
  for (std::size_t s = 0; s < sorted.size();) {
    std::size_t e = s;
    while (e + 1 < sorted.size() && sorted[e + 1] == sorted[s]) ++e;
    const std::uint64_t run = e - s + 1;
    ties += run * (run - 1) / 2;
    s = e + 1;
  }
  return ties;
}

double kendall_tau_b(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a[x] < a[y] || (a[x] == a[y] && b[x] < b[y]);
  });
  std::vector<double> sa(n), sb(n);
  for (std::size_t k = 0; k < n; ++k) {
    sa[k] = a[order[k]];
    sb[k] = b[order[k]];
  }
  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t n1 = tied_pairs_sorted(sa);
  std::uint64_t n3 = 0;  // tied in both
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s;
    while (e + 1 < n && sa[e + 1] == sa[s] && sb[e + 1] == sb[s]) ++e;
    const std::uint64_t run = e - s + 1;
    n3 += run * (run - 1) / 2;
    s = e + 1;
  }
  std::vector<double> buf(n);
  const std::uint64_t swaps = merge_count(sb, buf, 0, n);
  const std::uint64_t n2 = tied_pairs_sorted(sb);
  const double num = static_cast<double>(n0) - n1 - n2 + n3 - 2.0 * static_cast<double>(swaps);
  const double den = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
  if (den == 0.0) return std::nan("");
  return num / den;
}

}  // namespace

double rank_correlation(std::span<const double> a, std::span<const double> b, RankKind kind) {
  if (a.size() != b.size()) throw DimensionError("rank_correlation: vectors differ in length");
  if (a.size() < 2) throw DomainError("rank_correlation needs at least two entries");
  if (kind == RankKind::kendall) return kendall_tau_b(a, b);
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

SignTestResult sign_test(std::span<const double> deltas) {
  SignTestResult r;
  for (double d : deltas) {
    if (d > 0) {
      ++r.positives;
    } else if (d < 0) {
      ++r.negatives;
    } else {
      ++r.zeros;
    }
  }
  const std::size_t n = r.positives + r.negatives;
  if (n == 0) {
    r.undefined = true;
    r.p_one_sided = r.p_two_sided = std::nan("");
    return r;
  }
  // Exact binomial tail; pmf built multiplicatively in log space.
  std::vector<double> pmf(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const double log_choose = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    pmf[k] = std::exp(log_choose - static_cast<double>(n) * std::log(2.0));
  }
  double upper = 0.0, lower = 0.0;
  for (std::size_t k = r.positives; k <= n; ++k) upper += pmf[k];
  for (std::size_t k = 0; k <= r.positives; ++k) lower += pmf[k];
  r.p_one_sided = std::min(1.0, upper);
  r.p_two_sided = std::min(1.0, 2.0 * std::min(upper, lower));
  return r;
}

}  // namespace protogap
