#include "protogap/selectors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "protogap/error.hpp"
#include "protogap/model.hpp"
#include "protogap/parallel.hpp"

namespace protogap {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Orders layer indices by ascending value, NaN last, ties to the lower index.
std::vector<std::size_t> ascending_order(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto key = [&](std::size_t k) { return std::isnan(v[k]) ? std::numeric_limits<double>::infinity() : v[k]; };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  return idx;
}

std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

/// Evaluates candidates concurrently, then logs them in candidate order.
std::vector<double> evaluate_step(const std::string& step, const std::vector<std::vector<std::size_t>>& candidates,
                                  const PplOracle& oracle, BudgetLedger& ledger) {
  std::vector<double> ppl(candidates.size());
  parallel_for(candidates.size(), [&](std::size_t k) { ppl[k] = oracle(candidates[k]); });
  for (std::size_t k = 0; k < candidates.size(); ++k) ledger.record({step, candidates[k], ppl[k]});
  return ppl;
}

}  // namespace

std::vector<double> layer_scores_from_pairs(const DistanceMatrix& m, ScoreMode mode) {
  const std::size_t L = m.n_layers;
  std::vector<double> s(L, std::numeric_limits<double>::infinity());
  std::vector<bool> seen(L, false);
  for (const auto& r : m.records) {
    if (r.non_finite) continue;
    if (r.i >= L || r.j >= L) throw SpecError("distance record references a layer outside the matrix");
    if (r.i == r.j) continue;
    if (mode == ScoreMode::min_neighbor && r.gap() != 1) continue;
    const double d = r.distance();
    for (std::size_t k : {r.i, r.j}) {
      s[k] = std::min(s[k], d);
      seen[k] = true;
    }
  }
  for (std::size_t k = 0; k < L; ++k) {
    if (!seen[k]) {
      throw SpecError("layer " + std::to_string(k) + " has no " +
                      (mode == ScoreMode::min_neighbor ? "adjacent " : "") + "pair with a finite distance");
    }
  }
  return s;
}

void BudgetLedger::record(LedgerEntry entry) {
  if (entries_.size() >= budget_) throw SpecError("evaluator budget of " + std::to_string(budget_) + " calls exhausted");
  entries_.push_back(std::move(entry));
}

PplOracle make_ppl_oracle(const Checkpoint& ck, const TokenCorpus& corpus, const EvalContract& contract) {
  return [&ck, &corpus, contract](const std::vector<std::size_t>& removed) {
    std::vector<Intervention> iv;
    if (!removed.empty()) iv.push_back(Delete{removed});
    return sliding_window_ppl(ck, corpus, contract, iv).ppl;
  };
}

SelectionResult greedy_select(const std::vector<double>& scores, std::size_t n, std::size_t delta,
                              const std::string& method) {
  SelectionResult r;
  r.method = method;
  r.n = n;
  r.scores = scores;
  r.delta = delta;
  for (std::size_t i : ascending_order(scores)) {
    if (r.order.size() == n || std::isnan(scores[i])) break;
    const bool spaced = std::all_of(r.order.begin(), r.order.end(), [&](std::size_t k) {
      return (i > k ? i - k : k - i) > delta;
    });
    if (spaced) r.order.push_back(i);
  }
  r.layers = sorted(r.order);
  r.shortfall = r.order.size() < n;
  return r;
}

BiScores bi_scores(const Checkpoint& ck, const PromptSet& prompts) {
  prompts.validate();
  const std::size_t L = ck.n_layers();
  const std::size_t d = ck.config.d_model;
  std::vector<std::vector<double>> sums(prompts.size(), std::vector<double>(L, 0.0));
  std::vector<std::vector<std::size_t>> counts(prompts.size(), std::vector<std::size_t>(L, 0));
  std::vector<std::size_t> excluded(prompts.size(), 0);
  parallel_for(prompts.size(), [&](std::size_t p) {
    ForwardOptions fo;
    fo.capture = true;
    fo.rows = OutputRows::last;
    const ForwardResult r = forward(ck, prompts.prompts[p], {}, fo);
    for (std::size_t k = 0; k < L; ++k) {
      const Tensor& in = r.hidden[k];
      const Tensor& out = r.hidden[k + 1];
      for (std::size_t t = 0; t < in.dim(0); ++t) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double a = in.at(t, c), b = out.at(t, c);
          dot += a * b;
          na += a * a;
          nb += b * b;
        }
        if (na == 0.0 || nb == 0.0) {
          ++excluded[p];
          continue;
        }
        sums[p][k] += 1.0 - dot / std::sqrt(na * nb);
        ++counts[p][k];
      }
    }
  });
  BiScores out;
  out.scores.assign(L, 0.0);
  std::vector<std::size_t> total(L, 0);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    out.excluded_positions += excluded[p];
    for (std::size_t k = 0; k < L; ++k) {
      out.scores[k] += sums[p][k];
      total[k] += counts[p][k];
    }
  }
  for (std::size_t k = 0; k < L; ++k) out.scores[k] = total[k] ? out.scores[k] / total[k] : kNaN;
  return out;
}

namespace {

/// Unbiased HSIC of linear kernels, computed from features without Gram
/// matrices.
double hsic_unbiased(const Tensor& x, const Tensor& y) {
  const std::size_t n = x.dim(0), dx = x.dim(1), dy = y.dim(1);
  std::vector<double> xy(dx * dy, 0.0), sx(dx, 0.0), sy(dy, 0.0), nx(n), ny(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = x.row(i);
    const auto yi = y.row(i);
    double a = 0.0, b = 0.0;
    for (std::size_t p = 0; p < dx; ++p) {
      a += static_cast<double>(xi[p]) * xi[p];
      sx[p] += xi[p];
      for (std::size_t q = 0; q < dy; ++q) xy[p * dy + q] += static_cast<double>(xi[p]) * yi[q];
    }
    for (std::size_t q = 0; q < dy; ++q) {
      b += static_cast<double>(yi[q]) * yi[q];
      sy[q] += yi[q];
    }
    nx[i] = a;
    ny[i] = b;
  }
  double trace = 0.0, sumx = 0.0, sumy = 0.0, cross = 0.0;
  for (double v : xy) trace += v * v;
  for (double v : sx) sumx += v * v;
  for (double v : sy) sumy += v * v;
  for (std::size_t i = 0; i < n; ++i) {
    trace -= nx[i] * ny[i];
    sumx -= nx[i];
    sumy -= ny[i];
    const auto xi = x.row(i);
    const auto yi = y.row(i);
    double kx = -nx[i], ky = -ny[i];
    for (std::size_t p = 0; p < dx; ++p) kx += xi[p] * sx[p];
    for (std::size_t q = 0; q < dy; ++q) ky += yi[q] * sy[q];
    cross += kx * ky;
  }
  const double m = static_cast<double>(n);
  return (trace + sumx * sumy / ((m - 1) * (m - 2)) - 2.0 / (m - 2) * cross) / (m * (m - 3));
}

double mean_sq_norm(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += static_cast<double>(v) * v;
  return s / static_cast<double>(x.dim(0));
}

}  // namespace

double linear_cka(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) {
    throw DimensionError("linear_cka needs two matrices with the same number of rows");
  }
  if (x.dim(0) < 4) throw DomainError("linear_cka needs at least 4 samples");
  const double kxx = hsic_unbiased(x, x);
  const double kyy = hsic_unbiased(y, y);
  const double sx = mean_sq_norm(x), sy = mean_sq_norm(y);
  if (!(kxx > 1e-12 * sx * sx) || !(kyy > 1e-12 * sy * sy)) return kNaN;
  return hsic_unbiased(x, y) / std::sqrt(kxx * kyy);
}

CkaScores cka_scores(const Checkpoint& ck, const PromptSet& prompts) {
  prompts.validate();
  if (prompts.size() < 2) throw SpecError("CKA scoring needs at least two prompts");
  const std::size_t L = ck.n_layers();
  const std::size_t d = ck.config.d_model;
  std::size_t rows = 0;
  std::vector<std::size_t> offset;
  for (const auto& p : prompts.prompts) {
    offset.push_back(rows);
    rows += p.size();
  }
  std::vector<Tensor> outputs(L, Tensor({rows, d}));
  parallel_for(prompts.size(), [&](std::size_t p) {
    ForwardOptions fo;
    fo.capture = true;
    fo.rows = OutputRows::last;
    const ForwardResult r = forward(ck, prompts.prompts[p], {}, fo);
    for (std::size_t k = 0; k < L; ++k) {
      const auto& src = r.hidden[k + 1].data();
      std::copy(src.begin(), src.end(), outputs[k].data().begin() + offset[p] * d);
    }
  });

  CkaScores out;
  out.adjacent.assign(L > 0 ? L - 1 : 0, kNaN);
  parallel_for(out.adjacent.size(), [&](std::size_t k) { out.adjacent[k] = linear_cka(outputs[k], outputs[k + 1]); });
  out.similarity.assign(L, kNaN);
  for (std::size_t k = 0; k < L; ++k) {
    double best = kNaN;
    for (std::size_t a : {k - 1, k}) {
      if (a >= out.adjacent.size() || std::isnan(out.adjacent[a])) continue;
      best = std::isnan(best) ? out.adjacent[a] : std::max(best, out.adjacent[a]);
    }
    out.similarity[k] = best;
    if (std::isnan(best)) out.flagged.push_back(k);
  }
  out.removal.resize(L);
  for (std::size_t k = 0; k < L; ++k) out.removal[k] = 1.0 - out.similarity[k];
  return out;
}

SelectionResult sleb_select(std::size_t L, std::size_t n, SlebVariant variant, const PplOracle& oracle,
                            BudgetLedger& ledger) {
  SelectionResult r;
  r.method = variant == SlebVariant::greedy ? "sleb-greedy" : "sleb-iterative";
  r.n = n;
  r.budget = ledger.budget();
  const std::size_t start = ledger.consumed();
  if (n > L) throw SpecError("cannot remove " + std::to_string(n) + " of " + std::to_string(L) + " layers");

  if (variant == SlebVariant::greedy) {
    if (n > 0) {
      if (!ledger.can_afford(L)) {
        r.shortfall = true;
      } else {
        std::vector<std::vector<std::size_t>> cands;
        for (std::size_t i = 0; i < L; ++i) cands.push_back({i});
        r.scores = evaluate_step("sleb-greedy score", cands, oracle, ledger);
        const auto order = ascending_order(r.scores);
        r.order.assign(order.begin(), order.begin() + n);
        if (n == 1) r.ppl = r.scores[r.order[0]];
      }
    }
  } else {
    std::vector<std::size_t> chosen;
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<std::vector<std::size_t>> cands;
      std::vector<std::size_t> layer_of;
      for (std::size_t i = 0; i < L; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
        auto c = chosen;
        c.push_back(i);
        cands.push_back(sorted(c));
        layer_of.push_back(i);
      }
      if (!ledger.can_afford(cands.size())) {
        r.shortfall = true;
        break;
      }
      const auto ppl = evaluate_step("sleb-iterative step " + std::to_string(t + 1), cands, oracle, ledger);
      if (t == 0) r.scores = ppl;
      const std::size_t best = ascending_order(ppl)[0];
      chosen.push_back(layer_of[best]);
      r.ppl = ppl[best];
    }
    r.order = chosen;
  }
  r.layers = sorted(r.order);
  r.evaluator_calls = ledger.consumed() - start;
  if (r.order.size() < n) r.shortfall = true;
  return r;
}

std::size_t count_spaced_sets(std::size_t L, std::size_t n, std::size_t delta) {
  if (n == 0) return 1;
  const std::size_t need = (n - 1) * delta + n;
  if (need > L) return 0;
  const std::size_t m = L - (n - 1) * delta;  // choose n from m
  double c = 1.0;
  for (std::size_t k = 1; k <= n; ++k) c = c * static_cast<double>(m - n + k) / static_cast<double>(k);
  return static_cast<std::size_t>(std::llround(c));
}

SelectionResult random_select(std::size_t L, std::size_t n, std::size_t delta, std::uint64_t seed) {
  if (count_spaced_sets(L, n, delta) == 0) {
    throw SpecError("no set of " + std::to_string(n) + " layers with spacing > " + std::to_string(delta) +
                    " exists among " + std::to_string(L));
  }
  SelectionResult r;
  r.method = "random";
  r.n = n;
  r.delta = delta;
  if (n == 0) return r;
  // Uniform n-subset of [0, m) mapped by b_k + k*delta onto the spaced sets
  // (a bijection), so every valid set has probability 1 / C(m, n).
  const std::size_t m = L - (n - 1) * delta;
  std::vector<std::size_t> pool(m);
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, m - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  std::vector<std::size_t> b(pool.begin(), pool.begin() + n);
  std::sort(b.begin(), b.end());
  for (std::size_t k = 0; k < n; ++k) r.order.push_back(b[k] + k * delta);
  r.layers = r.order;
  return r;
}

std::vector<SelectionResult> beam_select(std::size_t L, std::size_t n_max, std::size_t width,
                                         std::size_t seed_candidates, const std::vector<double>& seed_scores,
                                         const PplOracle& oracle, BudgetLedger& ledger) {
  if (width == 0) throw SpecError("beam width must be at least 1");
  if (seed_candidates == 0) throw SpecError("beam needs at least one seed candidate");
  if (seed_scores.size() != L) throw DimensionError("beam seed scores need one entry per layer");
  n_max = std::min(n_max, L);
  const std::size_t start = ledger.consumed();
  std::vector<SelectionResult> results;
  if (n_max == 0) return results;

  using Scored = std::pair<double, std::vector<std::size_t>>;
  auto prune = [&](std::vector<Scored> scored) {
    std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
      return a.first < b.first || (a.first == b.first && a.second < b.second);
    });
    if (scored.size() > width) scored.resize(width);
    return scored;
  };
  auto emit = [&](const std::vector<Scored>& beam, std::size_t size) {
    SelectionResult r;
    r.method = "interchange-beam";
    r.n = size;
    r.layers = beam.front().second;
    r.order = r.layers;
    r.scores = seed_scores;
    r.ppl = beam.front().first;
    r.budget = ledger.budget();
    r.evaluator_calls = ledger.consumed() - start;
    results.push_back(r);
  };

  const auto order = ascending_order(seed_scores);
  std::vector<std::vector<std::size_t>> cands;
  for (std::size_t k = 0; k < std::min(seed_candidates, L); ++k) cands.push_back({order[k]});
  if (!ledger.can_afford(cands.size())) return results;
  auto ppl = evaluate_step("beam seed", cands, oracle, ledger);
  std::vector<Scored> beam;
  for (std::size_t k = 0; k < cands.size(); ++k) beam.emplace_back(ppl[k], cands[k]);
  beam = prune(std::move(beam));
  emit(beam, 1);

  for (std::size_t size = 2; size <= n_max; ++size) {
    std::set<std::vector<std::size_t>> expansions;
    for (const auto& [p, set] : beam) {
      for (std::size_t l = 0; l < L; ++l) {
        if (std::binary_search(set.begin(), set.end(), l)) continue;
        auto c = set;
        c.insert(std::upper_bound(c.begin(), c.end(), l), l);
        expansions.insert(c);
      }
    }
    cands.assign(expansions.begin(), expansions.end());
    if (cands.empty() || !ledger.can_afford(cands.size())) break;
    ppl = evaluate_step("beam size " + std::to_string(size), cands, oracle, ledger);
    std::vector<Scored> next;
    for (std::size_t k = 0; k < cands.size(); ++k) next.emplace_back(ppl[k], cands[k]);
    beam = prune(std::move(next));
    emit(beam, size);
  }
  return results;
}

std::vector<BudgetRow> budget_sweep(const std::vector<BudgetMethod>& methods, const std::vector<std::size_t>& budgets,
                                    const PplOracle& evaluator) {
  const double base = evaluator({});
  std::vector<BudgetRow> rows;
  for (const auto& m : methods) {
    for (std::size_t b : budgets) {
      BudgetLedger ledger(b);
      BudgetRow row;
      row.method = m.name;
      row.budget = b;
      row.layers = sorted(m.run(ledger));
      row.evals_used = ledger.consumed();
      row.ppl = row.layers.empty() ? base : evaluator(row.layers);
      row.delta_ppl_pct = delta_ppl_pct(row.ppl, base);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace protogap
