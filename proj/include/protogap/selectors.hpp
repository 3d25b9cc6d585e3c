#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"
#include "protogap/evaluator.hpp"
#include "protogap/metrics.hpp"

namespace protogap {

enum class ScoreMode { min_neighbor, min_any };

/// s(i) = min distance over i's partners (adjacent partners only in
/// min_neighbor mode). Non-finite records are skipped.
std::vector<double> layer_scores_from_pairs(const DistanceMatrix& matrix, ScoreMode mode);

struct LedgerEntry {
  std::string step;
  std::vector<std::size_t> candidate;
  double ppl = 0.0;
};

/// Append-only account of full-evaluator calls against a budget B.
class BudgetLedger {
 public:
  explicit BudgetLedger(std::size_t budget) : budget_(budget) {}

  std::size_t budget() const { return budget_; }
  std::size_t consumed() const { return entries_.size(); }
  std::size_t headroom() const { return budget_ - entries_.size(); }
  bool can_afford(std::size_t calls) const { return calls <= headroom(); }
  const std::vector<LedgerEntry>& entries() const { return entries_; }

  /// Throws SpecError when the budget is already spent.
  void record(LedgerEntry entry);

 private:
  std::size_t budget_;
  std::vector<LedgerEntry> entries_;
};

/// Perplexity after removing a set of layers (original indices).
using PplOracle = std::function<double(const std::vector<std::size_t>& removed)>;

/// Oracle backed by sliding-window perplexity under `contract`.
PplOracle make_ppl_oracle(const Checkpoint& ck, const TokenCorpus& corpus, const EvalContract& contract);

struct SelectionResult {
  std::string method;
  std::size_t n = 0;                       // requested removal count
  std::vector<std::size_t> layers;         // ascending
  std::vector<std::size_t> order;          // acceptance order
  std::vector<double> scores;              // per-layer score trace s(i), when the method has one
  std::optional<std::size_t> delta;        // spacing constraint, when declared
  std::size_t evaluator_calls = 0;
  std::optional<std::size_t> budget;
  bool shortfall = false;
  std::optional<double> ppl;
  std::optional<double> baseline_ppl;
  std::optional<double> delta_ppl_pct;
  std::string contract_id;
};

/// Ascending-score scan accepting i iff |i-k| > delta for every accepted
/// k; ties go to the lower index. NaN scores mark non-candidates.
SelectionResult greedy_select(const std::vector<double>& scores, std::size_t n, std::size_t delta,
                              const std::string& method = "greedy");

struct BiScores {
  std::vector<double> scores;          // per layer, mean of 1 - cos(in, out)
  std::size_t excluded_positions = 0;  // zero-norm input or output
};
BiScores bi_scores(const Checkpoint& ck, const PromptSet& prompts);

/// Linear CKA with the unbiased HSIC estimator; rows are samples. Needs at
/// least 4 rows. NaN when either side is degenerate.
double linear_cka(const Tensor& x, const Tensor& y);

struct CkaScores {
  std::vector<double> adjacent;    // CKA(output k, output k+1), L-1 entries
  std::vector<double> similarity;  // per layer: max adjacent CKA
  std::vector<double> removal;     // 1 - similarity; lower = more removable
  std::vector<std::size_t> flagged;  // layers whose score is undefined
};
CkaScores cka_scores(const Checkpoint& ck, const PromptSet& prompts);

enum class SlebVariant { greedy, iterative };

/// PPL-based block elimination. Each step must fit the ledger whole; a
/// step that does not fit is skipped and the result flagged as short.
SelectionResult sleb_select(std::size_t n_layers, std::size_t n, SlebVariant variant, const PplOracle& oracle,
                            BudgetLedger& ledger);

/// Uniform over Delta-respecting n-subsets of [0, L), deterministic per seed.
SelectionResult random_select(std::size_t n_layers, std::size_t n, std::size_t delta, std::uint64_t seed);

/// Number of Delta-respecting n-subsets of [0, L).
std::size_t count_spaced_sets(std::size_t n_layers, std::size_t n, std::size_t delta);

/// Beam search over removal sets: seeded from the `seed_candidates`
/// lowest-scoring layers, expanded over all layers, pruned to `width` by
/// oracle PPL. Returns the best set of every completed size.
std::vector<SelectionResult> beam_select(std::size_t n_layers, std::size_t n_max, std::size_t width,
                                         std::size_t seed_candidates, const std::vector<double>& seed_scores,
                                         const PplOracle& oracle, BudgetLedger& ledger);

struct BudgetMethod {
  std::string name;
  std::function<std::vector<std::size_t>(BudgetLedger&)> run;  // returns the removal set
};

struct BudgetRow {
  std::string method;
  std::size_t budget = 0;
  std::size_t evals_used = 0;
  std::vector<std::size_t> layers;
  double ppl = 0.0;
  double delta_ppl_pct = 0.0;
};

/// Runs every method at every budget with a fresh ledger and reports the
/// final removal set under `evaluator` (not charged to the ledger).
std::vector<BudgetRow> budget_sweep(const std::vector<BudgetMethod>& methods, const std::vector<std::size_t>& budgets,
                                    const PplOracle& evaluator);

}  // namespace protogap
