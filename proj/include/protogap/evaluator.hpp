#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"
#include "protogap/intervention.hpp"
#include "protogap/metrics.hpp"
#include "protogap/stats.hpp"

namespace protogap {

/// A pinned perplexity evaluator. Delta-PPL is only defined between two
/// reports carrying the same contract id.
struct EvalContract {
  std::string name;
  std::string corpus_id;          // empty: any corpus (the corpus hash is still recorded)
  std::size_t token_budget = 0;   // tokens taken from the start of the corpus
  std::size_t window = 0;
  std::size_t stride = 0;
  std::string precision = "f32";
  std::string positions_rule = "first-window-all+trailing-stride+final-partial";

  void validate() const;
  /// name@<12 hex digits of the hash of every field>.
  std::string id() const;
};

/// Built-in contracts: sliding-1024-512, matched-512-256, fixture-32-16.
std::optional<EvalContract> builtin_contract(const std::string& name);

/// Loads a contract from a JSON file. The file holds one contract object,
/// or {"contracts": [...]} in which case `name` selects one.
EvalContract load_contract(const std::filesystem::path& path, const std::string& name = "");

/// `spec` is a built-in name or a path to a JSON contract file.
EvalContract resolve_contract(const std::string& spec);

/// Window over tokens [begin, end) scoring target positions
/// [score_from, end); each target p is predicted from position p - 1.
struct WindowSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t score_from = 0;
  std::size_t scored() const { return end - score_from; }
};

/// Windows start at multiples of stride while they fit. The first window
/// scores positions 1..window-1, later ones their trailing stride tokens
/// (never the window's own first token). If tokens remain unscored, one
/// final window [N-window, N) scores exactly those.
std::vector<WindowSpan> plan_windows(std::size_t n_tokens, std::size_t window, std::size_t stride);

struct PplReport {
  std::string contract_id;
  std::string corpus_hash;
  double ppl = 0.0;
  double mean_nll = 0.0;
  std::size_t windows = 0;
  std::vector<double> window_nll;        // mean NLL per window
  std::vector<std::size_t> window_tokens;
  std::size_t scored_tokens = 0;
  std::size_t corpus_tokens = 0;         // tokens actually evaluated
  bool partial_window = false;           // final window added by the partial rule
  std::optional<ConfidenceInterval> ci;
  std::vector<std::string> interventions;
};

struct EvalOptions {
  std::size_t bootstrap_resamples = 0;
  double ci_level = 0.95;
  std::uint64_t seed = 42;
};

/// Hash of the token ids and sidecar metadata.
std::string corpus_hash(const TokenCorpus& corpus);

PplReport sliding_window_ppl(const Checkpoint& ck, const TokenCorpus& corpus, const EvalContract& contract,
                             std::span<const Intervention> interventions = {}, const EvalOptions& options = {});

struct InterventionEval {
  PplReport report;
  double delta_ppl_pct = 0.0;
};

/// Evaluates under `contract` and compares with `baseline`; throws
/// ContractError unless the baseline came from the same contract and corpus.
InterventionEval evaluate_intervention(const Checkpoint& ck, const TokenCorpus& corpus, const EvalContract& contract,
                                       std::span<const Intervention> interventions, const PplReport& baseline,
                                       const EvalOptions& options = {});

double delta_ppl_pct(double ppl, double baseline_ppl);

struct StabilityRow {
  std::size_t subset_size = 0;
  double spearman = 0.0;
  double kendall = 0.0;
  std::size_t top_k = 0;
  std::size_t top_k_overlap = 0;
  double max_rel_deviation = 0.0;
};

/// Re-ranks the pairs of `full` using seeded prompt subsets (drawn from
/// the per-prompt KLs already stored in the records) and compares each
/// ranking with the full-set ranking.
std::vector<StabilityRow> prompt_stability(const DistanceMatrix& full, std::span<const std::size_t> subset_sizes,
                                           std::uint64_t seed = 42, std::size_t top_k = 5);

}  // namespace protogap
