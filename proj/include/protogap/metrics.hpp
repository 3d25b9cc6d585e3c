#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"
#include "protogap/intervention.hpp"
#include "protogap/model.hpp"
#include "protogap/stats.hpp"

namespace protogap {

inline constexpr double kProbabilityFloor = 1e-12;

/// KL(p || q) in nats, accumulated in double with q floored at 1e-12.
/// Both inputs must sum to 1 within 1e-4.
double kl_divergence(std::span<const float> p, std::span<const float> q);

enum class Symmetrization { max, mean, geometric, min };
double symmetrize(double kl_ij, double kl_ji, Symmetrization kind);

struct ClassifierThresholds {
  double strong = 0.05;
  double conditional = 0.10;
  void validate() const;
};

enum class PairClass { strong, conditional, non };
PairClass classify_pair(double d, const ClassifierThresholds& thresholds = {});
std::string to_string(PairClass c);

enum class Protocol { replacement, interchange };
std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& text);

enum class Positions { last, all };
std::string to_string(Positions p);

struct MeasureOptions {
  Positions positions = Positions::last;
  bool reuse_prefix = true;         // resume from cached baseline hidden states
  std::size_t bootstrap_resamples = 0;  // 0 disables per-pair CIs
  double ci_level = 0.95;
  std::uint64_t seed = 42;
};

/// Baseline next-token distributions (and optionally block-boundary
/// states) per prompt, computed once and shared by every pair of a sweep.
/// `base` interventions define the reference model (e.g. RopeOff for the
/// counterfactual); measured interventions are applied on top of them.
class BaselineCache {
 public:
  BaselineCache(const Checkpoint& ck, const PromptSet& prompts, const MeasureOptions& options = {},
                std::vector<Intervention> base = {});

  const Checkpoint& checkpoint() const { return *ck_; }
  const PromptSet& prompts() const { return *prompts_; }
  const MeasureOptions& options() const { return options_; }
  const std::vector<Intervention>& base() const { return base_; }
  const ExecutionPlan& base_plan() const { return base_plan_; }

  /// dists[prompt][row] is the reference distribution at a scored row.
  const std::vector<std::vector<std::vector<float>>>& distributions() const { return dists_; }
  bool has_hidden() const { return !hidden_.empty(); }
  const Tensor& hidden(std::size_t prompt, std::size_t slot) const { return hidden_[prompt][slot]; }

  /// Per-prompt mean KL(reference || intervened). A prompt whose forward
  /// pass or KL is non-finite yields NaN.
  std::vector<double> prompt_kls(std::span<const Intervention> interventions) const;

  /// Runs the intervened model on one prompt, resuming from the cache when
  /// the executed prefix is unchanged.
  ForwardResult run(std::size_t prompt, std::span<const Intervention> interventions) const;

 private:
  const Checkpoint* ck_;
  const PromptSet* prompts_;
  MeasureOptions options_;
  std::vector<Intervention> base_;
  ExecutionPlan base_plan_;
  std::vector<std::vector<std::vector<float>>> dists_;
  std::vector<std::vector<Tensor>> hidden_;
};

struct PairDistanceRecord {
  std::size_t i = 0;
  std::size_t j = 0;
  Protocol protocol = Protocol::replacement;
  /// Per-prompt KLs. Replacement: M_{i<-j} in kl_ij, M_{j<-i} in kl_ji.
  /// Interchange: the single swap model in kl_ij, kl_ji left empty.
  std::vector<double> per_prompt_ij;
  std::vector<double> per_prompt_ji;
  double kl_ij = 0.0;  // mean over prompts
  double kl_ji = 0.0;
  double d_max = 0.0;
  double d_mean = 0.0;
  double d_geo = 0.0;
  double d_min = 0.0;
  PairClass cls = PairClass::strong;
  std::optional<ConfidenceInterval> ci;
  bool non_finite = false;

  /// d_repl (max symmetrization) or d_interchange.
  double distance() const { return d_max; }
  std::size_t gap() const { return j > i ? j - i : i - j; }
};

PairDistanceRecord replacement_distance(const BaselineCache& cache, std::size_t i, std::size_t j,
                                        const ClassifierThresholds& thresholds = {});
PairDistanceRecord interchange_distance(const BaselineCache& cache, std::size_t i, std::size_t j,
                                        const ClassifierThresholds& thresholds = {});

PairDistanceRecord replacement_distance(const Checkpoint& ck, std::size_t i, std::size_t j, const PromptSet& prompts,
                                        const MeasureOptions& options = {});
PairDistanceRecord interchange_distance(const Checkpoint& ck, std::size_t i, std::size_t j, const PromptSet& prompts,
                                        const MeasureOptions& options = {});

/// Which layer pairs a sweep covers.
struct PairFilter {
  enum class Kind { all, max_gap, adjacent };
  Kind kind = Kind::adjacent;
  std::size_t k = 1;

  static PairFilter parse(const std::string& text);  // all | adjacent | gap:<k>
  std::string to_string() const;
  /// Pairs (i, j), i < j, in row-major order.
  std::vector<std::pair<std::size_t, std::size_t>> pairs(std::size_t n_layers) const;
};

struct SymmetrizationAgreement {
  double rho_mean = 0.0;  // Spearman of max-based vs mean-based distances
  double rho_geo = 0.0;
  double rho_min = 0.0;
};

struct DistanceMatrix {
  std::string model_id;
  Protocol protocol = Protocol::replacement;
  std::string pair_filter;
  std::string prompt_provenance;
  Positions positions = Positions::last;
  std::size_t n_layers = 0;
  ClassifierThresholds thresholds;
  std::vector<PairDistanceRecord> records;
  std::size_t strong_count = 0;
  std::size_t conditional_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> flagged;  // non-finite pairs
  std::optional<SymmetrizationAgreement> agreement;        // replacement sweeps with >= 2 finite pairs

  const PairDistanceRecord* find(std::size_t i, std::size_t j) const;
};

DistanceMatrix sweep_distances(const BaselineCache& cache, const PairFilter& filter, Protocol protocol,
                               const ClassifierThresholds& thresholds = {}, const std::string& model_id = "");

/// Mean KL over prompts for HeadReplace{i <- j, h}.
double head_swap_distance(const BaselineCache& cache, std::size_t i, std::size_t j, std::size_t head);

struct RegimeConfig {
  double divergent_cutoff = 0.5;
  double tied_lo = 0.8;
  double tied_hi = 1.25;
  double ratio_floor = 1e-6;          // d_repl below this: ratio undefined
  std::optional<double> pruning_ir;   // pruning-level I/R overrides the distance-level pooled ratio
  void validate() const;
};

enum class Regime { divergent, tied, weak_signal, indeterminate };
std::string to_string(Regime r);

struct PairGap {
  std::size_t i = 0;
  std::size_t j = 0;
  double d_repl = 0.0;
  double d_inter = 0.0;
  double gap = 0.0;
  std::optional<double> ratio;  // d_inter / d_repl, undefined below the floor
  bool finite = true;
  bool interchange_exceeds = false;  // d_inter > d_repl, reported not asserted
};

struct GapReport {
  std::vector<PairGap> pairs;
  std::size_t finite_pairs = 0;
  std::size_t undefined_ratios = 0;
  std::size_t violations = 0;
  double mean_gap = 0.0;
  double median_gap = 0.0;
  double p75_gap = 0.0;
  double max_gap = 0.0;
  double median_repl = 0.0;
  double median_inter = 0.0;
  std::optional<double> pooled_ir;
  std::string ir_level;  // "distance" or "pruning-dppl"
  Regime verdict = Regime::indeterminate;
  std::string evidence;
  RegimeConfig config;
  ClassifierThresholds thresholds;
};

GapReport protocol_gap_report(const DistanceMatrix& repl, const DistanceMatrix& inter,
                              const ClassifierThresholds& thresholds = {}, const RegimeConfig& regime = {});

/// Decision-rule recommendation text for a verdict.
std::string regime_advice(Regime r);

struct RopeCounterfactual {
  GapReport with_rope;
  GapReport without_rope;
  std::vector<double> baseline_divergence;  // per prompt KL(normal || rope-off)
  double mean_baseline_divergence = 0.0;
  std::vector<double> gap_deltas;  // gap without rope minus gap with rope, per pair
  std::vector<double> ir_with;     // per-pair I/R (NaN when undefined)
  std::vector<double> ir_without;
  SignTestResult sign;
};

RopeCounterfactual rope_counterfactual(const Checkpoint& ck, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                       const PromptSet& prompts, const MeasureOptions& options = {},
                                       const ClassifierThresholds& thresholds = {}, const RegimeConfig& regime = {});

}  // namespace protogap
