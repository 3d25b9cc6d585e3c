#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "protogap/evaluator.hpp"
#include "protogap/jacobian.hpp"
#include "protogap/metrics.hpp"
#include "protogap/selectors.hpp"

namespace protogap {

using nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

ordered_json to_json(const ConfidenceInterval& ci);
ordered_json to_json(const PairDistanceRecord& r);
ordered_json to_json(const DistanceMatrix& m);
ordered_json to_json(const GapReport& g);
ordered_json to_json(const EvalContract& c);
ordered_json to_json(const PplReport& r);
ordered_json to_json(const SelectionResult& s);
ordered_json to_json(const JacobianReport& r);
ordered_json to_json(const std::vector<StabilityRow>& rows);
ordered_json to_json(const std::vector<BudgetRow>& rows);
ordered_json to_json(const RopeCounterfactual& c);
ordered_json to_json(const SignTestResult& s);
ordered_json to_json(const BudgetLedger& ledger);

DistanceMatrix distance_matrix_from_json(const nlohmann::json& j);
PplReport ppl_report_from_json(const nlohmann::json& j);
SelectionResult selection_from_json(const nlohmann::json& j);

std::string distance_matrix_csv(const DistanceMatrix& m);
std::string gap_report_csv(const GapReport& g);
std::string jacobian_csv(const JacobianReport& r);
std::string stability_csv(const std::vector<StabilityRow>& rows);
std::string budget_csv(const std::vector<BudgetRow>& rows);

/// One plotted point.
struct PlotPoint {
  double x = 0.0;
  double y = 0.0;
  std::string series;
};

/// L x L distance grid as L series (one per row), symmetric, self-pairs 0,
/// unmeasured pairs NaN.
std::vector<PlotPoint> heatmap_plotdata(const DistanceMatrix& m);
/// d(i, i+1) for i = 0..L-2.
std::vector<PlotPoint> adjacent_profile_plotdata(const DistanceMatrix& m);
/// Per-pair gap, d_repl and d_inter against the pair's lower layer.
std::vector<PlotPoint> gap_depth_plotdata(const GapReport& g);

ordered_json plotdata_json(const std::vector<PlotPoint>& points);
std::string plotdata_csv(const std::vector<PlotPoint>& points);

enum class ReportFormat { json, csv, plotdata };

struct RunManifest {
  std::string run_id;
  std::string timestamp;  // SOURCE_DATE_EPOCH when set, else wall clock (UTC)
  std::string checkpoint_hash;
  std::vector<std::string> contract_ids;
  std::string command;
  std::vector<std::string> args;
  std::vector<std::string> outputs;
  std::string tool_version = kToolVersion;
};
ordered_json to_json(const RunManifest& m);
std::string utc_timestamp();

/// Writes `content` to `path`, creating parent directories; IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

/// Reference logits for cross-implementation parity:
/// {"sequences": [{"tokens": [...], "logits": [[...], ...]}]}.
struct GoldenSequence {
  std::vector<TokenId> tokens;
  std::vector<std::vector<float>> logits;  // one row per position
};
std::vector<GoldenSequence> load_golden(const std::filesystem::path& path);
void save_golden(const std::vector<GoldenSequence>& golden, const std::filesystem::path& path);
/// Golden file produced by this implementation for the given sequences.
std::vector<GoldenSequence> make_golden(const Checkpoint& ck, const std::vector<std::vector<TokenId>>& sequences);

struct GoldenComparison {
  std::size_t sequences = 0;
  std::size_t positions = 0;
  double max_abs_diff = 0.0;
};
GoldenComparison compare_golden(const Checkpoint& ck, const std::vector<GoldenSequence>& golden);

}  // namespace protogap
