#include "protogap/report.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>

#include "protogap/error.hpp"
#include "protogap/model.hpp"

namespace protogap {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double num(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

ordered_json opt_num(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::string csv_num(double x) {
  if (std::isnan(x)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::string join_layers(const std::vector<std::size_t>& v, char sep = ' ') {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (k) s += sep;
    s += std::to_string(v[k]);
  }
  return s;
}

PairClass parse_class(const std::string& s) {
  if (s == "strong") return PairClass::strong;
  if (s == "conditional") return PairClass::conditional;
  if (s == "non") return PairClass::non;
  throw ParseError("unknown pair class '" + s + "'");
}

ConfidenceInterval ci_from_json(const nlohmann::json& j) {
  ConfidenceInterval ci;
  ci.lo = num(j.at("lo"));
  ci.hi = num(j.at("hi"));
  ci.point = num(j.at("point"));
  ci.resamples = j.at("resamples").get<std::size_t>();
  ci.level = j.at("level").get<double>();
  ci.degenerate = j.value("degenerate", false);
  return ci;
}

}  // namespace

ordered_json to_json(const ConfidenceInterval& ci) {
  ordered_json j;
  j["lo"] = ci.lo;
  j["hi"] = ci.hi;
  j["point"] = ci.point;
  j["resamples"] = ci.resamples;
  j["level"] = ci.level;
  j["degenerate"] = ci.degenerate;
  return j;
}

ordered_json to_json(const PairDistanceRecord& r) {
  ordered_json j;
  j["i"] = r.i;
  j["j"] = r.j;
  j["gap"] = r.gap();
  j["kl_ij"] = r.kl_ij;
  j["kl_ji"] = r.kl_ji;
  j["d_max"] = r.d_max;
  j["d_mean"] = r.d_mean;
  j["d_geo"] = r.d_geo;
  j["d_min"] = r.d_min;
  j["class"] = to_string(r.cls);
  j["ci"] = r.ci ? to_json(*r.ci) : ordered_json(nullptr);
  j["non_finite"] = r.non_finite;
  j["per_prompt_ij"] = r.per_prompt_ij;
  j["per_prompt_ji"] = r.per_prompt_ji;
  return j;
}

ordered_json to_json(const DistanceMatrix& m) {
  ordered_json j;
  j["model_id"] = m.model_id;
  j["protocol"] = to_string(m.protocol);
  j["pair_filter"] = m.pair_filter;
  j["prompt_provenance"] = m.prompt_provenance;
  j["positions"] = to_string(m.positions);
  j["n_layers"] = m.n_layers;
  j["thresholds"] = {{"strong", m.thresholds.strong}, {"conditional", m.thresholds.conditional}};
  j["records"] = ordered_json::array();
  for (const auto& r : m.records) j["records"].push_back(to_json(r));
  j["strong_count"] = m.strong_count;
  j["conditional_count"] = m.conditional_count;
  j["flagged"] = ordered_json::array();
  for (const auto& [a, b] : m.flagged) j["flagged"].push_back({a, b});
  if (m.agreement) {
    j["symmetrization_agreement"] = {{"spearman_max_vs_mean", m.agreement->rho_mean},
                                     {"spearman_max_vs_geometric", m.agreement->rho_geo},
                                     {"spearman_max_vs_min", m.agreement->rho_min}};
  } else {
    j["symmetrization_agreement"] = nullptr;
  }
  return j;
}

DistanceMatrix distance_matrix_from_json(const nlohmann::json& j) {
  DistanceMatrix m;
  try {
    m.model_id = j.at("model_id").get<std::string>();
    m.protocol = parse_protocol(j.at("protocol").get<std::string>());
    m.pair_filter = j.at("pair_filter").get<std::string>();
    m.prompt_provenance = j.at("prompt_provenance").get<std::string>();
    m.positions = j.at("positions").get<std::string>() == "all" ? Positions::all : Positions::last;
    m.n_layers = j.at("n_layers").get<std::size_t>();
    m.thresholds.strong = j.at("thresholds").at("strong").get<double>();
    m.thresholds.conditional = j.at("thresholds").at("conditional").get<double>();
    for (const auto& jr : j.at("records")) {
      PairDistanceRecord r;
      r.i = jr.at("i").get<std::size_t>();
      r.j = jr.at("j").get<std::size_t>();
      r.protocol = m.protocol;
      r.kl_ij = num(jr.at("kl_ij"));
      r.kl_ji = num(jr.at("kl_ji"));
      r.d_max = num(jr.at("d_max"));
      r.d_mean = num(jr.at("d_mean"));
      r.d_geo = num(jr.at("d_geo"));
      r.d_min = num(jr.at("d_min"));
      r.cls = parse_class(jr.at("class").get<std::string>());
      if (!jr.at("ci").is_null()) r.ci = ci_from_json(jr["ci"]);
      r.non_finite = jr.value("non_finite", false);
      for (const auto& x : jr.value("per_prompt_ij", nlohmann::json::array())) r.per_prompt_ij.push_back(num(x));
      for (const auto& x : jr.value("per_prompt_ji", nlohmann::json::array())) r.per_prompt_ji.push_back(num(x));
      m.records.push_back(std::move(r));
    }
    m.strong_count = j.at("strong_count").get<std::size_t>();
    m.conditional_count = j.at("conditional_count").get<std::size_t>();
    for (const auto& f : j.at("flagged")) m.flagged.emplace_back(f.at(0).get<std::size_t>(), f.at(1).get<std::size_t>());
    const auto& a = j.at("symmetrization_agreement");
    if (!a.is_null()) {
      m.agreement = SymmetrizationAgreement{num(a.at("spearman_max_vs_mean")), num(a.at("spearman_max_vs_geometric")),
                                            num(a.at("spearman_max_vs_min"))};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("distance matrix JSON: ") + e.what());
  }
  return m;
}

ordered_json to_json(const GapReport& g) {
  ordered_json j;
  j["verdict"] = to_string(g.verdict);
  j["evidence"] = g.evidence;
  j["advice"] = regime_advice(g.verdict);
  j["ir"] = opt_num(g.pooled_ir);
  j["ir_level"] = g.ir_level;
  j["finite_pairs"] = g.finite_pairs;
  j["undefined_ratios"] = g.undefined_ratios;
  j["interchange_exceeds_replacement"] = g.violations;
  j["gap_mean"] = g.mean_gap;
  j["gap_median"] = g.median_gap;
  j["gap_p75"] = g.p75_gap;
  j["gap_max"] = g.max_gap;
  j["median_d_repl"] = g.median_repl;
  j["median_d_inter"] = g.median_inter;
  j["regime_config"] = {{"divergent_cutoff", g.config.divergent_cutoff},
                        {"tied_lo", g.config.tied_lo},
                        {"tied_hi", g.config.tied_hi},
                        {"ratio_floor", g.config.ratio_floor},
                        {"pruning_ir", opt_num(g.config.pruning_ir)}};
  j["thresholds"] = {{"strong", g.thresholds.strong}, {"conditional", g.thresholds.conditional}};
  j["pairs"] = ordered_json::array();
  for (const auto& p : g.pairs) {
    ordered_json jp;
    jp["i"] = p.i;
    jp["j"] = p.j;
    jp["d_repl"] = p.d_repl;
    jp["d_inter"] = p.d_inter;
    jp["gap"] = p.gap;
    jp["ratio"] = opt_num(p.ratio);
    jp["finite"] = p.finite;
    jp["interchange_exceeds"] = p.interchange_exceeds;
    j["pairs"].push_back(jp);
  }
  return j;
}

ordered_json to_json(const EvalContract& c) {
  ordered_json j;
  j["id"] = c.id();
  j["name"] = c.name;
  j["corpus_id"] = c.corpus_id;
  j["token_budget"] = c.token_budget;
  j["window"] = c.window;
  j["stride"] = c.stride;
  j["precision"] = c.precision;
  j["positions_rule"] = c.positions_rule;
  return j;
}

ordered_json to_json(const PplReport& r) {
  ordered_json j;
  j["contract_id"] = r.contract_id;
  j["corpus_hash"] = r.corpus_hash;
  j["ppl"] = r.ppl;
  j["mean_nll"] = r.mean_nll;
  j["windows"] = r.windows;
  j["scored_tokens"] = r.scored_tokens;
  j["corpus_tokens"] = r.corpus_tokens;
  j["partial_window"] = r.partial_window;
  j["ci"] = r.ci ? to_json(*r.ci) : ordered_json(nullptr);
  j["interventions"] = r.interventions;
  j["window_nll"] = r.window_nll;
  j["window_tokens"] = r.window_tokens;
  return j;
}

PplReport ppl_report_from_json(const nlohmann::json& j) {
  PplReport r;
  try {
    r.contract_id = j.at("contract_id").get<std::string>();
    r.corpus_hash = j.value("corpus_hash", "");
    r.ppl = num(j.at("ppl"));
    r.mean_nll = num(j.at("mean_nll"));
    r.windows = j.at("windows").get<std::size_t>();
    r.scored_tokens = j.at("scored_tokens").get<std::size_t>();
    r.corpus_tokens = j.value("corpus_tokens", std::size_t{0});
    r.partial_window = j.value("partial_window", false);
    if (j.contains("ci") && !j["ci"].is_null()) r.ci = ci_from_json(j["ci"]);
    r.interventions = j.value("interventions", std::vector<std::string>{});
    for (const auto& x : j.value("window_nll", nlohmann::json::array())) r.window_nll.push_back(num(x));
    r.window_tokens = j.value("window_tokens", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("perplexity report JSON: ") + e.what());
  }
  return r;
}

ordered_json to_json(const SelectionResult& s) {
  ordered_json j;
  j["method"] = s.method;
  j["n"] = s.n;
  j["layers"] = s.layers;
  j["order"] = s.order;
  j["delta"] = s.delta ? ordered_json(*s.delta) : ordered_json(nullptr);
  j["shortfall"] = s.shortfall;
  j["delta_ppl_pct"] = opt_num(s.delta_ppl_pct);
  j["ppl"] = opt_num(s.ppl);
  j["baseline_ppl"] = opt_num(s.baseline_ppl);
  j["contract_id"] = s.contract_id;
  j["ledger"] = {{"budget", s.budget ? ordered_json(*s.budget) : ordered_json(nullptr)},
                 {"consumed", s.evaluator_calls}};
  j["scores"] = ordered_json::array();
  for (double x : s.scores) j["scores"].push_back(std::isfinite(x) ? ordered_json(x) : ordered_json(nullptr));
  return j;
}

SelectionResult selection_from_json(const nlohmann::json& j) {
  SelectionResult s;
  try {
    s.method = j.at("method").get<std::string>();
    s.n = j.at("n").get<std::size_t>();
    s.layers = j.at("layers").get<std::vector<std::size_t>>();
    s.order = j.value("order", s.layers);
    if (j.contains("delta") && !j["delta"].is_null()) s.delta = j["delta"].get<std::size_t>();
    s.shortfall = j.value("shortfall", false);
    if (j.contains("ppl") && !j["ppl"].is_null()) s.ppl = j["ppl"].get<double>();
    if (j.contains("baseline_ppl") && !j["baseline_ppl"].is_null()) s.baseline_ppl = j["baseline_ppl"].get<double>();
    if (j.contains("delta_ppl_pct") && !j["delta_ppl_pct"].is_null()) {
      s.delta_ppl_pct = j["delta_ppl_pct"].get<double>();
    }
    s.contract_id = j.value("contract_id", "");
    if (j.contains("ledger")) {
      const auto& l = j["ledger"];
      if (!l.at("budget").is_null()) s.budget = l["budget"].get<std::size_t>();
      s.evaluator_calls = l.at("consumed").get<std::size_t>();
    }
    for (const auto& x : j.value("scores", nlohmann::json::array())) s.scores.push_back(num(x));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("selection JSON: ") + e.what());
  }
  return s;
}

ordered_json to_json(const JacobianReport& r) {
  ordered_json j;
  j["iterations"] = r.iterations;
  j["epsilon"] = r.epsilon;
  j["probe"] = "residual g(x) = block(x) - x at the final token";
  j["rows"] = ordered_json::array();
  for (const auto& row : r.rows) {
    ordered_json jr;
    jr["layer"] = row.layer;
    jr["mean"] = row.mean;
    jr["max"] = row.max;
    jr["min"] = row.min;
    jr["region"] = "";
    jr["retried"] = row.retried;
    jr["flagged"] = row.flagged;
    jr["per_prompt"] = row.per_prompt;
    jr["residuals"] = row.residuals;
    j["rows"].push_back(jr);
  }
  return j;
}

ordered_json to_json(const std::vector<StabilityRow>& rows) {
  ordered_json j = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json jr;
    jr["subset_size"] = r.subset_size;
    jr["spearman"] = r.spearman;
    jr["kendall"] = r.kendall;
    jr["top_k"] = r.top_k;
    jr["top_k_overlap"] = r.top_k_overlap;
    jr["max_rel_deviation"] = r.max_rel_deviation;
    j.push_back(jr);
  }
  return j;
}

ordered_json to_json(const std::vector<BudgetRow>& rows) {
  ordered_json j = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json jr;
    jr["method"] = r.method;
    jr["budget"] = r.budget;
    jr["evals_used"] = r.evals_used;
    jr["layers_removed"] = r.layers.size();
    jr["layers"] = r.layers;
    jr["ppl"] = r.ppl;
    jr["delta_ppl_pct"] = r.delta_ppl_pct;
    j.push_back(jr);
  }
  return j;
}

ordered_json to_json(const SignTestResult& s) {
  ordered_json j;
  j["positives"] = s.positives;
  j["negatives"] = s.negatives;
  j["zeros_dropped"] = s.zeros;
  j["p_one_sided"] = s.p_one_sided;
  j["p_two_sided"] = s.p_two_sided;
  j["undefined"] = s.undefined;
  return j;
}

ordered_json to_json(const RopeCounterfactual& c) {
  ordered_json j;
  j["mean_baseline_divergence"] = c.mean_baseline_divergence;
  j["baseline_divergence"] = c.baseline_divergence;
  j["with_rope"] = to_json(c.with_rope);
  j["without_rope"] = to_json(c.without_rope);
  j["gap_deltas"] = c.gap_deltas;
  j["ir_with_rope"] = c.ir_with;
  j["ir_without_rope"] = c.ir_without;
  j["sign_test"] = to_json(c.sign);
  return j;
}

ordered_json to_json(const BudgetLedger& ledger) {
  ordered_json j;
  j["budget"] = ledger.budget();
  j["consumed"] = ledger.consumed();
  j["calls"] = ordered_json::array();
  for (const auto& e : ledger.entries()) {
    j["calls"].push_back({{"step", e.step}, {"candidate", e.candidate}, {"ppl", e.ppl}});
  }
  return j;
}

std::string distance_matrix_csv(const DistanceMatrix& m) {
  std::ostringstream o;
  o << "i,j,gap,kl_ij,kl_ji,d_max,d_mean,d_geo,d_min,class,ci_lo,ci_hi,non_finite\n";
  for (const auto& r : m.records) {
    o << r.i << ',' << r.j << ',' << r.gap() << ',' << csv_num(r.kl_ij) << ',' << csv_num(r.kl_ji) << ','
      << csv_num(r.d_max) << ',' << csv_num(r.d_mean) << ',' << csv_num(r.d_geo) << ',' << csv_num(r.d_min) << ','
      << to_string(r.cls) << ',' << (r.ci ? csv_num(r.ci->lo) : "") << ',' << (r.ci ? csv_num(r.ci->hi) : "") << ','
      << (r.non_finite ? 1 : 0) << '\n';
  }
  return o.str();
}

std::string gap_report_csv(const GapReport& g) {
  std::ostringstream o;
  o << "i,j,d_repl,d_inter,gap,ratio,finite,interchange_exceeds\n";
  for (const auto& p : g.pairs) {
    o << p.i << ',' << p.j << ',' << csv_num(p.d_repl) << ',' << csv_num(p.d_inter) << ',' << csv_num(p.gap) << ','
      << (p.ratio ? csv_num(*p.ratio) : "") << ',' << (p.finite ? 1 : 0) << ',' << (p.interchange_exceeds ? 1 : 0)
      << '\n';
  }
  return o.str();
}

std::string jacobian_csv(const JacobianReport& r) {
  std::ostringstream o;
  o << "layer,mean,max,min,region\n";
  for (const auto& row : r.rows) {
    o << row.layer << ',' << csv_num(row.mean) << ',' << csv_num(row.max) << ',' << csv_num(row.min) << ",\n";
  }
  return o.str();
}

std::string stability_csv(const std::vector<StabilityRow>& rows) {
  std::ostringstream o;
  o << "subset_size,spearman,kendall,top_k,top_k_overlap,max_rel_deviation\n";
  for (const auto& r : rows) {
    o << r.subset_size << ',' << csv_num(r.spearman) << ',' << csv_num(r.kendall) << ',' << r.top_k << ','
      << r.top_k_overlap << ',' << csv_num(r.max_rel_deviation) << '\n';
  }
  return o.str();
}

std::string budget_csv(const std::vector<BudgetRow>& rows) {
  std::ostringstream o;
  o << "method,budget,evals_used,layers_removed,layers,ppl,delta_ppl_pct\n";
  for (const auto& r : rows) {
    o << r.method << ',' << r.budget << ',' << r.evals_used << ',' << r.layers.size() << ',' << join_layers(r.layers)
      << ',' << csv_num(r.ppl) << ',' << csv_num(r.delta_ppl_pct) << '\n';
  }
  return o.str();
}

std::vector<PlotPoint> heatmap_plotdata(const DistanceMatrix& m) {
  const std::size_t L = m.n_layers;
  std::vector<double> grid(L * L, kNaN);
  for (std::size_t k = 0; k < L; ++k) grid[k * L + k] = 0.0;
  for (const auto& r : m.records) {
    if (r.i >= L || r.j >= L || r.i == r.j) continue;
    grid[r.i * L + r.j] = grid[r.j * L + r.i] = r.distance();
  }
  // One series per heatmap row j; x is the column layer, y the distance.
  std::vector<PlotPoint> out;
  for (std::size_t j = 0; j < L; ++j) {
    const std::string series = "heatmap:" + to_string(m.protocol) + ":j=" + std::to_string(j);
    for (std::size_t i = 0; i < L; ++i) out.push_back({static_cast<double>(i), grid[j * L + i], series});
  }
  return out;
}

std::vector<PlotPoint> adjacent_profile_plotdata(const DistanceMatrix& m) {
  std::vector<PlotPoint> out;
  for (std::size_t i = 0; i + 1 < m.n_layers; ++i) {
    const PairDistanceRecord* r = m.find(i, i + 1);
    out.push_back({static_cast<double>(i), r ? r->distance() : kNaN, "adjacent:" + to_string(m.protocol)});
  }
  return out;
}

std::vector<PlotPoint> gap_depth_plotdata(const GapReport& g) {
  std::vector<PlotPoint> out;
  for (const auto& p : g.pairs) out.push_back({static_cast<double>(p.i), p.gap, "gap"});
  for (const auto& p : g.pairs) out.push_back({static_cast<double>(p.i), p.d_repl, "d_repl"});
  for (const auto& p : g.pairs) out.push_back({static_cast<double>(p.i), p.d_inter, "d_inter"});
  return out;
}

ordered_json plotdata_json(const std::vector<PlotPoint>& points) {
  ordered_json j = ordered_json::array();
  for (const auto& p : points) j.push_back({{"x", p.x}, {"y", p.y}, {"series", p.series}});
  return j;
}

std::string plotdata_csv(const std::vector<PlotPoint>& points) {
  std::ostringstream o;
  o << "x,y,series\n";
  for (const auto& p : points) o << csv_num(p.x) << ',' << csv_num(p.y) << ',' << p.series << '\n';
  return o.str();
}

std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ordered_json to_json(const RunManifest& m) {
  ordered_json j;
  j["run_id"] = m.run_id;
  j["timestamp"] = m.timestamp;
  j["checkpoint_hash"] = m.checkpoint_hash;
  j["contract_ids"] = m.contract_ids;
  j["command"] = m.command;
  j["args"] = m.args;
  j["outputs"] = m.outputs;
  j["tool_version"] = m.tool_version;
  j["precision"] = "f32";
  return j;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<GoldenSequence> load_golden(const std::filesystem::path& path) {
  std::vector<GoldenSequence> out;
  try {
    const auto j = nlohmann::json::parse(read_text_file(path));
    for (const auto& s : j.at("sequences")) {
      GoldenSequence g;
      g.tokens = s.at("tokens").get<std::vector<TokenId>>();
      g.logits = s.at("logits").get<std::vector<std::vector<float>>>();
      out.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("golden file " + path.string() + ": " + e.what());
  }
  return out;
}

void save_golden(const std::vector<GoldenSequence>& golden, const std::filesystem::path& path) {
  ordered_json j;
  j["sequences"] = ordered_json::array();
  for (const auto& g : golden) j["sequences"].push_back({{"tokens", g.tokens}, {"logits", g.logits}});
  write_text_file(path, j.dump() + "\n");
}

std::vector<GoldenSequence> make_golden(const Checkpoint& ck, const std::vector<std::vector<TokenId>>& sequences) {
  std::vector<GoldenSequence> out;
  for (const auto& seq : sequences) {
    const ForwardResult r = forward(ck, seq);
    GoldenSequence g;
    g.tokens = seq;
    for (std::size_t row = 0; row < r.rows.size(); ++row) {
      const auto lg = r.logits.row(row);
      g.logits.emplace_back(lg.begin(), lg.end());
    }
    out.push_back(std::move(g));
  }
  return out;
}

GoldenComparison compare_golden(const Checkpoint& ck, const std::vector<GoldenSequence>& golden) {
  GoldenComparison c;
  for (const auto& g : golden) {
    const ForwardResult r = forward(ck, g.tokens);
    if (g.logits.size() != r.rows.size()) {
      throw DimensionError("golden sequence has " + std::to_string(g.logits.size()) + " logit rows, expected " +
                           std::to_string(r.rows.size()));
    }
    for (std::size_t row = 0; row < r.rows.size(); ++row) {
      const auto lg = r.logits.row(row);
      if (g.logits[row].size() != lg.size()) throw DimensionError("golden logit row has the wrong vocabulary size");
      for (std::size_t v = 0; v < lg.size(); ++v) {
        c.max_abs_diff = std::max(c.max_abs_diff, std::abs(static_cast<double>(lg[v]) - g.logits[row][v]));
      }
      ++c.positions;
    }
    ++c.sequences;
  }
  return c;
}

}  // namespace protogap
