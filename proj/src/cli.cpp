#include "protogap/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"
#include "protogap/error.hpp"
#include "protogap/evaluator.hpp"
#include "protogap/jacobian.hpp"
#include "protogap/metrics.hpp"
#include "protogap/report.hpp"
#include "protogap/selectors.hpp"

namespace protogap {
namespace {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Options {
  std::string checkpoint;
  std::vector<std::string> checkpoints;
  std::string corpus;
  std::string prompts;
  std::size_t prompt_len = 64;
  std::size_t n_prompts = 100;
  std::string contract;
  std::string pairs = "adjacent";
  std::string protocol = "both";
  std::string positions = "last";
  std::string method;
  std::size_t n = 0;
  bool n_set = false;
  std::size_t delta = 1;
  std::string score_mode = "min-neighbor";
  std::string window;
  std::string calibration;
  std::optional<std::size_t> budget;
  std::size_t width = 3;
  std::size_t seed_candidates = 5;
  std::uint64_t seed = 42;
  std::string out = "runs";
  std::string format = "all";
  std::size_t bootstrap = 0;
  double strong = 0.05;
  double conditional = 0.10;
  double divergent_cutoff = 0.5;
  double tied_lo = 0.8;
  double tied_hi = 1.25;
  std::optional<double> pruning_ir;
  std::vector<std::string> interventions;
  std::string deletes;
  std::string selection;
  std::string baseline;
  std::string golden;
  double golden_tol = 1e-3;
  std::string layers = "all";
  std::size_t iterations = 20;
  double epsilon = 1e-3;
  std::string sizes = "20,50,100";
  std::size_t top_k = 5;
  std::string methods = "sleb-greedy,sleb-iterative,interchange-beam";
  std::string budgets = "50,100,200,400,800";
};

std::vector<std::size_t> parse_index_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError(std::string("invalid ") + what + " list '" + text + "'");
    }
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Output directory, artifact writer and manifest for one invocation.
class Run {
 public:
  Run(const std::string& command, const std::vector<std::string>& args, const Options& o,
      std::vector<std::string> input_hashes)
      : o_(o) {
    manifest_.command = command;
    manifest_.args = args;
    manifest_.timestamp = utc_timestamp();
    std::string key = command;
    for (const auto& a : args) key += '\x1f' + a;
    for (const auto& h : input_hashes) key += '\x1e' + h;
    manifest_.run_id = command + "-" + sha256_hex(key).substr(0, 12);
    if (!input_hashes.empty()) manifest_.checkpoint_hash = input_hashes.front();
    dir_ = fs::path(o.out) / manifest_.run_id;
  }

  const fs::path& dir() const { return dir_; }
  RunManifest& manifest() { return manifest_; }

  bool wants(ReportFormat f) const {
    if (o_.format == "all") return true;
    const auto fmts = split(o_.format);
    const std::string name = f == ReportFormat::json ? "json" : f == ReportFormat::csv ? "csv" : "plotdata";
    return std::find(fmts.begin(), fmts.end(), name) != fmts.end();
  }

  void json(const std::string& name, const ordered_json& j) {
    write(name, j.dump(2) + "\n");
  }
  void csv(const std::string& name, const std::string& text) {
    if (wants(ReportFormat::csv)) write(name, text);
  }
  void plot(const std::string& name, const std::vector<PlotPoint>& pts) {
    if (wants(ReportFormat::plotdata)) write(name, plotdata_json(pts).dump(2) + "\n");
  }
  void add_contract(const std::string& id) {
    if (std::find(manifest_.contract_ids.begin(), manifest_.contract_ids.end(), id) == manifest_.contract_ids.end()) {
      manifest_.contract_ids.push_back(id);
    }
  }
  void finish() {
    manifest_.outputs.push_back("manifest.json");
    write_text_file(dir_ / "manifest.json", to_json(manifest_).dump(2) + "\n");
  }

 private:
  void write(const std::string& name, const std::string& content) {
    write_text_file(dir_ / name, content);
    manifest_.outputs.push_back(name);
  }

  const Options& o_;
  RunManifest manifest_;
  fs::path dir_;
};

Checkpoint require_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  return load_checkpoint(o.checkpoint);
}

PromptSet require_prompts(const Options& o, std::size_t default_count) {
  if (!o.prompts.empty()) return load_prompt_json(o.prompts);
  if (o.corpus.empty()) throw UsageError("a prompt source is required: --prompts <json> or --corpus <tokens>");
  const TokenCorpus corpus = load_corpus(o.corpus);
  return prompts_from_corpus(corpus, o.prompt_len, default_count);
}

MeasureOptions measure_options(const Options& o) {
  MeasureOptions m;
  if (o.positions == "all") {
    m.positions = Positions::all;
  } else if (o.positions != "last") {
    throw UsageError("--positions must be last or all");
  }
  m.bootstrap_resamples = o.bootstrap;
  m.seed = o.seed;
  return m;
}

ClassifierThresholds thresholds(const Options& o) {
  ClassifierThresholds t{o.strong, o.conditional};
  t.validate();
  return t;
}

RegimeConfig regime(const Options& o) {
  RegimeConfig r;
  r.divergent_cutoff = o.divergent_cutoff;
  r.tied_lo = o.tied_lo;
  r.tied_hi = o.tied_hi;
  r.pruning_ir = o.pruning_ir;
  r.validate();
  return r;
}

std::string model_id(const std::string& path) { return fs::path(path).stem().string(); }

std::vector<std::string> flagged_list(const DistanceMatrix& m) {
  std::vector<std::string> out;
  for (const auto& [i, j] : m.flagged) out.push_back(to_string(m.protocol) + " (" + std::to_string(i) + "," + std::to_string(j) + ")");
  return out;
}

void emit_matrix(Run& run, const DistanceMatrix& m) {
  const std::string p = to_string(m.protocol);
  run.json("distances_" + p + ".json", to_json(m));
  run.csv("distances_" + p + ".csv", distance_matrix_csv(m));
  run.plot("plot_heatmap_" + p + ".json", heatmap_plotdata(m));
  run.plot("plot_adjacent_" + p + ".json", adjacent_profile_plotdata(m));
}

int report_flags(const std::vector<std::string>& flagged, std::ostream& err) {
  if (flagged.empty()) return kExitOk;
  err << "non-finite values flagged:\n";
  for (const auto& f : flagged) err << "  " << f << "\n";
  return kExitNumerical;
}

struct Loaded {
  Checkpoint ck;
  std::string hash;
};

Loaded load(const Options& o) {
  Loaded l{require_checkpoint(o), file_hash(o.checkpoint)};
  return l;
}

int cmd_distances(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Loaded m = load(o);
  const PromptSet prompts = require_prompts(o, o.n_prompts);
  const PairFilter filter = PairFilter::parse(o.pairs);
  Run run("distances", args, o, {m.hash});
  const BaselineCache cache(m.ck, prompts, measure_options(o));
  std::vector<Protocol> protocols;
  if (o.protocol == "both") {
    protocols = {Protocol::replacement, Protocol::interchange};
  } else {
    protocols = {parse_protocol(o.protocol)};
  }
  std::vector<std::string> flagged;
  for (Protocol p : protocols) {
    const DistanceMatrix dm = sweep_distances(cache, filter, p, thresholds(o), model_id(o.checkpoint));
    emit_matrix(run, dm);
    out << to_string(p) << ": " << dm.records.size() << " pairs, strong " << dm.strong_count << ", conditional "
        << dm.conditional_count << "\n";
    for (auto& f : flagged_list(dm)) flagged.push_back(f);
  }
  run.finish();
  out << "artifacts: " << run.dir().string() << "\n";
  return report_flags(flagged, err);
}

std::pair<std::size_t, std::size_t> parse_window(const std::string& w) {
  const auto colon = w.find(':');
  if (colon == std::string::npos) throw UsageError("--window expects lo:hi");
  try {
    return {std::stoul(w.substr(0, colon)), std::stoul(w.substr(colon + 1))};
  } catch (const std::exception&) {
    throw UsageError("--window expects lo:hi");
  }
}

ScoreMode score_mode(const Options& o) {
  if (o.score_mode == "min-neighbor") return ScoreMode::min_neighbor;
  if (o.score_mode == "min-any") return ScoreMode::min_any;
  throw UsageError("--score-mode must be min-neighbor or min-any");
}

std::vector<double> interchange_scores(const Checkpoint& ck, const PromptSet& prompts, const Options& o,
                                       Protocol protocol, Run* run) {
  const BaselineCache cache(ck, prompts, measure_options(o));
  const DistanceMatrix dm = sweep_distances(cache, PairFilter::parse(o.pairs), protocol, thresholds(o),
                                            model_id(o.checkpoint));
  if (run) emit_matrix(*run, dm);
  return layer_scores_from_pairs(dm, score_mode(o));
}

std::size_t budget_or_unlimited(const Options& o) {
  return o.budget ? *o.budget : std::numeric_limits<std::size_t>::max() / 2;
}

int cmd_prune(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  if (!o.n_set) throw UsageError("--n is required");
  const Loaded m = load(o);
  const std::size_t L = m.ck.n_layers();
  Run run("prune", args, o, {m.hash});
  SelectionResult sel;
  std::optional<BudgetLedger> ledger;

  const std::string& meth = o.method;
  if (meth == "greedy-interchange" || meth == "greedy-replacement" || meth == "bi" || meth == "cka") {
    const PromptSet prompts = require_prompts(o, o.n_prompts);
    std::vector<double> s;
    if (meth == "greedy-interchange") {
      s = interchange_scores(m.ck, prompts, o, Protocol::interchange, &run);
    } else if (meth == "greedy-replacement") {
      s = interchange_scores(m.ck, prompts, o, Protocol::replacement, &run);
    } else if (meth == "bi") {
      s = bi_scores(m.ck, prompts).scores;
    } else {
      s = cka_scores(m.ck, prompts).removal;
    }
    if (!o.window.empty()) {
      const auto [lo, hi] = parse_window(o.window);
      for (std::size_t k = 0; k < s.size(); ++k) {
        if (k < lo || k > hi) s[k] = std::nan("");
      }
    }
    sel = greedy_select(s, o.n, o.delta, meth);
  } else if (meth == "random") {
    sel = random_select(L, o.n, o.delta, o.seed);
  } else if (meth == "sleb-greedy" || meth == "sleb-iterative" || meth == "beam") {
    if (o.contract.empty()) throw UsageError("--contract is required for " + meth);
    const std::string calib_path = !o.calibration.empty() ? o.calibration : o.corpus;
    if (calib_path.empty()) throw UsageError("--calibration (or --corpus) is required for " + meth);
    const EvalContract contract = resolve_contract(o.contract);
    run.add_contract(contract.id());
    const TokenCorpus calib = load_corpus(calib_path);
    const PplOracle oracle = make_ppl_oracle(m.ck, calib, contract);
    ledger.emplace(budget_or_unlimited(o));
    if (meth == "beam") {
      const PromptSet prompts = require_prompts(o, o.n_prompts);
      const auto seeds = interchange_scores(m.ck, prompts, o, Protocol::interchange, &run);
      const auto results = beam_select(L, o.n, o.width, o.seed_candidates, seeds, oracle, *ledger);
      ordered_json all = ordered_json::array();
      for (const auto& r : results) all.push_back(to_json(r));
      run.json("beam_sizes.json", all);
      if (!results.empty()) sel = results.back();
      sel.method = "beam";
      sel.n = o.n;
      sel.shortfall = results.empty() || results.back().n < o.n;
    } else {
      sel = sleb_select(L, o.n, meth == "sleb-greedy" ? SlebVariant::greedy : SlebVariant::iterative, oracle, *ledger);
    }
    sel.budget = o.budget;
    run.json("ledger.json", to_json(*ledger));
  } else {
    throw UsageError("unknown --method '" + meth +
                     "' (greedy-interchange, greedy-replacement, bi, cka, sleb-greedy, sleb-iterative, random, beam)");
  }

  if (!o.contract.empty() && !o.corpus.empty() && !sel.layers.empty()) {
    const EvalContract contract = resolve_contract(o.contract);
    const TokenCorpus corpus = load_corpus(o.corpus);
    const PplReport base = sliding_window_ppl(m.ck, corpus, contract);
    const Intervention del[1] = {Delete{sel.layers}};
    const InterventionEval ev = evaluate_intervention(m.ck, corpus, contract, del, base);
    sel.ppl = ev.report.ppl;
    sel.baseline_ppl = base.ppl;
    sel.delta_ppl_pct = ev.delta_ppl_pct;
    sel.contract_id = contract.id();
    run.add_contract(contract.id());
    if (meth == "random") {
      ordered_json rows = ordered_json::array();
      std::vector<double> deltas;
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const SelectionResult r = random_select(L, o.n, o.delta, seed);
        const Intervention d[1] = {Delete{r.layers}};
        const double pct = evaluate_intervention(m.ck, corpus, contract, d, base).delta_ppl_pct;
        deltas.push_back(pct);
        rows.push_back({{"seed", seed}, {"layers", r.layers}, {"delta_ppl_pct", pct}});
      }
      ordered_json j;
      j["contract_id"] = contract.id();
      j["seeds"] = rows;
      j["mean_delta_ppl_pct"] = std::accumulate(deltas.begin(), deltas.end(), 0.0) / double(deltas.size());
      j["min_delta_ppl_pct"] = *std::min_element(deltas.begin(), deltas.end());
      j["max_delta_ppl_pct"] = *std::max_element(deltas.begin(), deltas.end());
      run.json("random_seeds.json", j);
      out << "random seeds 0-9: mean dPPL " << j["mean_delta_ppl_pct"].get<double>() << "%\n";
    }
  }
  run.json("selection.json", to_json(sel));
  run.finish();
  out << sel.method << " n=" << o.n << ": layers";
  for (std::size_t k : sel.layers) out << " " << k;
  if (sel.shortfall) out << " (shortfall)";
  if (sel.delta_ppl_pct) out << ", dPPL " << *sel.delta_ppl_pct << "%";
  out << "\nartifacts: " << run.dir().string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Loaded m = load(o);
  Run run("evaluate", args, o, {m.hash});
  if (!o.golden.empty()) {
    const GoldenComparison g = compare_golden(m.ck, load_golden(o.golden));
    ordered_json j;
    j["sequences"] = g.sequences;
    j["positions"] = g.positions;
    j["max_abs_diff"] = g.max_abs_diff;
    j["tolerance"] = o.golden_tol;
    j["pass"] = g.max_abs_diff < o.golden_tol;
    run.json("golden.json", j);
    out << "golden parity: " << g.sequences << " sequences, max |diff| " << g.max_abs_diff << "\n";
    if (o.corpus.empty()) {
      run.finish();
      if (!(g.max_abs_diff < o.golden_tol)) {
        err << "golden parity failed: " << g.max_abs_diff << " >= " << o.golden_tol << "\n";
        return kExitFailure;
      }
      return kExitOk;
    }
  }
  if (o.corpus.empty() || o.contract.empty()) throw UsageError("evaluate needs --corpus and --contract");
  const EvalContract contract = resolve_contract(o.contract);
  run.add_contract(contract.id());
  const TokenCorpus corpus = load_corpus(o.corpus);

  std::vector<Intervention> ivs;
  for (const auto& t : o.interventions) ivs.push_back(parse_intervention(t));
  if (!o.deletes.empty()) ivs.push_back(Delete{parse_index_list(o.deletes, "layer")});
  if (!o.selection.empty()) {
    const SelectionResult sel = selection_from_json(nlohmann::json::parse(read_text_file(o.selection)));
    if (!sel.contract_id.empty() && sel.contract_id != contract.id()) {
      throw ContractError("selection was evaluated under '" + sel.contract_id + "', not '" + contract.id() + "'");
    }
    if (!sel.layers.empty()) ivs.push_back(Delete{sel.layers});
  }
  EvalOptions eo;
  eo.bootstrap_resamples = o.bootstrap;
  eo.seed = o.seed;

  PplReport base;
  if (!o.baseline.empty()) {
    base = ppl_report_from_json(nlohmann::json::parse(read_text_file(o.baseline)));
  } else {
    base = sliding_window_ppl(m.ck, corpus, contract, {}, eo);
    run.json("baseline.json", to_json(base));
  }
  const InterventionEval ev = evaluate_intervention(m.ck, corpus, contract, ivs, base, eo);
  ordered_json j = to_json(ev.report);
  j["baseline_ppl"] = base.ppl;
  j["delta_ppl_pct"] = ev.delta_ppl_pct;
  run.json("ppl.json", j);
  run.finish();
  out << "contract " << contract.id() << ": ppl " << ev.report.ppl << " (baseline " << base.ppl << ", dPPL "
      << ev.delta_ppl_pct << "%), " << ev.report.windows << " windows, " << ev.report.scored_tokens
      << " scored tokens\nartifacts: " << run.dir().string() << "\n";
  return kExitOk;
}

struct Diagnosis {
  DistanceMatrix repl;
  DistanceMatrix inter;
  GapReport gap;
};

Diagnosis diagnose(const Checkpoint& ck, const std::string& id, const PromptSet& prompts, const Options& o) {
  const BaselineCache cache(ck, prompts, measure_options(o));
  const PairFilter filter = PairFilter::parse(o.pairs);
  Diagnosis d;
  d.repl = sweep_distances(cache, filter, Protocol::replacement, thresholds(o), id);
  d.inter = sweep_distances(cache, filter, Protocol::interchange, thresholds(o), id);
  d.gap = protocol_gap_report(d.repl, d.inter, thresholds(o), regime(o));
  return d;
}

int cmd_diagnose(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Loaded m = load(o);
  const PromptSet prompts = require_prompts(o, o.n_prompts);
  Run run("diagnose", args, o, {m.hash});
  const Diagnosis d = diagnose(m.ck, model_id(o.checkpoint), prompts, o);
  emit_matrix(run, d.repl);
  emit_matrix(run, d.inter);
  run.json("gap_report.json", to_json(d.gap));
  run.csv("gap_report.csv", gap_report_csv(d.gap));
  run.plot("plot_gap_depth.json", gap_depth_plotdata(d.gap));
  run.finish();
  out << "verdict: " << to_string(d.gap.verdict) << "\n"
      << "evidence: " << d.gap.evidence << "\n"
      << "pairs: " << d.gap.pairs.size() << " (" << d.gap.finite_pairs << " finite), gap mean " << d.gap.mean_gap
      << ", median " << d.gap.median_gap << ", p75 " << d.gap.p75_gap << ", max " << d.gap.max_gap << "\n"
      << "interchange above replacement on " << d.gap.violations << " pair(s)\n"
      << "rule: measure replacement and interchange swap distances on the target checkpoint before removing or "
         "merging layers.\n"
      << "advice: " << regime_advice(d.gap.verdict) << "\n"
      << "artifacts: " << run.dir().string() << "\n";
  auto flagged = flagged_list(d.repl);
  for (auto& f : flagged_list(d.inter)) flagged.push_back(f);
  return report_flags(flagged, err);
}

int cmd_jacobian(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Loaded m = load(o);
  const PromptSet prompts = require_prompts(o, o.n_prompts == 100 ? 10 : o.n_prompts);
  std::vector<std::size_t> layers;
  if (o.layers == "all") {
    for (std::size_t k = 0; k < m.ck.n_layers(); ++k) layers.push_back(k);
  } else {
    layers = parse_index_list(o.layers, "layer");
  }
  Run run("jacobian", args, o, {m.hash});
  SpectralOptions so;
  so.iterations = o.iterations;
  so.epsilon = o.epsilon;
  so.seed = o.seed;
  const JacobianReport rep = jacobian_report(m.ck, layers, prompts, so);
  run.json("jacobian.json", to_json(rep));
  run.csv("jacobian.csv", jacobian_csv(rep));
  run.finish();
  std::vector<std::string> flagged;
  for (const auto& row : rep.rows) {
    out << "layer " << row.layer << ": mean " << row.mean << ", max " << row.max << ", min " << row.min << "\n";
    if (row.flagged) flagged.push_back("layer " + std::to_string(row.layer) + " (" + std::to_string(row.flagged) + " prompt(s))");
  }
  out << "artifacts: " << run.dir().string() << "\n";
  return report_flags(flagged, err);
}

int cmd_stability(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Loaded m = load(o);
  const PromptSet prompts = require_prompts(o, o.n_prompts);
  const Protocol p = o.protocol == "both" ? Protocol::replacement : parse_protocol(o.protocol);
  const auto sizes = parse_index_list(o.sizes, "size");
  Run run("stability", args, o, {m.hash});
  const BaselineCache cache(m.ck, prompts, measure_options(o));
  const DistanceMatrix dm = sweep_distances(cache, PairFilter::parse(o.pairs), p, thresholds(o), model_id(o.checkpoint));
  const auto rows = prompt_stability(dm, sizes, o.seed, o.top_k);
  emit_matrix(run, dm);
  run.json("stability.json", to_json(rows));
  run.csv("stability.csv", stability_csv(rows));
  run.finish();
  for (const auto& r : rows) {
    out << "N=" << r.subset_size << ": spearman " << r.spearman << ", kendall " << r.kendall << ", top-" << r.top_k
        << " overlap " << r.top_k_overlap << ", max rel dev " << r.max_rel_deviation << "\n";
  }
  out << "artifacts: " << run.dir().string() << "\n";
  return report_flags(flagged_list(dm), err);
}

int cmd_counterfactual(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Loaded m = load(o);
  const PromptSet prompts = require_prompts(o, o.n_prompts);
  const auto pairs = PairFilter::parse(o.pairs).pairs(m.ck.n_layers());
  Run run("counterfactual", args, o, {m.hash});
  const RopeCounterfactual c = rope_counterfactual(m.ck, pairs, prompts, measure_options(o), thresholds(o), regime(o));
  run.json("counterfactual.json", to_json(c));
  run.finish();
  std::size_t larger = 0;
  for (double d : c.gap_deltas) larger += d > 0 ? 1 : 0;
  out << "baseline divergence (rope on vs off): " << c.mean_baseline_divergence << "\n"
      << "gap larger without rope on " << larger << "/" << c.gap_deltas.size() << " pairs, sign test p(one-sided) "
      << c.sign.p_one_sided << "\n"
      << "verdict with rope: " << to_string(c.with_rope.verdict) << ", without: " << to_string(c.without_rope.verdict)
      << "\nartifacts: " << run.dir().string() << "\n";
  std::vector<std::string> flagged;
  for (std::size_t k = 0; k < c.gap_deltas.size(); ++k) {
    if (!std::isfinite(c.gap_deltas[k])) {
      flagged.push_back("pair (" + std::to_string(pairs[k].first) + "," + std::to_string(pairs[k].second) + ")");
    }
  }
  return report_flags(flagged, err);
}

int cmd_budget_sweep(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  const Loaded m = load(o);
  if (o.corpus.empty() || o.contract.empty()) throw UsageError("budget-sweep needs --corpus and --contract");
  const EvalContract contract = resolve_contract(o.contract);
  const TokenCorpus eval_corpus = load_corpus(o.corpus);
  const TokenCorpus oracle_corpus = o.calibration.empty() ? eval_corpus : load_corpus(o.calibration);
  const std::size_t L = m.ck.n_layers();
  const std::size_t n_max = o.n_set ? o.n : L - 1;
  Run run("budget-sweep", args, o, {m.hash});
  run.add_contract(contract.id());
  const PplOracle oracle = make_ppl_oracle(m.ck, oracle_corpus, contract);
  const PplOracle evaluator = make_ppl_oracle(m.ck, eval_corpus, contract);

  std::vector<BudgetMethod> methods;
  std::vector<double> seeds;
  for (const auto& name : split(o.methods)) {
    if (name == "sleb-greedy" || name == "sleb-iterative") {
      const SlebVariant v = name == "sleb-greedy" ? SlebVariant::greedy : SlebVariant::iterative;
      methods.push_back({name, [&, v](BudgetLedger& ledger) {
                           return sleb_select(L, std::min(n_max, L), v, oracle, ledger).layers;
                         }});
    } else if (name == "interchange-beam") {
      if (seeds.empty()) seeds = interchange_scores(m.ck, require_prompts(o, o.n_prompts), o, Protocol::interchange, &run);
      methods.push_back({name, [&](BudgetLedger& ledger) {
                           const auto r = beam_select(L, n_max, o.width, o.seed_candidates, seeds, oracle, ledger);
                           return r.empty() ? std::vector<std::size_t>{} : r.back().layers;
                         }});
    } else {
      throw UsageError("unknown budget-sweep method '" + name + "'");
    }
  }
  const auto rows = budget_sweep(methods, parse_index_list(o.budgets, "budget"), evaluator);
  run.json("budget_sweep.json", to_json(rows));
  run.csv("budget_sweep.csv", budget_csv(rows));
  run.finish();
  for (const auto& r : rows) {
    out << r.method << " B=" << r.budget << ": evals " << r.evals_used << ", removed " << r.layers.size() << ", ppl "
        << r.ppl << " (" << r.delta_ppl_pct << "%)\n";
  }
  out << "artifacts: " << run.dir().string() << "\n";
  return kExitOk;
}

int cmd_trajectory(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (o.checkpoints.empty()) throw UsageError("trajectory needs --checkpoints a,b,...");
  const PromptSet prompts = require_prompts(o, o.n_prompts);
  std::vector<std::string> hashes;
  for (const auto& p : o.checkpoints) hashes.push_back(file_hash(p));
  Run run("trajectory", args, o, hashes);
  ordered_json rows = ordered_json::array();
  std::vector<PlotPoint> pts;
  std::vector<std::string> flagged;
  for (std::size_t k = 0; k < o.checkpoints.size(); ++k) {
    const Checkpoint ck = load_checkpoint(o.checkpoints[k]);
    const Diagnosis d = diagnose(ck, model_id(o.checkpoints[k]), prompts, o);
    ordered_json r;
    r["checkpoint"] = o.checkpoints[k];
    r["checkpoint_hash"] = hashes[k];
    r["verdict"] = to_string(d.gap.verdict);
    r["ir"] = d.gap.pooled_ir ? ordered_json(*d.gap.pooled_ir) : ordered_json(nullptr);
    r["gap_mean"] = d.gap.mean_gap;
    r["gap_median"] = d.gap.median_gap;
    r["gap_p75"] = d.gap.p75_gap;
    r["gap_max"] = d.gap.max_gap;
    r["finite_pairs"] = d.gap.finite_pairs;
    rows.push_back(r);
    const double x = static_cast<double>(k);
    pts.push_back({x, d.gap.mean_gap, "mean"});
    pts.push_back({x, d.gap.median_gap, "median"});
    pts.push_back({x, d.gap.p75_gap, "p75"});
    pts.push_back({x, d.gap.max_gap, "max"});
    out << o.checkpoints[k] << ": " << to_string(d.gap.verdict) << ", gap mean " << d.gap.mean_gap << ", median "
        << d.gap.median_gap << ", p75 " << d.gap.p75_gap << ", max " << d.gap.max_gap << "\n";
    for (auto& f : flagged_list(d.repl)) flagged.push_back(o.checkpoints[k] + ": " + f);
    for (auto& f : flagged_list(d.inter)) flagged.push_back(o.checkpoints[k] + ": " + f);
  }
  run.json("trajectory.json", rows);
  run.plot("plot_gap_trajectory.json", pts);
  run.finish();
  out << "artifacts: " << run.dir().string() << "\n";
  return report_flags(flagged, err);
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--checkpoint", o.checkpoint, "canonical checkpoint container");
  sub->add_option("--corpus", o.corpus, "token corpus (u32 ids + .json sidecar)");
  sub->add_option("--prompts", o.prompts, "prompt set JSON");
  sub->add_option("--prompt-len", o.prompt_len, "tokens per prompt when chunking --corpus")->check(CLI::PositiveNumber);
  sub->add_option("--n-prompts", o.n_prompts, "prompts taken from --corpus")->check(CLI::PositiveNumber);
  sub->add_option("--seed", o.seed, "random seed");
  sub->add_option("--out", o.out, "output root; artifacts go to <out>/<run-id>/");
  sub->add_option("--format", o.format, "json,csv,plotdata or all");
  sub->add_option("--positions", o.positions, "KL positions: last or all");
  sub->add_option("--strong", o.strong, "strong swap-similarity threshold");
  sub->add_option("--conditional", o.conditional, "conditional swap-similarity threshold");
  sub->add_option("--pairs", o.pairs, "adjacent | gap:<k> | all");
  sub->add_option("--protocol", o.protocol, "replacement | interchange | both");
  sub->add_option("--contract", o.contract, "contract name or JSON file");
  sub->add_option("--bootstrap", o.bootstrap, "bootstrap resamples (0 disables CIs)");
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"protogap: layer swap diagnostics and pruning"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  auto* distances = app.add_subcommand("distances", "swap-KL distance sweep");
  auto* prune = app.add_subcommand("prune", "select layers to remove");
  auto* evaluate = app.add_subcommand("evaluate", "sliding-window perplexity under a contract");
  auto* diagnose_cmd = app.add_subcommand("diagnose", "both protocols, gap report and regime verdict");
  auto* jacobian = app.add_subcommand("jacobian", "residual Jacobian spectral norms");
  auto* stability = app.add_subcommand("stability", "prompt-subset ranking stability");
  auto* counterfactual = app.add_subcommand("counterfactual", "rotary-off counterfactual");
  auto* budget = app.add_subcommand("budget-sweep", "matched evaluator-call budgets");
  auto* trajectory = app.add_subcommand("trajectory", "diagnose over several checkpoints");
  for (auto* s : {distances, prune, evaluate, diagnose_cmd, jacobian, stability, counterfactual, budget, trajectory}) {
    add_common(s, o);
  }
  for (auto* s : {prune, budget}) {
    s->add_option("--n", o.n, "removal count (beam/sweep: maximum)")->each([&](const std::string&) { o.n_set = true; });
    s->add_option("--calibration", o.calibration, "corpus used as the PPL oracle");
    s->add_option("--width", o.width, "beam width")->check(CLI::PositiveNumber);
    s->add_option("--seed-candidates", o.seed_candidates, "beam seeds (top-k interchange layers)")
        ->check(CLI::PositiveNumber);
    s->add_option("--score-mode", o.score_mode, "min-neighbor | min-any");
  }
  prune->add_option("--method", o.method, "selection method")->required();
  prune->add_option("--delta", o.delta, "spacing constraint: accept i iff |i-k| > delta");
  prune->add_option("--window", o.window, "restrict candidates to layers lo:hi");
  prune->add_option("--budget", o.budget, "evaluator-call budget for sleb/beam");
  evaluate->add_option("--intervention", o.interventions, "e.g. replace:3<-5, interchange:3,5, delete:1,2");
  evaluate->add_option("--delete", o.deletes, "comma-separated layers to delete");
  evaluate->add_option("--selection", o.selection, "selection.json whose layers are deleted");
  evaluate->add_option("--baseline", o.baseline, "baseline PplReport JSON (must share the contract)");
  evaluate->add_option("--golden", o.golden, "golden logits JSON for parity checking");
  evaluate->add_option("--golden-tol", o.golden_tol, "max |logit diff| accepted");
  for (auto* s : {diagnose_cmd, counterfactual, trajectory}) {
    s->add_option("--divergent-cutoff", o.divergent_cutoff, "I/R below this (with high d_repl) is divergent");
    s->add_option("--tied-lo", o.tied_lo, "lower edge of the tied I/R band");
    s->add_option("--tied-hi", o.tied_hi, "upper edge of the tied I/R band");
    s->add_option("--pruning-ir", o.pruning_ir, "pruning-level I/R overriding the distance-level ratio");
  }
  jacobian->add_option("--layers", o.layers, "all or comma-separated layers");
  jacobian->add_option("--iterations", o.iterations, "power iterations")->check(CLI::PositiveNumber);
  jacobian->add_option("--epsilon", o.epsilon, "finite-difference step")->check(CLI::PositiveNumber);
  stability->add_option("--sizes", o.sizes, "comma-separated subset sizes");
  stability->add_option("--top-k", o.top_k, "top-k overlap size")->check(CLI::PositiveNumber);
  budget->add_option("--methods", o.methods, "sleb-greedy,sleb-iterative,interchange-beam");
  budget->add_option("--budgets", o.budgets, "comma-separated budgets");
  trajectory->add_option("--checkpoints", o.checkpoints, "checkpoint files in order")->delimiter(',');

  std::vector<std::string> argv_store{"protogap"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (distances->parsed()) return cmd_distances(o, args, out, err);
    if (prune->parsed()) return cmd_prune(o, args, out, err);
    if (evaluate->parsed()) return cmd_evaluate(o, args, out, err);
    if (diagnose_cmd->parsed()) return cmd_diagnose(o, args, out, err);
    if (jacobian->parsed()) return cmd_jacobian(o, args, out, err);
    if (stability->parsed()) return cmd_stability(o, args, out, err);
    if (counterfactual->parsed()) return cmd_counterfactual(o, args, out, err);
    if (budget->parsed()) return cmd_budget_sweep(o, args, out, err);
    if (trajectory->parsed()) return cmd_trajectory(o, args, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "contract mismatch: " << e.what() << "\n";
    return kExitContract;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace protogap
