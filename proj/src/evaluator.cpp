#include "protogap/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "protogap/error.hpp"
#include "protogap/model.hpp"
#include "protogap/parallel.hpp"

namespace protogap {

using nlohmann::ordered_json;

void EvalContract::validate() const {
  if (name.empty()) throw ContractError("contract needs a name");
  if (stride == 0 || stride > window) {
    throw ContractError("contract '" + name + "' needs 0 < stride <= window (stride " + std::to_string(stride) +
                        ", window " + std::to_string(window) + ")");
  }
  if (window < 2) throw ContractError("contract '" + name + "' window must be at least 2 tokens");
  if (token_budget < window) {
    throw ContractError("contract '" + name + "' token budget " + std::to_string(token_budget) +
                        " is smaller than its window " + std::to_string(window));
  }
}

std::string EvalContract::id() const {
  ordered_json j;
  j["name"] = name;
  j["corpus_id"] = corpus_id;
  j["token_budget"] = token_budget;
  j["window"] = window;
  j["stride"] = stride;
  j["precision"] = precision;
  j["positions_rule"] = positions_rule;
  return name + "@" + sha256_hex(j.dump()).substr(0, 12);
}

std::optional<EvalContract> builtin_contract(const std::string& name) {
  EvalContract c;
  c.name = name;
  if (name == "sliding-1024-512") {
    c.window = 1024;
    c.stride = 512;
    c.token_budget = 1u << 30;
  } else if (name == "matched-512-256") {
    c.window = 512;
    c.stride = 256;
    c.token_budget = 1u << 30;
  } else if (name == "fixture-32-16") {
    c.window = 32;
    c.stride = 16;
    c.token_budget = 1u << 20;
  } else {
    return std::nullopt;
  }
  return c;
}

namespace {

EvalContract contract_from_json(const ordered_json& j) {
  EvalContract c;
  try {
    c.name = j.at("name").get<std::string>();
    c.window = j.at("window").get<std::size_t>();
    c.stride = j.at("stride").get<std::size_t>();
    c.token_budget = j.at("token_budget").get<std::size_t>();
    if (j.contains("corpus_id")) c.corpus_id = j["corpus_id"].get<std::string>();
    if (j.contains("precision")) c.precision = j["precision"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("contract file: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

EvalContract load_contract(const std::filesystem::path& path, const std::string& name) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open contract file " + path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("contract file " + path.string() + ": " + e.what());
  }
  if (j.contains("contracts")) {
    for (const auto& c : j["contracts"]) {
      if (name.empty() || c.value("name", "") == name) return contract_from_json(c);
    }
    throw ContractError("no contract named '" + name + "' in " + path.string());
  }
  EvalContract c = contract_from_json(j);
  if (!name.empty() && c.name != name) throw ContractError("contract file holds '" + c.name + "', not '" + name + "'");
  return c;
}

EvalContract resolve_contract(const std::string& spec) {
  if (auto c = builtin_contract(spec)) return *c;
  if (std::filesystem::exists(spec)) return load_contract(spec);
  throw ContractError("unknown contract '" + spec + "' (not a built-in name or an existing file)");
}

std::vector<WindowSpan> plan_windows(std::size_t n, std::size_t window, std::size_t stride) {
  if (stride == 0 || stride > window) throw ContractError("windowing needs 0 < stride <= window");
  if (n < window) {
    throw ContractError("corpus of " + std::to_string(n) + " tokens is shorter than the window of " +
                        std::to_string(window));
  }
  std::vector<WindowSpan> out;
  std::size_t scored_to = 1;  // every position below this is scored (position 0 never is)
  for (std::size_t begin = 0; begin + window <= n; begin += stride) {
    WindowSpan w{begin, begin + window, 0};
    w.score_from = begin == 0 ? 1 : std::max(w.end - stride, begin + 1);
    out.push_back(w);
    scored_to = w.end;
  }
  if (scored_to < n) out.push_back(WindowSpan{n - window, n, std::max(scored_to, n - window + 1)});
  return out;
}

std::string corpus_hash(const TokenCorpus& corpus) {
  std::string bytes;
  bytes.reserve(corpus.tokens.size() * 4 + 64);
  for (TokenId t : corpus.tokens) {
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((t >> (8 * b)) & 0xff));
  }
  bytes += "|" + std::to_string(corpus.vocab_size);
  return sha256_hex(bytes);
}

PplReport sliding_window_ppl(const Checkpoint& ck, const TokenCorpus& corpus, const EvalContract& contract,
                             std::span<const Intervention> interventions, const EvalOptions& options) {
  contract.validate();
  corpus.validate();
  if (corpus.vocab_size > ck.config.vocab_size) {
    throw ContractError("corpus vocabulary (" + std::to_string(corpus.vocab_size) + ") exceeds the model's (" +
                        std::to_string(ck.config.vocab_size) + ")");
  }
  if (contract.window > ck.config.max_position) {
    throw ContractError("contract window " + std::to_string(contract.window) + " exceeds the model's max_position " +
                        std::to_string(ck.config.max_position));
  }
  if (!contract.corpus_id.empty() && contract.corpus_id != corpus.source) {
    throw ContractError("contract '" + contract.name + "' pins corpus '" + contract.corpus_id + "', got '" +
                        corpus.source + "'");
  }
  const std::size_t n = std::min(contract.token_budget, corpus.tokens.size());
  const auto windows = plan_windows(n, contract.window, contract.stride);
  const ExecutionPlan plan = build_plan(ck, interventions);

  PplReport rep;
  rep.contract_id = contract.id();
  rep.corpus_hash = corpus_hash(corpus);
  rep.corpus_tokens = n;
  rep.windows = windows.size();
  rep.window_nll.resize(windows.size());
  rep.window_tokens.resize(windows.size());
  for (const auto& iv : interventions) rep.interventions.push_back(to_string(iv));
  const std::size_t regular = n >= contract.window ? (n - contract.window) / contract.stride + 1 : 0;
  rep.partial_window = windows.size() > regular;

  std::vector<double> window_sum(windows.size());
  parallel_for(windows.size(), [&](std::size_t w) {
    const WindowSpan& win = windows[w];
    std::span<const TokenId> toks(corpus.tokens.data() + win.begin, win.end - win.begin);
    ForwardOptions fo;
    fo.rows = OutputRows::all;
    fo.first_row = win.score_from - 1 - win.begin;
    const ForwardResult r = forward_plan(ck, plan, toks, fo);
    double sum = 0.0;
    for (std::size_t p = win.score_from; p < win.end; ++p) {
      const std::size_t row = p - 1 - win.begin - fo.first_row;
      const auto logits = r.logits.row(row);
      sum -= log_softmax_at(logits, toks[p - win.begin]);
    }
    window_sum[w] = sum;
    rep.window_tokens[w] = win.scored();
    rep.window_nll[w] = sum / static_cast<double>(win.scored());
  });

  double total = 0.0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    total += window_sum[w];
    rep.scored_tokens += rep.window_tokens[w];
  }
  rep.mean_nll = total / static_cast<double>(rep.scored_tokens);
  rep.ppl = std::exp(rep.mean_nll);
  if (!std::isfinite(rep.ppl)) throw NumericalError("perplexity is not finite");

  if (options.bootstrap_resamples > 0) {
    std::vector<double> weights(rep.window_tokens.begin(), rep.window_tokens.end());
    rep.ci = bootstrap_ci(rep.window_nll, weights, options.bootstrap_resamples, options.ci_level, options.seed,
                          BootstrapStatistic::exp_weighted_mean);
  }
  return rep;
}

double delta_ppl_pct(double ppl, double baseline_ppl) {
  if (!(baseline_ppl > 0.0)) throw DomainError("baseline perplexity must be positive");
  return (ppl / baseline_ppl - 1.0) * 100.0;
}

InterventionEval evaluate_intervention(const Checkpoint& ck, const TokenCorpus& corpus, const EvalContract& contract,
                                       std::span<const Intervention> interventions, const PplReport& baseline,
                                       const EvalOptions& options) {
  if (baseline.contract_id != contract.id()) {
    throw ContractError("baseline was computed under contract '" + baseline.contract_id + "', not '" +
                        contract.id() + "'");
  }
  if (!baseline.corpus_hash.empty() && baseline.corpus_hash != corpus_hash(corpus)) {
    throw ContractError("baseline was computed on a different corpus (hash mismatch)");
  }
  InterventionEval out;
  out.report = sliding_window_ppl(ck, corpus, contract, interventions, options);
  out.delta_ppl_pct = delta_ppl_pct(out.report.ppl, baseline.ppl);
  return out;
}

namespace {

std::vector<std::size_t> lowest_k(const std::vector<double>& d, std::size_t k) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<StabilityRow> prompt_stability(const DistanceMatrix& full, std::span<const std::size_t> subset_sizes,
                                           std::uint64_t seed, std::size_t top_k) {
  std::vector<const PairDistanceRecord*> recs;
  for (const auto& r : full.records) {
    if (!r.non_finite) recs.push_back(&r);
  }
  if (recs.size() < 2) throw SpecError("prompt stability needs at least two finite pairs");
  const std::size_t n_prompts = recs.front()->per_prompt_ij.size();
  const bool repl = full.protocol == Protocol::replacement;

  std::vector<double> reference;
  for (const auto* r : recs) reference.push_back(r->distance());
  const auto ref_top = lowest_k(reference, top_k);

  std::vector<StabilityRow> rows;
  for (std::size_t size : subset_sizes) {
    if (size == 0 || size > n_prompts) {
      throw SpecError("subset size " + std::to_string(size) + " outside [1, " + std::to_string(n_prompts) + "]");
    }
    std::vector<std::size_t> idx(n_prompts);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(size);
    std::sort(idx.begin(), idx.end());

    std::vector<double> sub;
    for (const auto* r : recs) {
      double a = 0.0, b = 0.0;
      for (std::size_t k : idx) {
        a += r->per_prompt_ij[k];
        if (repl) b += r->per_prompt_ji[k];
      }
      a /= static_cast<double>(size);
      b /= static_cast<double>(size);
      sub.push_back(repl ? std::max(a, b) : a);
    }
    StabilityRow row;
    row.subset_size = size;
    row.spearman = rank_correlation(reference, sub, RankKind::spearman);
    row.kendall = rank_correlation(reference, sub, RankKind::kendall);
    const auto top = lowest_k(sub, top_k);
    row.top_k = top.size();
    std::vector<std::size_t> common;
    std::set_intersection(ref_top.begin(), ref_top.end(), top.begin(), top.end(), std::back_inserter(common));
    row.top_k_overlap = common.size();
    for (std::size_t p = 0; p < sub.size(); ++p) {
      if (reference[p] > kProbabilityFloor) {
        row.max_rel_deviation = std::max(row.max_rel_deviation, std::abs(sub[p] - reference[p]) / reference[p]);
      }
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace protogap
