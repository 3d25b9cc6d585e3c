#include "protogap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "protogap/error.hpp"
#include "protogap/parallel.hpp"

namespace protogap {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double mean_or_nan(const std::vector<double>& xs) {
  if (xs.empty()) return kNaN;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

bool all_finite(const std::vector<double>& xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

/// First slot at which `plan` can differ from `base`.
std::size_t divergence_from(const ExecutionPlan& plan, const ExecutionPlan& base) {
  if (plan.rope_enabled != base.rope_enabled) return 0;
  const std::size_t n = std::min(plan.slots.size(), base.slots.size());
  for (std::size_t s = 0; s < n; ++s) {
    const BlockSlot& a = plan.slots[s];
    const BlockSlot& b = base.slots[s];
    if (a.position != b.position || a.weights != b.weights || a.head_sources != b.head_sources) return s;
  }
  return n;
}

}  // namespace

double kl_divergence(std::span<const float> p, std::span<const float> q) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: distributions differ in length");
  if (p.empty()) throw DomainError("kl_divergence of empty distributions");
  double sp = 0.0, sq = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    sp += p[k];
    sq += q[k];
  }
  if (std::abs(sp - 1.0) > 1e-4 || std::abs(sq - 1.0) > 1e-4) {
    throw DomainError("kl_divergence: inputs must be probability vectors (sums " + fmt(sp) + ", " + fmt(sq) + ")");
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double pk = p[k];
    if (pk <= 0.0) continue;
    const double qk = std::max<double>(q[k], kProbabilityFloor);
    kl += pk * (std::log(pk) - std::log(qk));
  }
  return std::max(kl, 0.0);
}

double symmetrize(double a, double b, Symmetrization kind) {
  if (!(a >= 0.0) || !(b >= 0.0)) throw DomainError("symmetrize: directional KLs must be non-negative");
  const double lo = std::min(a, b), hi = std::max(a, b);
  const double mean = lo + 0.5 * (hi - lo);
  switch (kind) {
    case Symmetrization::max:
      return hi;
    case Symmetrization::min:
      return lo;
    case Symmetrization::mean:
      return mean;
    case Symmetrization::geometric:
      // Clamped so rounding can never break max >= mean >= geo >= min.
      return std::clamp(std::sqrt(a) * std::sqrt(b), lo, mean);
  }
  return hi;
}

void ClassifierThresholds::validate() const {
  if (!(strong > 0.0 && strong < conditional)) {
    throw ConfigError("classifier thresholds need 0 < strong < conditional");
  }
}

PairClass classify_pair(double d, const ClassifierThresholds& t) {
  if (!(d >= 0.0)) return PairClass::non;
  if (d < t.strong) return PairClass::strong;
  if (d < t.conditional) return PairClass::conditional;
  return PairClass::non;
}

std::string to_string(PairClass c) {
  switch (c) {
    case PairClass::strong:
      return "strong";
    case PairClass::conditional:
      return "conditional";
    case PairClass::non:
      return "non";
  }
  return "non";
}

std::string to_string(Protocol p) { return p == Protocol::replacement ? "replacement" : "interchange"; }

Protocol parse_protocol(const std::string& text) {
  if (text == "replacement") return Protocol::replacement;
  if (text == "interchange") return Protocol::interchange;
  throw ParseError("unknown protocol '" + text + "'");
}

std::string to_string(Positions p) { return p == Positions::last ? "last" : "all"; }

BaselineCache::BaselineCache(const Checkpoint& ck, const PromptSet& prompts, const MeasureOptions& options,
                             std::vector<Intervention> base)
    : ck_(&ck), prompts_(&prompts), options_(options), base_(std::move(base)) {
  prompts.validate();
  base_plan_ = build_plan(ck, base_);
  const std::size_t n = prompts.size();
  dists_.resize(n);

  bool keep_hidden = options.reuse_prefix;
  if (keep_hidden) {
    double bytes = 0.0;
    for (const auto& p : prompts.prompts) {
      bytes += 4.0 * static_cast<double>(p.size() * ck.config.d_model * (base_plan_.slots.size() + 1));
    }
    keep_hidden = bytes <= 1024.0 * 1024.0 * 1024.0;
  }
  if (keep_hidden) hidden_.resize(n);

  ForwardOptions fo;
  fo.capture = keep_hidden;
  fo.rows = options.positions == Positions::last ? OutputRows::last : OutputRows::all;
  parallel_for(n, [&](std::size_t k) {
    ForwardResult r = forward_plan(ck, base_plan_, prompts.prompts[k], fo);
    auto& rows = dists_[k];
    rows.resize(r.rows.size());
    for (std::size_t row = 0; row < r.rows.size(); ++row) rows[row] = r.distribution(row);
    if (keep_hidden) hidden_[k] = std::move(r.hidden);
  });
}

ForwardResult BaselineCache::run(std::size_t prompt, std::span<const Intervention> interventions) const {
  std::vector<Intervention> all = base_;
  all.insert(all.end(), interventions.begin(), interventions.end());
  const ExecutionPlan plan = build_plan(*ck_, all);
  ForwardOptions fo;
  fo.rows = options_.positions == Positions::last ? OutputRows::last : OutputRows::all;
  std::size_t start = 0;
  const Tensor* state = nullptr;
  if (has_hidden()) {
    start = divergence_from(plan, base_plan_);
    if (start > 0) state = &hidden_[prompt][start];
  }
  return forward_plan(*ck_, plan, prompts_->prompts[prompt], fo, start, state);
}

std::vector<double> BaselineCache::prompt_kls(std::span<const Intervention> interventions) const {
  std::vector<double> out(prompts_->size(), kNaN);
  parallel_for(prompts_->size(), [&](std::size_t k) {
    try {
      const ForwardResult r = run(k, interventions);
      double sum = 0.0;
      for (std::size_t row = 0; row < r.rows.size(); ++row) {
        sum += kl_divergence(dists_[k][row], r.distribution(row));
      }
      out[k] = sum / static_cast<double>(r.rows.size());
    } catch (const NumericalError&) {
      out[k] = kNaN;
    }
  });
  return out;
}

namespace {

void finish_record(PairDistanceRecord& rec, const BaselineCache& cache, const ClassifierThresholds& t) {
  const bool repl = rec.protocol == Protocol::replacement;
  rec.non_finite = !all_finite(rec.per_prompt_ij) || (repl && !all_finite(rec.per_prompt_ji));
  if (rec.non_finite) {
    rec.kl_ij = rec.kl_ji = rec.d_max = rec.d_mean = rec.d_geo = rec.d_min = kNaN;
    rec.cls = PairClass::non;
    return;
  }
  rec.kl_ij = mean_or_nan(rec.per_prompt_ij);
  rec.kl_ji = repl ? mean_or_nan(rec.per_prompt_ji) : rec.kl_ij;
  rec.d_max = symmetrize(rec.kl_ij, rec.kl_ji, Symmetrization::max);
  rec.d_mean = symmetrize(rec.kl_ij, rec.kl_ji, Symmetrization::mean);
  rec.d_geo = symmetrize(rec.kl_ij, rec.kl_ji, Symmetrization::geometric);
  rec.d_min = symmetrize(rec.kl_ij, rec.kl_ji, Symmetrization::min);
  rec.cls = classify_pair(rec.distance(), t);

  const MeasureOptions& o = cache.options();
  if (o.bootstrap_resamples > 0) {
    const auto& a = rec.per_prompt_ij;
    const auto& b = repl ? rec.per_prompt_ji : rec.per_prompt_ij;
    rec.ci = bootstrap_percentile(a.size(), o.bootstrap_resamples, o.ci_level, o.seed,
                                  [&](std::span<const std::size_t> idx) {
                                    double sa = 0.0, sb = 0.0;
                                    for (std::size_t k : idx) {
                                      sa += a[k];
                                      sb += b[k];
                                    }
                                    return std::max(sa, sb) / static_cast<double>(idx.size());
                                  });
  }
}

void check_layer(const BaselineCache& cache, std::size_t i) {
  if (i >= cache.checkpoint().n_layers()) {
    throw SpecError("layer index " + std::to_string(i) + " out of range [0, " +
                    std::to_string(cache.checkpoint().n_layers()) + ")");
  }
}

}  // namespace

PairDistanceRecord replacement_distance(const BaselineCache& cache, std::size_t i, std::size_t j,
                                        const ClassifierThresholds& t) {
  check_layer(cache, i);
  check_layer(cache, j);
  PairDistanceRecord rec;
  rec.i = i;
  rec.j = j;
  rec.protocol = Protocol::replacement;
  const Intervention ij[1] = {Replace{i, j}};
  const Intervention ji[1] = {Replace{j, i}};
  rec.per_prompt_ij = cache.prompt_kls(ij);
  rec.per_prompt_ji = cache.prompt_kls(ji);
  finish_record(rec, cache, t);
  return rec;
}

PairDistanceRecord interchange_distance(const BaselineCache& cache, std::size_t i, std::size_t j,
                                        const ClassifierThresholds& t) {
  check_layer(cache, i);
  check_layer(cache, j);
  PairDistanceRecord rec;
  rec.i = std::min(i, j);
  rec.j = std::max(i, j);
  rec.protocol = Protocol::interchange;
  const Intervention swap[1] = {Interchange{rec.i, rec.j}};
  rec.per_prompt_ij = cache.prompt_kls(swap);
  finish_record(rec, cache, t);
  return rec;
}

PairDistanceRecord replacement_distance(const Checkpoint& ck, std::size_t i, std::size_t j, const PromptSet& prompts,
                                        const MeasureOptions& options) {
  const BaselineCache cache(ck, prompts, options);
  return replacement_distance(cache, i, j);
}

PairDistanceRecord interchange_distance(const Checkpoint& ck, std::size_t i, std::size_t j, const PromptSet& prompts,
                                        const MeasureOptions& options) {
  const BaselineCache cache(ck, prompts, options);
  return interchange_distance(cache, i, j);
}

PairFilter PairFilter::parse(const std::string& text) {
  PairFilter f;
  if (text == "all") {
    f.kind = Kind::all;
  } else if (text == "adjacent") {
    f.kind = Kind::adjacent;
  } else if (text.rfind("gap:", 0) == 0) {
    f.kind = Kind::max_gap;
    const std::string num = text.substr(4);
    if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos) {
      throw ParseError("pair filter 'gap:<k>' needs a positive integer, got '" + text + "'");
    }
    f.k = std::stoul(num);
    if (f.k == 0) throw ParseError("pair filter gap must be at least 1");
  } else {
    throw ParseError("unknown pair filter '" + text + "' (expected all, adjacent or gap:<k>)");
  }
  return f;
}

std::string PairFilter::to_string() const {
  switch (kind) {
    case Kind::all:
      return "all";
    case Kind::adjacent:
      return "adjacent";
    case Kind::max_gap:
      return "gap:" + std::to_string(k);
  }
  return "adjacent";
}

std::vector<std::pair<std::size_t, std::size_t>> PairFilter::pairs(std::size_t L) const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = i + 1; j < L; ++j) {
      const std::size_t g = j - i;
      if (kind == Kind::all || (kind == Kind::adjacent && g == 1) || (kind == Kind::max_gap && g <= k)) {
        out.emplace_back(i, j);
      }
    }
  }
  return out;
}

const PairDistanceRecord* DistanceMatrix::find(std::size_t i, std::size_t j) const {
  for (const auto& r : records) {
    if ((r.i == i && r.j == j) || (r.i == j && r.j == i)) return &r;
  }
  return nullptr;
}

DistanceMatrix sweep_distances(const BaselineCache& cache, const PairFilter& filter, Protocol protocol,
                               const ClassifierThresholds& thresholds, const std::string& model_id) {
  thresholds.validate();
  const std::size_t L = cache.checkpoint().n_layers();
  const auto pairs = filter.pairs(L);
  if (pairs.empty()) throw SpecError("pair filter '" + filter.to_string() + "' yields no pairs for L=" + std::to_string(L));

  DistanceMatrix m;
  m.model_id = model_id;
  m.protocol = protocol;
  m.pair_filter = filter.to_string();
  m.prompt_provenance = cache.prompts().provenance;
  m.positions = cache.options().positions;
  m.n_layers = L;
  m.thresholds = thresholds;
  m.records.resize(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t k) {
    const auto [i, j] = pairs[k];
    m.records[k] = protocol == Protocol::replacement ? replacement_distance(cache, i, j, thresholds)
                                                     : interchange_distance(cache, i, j, thresholds);
  });

  std::vector<double> dmax, dmean, dgeo, dmin;
  for (const auto& r : m.records) {
    if (r.non_finite) {
      m.flagged.emplace_back(r.i, r.j);
      continue;
    }
    if (r.cls == PairClass::strong) ++m.strong_count;
    if (r.cls == PairClass::conditional) ++m.conditional_count;
    dmax.push_back(r.d_max);
    dmean.push_back(r.d_mean);
    dgeo.push_back(r.d_geo);
    dmin.push_back(r.d_min);
  }
  if (protocol == Protocol::replacement && dmax.size() >= 2) {
    SymmetrizationAgreement a;
    a.rho_mean = rank_correlation(dmax, dmean, RankKind::spearman);
    a.rho_geo = rank_correlation(dmax, dgeo, RankKind::spearman);
    a.rho_min = rank_correlation(dmax, dmin, RankKind::spearman);
    m.agreement = a;
  }
  return m;
}

double head_swap_distance(const BaselineCache& cache, std::size_t i, std::size_t j, std::size_t head) {
  check_layer(cache, i);
  check_layer(cache, j);
  if (head >= cache.checkpoint().config.n_heads) {
    throw SpecError("head index " + std::to_string(head) + " out of range [0, " +
                    std::to_string(cache.checkpoint().config.n_heads) + ")");
  }
  const Intervention iv[1] = {HeadReplace{i, j, head}};
  return mean_or_nan(cache.prompt_kls(iv));
}

void RegimeConfig::validate() const {
  if (!(divergent_cutoff > 0.0) || !(tied_lo > 0.0 && tied_lo <= tied_hi) || !(ratio_floor > 0.0)) {
    throw ConfigError("regime config needs divergent_cutoff > 0, 0 < tied_lo <= tied_hi, ratio_floor > 0");
  }
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::divergent:
      return "divergent";
    case Regime::tied:
      return "tied";
    case Regime::weak_signal:
      return "weak-signal";
    case Regime::indeterminate:
      return "indeterminate";
  }
  return "indeterminate";
}

std::string regime_advice(Regime r) {
  switch (r) {
    case Regime::divergent:
      return "Replacement distances are high while interchange distances stay low: rank removal candidates by "
             "the interchange protocol.";
    case Regime::tied:
      return "The two protocols agree: either swap ranking is a reasonable zero-shot selector; "
             "calibrated iterative selection may do better at larger removal counts.";
    case Regime::weak_signal:
      return "Both protocols report high distances: swap scores alone are a weak signal here; bring in "
             "calibration data or another criterion.";
    case Regime::indeterminate:
      return "The measurements do not match any regime; no recommendation is made.";
  }
  return "";
}

GapReport protocol_gap_report(const DistanceMatrix& repl, const DistanceMatrix& inter,
                              const ClassifierThresholds& thresholds, const RegimeConfig& regime) {
  thresholds.validate();
  regime.validate();
  if (repl.records.size() != inter.records.size()) {
    throw SpecError("gap report: matrices cover different pair sets (" + std::to_string(repl.records.size()) +
                    " vs " + std::to_string(inter.records.size()) + " pairs)");
  }
  GapReport g;
  g.config = regime;
  g.thresholds = thresholds;
  std::vector<double> gaps, reprs, inters, ratios;
  bool all_below_floor = true;
  for (const auto& r : repl.records) {
    const PairDistanceRecord* q = inter.find(r.i, r.j);
    if (!q) {
      throw SpecError("gap report: pair (" + std::to_string(r.i) + "," + std::to_string(r.j) +
                      ") missing from the interchange matrix");
    }
    PairGap pg;
    pg.i = r.i;
    pg.j = r.j;
    pg.d_repl = r.distance();
    pg.d_inter = q->distance();
    pg.finite = std::isfinite(pg.d_repl) && std::isfinite(pg.d_inter);
    pg.gap = pg.d_repl - pg.d_inter;
    if (pg.finite) {
      if (pg.d_repl >= regime.ratio_floor) {
        pg.ratio = pg.d_inter / pg.d_repl;
        ratios.push_back(*pg.ratio);
      } else {
        ++g.undefined_ratios;
      }
      pg.interchange_exceeds = pg.d_inter > pg.d_repl;
      if (pg.interchange_exceeds) ++g.violations;
      if (pg.d_repl >= regime.ratio_floor || pg.d_inter >= regime.ratio_floor) all_below_floor = false;
      gaps.push_back(pg.gap);
      reprs.push_back(pg.d_repl);
      inters.push_back(pg.d_inter);
    }
    g.pairs.push_back(pg);
  }
  g.finite_pairs = gaps.size();
  if (g.finite_pairs == 0) {
    g.verdict = Regime::indeterminate;
    g.evidence = "no pair has finite distances under both protocols";
    return g;
  }
  g.mean_gap = mean_or_nan(gaps);
  g.median_gap = median(gaps);
  g.p75_gap = quantile(gaps, 0.75);
  g.max_gap = *std::max_element(gaps.begin(), gaps.end());
  g.median_repl = median(reprs);
  g.median_inter = median(inters);

  if (regime.pruning_ir) {
    g.pooled_ir = *regime.pruning_ir;
    g.ir_level = "pruning-dppl";
  } else if (!ratios.empty()) {
    g.pooled_ir = mean_or_nan(ratios);
    g.ir_level = "distance";
  }

  const double cond = thresholds.conditional;
  const std::string medians = "median d_repl=" + fmt(g.median_repl) + ", median d_inter=" + fmt(g.median_inter);
  if (!g.pooled_ir) {
    if (all_below_floor) {
      g.verdict = Regime::tied;
      g.evidence = "both protocols below floor " + fmt(regime.ratio_floor) + " on every pair";
    } else {
      g.verdict = Regime::indeterminate;
      g.evidence = "I/R undefined: every d_repl below floor " + fmt(regime.ratio_floor);
    }
    return g;
  }
  const double ir = *g.pooled_ir;
  const std::string irs = "I/R=" + fmt(ir) + " (" + g.ir_level + " level)";
  if (ir < regime.divergent_cutoff && g.median_repl > cond) {
    g.verdict = Regime::divergent;
    g.evidence = irs + " < " + fmt(regime.divergent_cutoff) + " and median d_repl=" + fmt(g.median_repl) + " > " +
                 fmt(cond);
  } else if (ir >= regime.tied_lo && ir <= regime.tied_hi) {
    g.verdict = Regime::tied;
    g.evidence = irs + " within [" + fmt(regime.tied_lo) + ", " + fmt(regime.tied_hi) + "]; " + medians;
  } else if (g.median_repl > cond && g.median_inter > cond) {
    g.verdict = Regime::weak_signal;
    g.evidence = irs + "; both medians exceed " + fmt(cond) + " (" + medians + ")";
  } else {
    g.verdict = Regime::indeterminate;
    g.evidence = irs + "; " + medians + "; no rule matched";
  }
  return g;
}

RopeCounterfactual rope_counterfactual(const Checkpoint& ck, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                       const PromptSet& prompts, const MeasureOptions& options,
                                       const ClassifierThresholds& thresholds, const RegimeConfig& regime) {
  if (ck.config.pe_type != PeType::rotary) {
    throw SpecError("the rope-off counterfactual is undefined for a model without rotary position encoding");
  }
  if (pairs.empty()) throw SpecError("rope counterfactual needs at least one pair");
  const BaselineCache with(ck, prompts, options);
  const BaselineCache without(ck, prompts, options, {RopeOff{}});

  auto matrices = [&](const BaselineCache& cache) {
    DistanceMatrix r, x;
    r.protocol = Protocol::replacement;
    x.protocol = Protocol::interchange;
    r.records.resize(pairs.size());
    x.records.resize(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t k) {
      r.records[k] = replacement_distance(cache, pairs[k].first, pairs[k].second, thresholds);
      x.records[k] = interchange_distance(cache, pairs[k].first, pairs[k].second, thresholds);
    });
    return std::make_pair(std::move(r), std::move(x));
  };
  const auto [r_on, x_on] = matrices(with);
  const auto [r_off, x_off] = matrices(without);

  RopeCounterfactual out;
  out.with_rope = protocol_gap_report(r_on, x_on, thresholds, regime);
  out.without_rope = protocol_gap_report(r_off, x_off, thresholds, regime);

  const Intervention off[1] = {RopeOff{}};
  out.baseline_divergence = with.prompt_kls(off);
  out.mean_baseline_divergence = mean_or_nan(out.baseline_divergence);

  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const PairGap& a = out.with_rope.pairs[k];
    const PairGap& b = out.without_rope.pairs[k];
    out.gap_deltas.push_back(a.finite && b.finite ? b.gap - a.gap : kNaN);
    out.ir_with.push_back(a.ratio.value_or(kNaN));
    out.ir_without.push_back(b.ratio.value_or(kNaN));
  }
  std::vector<double> finite_deltas;
  for (double d : out.gap_deltas) {
    if (std::isfinite(d)) finite_deltas.push_back(d);
  }
  out.sign = sign_test(finite_deltas);
  return out;
}

}  // namespace protogap
