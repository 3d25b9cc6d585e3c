#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "helpers.hpp"
#include "protogap/error.hpp"
#include "protogap/fixtures.hpp"
#include "protogap/metrics.hpp"

using namespace protogap;

namespace {

std::vector<float> random_dist(std::mt19937_64& rng, std::size_t n) {
  std::gamma_distribution<double> g(0.5, 1.0);
  std::vector<double> w(n);
  double s = 0;
  for (auto& x : w) s += (x = g(rng) + 1e-12);
  std::vector<float> p(n);
  for (std::size_t k = 0; k < n; ++k) p[k] = static_cast<float>(w[k] / s);
  return p;
}

DistanceMatrix synthetic(Protocol p, const std::vector<double>& d, std::size_t L) {
  DistanceMatrix m;
  m.protocol = p;
  m.n_layers = L;
  for (std::size_t k = 0; k < d.size(); ++k) {
    PairDistanceRecord r;
    r.i = k;
    r.j = k + 1;
    r.protocol = p;
    r.kl_ij = r.kl_ji = r.d_max = r.d_mean = r.d_geo = r.d_min = d[k];
    r.per_prompt_ij = r.per_prompt_ji = {d[k]};
    r.non_finite = !std::isfinite(d[k]);
    r.cls = classify_pair(d[k]);
    m.records.push_back(r);
  }
  return m;
}

}  // namespace

TEST_CASE("KL divergence closed forms") {
  const float p[2] = {0.5f, 0.5f};
  const float q[2] = {0.75f, 0.25f};
  CHECK(kl_divergence(p, p) == 0.0);
  const double want = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  CHECK(kl_divergence(p, q) == doctest::Approx(want).epsilon(1e-6));
  CHECK(kl_divergence(p, q) == doctest::Approx(0.14384).epsilon(1e-4));
}

TEST_CASE("KL is non-negative on random pairs") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 1000; ++t) {
    const auto p = random_dist(rng, 2 + t % 40);
    const auto q = random_dist(rng, p.size());
    CHECK(kl_divergence(p, q) >= 0.0);
  }
}

TEST_CASE("KL input validation and floor") {
  const float p[2] = {0.5f, 0.5f};
  const float bad[2] = {0.5f, 0.6f};
  const float zero[2] = {1.0f, 0.0f};
  const float three[3] = {0.2f, 0.3f, 0.5f};
  CHECK_THROWS_AS(kl_divergence(p, bad), DomainError);
  CHECK_THROWS_AS(kl_divergence(p, three), DimensionError);
  const double kl = kl_divergence(p, zero);
  CHECK(std::isfinite(kl));
  CHECK(kl == doctest::Approx(0.5 * std::log(0.5) + 0.5 * (std::log(0.5) - std::log(kProbabilityFloor))));
  CHECK(kl_divergence(zero, p) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("symmetrization") {
  CHECK(symmetrize(0.2, 0.4, Symmetrization::max) == doctest::Approx(0.4));
  CHECK(symmetrize(0.2, 0.4, Symmetrization::mean) == doctest::Approx(0.3));
  CHECK(symmetrize(0.2, 0.4, Symmetrization::geometric) == doctest::Approx(std::sqrt(0.08)));
  CHECK(symmetrize(0.2, 0.4, Symmetrization::min) == doctest::Approx(0.2));
  for (auto k : {Symmetrization::max, Symmetrization::mean, Symmetrization::geometric, Symmetrization::min}) {
    CHECK(symmetrize(0.37, 0.37, k) == 0.37);
  }
  CHECK_THROWS_AS(symmetrize(-0.1, 0.2, Symmetrization::max), DomainError);
  CHECK_THROWS_AS(symmetrize(NAN, 0.2, Symmetrization::max), DomainError);
}

TEST_CASE("symmetrization ordering holds exactly") {
  std::mt19937_64 rng(2);
  std::lognormal_distribution<double> ln(-2.0, 3.0);
  for (int t = 0; t < 10000; ++t) {
    const double a = ln(rng), b = (t % 7 == 0) ? a : ln(rng);
    const double mx = symmetrize(a, b, Symmetrization::max), me = symmetrize(a, b, Symmetrization::mean);
    const double ge = symmetrize(a, b, Symmetrization::geometric), mn = symmetrize(a, b, Symmetrization::min);
    REQUIRE(mx >= me);
    REQUIRE(me >= ge);
    REQUIRE(ge >= mn);
  }
}

TEST_CASE("classification thresholds") {
  CHECK(classify_pair(0.036) == PairClass::strong);
  CHECK(classify_pair(0.07) == PairClass::conditional);
  CHECK(classify_pair(0.171) == PairClass::non);
  CHECK(classify_pair(0.05) == PairClass::conditional);
  CHECK(classify_pair(0.10) == PairClass::non);
  CHECK(classify_pair(NAN) == PairClass::non);
  CHECK_THROWS_AS((ClassifierThresholds{0.2, 0.1}.validate()), ConfigError);
}

TEST_CASE("pair filters") {
  CHECK(PairFilter::parse("all").pairs(24).size() == 276);
  CHECK(PairFilter::parse("adjacent").pairs(24).size() == 23);
  CHECK(PairFilter::parse("gap:3").pairs(36).size() == 102);
  CHECK(PairFilter::parse("gap:1").pairs(10) == PairFilter::parse("adjacent").pairs(10));
  CHECK(PairFilter::parse("gap:3").to_string() == "gap:3");
  CHECK_THROWS(PairFilter::parse("gap:0"));
  CHECK_THROWS(PairFilter::parse("near"));
  for (const auto& [i, j] : PairFilter::parse("all").pairs(5)) CHECK(i < j);
}

TEST_CASE("protocol identities on fixtures") {
  const auto start = std::chrono::steady_clock::now();
  const Checkpoint ck = fixtures::golden_fixture();
  const PromptSet prompts = testutil::random_prompts(10, 12, ck.config.vocab_size);
  const BaselineCache cache(ck, prompts);
  for (std::size_t i = 0; i < ck.n_layers(); ++i) {
    CHECK(replacement_distance(cache, i, i).d_max <= 1e-6);
    CHECK(interchange_distance(cache, i, i).d_max <= 1e-6);
  }
  const auto a = interchange_distance(cache, 0, 1);
  const auto b = interchange_distance(cache, 1, 0);
  CHECK(a.d_max == b.d_max);
  CHECK(a.per_prompt_ij == b.per_prompt_ij);
  CHECK(a.d_max == a.d_min);
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(1));
}

TEST_CASE("identical layers give zero distance") {
  const Checkpoint ck = fixtures::identical_layers_fixture(2);
  const PromptSet prompts = testutil::random_prompts(6, 10, ck.config.vocab_size);
  const BaselineCache cache(ck, prompts);
  CHECK(replacement_distance(cache, 0, 1).d_max <= 1e-6);
  CHECK(interchange_distance(cache, 0, 1).d_max <= 1e-6);
  CHECK(head_swap_distance(cache, 0, 1, 0) <= 1e-6);
  CHECK_THROWS_AS(head_swap_distance(cache, 0, 1, 99), SpecError);
}

TEST_CASE("replacement record takes the larger direction") {
  const Checkpoint ck = fixtures::random_checkpoint({.n_layers = 3, .seed = 17});
  const PromptSet prompts = testutil::random_prompts(5, 10, ck.config.vocab_size);
  const BaselineCache cache(ck, prompts);
  const auto r = replacement_distance(cache, 0, 2);
  CHECK(r.d_max == std::max(r.kl_ij, r.kl_ji));
  CHECK(r.d_min == std::min(r.kl_ij, r.kl_ji));
  CHECK(r.d_max >= r.d_mean);
  CHECK(r.d_mean >= r.d_geo);
  CHECK(r.d_geo >= r.d_min);
  CHECK(r.per_prompt_ij.size() == 5);

  const BaselineCache fresh(ck, prompts, MeasureOptions{.reuse_prefix = false});
  const auto r2 = replacement_distance(fresh, 0, 2);
  CHECK(r2.per_prompt_ij == r.per_prompt_ij);
  CHECK(r2.per_prompt_ji == r.per_prompt_ji);
}

TEST_CASE("all-position KL averages over rows") {
  const Checkpoint ck = fixtures::random_checkpoint({.n_layers = 2, .seed = 3});
  const PromptSet prompts = testutil::random_prompts(3, 8, ck.config.vocab_size);
  const BaselineCache all(ck, prompts, MeasureOptions{.positions = Positions::all});
  CHECK(all.distributions()[0].size() == 8);
  CHECK(interchange_distance(all, 0, 1).d_max > 0.0);
}

TEST_CASE("sweep with bootstrap CIs") {
  const Checkpoint ck = fixtures::random_checkpoint({.n_layers = 4, .seed = 5});
  const PromptSet prompts = testutil::random_prompts(8, 10, ck.config.vocab_size);
  const BaselineCache cache(ck, prompts, MeasureOptions{.bootstrap_resamples = 200});
  const DistanceMatrix m = sweep_distances(cache, PairFilter::parse("all"), Protocol::replacement);
  CHECK(m.records.size() == 6);
  CHECK(m.agreement.has_value());
  for (const auto& r : m.records) {
    REQUIRE(r.ci.has_value());
    CHECK(r.ci->lo <= r.d_max);
    CHECK(r.ci->hi >= r.d_max);
  }
  CHECK(m.find(3, 1) == m.find(1, 3));
  CHECK(m.find(1, 3) != nullptr);
}

TEST_CASE("gap report verdicts") {
  const std::vector<double> same = {0.02, 0.03, 0.04};
  auto g = protocol_gap_report(synthetic(Protocol::replacement, same, 4), synthetic(Protocol::interchange, same, 4));
  CHECK(g.verdict == Regime::tied);
  CHECK(*g.pooled_ir == doctest::Approx(1.0));
  CHECK(g.max_gap == 0.0);

  const std::vector<double> hi = {0.5, 0.6, 0.9};
  const std::vector<double> lo = {0.05, 0.1, 0.2};
  g = protocol_gap_report(synthetic(Protocol::replacement, hi, 4), synthetic(Protocol::interchange, lo, 4));
  CHECK(g.verdict == Regime::divergent);
  CHECK(g.ir_level == "distance");

  RegimeConfig pr;
  pr.pruning_ir = 0.21;
  g = protocol_gap_report(synthetic(Protocol::replacement, hi, 4), synthetic(Protocol::interchange, hi, 4), {}, pr);
  CHECK(g.verdict == Regime::divergent);
  CHECK(g.ir_level == "pruning-dppl");
  pr.pruning_ir = 1.03;
  g = protocol_gap_report(synthetic(Protocol::replacement, hi, 4), synthetic(Protocol::interchange, lo, 4), {}, pr);
  CHECK(g.verdict == Regime::tied);

  const std::vector<double> hi2 = {0.3, 0.4, 0.5};
  g = protocol_gap_report(synthetic(Protocol::replacement, hi, 4), synthetic(Protocol::interchange, hi2, 4));
  CHECK(g.verdict == Regime::weak_signal);

  const std::vector<double> zeros = {0.0, 0.0, 0.0};
  g = protocol_gap_report(synthetic(Protocol::replacement, zeros, 4), synthetic(Protocol::interchange, zeros, 4));
  CHECK(g.verdict == Regime::tied);
  CHECK(g.undefined_ratios == 3);
  CHECK(g.evidence.find("below floor") != std::string::npos);
}

TEST_CASE("gap report counts violations and excludes non-finite pairs") {
  const std::vector<double> r = {0.1, NAN, 0.3};
  const std::vector<double> i = {0.2, 0.1, 0.1};
  const auto g = protocol_gap_report(synthetic(Protocol::replacement, r, 4), synthetic(Protocol::interchange, i, 4));
  CHECK(g.finite_pairs == 2);
  CHECK(g.violations == 1);
  CHECK(g.pairs.size() == 3);
  CHECK_FALSE(g.pairs[1].finite);
  CHECK_THROWS_AS(protocol_gap_report(synthetic(Protocol::replacement, r, 4),
                                      synthetic(Protocol::interchange, {0.1}, 4)),
                  SpecError);
}

TEST_CASE("rope counterfactual") {
  const Checkpoint blind = fixtures::blind_attention_fixture(3);
  const PromptSet prompts = testutil::random_prompts(4, 10, blind.config.vocab_size);
  const auto pairs = PairFilter::parse("all").pairs(3);
  const RopeCounterfactual c = rope_counterfactual(blind, pairs, prompts);
  CHECK(c.mean_baseline_divergence <= 1e-9);
  CHECK(c.gap_deltas.size() == pairs.size());
  CHECK(c.ir_with.size() == pairs.size());

  const Checkpoint absolute = fixtures::golden_fixture();
  CHECK_THROWS_AS(rope_counterfactual(absolute, pairs, prompts), SpecError);
}
