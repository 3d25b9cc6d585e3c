#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "protogap/fixtures.hpp"
#include "protogap/report.hpp"

using namespace protogap;

namespace {

DistanceMatrix small_sweep(Protocol p, std::size_t L = 4, const char* filter = "all") {
  static std::vector<Checkpoint> keep;
  static std::vector<PromptSet> keep_prompts;
  keep.push_back(fixtures::random_checkpoint({.n_layers = L, .seed = 9}));
  keep_prompts.push_back(testutil::random_prompts(4, 8, keep.back().config.vocab_size));
  const BaselineCache cache(keep.back(), keep_prompts.back(), MeasureOptions{.bootstrap_resamples = 100});
  return sweep_distances(cache, PairFilter::parse(filter), p, {}, "fixture");
}

}  // namespace

TEST_CASE("distance matrix JSON round trip") {
  const DistanceMatrix m = small_sweep(Protocol::replacement);
  const auto text = to_json(m).dump();
  const DistanceMatrix back = distance_matrix_from_json(nlohmann::json::parse(text));
  CHECK(back.records.size() == m.records.size());
  CHECK(back.model_id == "fixture");
  CHECK(back.pair_filter == "all");
  for (std::size_t k = 0; k < m.records.size(); ++k) {
    const auto& a = m.records[k];
    const auto& b = back.records[k];
    CHECK(a.i == b.i);
    CHECK(a.j == b.j);
    CHECK(a.d_max == b.d_max);
    CHECK(a.d_geo == b.d_geo);
    CHECK(a.kl_ji == b.kl_ji);
    CHECK(a.cls == b.cls);
    CHECK(a.per_prompt_ij == b.per_prompt_ij);
    REQUIRE(b.ci);
    CHECK(a.ci->lo == b.ci->lo);
  }
  CHECK(to_json(back).dump() == text);
}

TEST_CASE("non-finite values serialize as null and come back NaN") {
  DistanceMatrix m = small_sweep(Protocol::interchange);
  m.records[0].d_max = NAN;
  m.records[0].non_finite = true;
  const auto j = to_json(m);
  CHECK(nlohmann::json::parse(j.dump())["records"][0]["d_max"].is_null());
  const auto back = distance_matrix_from_json(nlohmann::json::parse(j.dump()));
  CHECK(std::isnan(back.records[0].d_max));
  CHECK(back.records[0].non_finite);
}

TEST_CASE("ppl report and selection round trips") {
  PplReport r;
  r.contract_id = "c@0123456789ab";
  r.corpus_hash = "ff";
  r.ppl = 19.19;
  r.mean_nll = std::log(19.19);
  r.windows = 2;
  r.window_nll = {2.9, 3.0};
  r.window_tokens = {511, 256};
  r.scored_tokens = 767;
  r.interventions = {"delete:5"};
  const auto back = ppl_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  CHECK(back.ppl == r.ppl);
  CHECK(back.window_tokens == r.window_tokens);
  CHECK(back.contract_id == r.contract_id);
  CHECK(back.interventions == r.interventions);

  SelectionResult s = greedy_select({0.5, 0.1, 0.2, 0.15}, 2, 1, "greedy-interchange");
  s.contract_id = r.contract_id;
  s.ppl = 20.0;
  const auto sb = selection_from_json(nlohmann::json::parse(to_json(s).dump()));
  CHECK(sb.layers == s.layers);
  CHECK(sb.method == s.method);
  CHECK(*sb.ppl == 20.0);
  CHECK(sb.contract_id == s.contract_id);
}

TEST_CASE("plot data shapes") {
  const DistanceMatrix m = small_sweep(Protocol::replacement, 5, "adjacent");
  const auto h = heatmap_plotdata(m);
  CHECK(h.size() == 25);
  std::size_t nan_count = 0;
  for (const auto& p : h) {
    const auto j = std::stoul(p.series.substr(p.series.rfind('=') + 1));
    if (static_cast<std::size_t>(p.x) == j) CHECK(p.y == 0.0);
    nan_count += std::isnan(p.y);
  }
  CHECK(nan_count == 25 - 5 - 2 * 4);
  CHECK(adjacent_profile_plotdata(m).size() == 4);
  CHECK(plotdata_json(h).size() == 25);
  const auto csv = plotdata_csv(adjacent_profile_plotdata(m));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("csv writers have one row per record") {
  const DistanceMatrix m = small_sweep(Protocol::replacement);
  const auto csv = distance_matrix_csv(m);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + static_cast<long>(m.records.size()));
  CHECK(csv.rfind("i,j,", 0) == 0);
  const auto g = protocol_gap_report(m, small_sweep(Protocol::interchange));
  const auto gcsv = gap_report_csv(g);
  CHECK(std::count(gcsv.begin(), gcsv.end(), '\n') == 1 + static_cast<long>(g.pairs.size()));
}

TEST_CASE("golden logits") {
  const Checkpoint ck = fixtures::golden_fixture();
  const std::vector<std::vector<TokenId>> seqs = {{1, 2, 3, 4}, {5, 6, 7}};
  const auto g = make_golden(ck, seqs);
  const std::string path = testutil::temp_path("golden.json");
  save_golden(g, path);
  const auto back = load_golden(path);
  const auto cmp = compare_golden(ck, back);
  CHECK(cmp.sequences == 2);
  CHECK(cmp.positions == 7);
  CHECK(cmp.max_abs_diff < 1e-6);

  auto off = back;
  off[1].logits[2][0] += 0.5f;
  CHECK(compare_golden(ck, off).max_abs_diff == doctest::Approx(0.5).epsilon(1e-3));
  std::filesystem::remove(path);
}

TEST_CASE("manifest timestamp honours SOURCE_DATE_EPOCH") {
  setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(utc_timestamp() == "1970-01-02T00:00:00Z");
  unsetenv("SOURCE_DATE_EPOCH");
  RunManifest m;
  m.run_id = "x";
  const auto j = to_json(m);
  CHECK(j["tool_version"] == kToolVersion);
}
