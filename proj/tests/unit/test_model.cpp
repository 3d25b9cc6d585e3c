#include <doctest.h>

#include <random>
#include <set>

#include "helpers.hpp"
#include "protogap/checkpoint.hpp"
#include "protogap/error.hpp"
#include "protogap/fixtures.hpp"
#include "protogap/model.hpp"

using namespace protogap;

namespace {

std::vector<TokenId> seq(std::size_t n, std::size_t vocab, std::uint64_t seed = 5) {
  return testutil::random_prompts(1, n, vocab, seed).prompts[0];
}

fixtures::FixtureOptions family(int k, std::size_t layers, std::uint64_t seed) {
  fixtures::FixtureOptions o;
  o.n_layers = layers;
  o.seed = seed;
  switch (k % 4) {
    case 0:
      break;
    case 1:
      o.pe_type = PeType::rotary;
      o.norm_kind = NormKind::rmsnorm;
      o.activation = Activation::silu;
      o.biases = false;
      o.n_kv_heads = 1;
      o.qk_norm = true;
      break;
    case 2:
      o.pe_type = PeType::alibi;
      o.tied_lm_head = true;
      break;
    default:
      o.pe_type = PeType::rotary;
      o.parallel_residual = true;
      break;
  }
  return o;
}

}  // namespace

TEST_CASE("forward is deterministic") {
  const Checkpoint ck = fixtures::golden_fixture();
  const auto t = seq(10, ck.config.vocab_size);
  const auto a = forward(ck, t);
  const auto b = forward(ck, t);
  CHECK(a.logits == b.logits);
  CHECK(a.logits.shape() == std::vector<std::size_t>{10, ck.config.vocab_size});
}

TEST_CASE("self-interchange and self-replace are identities") {
  for (int k = 0; k < 4; ++k) {
    const Checkpoint ck = fixtures::random_checkpoint(family(k, 3, 11 + k));
    const auto t = seq(9, ck.config.vocab_size);
    const auto base = forward(ck, t);
    for (std::size_t i = 0; i < 3; ++i) {
      const Intervention a[1] = {Interchange{i, i}};
      const Intervention b[1] = {Replace{i, i}};
      CHECK(forward(ck, t, a).logits == base.logits);
      CHECK(forward(ck, t, b).logits == base.logits);
    }
  }
}

TEST_CASE("Delete matches the materialized pruned model") {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 2 + trial % 5;
    const Checkpoint ck = fixtures::random_checkpoint(family(trial, L, 100 + trial));
    std::set<std::size_t> s;
    const std::size_t count = 1 + rng() % (L - 1);
    while (s.size() < count) s.insert(rng() % L);
    const auto t = seq(12, ck.config.vocab_size, trial);
    const Intervention del[1] = {Delete{{s.begin(), s.end()}}};
    const auto a = forward(ck, t, del);
    const auto b = forward(materialize_pruned(ck, s), t);
    worst = std::max(worst, testutil::max_abs_diff(a.logits.values(), b.logits.values()));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("interchange equals a checkpoint with the two blocks swapped") {
  const Checkpoint ck = fixtures::random_checkpoint(family(1, 4, 3));
  Checkpoint swapped = ck;
  std::swap(swapped.layers[1], swapped.layers[3]);
  const auto t = seq(8, ck.config.vocab_size);
  const Intervention iv[1] = {Interchange{1, 3}};
  CHECK(testutil::max_abs_diff(forward(ck, t, iv).logits.values(), forward(swapped, t).logits.values()) < 1e-6);
}

TEST_CASE("replace, share and average routing") {
  const Checkpoint ck = fixtures::random_checkpoint(family(0, 4, 4));
  const auto t = seq(8, ck.config.vocab_size);

  Checkpoint rep = ck;
  rep.layers[2] = ck.layers[0];
  const Intervention r[1] = {Replace{2, 0}};
  CHECK(forward(ck, t, r).logits == forward(rep, t).logits);

  Checkpoint shared = ck;
  shared.layers[2] = shared.layers[3] = ck.layers[1];
  const Intervention s[1] = {Share{1, {2, 3}}};
  CHECK(forward(ck, t, s).logits == forward(shared, t).logits);

  Checkpoint merged = ck;
  const LayerWeights avg = average_layers(ck.layers[1], ck.layers[2]);
  merged.layers[1] = merged.layers[2] = avg;
  const Intervention m[1] = {AverageMerge{1, 2}};
  CHECK(testutil::max_abs_diff(forward(ck, t, m).logits.values(), forward(merged, t).logits.values()) < 1e-6);
}

TEST_CASE("head replacement over every head equals attention replacement") {
  const Checkpoint ck = fixtures::random_checkpoint(family(0, 3, 8));
  const auto t = seq(6, ck.config.vocab_size);
  std::vector<Intervention> heads;
  for (std::size_t h = 0; h < ck.config.n_heads; ++h) heads.push_back(HeadReplace{2, 0, h});
  Checkpoint attn = ck;
  auto& dst = attn.layers[2];
  const auto& src = ck.layers[0];
  dst.wq = src.wq;
  dst.wk = src.wk;
  dst.wv = src.wv;
  dst.wo = src.wo;
  dst.bq = src.bq;
  dst.bk = src.bk;
  dst.bv = src.bv;
  CHECK(testutil::max_abs_diff(forward(ck, t, heads).logits.values(), forward(attn, t).logits.values()) < 1e-5);

  const Intervention self[1] = {HeadReplace{1, 1, 0}};
  CHECK(forward(ck, t, self).logits == forward(ck, t).logits);
}

TEST_CASE("attention is causal") {
  for (int k = 0; k < 4; ++k) {
    const Checkpoint ck = fixtures::random_checkpoint(family(k, 2, 21 + k));
    auto t = seq(10, ck.config.vocab_size);
    const auto a = forward(ck, t);
    t[9] = (t[9] + 1) % ck.config.vocab_size;
    const auto b = forward(ck, t);
    for (std::size_t r = 0; r < 9; ++r) {
      for (std::size_t c = 0; c < ck.config.vocab_size; ++c) CHECK(a.logits.at(r, c) == b.logits.at(r, c));
    }
  }
}

TEST_CASE("uniform logits fixture") {
  const Checkpoint ck = fixtures::uniform_logits_fixture(16, 2);
  const auto r = forward(ck, seq(5, 16));
  for (std::size_t row = 0; row < 5; ++row) {
    for (float p : r.distribution(row)) CHECK(p == doctest::Approx(1.0 / 16));
  }
}

TEST_CASE("rope-off is an identity on position-blind attention") {
  const Checkpoint ck = fixtures::blind_attention_fixture(3);
  const auto t = seq(10, ck.config.vocab_size);
  const Intervention off[1] = {RopeOff{}};
  CHECK(testutil::max_abs_diff(forward(ck, t, off).logits.values(), forward(ck, t).logits.values()) < 1e-6);
}

TEST_CASE("output row selection and resumption") {
  const Checkpoint ck = fixtures::random_checkpoint(family(1, 4, 6));
  const auto t = seq(9, ck.config.vocab_size);
  ForwardOptions cap;
  cap.capture = true;
  const auto full = forward(ck, t, {}, cap);
  REQUIRE(full.hidden.size() == 5);

  ForwardOptions last;
  last.rows = OutputRows::last;
  const auto l = forward(ck, t, {}, last);
  CHECK(l.rows == std::vector<std::size_t>{8});
  for (std::size_t c = 0; c < ck.config.vocab_size; ++c) CHECK(l.logits.at(0, c) == full.logits.at(8, c));

  ForwardOptions tail;
  tail.first_row = 6;
  const auto tl = forward(ck, t, {}, tail);
  CHECK(tl.rows == std::vector<std::size_t>{6, 7, 8});
  tail.first_row = 9;
  CHECK_THROWS_AS(forward(ck, t, {}, tail), SpecError);

  const Intervention iv[1] = {Interchange{2, 3}};
  const ExecutionPlan plan = build_plan(ck, iv);
  CHECK(plan.first_divergence(ck) == 2);
  const auto resumed = forward_plan(ck, plan, t, ForwardOptions{}, 2, &full.hidden[2]);
  CHECK(resumed.logits == forward(ck, t, iv).logits);
}

TEST_CASE("plan errors") {
  const Checkpoint ck = fixtures::golden_fixture();
  const Intervention all[1] = {Delete{{0, 1}}};
  CHECK_THROWS_AS(build_plan(ck, all), SpecError);
  const Intervention oob[1] = {Replace{0, 7}};
  CHECK_THROWS_AS(build_plan(ck, oob), SpecError);
  const auto t = seq(100, ck.config.vocab_size);
  CHECK_THROWS_AS(forward(ck, t), SpecError);
  const std::vector<TokenId> bad = {0, 999};
  CHECK_THROWS(forward(ck, bad));
}

TEST_CASE("intervention text round trip") {
  for (const char* s : {"replace:3<-5", "interchange:3,5", "delete:1,2", "average:4,5", "share:4@4,5", "head:3<-5#2",
                        "rope-off"}) {
    CHECK(to_string(parse_intervention(s)) == s);
  }
  CHECK_THROWS(parse_intervention("swap:1"));
}

TEST_CASE("alibi slopes") {
  const auto s8 = alibi_slopes(8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(s8[k] == doctest::Approx(std::pow(2.0, -double(k + 1))));
  const auto s6 = alibi_slopes(6);
  const double want[6] = {0.25, 0.0625, 0.015625, 0.00390625, 0.5, 0.125};
  for (std::size_t k = 0; k < 6; ++k) CHECK(s6[k] == doctest::Approx(want[k]));
}
