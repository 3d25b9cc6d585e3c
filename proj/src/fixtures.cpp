#include "protogap/fixtures.hpp"

#include <random>

namespace protogap::fixtures {
namespace {

bool is_gain(const std::string& name) { return name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0; }

bool is_bias(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return leaf == "bias" || leaf == "bq" || leaf == "bk" || leaf == "bv" || leaf == "bo" || leaf == "b_gate" ||
         leaf == "b_up" || leaf == "b_down";
}

}  // namespace

Checkpoint random_checkpoint(const FixtureOptions& o) {
  Checkpoint ck;
  ModelConfig& c = ck.config;
  c.n_layers = o.n_layers;
  c.d_model = o.d_model;
  c.n_heads = o.n_heads;
  c.n_kv_heads = o.n_kv_heads;
  c.d_ff = o.d_ff;
  c.vocab_size = o.vocab_size;
  c.max_position = o.max_position;
  c.pe_type = o.pe_type;
  c.norm_kind = o.norm_kind;
  c.activation = o.activation;
  c.tied_lm_head = o.tied_lm_head;
  c.qk_norm = o.qk_norm;
  c.parallel_residual = o.parallel_residual;
  c.mlp_gated = o.activation == Activation::silu;
  c.qkv_bias = c.out_bias = c.mlp_bias = o.biases;
  c.norm_bias = o.norm_kind == NormKind::layernorm;
  c.validate();
  ck.layers.resize(c.n_layers);

  std::mt19937_64 rng(o.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  visit_checkpoint_tensors(ck, [&](const std::string& name, auto& slot) {
    const auto shape = expected_shape(c, name);
    if (!shape) return;
    Tensor t(*shape);
    const float fan_in = static_cast<float>((*shape)[0]);
    for (float& x : t.data()) {
      if (is_gain(name)) {
        x = 1.0f + 0.1f * normal(rng);
      } else if (is_bias(name)) {
        x = 0.1f * normal(rng);
      } else if (name == "tok_embed" || name == "pos_embed") {
        x = normal(rng);
      } else {
        x = o.weight_scale * normal(rng) * 3.0f / std::sqrt(fan_in);
      }
    }
    slot = std::move(t);
  });
  validate_checkpoint(ck);
  return ck;
}

Checkpoint golden_fixture() { return random_checkpoint(FixtureOptions{}); }

Checkpoint identical_layers_fixture(std::size_t n_layers) {
  FixtureOptions o;
  o.n_layers = n_layers;
  o.seed = 7;
  Checkpoint ck = random_checkpoint(o);
  for (std::size_t i = 1; i < n_layers; ++i) ck.layers[i] = ck.layers[0];
  return ck;
}

Checkpoint uniform_logits_fixture(std::size_t vocab_size, std::size_t n_layers) {
  FixtureOptions o;
  o.vocab_size = vocab_size;
  o.n_layers = n_layers;
  o.max_position = 128;
  o.seed = 11;
  Checkpoint ck = random_checkpoint(o);
  for (float& x : ck.lm_head->data()) x = 0.0f;
  return ck;
}

Checkpoint blind_attention_fixture(std::size_t n_layers) {
  FixtureOptions o;
  o.n_layers = n_layers;
  o.pe_type = PeType::rotary;
  o.norm_kind = NormKind::rmsnorm;
  o.activation = Activation::silu;
  o.biases = false;
  o.seed = 5;
  Checkpoint ck = random_checkpoint(o);
  for (auto& lw : ck.layers) {
    for (float& x : lw.wq.data()) x = 0.0f;
    for (float& x : lw.wk.data()) x = 0.0f;
  }
  return ck;
}

TokenCorpus random_corpus(std::size_t length, std::size_t vocab_size, std::uint64_t seed) {
  TokenCorpus c;
  c.vocab_size = vocab_size;
  c.source = "random-uniform seed " + std::to_string(seed);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab_size - 1));
  c.tokens.resize(length);
  for (auto& t : c.tokens) t = pick(rng);
  return c;
}

}  // namespace protogap::fixtures
