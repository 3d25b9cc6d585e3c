#pragma once

#include <cstdint>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"

namespace protogap::fixtures {

/// Small synthetic decoder for tests, demos and the CLI smoke path.
struct FixtureOptions {
  std::size_t n_layers = 2;
  std::size_t d_model = 8;
  std::size_t n_heads = 2;
  std::size_t n_kv_heads = 2;
  std::size_t d_ff = 16;
  std::size_t vocab_size = 16;
  std::size_t max_position = 64;
  PeType pe_type = PeType::absolute;
  NormKind norm_kind = NormKind::layernorm;
  Activation activation = Activation::gelu_tanh;
  bool tied_lm_head = false;
  bool qk_norm = false;
  bool parallel_residual = false;
  bool biases = true;
  float weight_scale = 0.3f;
  std::uint64_t seed = 42;
};

/// Gaussian weights, gains near one. Deterministic per seed.
Checkpoint random_checkpoint(const FixtureOptions& options);

/// The 2-layer, d_model=8 fixture.
Checkpoint golden_fixture();

/// Every block is an exact copy of block 0, so any reordering is a no-op.
Checkpoint identical_layers_fixture(std::size_t n_layers = 2);

/// LM head of zeros: every next-token distribution is uniform.
Checkpoint uniform_logits_fixture(std::size_t vocab_size = 16, std::size_t n_layers = 2);

/// Rotary model whose Q and K projections are zero, so attention ignores
/// positions entirely and rotary angles cannot matter.
Checkpoint blind_attention_fixture(std::size_t n_layers = 3);

/// Uniformly random token stream.
TokenCorpus random_corpus(std::size_t length, std::size_t vocab_size, std::uint64_t seed);

}  // namespace protogap::fixtures
