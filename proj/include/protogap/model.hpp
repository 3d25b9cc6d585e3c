#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "protogap/checkpoint.hpp"
#include "protogap/intervention.hpp"
#include "protogap/tensor.hpp"

namespace protogap {

using TokenId = std::uint32_t;

enum class OutputRows { all, last };

struct ForwardOptions {
  bool capture = false;               // keep hidden states at every block boundary
  OutputRows rows = OutputRows::all;  // which positions get logits
  std::size_t first_row = 0;          // with rows=all, skip positions before this
};

struct ForwardResult {
  Tensor logits;                   // [rows, vocab]
  std::vector<std::size_t> rows;   // sequence position of each logits row
  /// hidden[k] is the input of executed block k; hidden.back() is the
  /// output of the last block. Empty unless capture was requested.
  std::vector<Tensor> hidden;

  /// Next-token distribution at logits row `r`.
  std::vector<float> distribution(std::size_t r) const;
};

/// Token + position embedding (and embedding norm when configured).
Tensor embed_tokens(const Checkpoint& ck, std::span<const TokenId> tokens);

/// One residual block over a full sequence, positions 0..seq-1.
Tensor run_block(const Checkpoint& ck, const BlockSlot& slot, const Tensor& x, bool rope_enabled);

/// Final norm and LM head over selected rows of the last hidden state.
Tensor output_logits(const Checkpoint& ck, const Tensor& hidden, std::span<const std::size_t> rows);

/// Teacher-forced forward pass. Interventions are routing overlays; the
/// checkpoint is never modified.
ForwardResult forward(const Checkpoint& ck, std::span<const TokenId> tokens,
                      std::span<const Intervention> interventions = {}, const ForwardOptions& options = {});

/// Runs `plan` starting at slot `start` from a hidden state that equals
/// the unmodified model's input to that slot (see
/// ExecutionPlan::first_divergence). When capture is requested, hidden
/// states before `start` are not available and `hidden` holds only the
/// states from `start` on.
ForwardResult forward_plan(const Checkpoint& ck, const ExecutionPlan& plan, std::span<const TokenId> tokens,
                           const ForwardOptions& options, std::size_t start = 0, const Tensor* start_hidden = nullptr);

/// ALiBi slopes for `n_heads` heads (standard geometric sequence, with the
/// interleaved extension for non-power-of-two head counts).
std::vector<float> alibi_slopes(std::size_t n_heads);

/// Residual update g(x) = block(x) - x of one layer at the final position
/// of a sequence, with every earlier position held fixed. Keys and values
/// of the prefix are computed once so each evaluation costs one token.
class LastTokenProbe {
 public:
  /// `block_input` is the [seq, d_model] input of the layer.
  LastTokenProbe(const Checkpoint& ck, std::size_t layer, const Tensor& block_input, bool rope_enabled = true);

  std::vector<float> residual(std::span<const float> x_last) const;
  std::span<const float> base_point() const { return base_; }

 private:
  const Checkpoint* ck_;
  const LayerWeights* lw_;
  bool rope_;
  std::size_t pos_;               // position of the probed token
  std::vector<float> base_;       // unperturbed final-token input
  Tensor prefix_k_, prefix_v_;    // [pos, kv_dim] after norm/rope
};

}  // namespace protogap
