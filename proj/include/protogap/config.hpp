#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "protogap/tensor.hpp"

namespace protogap {

enum class PeType { absolute, rotary, alibi };
enum class Activation { gelu, gelu_tanh, silu, relu };

/// Architecture descriptor of a decoder-only transformer.
///
/// Only the first block of fields is required in a checkpoint header; the
/// rest default to a GPT-2 style layout and cover the families the exporter
/// emits (parallel residual for GPT-NeoX, per-head QK norm for Qwen3,
/// embedding norm for BLOOM, partial rotary for Pythia).
struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  PeType pe_type = PeType::absolute;
  NormKind norm_kind = NormKind::layernorm;
  Activation activation = Activation::gelu_tanh;
  std::size_t max_position = 0;
  bool tied_lm_head = false;

  float norm_eps = 1e-5f;
  float rope_theta = 10000.0f;
  std::size_t rotary_dim = 0;  // 0 means the full head dimension
  bool mlp_gated = false;
  bool parallel_residual = false;
  bool qk_norm = false;
  bool embed_norm = false;
  bool qkv_bias = true;
  bool out_bias = true;
  bool mlp_bias = true;
  bool norm_bias = true;  // layernorm only
  bool lm_head_bias = false;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return n_kv_heads * head_dim(); }

  /// Throws ConfigError on the first violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

std::string to_string(PeType t);
std::string to_string(Activation a);
std::string to_string(NormKind k);

}  // namespace protogap
