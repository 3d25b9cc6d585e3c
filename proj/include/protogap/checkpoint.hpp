#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "protogap/config.hpp"
#include "protogap/tensor.hpp"

namespace protogap {

/// Weights of one transformer block. Linear weights are stored input-major
/// ([in, out]) so a projection is `x · W`.
struct LayerWeights {
  Tensor attn_norm_gain;
  std::optional<Tensor> attn_norm_bias;
  Tensor wq, wk, wv, wo;
  std::optional<Tensor> bq, bk, bv, bo;
  std::optional<Tensor> q_norm_gain, k_norm_gain;  // [head_dim], shared across heads
  Tensor mlp_norm_gain;
  std::optional<Tensor> mlp_norm_bias;
  std::optional<Tensor> w_gate;
  Tensor w_up, w_down;
  std::optional<Tensor> b_gate, b_up, b_down;

  bool operator==(const LayerWeights&) const = default;
};

/// Visits every tensor slot of a block in canonical serialization order.
/// `f(name, slot)` receives either `Tensor&` or `std::optional<Tensor>&`.
template <class Layer, class F>
void visit_layer_tensors(Layer& lw, F&& f) {
  f("attn_norm.gain", lw.attn_norm_gain);
  f("attn_norm.bias", lw.attn_norm_bias);
  f("Wq", lw.wq);
  f("Wk", lw.wk);
  f("Wv", lw.wv);
  f("Wo", lw.wo);
  f("bq", lw.bq);
  f("bk", lw.bk);
  f("bv", lw.bv);
  f("bo", lw.bo);
  f("q_norm.gain", lw.q_norm_gain);
  f("k_norm.gain", lw.k_norm_gain);
  f("mlp_norm.gain", lw.mlp_norm_gain);
  f("mlp_norm.bias", lw.mlp_norm_bias);
  f("W_gate", lw.w_gate);
  f("W_up", lw.w_up);
  f("W_down", lw.w_down);
  f("b_gate", lw.b_gate);
  f("b_up", lw.b_up);
  f("b_down", lw.b_down);
}

/// Immutable-after-load tensor store of a decoder-only transformer.
struct Checkpoint {
  ModelConfig config;
  Tensor tok_embed;                  // [vocab, d_model]
  std::optional<Tensor> pos_embed;   // [max_position, d_model], absolute PE only
  std::optional<Tensor> embed_norm_gain, embed_norm_bias;
  std::vector<LayerWeights> layers;
  Tensor final_norm_gain;
  std::optional<Tensor> final_norm_bias;
  std::optional<Tensor> lm_head;     // [d_model, vocab]; absent when tied
  std::optional<Tensor> lm_head_bias;

  std::size_t n_layers() const { return layers.size(); }
  bool operator==(const Checkpoint&) const = default;
};

/// Visits (full tensor name, slot) for every tensor slot of the checkpoint.
template <class Ckpt, class F>
void visit_checkpoint_tensors(Ckpt& ck, F&& f) {
  f(std::string("tok_embed"), ck.tok_embed);
  f(std::string("pos_embed"), ck.pos_embed);
  f(std::string("embed_norm.gain"), ck.embed_norm_gain);
  f(std::string("embed_norm.bias"), ck.embed_norm_bias);
  for (std::size_t i = 0; i < ck.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    visit_layer_tensors(ck.layers[i], [&](const char* name, auto& slot) { f(prefix + name, slot); });
  }
  f(std::string("final_norm.gain"), ck.final_norm_gain);
  f(std::string("final_norm.bias"), ck.final_norm_bias);
  f(std::string("lm_head"), ck.lm_head);
  f(std::string("lm_head.bias"), ck.lm_head_bias);
}

/// Shape every tensor must have under `config`; empty optional when the
/// tensor must be absent.
std::optional<std::vector<std::size_t>> expected_shape(const ModelConfig& config, const std::string& name);

/// Checks presence, shape and finiteness of every tensor. Errors name the
/// offending tensor.
void validate_checkpoint(const Checkpoint& ck);

/// Container layout: u64 little-endian header length, UTF-8 JSON header
/// (`config` plus name -> {dtype, shape, offset, length}), raw f32 payload.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// In-memory serialization matching the file layout.
std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::string& bytes);

/// SHA-256 (hex) over all tensor payload bytes in canonical order.
std::string payload_hash(const Checkpoint& ck);

/// SHA-256 (hex) of a file's bytes.
std::string file_hash(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

/// Physically removes the listed blocks, keeping the rest in order.
Checkpoint materialize_pruned(const Checkpoint& ck, const std::set<std::size_t>& delete_set);

/// Elementwise mean of two blocks' weights. Optional tensors must be
/// present in both or neither.
LayerWeights average_layers(const LayerWeights& a, const LayerWeights& b);

}  // namespace protogap
