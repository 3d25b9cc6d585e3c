#include "protogap/config.hpp"

#include "protogap/error.hpp"

namespace protogap {

std::string to_string(PeType t) {
  switch (t) {
    case PeType::absolute: return "absolute";
    case PeType::rotary: return "rotary";
    case PeType::alibi: return "alibi";
  }
  return "?";
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::gelu_tanh: return "gelu_tanh";
    case Activation::silu: return "silu";
    case Activation::relu: return "relu";
  }
  return "?";
}

std::string to_string(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "rmsnorm"; }

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (d_model == 0 || n_heads == 0 || n_kv_heads == 0 || d_ff == 0 || vocab_size == 0 || max_position == 0) {
    throw ConfigError("all dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (n_heads % n_kv_heads != 0) throw ConfigError("n_heads must be divisible by n_kv_heads");
  if (pe_type == PeType::rotary) {
    const std::size_t rd = rotary_dim ? rotary_dim : head_dim();
    if (rd > head_dim() || rd % 2 != 0) throw ConfigError("rotary_dim must be even and at most head_dim");
  }
  if (!(norm_eps > 0.0f)) throw ConfigError("norm_eps must be positive");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_kv_heads"] = c.n_kv_heads;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["pe_type"] = to_string(c.pe_type);
  j["norm_kind"] = to_string(c.norm_kind);
  j["activation"] = to_string(c.activation);
  j["max_position"] = c.max_position;
  j["tied_lm_head"] = c.tied_lm_head;
  j["norm_eps"] = c.norm_eps;
  j["rope_theta"] = c.rope_theta;
  j["rotary_dim"] = c.rotary_dim;
  j["mlp_gated"] = c.mlp_gated;
  j["parallel_residual"] = c.parallel_residual;
  j["qk_norm"] = c.qk_norm;
  j["embed_norm"] = c.embed_norm;
  j["qkv_bias"] = c.qkv_bias;
  j["out_bias"] = c.out_bias;
  j["mlp_bias"] = c.mlp_bias;
  j["norm_bias"] = c.norm_bias;
  j["lm_head_bias"] = c.lm_head_bias;
  return j;
}

namespace {

PeType parse_pe(const std::string& s) {
  if (s == "absolute") return PeType::absolute;
  if (s == "rotary") return PeType::rotary;
  if (s == "alibi") return PeType::alibi;
  throw ParseError("unknown pe_type '" + s + "'");
}

NormKind parse_norm(const std::string& s) {
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "rmsnorm") return NormKind::rmsnorm;
  throw ParseError("unknown norm_kind '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "gelu_tanh" || s == "gelu_new") return Activation::gelu_tanh;
  if (s == "silu") return Activation::silu;
  if (s == "relu") return Activation::relu;
  throw ParseError("unknown activation '" + s + "'");
}

}  // namespace

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.pe_type = parse_pe(j.at("pe_type").get<std::string>());
    c.norm_kind = parse_norm(j.at("norm_kind").get<std::string>());
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.max_position = j.at("max_position").get<std::size_t>();
    c.tied_lm_head = j.at("tied_lm_head").get<bool>();

    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.rotary_dim = j.value("rotary_dim", c.rotary_dim);
    c.mlp_gated = j.value("mlp_gated", c.activation == Activation::silu);
    c.parallel_residual = j.value("parallel_residual", c.parallel_residual);
    c.qk_norm = j.value("qk_norm", c.qk_norm);
    c.embed_norm = j.value("embed_norm", c.embed_norm);
    c.qkv_bias = j.value("qkv_bias", c.qkv_bias);
    c.out_bias = j.value("out_bias", c.out_bias);
    c.mlp_bias = j.value("mlp_bias", c.mlp_bias);
    c.norm_bias = j.value("norm_bias", c.norm_kind == NormKind::layernorm);
    c.lm_head_bias = j.value("lm_head_bias", c.lm_head_bias);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad config block: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace protogap
