#include "protogap/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "protogap/error.hpp"

namespace protogap {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

using Shape = std::vector<std::size_t>;

bool has_norm_bias(const ModelConfig& c) { return c.norm_kind == NormKind::layernorm && c.norm_bias; }

std::optional<Shape> expected_layer_shape(const ModelConfig& c, const std::string& s) {
  const std::size_t d = c.d_model, ff = c.d_ff, kv = c.kv_dim(), hd = c.head_dim();
  auto when = [](bool present, Shape shape) -> std::optional<Shape> {
    if (!present) return std::nullopt;
    return shape;
  };
  if (s == "attn_norm.gain" || s == "mlp_norm.gain") return Shape{d};
  if (s == "attn_norm.bias" || s == "mlp_norm.bias") return when(has_norm_bias(c), {d});
  if (s == "Wq" || s == "Wo") return Shape{d, d};
  if (s == "Wk" || s == "Wv") return Shape{d, kv};
  if (s == "bq") return when(c.qkv_bias, {d});
  if (s == "bk" || s == "bv") return when(c.qkv_bias, {kv});
  if (s == "bo") return when(c.out_bias, {d});
  if (s == "q_norm.gain" || s == "k_norm.gain") return when(c.qk_norm, {hd});
  if (s == "W_gate") return when(c.mlp_gated, {d, ff});
  if (s == "W_up") return Shape{d, ff};
  if (s == "W_down") return Shape{ff, d};
  if (s == "b_gate") return when(c.mlp_gated && c.mlp_bias, {ff});
  if (s == "b_up") return when(c.mlp_bias, {ff});
  if (s == "b_down") return when(c.mlp_bias, {d});
  throw ParseError("unknown layer tensor '" + s + "'");
}

void write_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

std::optional<Shape> expected_shape(const ModelConfig& c, const std::string& name) {
  const std::size_t d = c.d_model, v = c.vocab_size;
  if (name == "tok_embed") return Shape{v, d};
  if (name == "pos_embed") {
    if (c.pe_type != PeType::absolute) return std::nullopt;
    return Shape{c.max_position, d};
  }
  if (name == "embed_norm.gain") {
    if (!c.embed_norm) return std::nullopt;
    return Shape{d};
  }
  if (name == "embed_norm.bias") {
    if (!c.embed_norm || !has_norm_bias(c)) return std::nullopt;
    return Shape{d};
  }
  if (name == "final_norm.gain") return Shape{d};
  if (name == "final_norm.bias") {
    if (!has_norm_bias(c)) return std::nullopt;
    return Shape{d};
  }
  if (name == "lm_head") {
    if (c.tied_lm_head) return std::nullopt;
    return Shape{d, v};
  }
  if (name == "lm_head.bias") {
    if (!c.lm_head_bias) return std::nullopt;
    return Shape{v};
  }
  if (name.rfind("layers.", 0) == 0) {
    const auto dot = name.find('.', 7);
    if (dot == std::string::npos) throw ParseError("malformed tensor name '" + name + "'");
    const std::size_t idx = std::stoul(name.substr(7, dot - 7));
    if (idx >= c.n_layers) throw ShapeError("tensor '" + name + "' refers to a layer beyond n_layers");
    return expected_layer_shape(c, name.substr(dot + 1));
  }
  throw ParseError("unknown tensor '" + name + "'");
}

void validate_checkpoint(const Checkpoint& ck) {
  const ModelConfig& c = ck.config;
  c.validate();
  if (ck.layers.size() != c.n_layers) {
    throw ShapeError("checkpoint holds " + std::to_string(ck.layers.size()) + " layers, config declares " +
                     std::to_string(c.n_layers));
  }
  auto check = [&](const std::string& name, const Tensor& t, const std::optional<Shape>& want) {
    if (!want) throw ShapeError("tensor '" + name + "' must be absent under this config");
    if (t.shape() != *want) {
      throw ShapeError("shape mismatch for tensor '" + name + "': expected " + shape_string(*want) + ", got " +
                       shape_string(t.shape()));
    }
    for (float x : t.data()) {
      if (!std::isfinite(x)) throw NumericalError("non-finite value in tensor '" + name + "'");
    }
  };
  visit_checkpoint_tensors(ck, [&](const std::string& name, const auto& slot) {
    const auto want = expected_shape(c, name);
    using Slot = std::decay_t<decltype(slot)>;
    if constexpr (std::is_same_v<Slot, Tensor>) {
      check(name, slot, want);
    } else {
      if (slot) {
        check(name, *slot, want);
      } else if (want) {
        throw ShapeError("missing tensor '" + name + "'");
      }
    }
  });
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  validate_checkpoint(ck);
  nlohmann::ordered_json header;
  header["config"] = to_json(ck.config);
  std::string payload;
  visit_checkpoint_tensors(ck, [&](const std::string& name, const auto& slot) {
    const Tensor* t = nullptr;
    if constexpr (std::is_same_v<std::decay_t<decltype(slot)>, Tensor>) {
      t = &slot;
    } else if (slot) {
      t = &*slot;
    }
    if (!t) return;
    const std::size_t bytes = t->size() * sizeof(float);
    header[name] = {{"dtype", "f32"}, {"shape", t->shape()}, {"offset", payload.size()}, {"length", bytes}};
    payload.append(reinterpret_cast<const char*>(t->data().data()), bytes);
  });
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + payload.size());
  write_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw ParseError("checkpoint shorter than its 8-byte header length");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) throw ParseError("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("config")) throw ParseError("checkpoint header lacks a config object");
  const std::string_view payload(bytes.data() + 8 + header_len, bytes.size() - 8 - header_len);

  Checkpoint ck;
  ck.config = config_from_json(header["config"]);
  ck.layers.resize(ck.config.n_layers);

  std::set<std::string> consumed{"config"};
  auto read_tensor = [&](const std::string& name) -> std::optional<Tensor> {
    if (!header.contains(name)) return std::nullopt;
    consumed.insert(name);
    const auto& e = header[name];
    Shape shape;
    std::size_t offset = 0, length = 0;
    try {
      if (e.at("dtype").get<std::string>() != "f32") throw ParseError("tensor '" + name + "' is not f32");
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      length = e.at("length").get<std::size_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("bad header entry for '" + name + "': " + ex.what());
    }
    const auto want = expected_shape(ck.config, name);
    if (!want) throw ShapeError("tensor '" + name + "' must be absent under this config");
    if (shape != *want) {
      throw ShapeError("shape mismatch for tensor '" + name + "': expected " + shape_string(*want) +
                       ", header declares " + shape_string(shape));
    }
    std::size_t count = 1;
    for (auto s : shape) count *= s;
    if (length != count * sizeof(float)) throw ParseError("tensor '" + name + "' length disagrees with its shape");
    if (offset > payload.size() || length > payload.size() - offset) {
      throw ParseError("tensor '" + name + "' extends past the payload");
    }
    std::vector<float> data(count);
    std::memcpy(data.data(), payload.data() + offset, length);
    return Tensor(std::move(shape), std::move(data));
  };

  visit_checkpoint_tensors(ck, [&](const std::string& name, auto& slot) {
    auto t = read_tensor(name);
    if constexpr (std::is_same_v<std::decay_t<decltype(slot)>, Tensor>) {
      if (!t) throw ShapeError("missing tensor '" + name + "'");
      slot = std::move(*t);
    } else {
      slot = std::move(t);
    }
  });
  for (const auto& item : header.items()) {
    if (!consumed.count(item.key())) throw ParseError("unexpected tensor '" + item.key() + "' in header");
  }
  validate_checkpoint(ck);
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string payload_hash(const Checkpoint& ck) {
  std::string payload;
  visit_checkpoint_tensors(ck, [&](const std::string&, const auto& slot) {
    const Tensor* t = nullptr;
    if constexpr (std::is_same_v<std::decay_t<decltype(slot)>, Tensor>) {
      t = &slot;
    } else if (slot) {
      t = &*slot;
    }
    if (t) payload.append(reinterpret_cast<const char*>(t->data().data()), t->size() * sizeof(float));
  });
  return sha256_hex(payload);
}

std::string file_hash(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

Checkpoint materialize_pruned(const Checkpoint& ck, const std::set<std::size_t>& delete_set) {
  for (std::size_t i : delete_set) {
    if (i >= ck.n_layers()) throw SpecError("delete index " + std::to_string(i) + " out of range");
  }
  if (delete_set.size() >= ck.n_layers()) throw SpecError("cannot delete every layer");
  Checkpoint out = ck;
  out.layers.clear();
  for (std::size_t i = 0; i < ck.n_layers(); ++i) {
    if (!delete_set.count(i)) out.layers.push_back(ck.layers[i]);
  }
  out.config.n_layers = out.layers.size();
  return out;
}

LayerWeights average_layers(const LayerWeights& a, const LayerWeights& b) {
  LayerWeights out = a;
  auto mean_into = [](Tensor& dst, const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw DimensionError("cannot average tensors of different shapes");
    auto d = dst.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = 0.5f * (x.data()[k] + y.data()[k]);
  };
  // Walk both source blocks in lockstep through the destination's slots.
  std::vector<const Tensor*> bs;
  visit_layer_tensors(b, [&](const char*, const auto& slot) {
    if constexpr (std::is_same_v<std::decay_t<decltype(slot)>, Tensor>) {
      bs.push_back(&slot);
    } else {
      bs.push_back(slot ? &*slot : nullptr);
    }
  });
  std::size_t k = 0;
  visit_layer_tensors(out, [&](const char* name, auto& slot) {
    const Tensor* other = bs[k++];
    if constexpr (std::is_same_v<std::decay_t<decltype(slot)>, Tensor>) {
      mean_into(slot, Tensor(slot), *other);
    } else {
      if (static_cast<bool>(slot) != (other != nullptr)) {
        throw SpecError(std::string("cannot average: tensor '") + name + "' present in only one layer");
      }
      if (slot) mean_into(*slot, Tensor(*slot), *other);
    }
  });
  return out;
}

}  // namespace protogap
