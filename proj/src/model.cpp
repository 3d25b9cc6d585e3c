#include "protogap/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "protogap/error.hpp"

namespace protogap {
namespace {

std::span<const float> opt_span(const std::optional<Tensor>& t) {
  if (!t) return {};
  return t->data();
}

Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b) {
  Tensor y = matmul(x, w);
  if (b) add_row_bias(y, b->data());
  return y;
}

float activate(Activation a, float x) {
  switch (a) {
    case Activation::gelu:
      return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
    case Activation::gelu_tanh: {
      const float c = 0.79788456080286536f;  // sqrt(2/pi)
      return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
    }
    case Activation::silu:
      return x / (1.0f + std::exp(-x));
    case Activation::relu:
      return x > 0.0f ? x : 0.0f;
  }
  return x;
}

struct Projections {
  Tensor q;  // [T, H*hd]
  Tensor k;  // [T, KV*hd]
  Tensor v;  // [T, KV*hd]
};

/// Per-head RMS normalization over head_dim with a shared gain.
void head_norm(Tensor& t, std::size_t heads, std::size_t hd, const Tensor& gain, float eps) {
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    auto row = t.row(r);
    for (std::size_t h = 0; h < heads; ++h) {
      auto seg = row.subspan(h * hd, hd);
      auto y = normalize(seg, gain.data(), {}, NormKind::rmsnorm, eps);
      std::copy(y.begin(), y.end(), seg.begin());
    }
  }
}

Projections project(const ModelConfig& c, const LayerWeights& lw, const Tensor& h,
                    std::span<const std::size_t> positions, bool rope_enabled) {
  const std::size_t T = h.dim(0), H = c.n_heads, KV = c.n_kv_heads, hd = c.head_dim();
  Projections p{linear(h, lw.wq, lw.bq), linear(h, lw.wk, lw.bk), linear(h, lw.wv, lw.bv)};
  if (c.qk_norm) {
    head_norm(p.q, H, hd, *lw.q_norm_gain, c.norm_eps);
    head_norm(p.k, KV, hd, *lw.k_norm_gain, c.norm_eps);
  }
  if (c.pe_type == PeType::rotary) {
    p.q = apply_rotary(p.q.reshaped({T, H, hd}), positions, c.rope_theta, rope_enabled, c.rotary_dim)
              .reshaped({T, H * hd});
    p.k = apply_rotary(p.k.reshaped({T, KV, hd}), positions, c.rope_theta, rope_enabled, c.rotary_dim)
              .reshaped({T, KV * hd});
  }
  return p;
}

/// Causal attention of one head for query rows [q_begin, T) against keys
/// 0..t. Writes into out[t - q_begin, head*hd ...].
void attend_head(const ModelConfig& c, std::size_t head, std::span<const float> slopes, const Tensor& q,
                 std::size_t q_row_offset, const Tensor& k, const Tensor& v, std::size_t kv_head,
                 std::size_t q_begin, std::size_t T, Tensor& out) {
  const std::size_t hd = c.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> scores(T);
  for (std::size_t t = q_begin; t < T; ++t) {
    const float* qv = q.data().data() + (t - q_row_offset) * q.dim(1) + head * hd;
    float mx = -INFINITY;
    for (std::size_t s = 0; s <= t; ++s) {
      const float* kv = k.data().data() + s * k.dim(1) + kv_head * hd;
      float dot = 0.0f;
      for (std::size_t e = 0; e < hd; ++e) dot += qv[e] * kv[e];
      float sc = dot * scale;
      if (!slopes.empty()) sc -= slopes[head] * static_cast<float>(t - s);
      scores[s] = sc;
      mx = std::max(mx, sc);
    }
    float total = 0.0f;
    for (std::size_t s = 0; s <= t; ++s) {
      scores[s] = std::exp(scores[s] - mx);
      total += scores[s];
    }
    float* o = out.data().data() + (t - q_begin) * out.dim(1) + head * hd;
    for (std::size_t s = 0; s <= t; ++s) {
      const float w = scores[s] / total;
      const float* vv = v.data().data() + s * v.dim(1) + kv_head * hd;
      for (std::size_t e = 0; e < hd; ++e) o[e] += w * vv[e];
    }
  }
}

Tensor mlp(const ModelConfig& c, const LayerWeights& lw, const Tensor& h) {
  Tensor up = linear(h, lw.w_up, lw.b_up);
  if (c.mlp_gated) {
    Tensor gate = linear(h, *lw.w_gate, lw.b_gate);
    auto g = gate.data();
    auto u = up.data();
    for (std::size_t k = 0; k < u.size(); ++k) u[k] *= activate(c.activation, g[k]);
  } else {
    for (float& x : up.data()) x = activate(c.activation, x);
  }
  return linear(up, lw.w_down, lw.b_down);
}

void add_inplace(Tensor& x, const Tensor& y) {
  auto a = x.data();
  auto b = y.data();
  for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
}

}  // namespace

std::vector<float> alibi_slopes(std::size_t n_heads) {
  std::size_t closest = 1;
  while (closest * 2 <= n_heads) closest *= 2;
  std::vector<float> slopes;
  const double base = std::pow(2.0, -8.0 / static_cast<double>(closest));
  for (std::size_t k = 1; k <= closest; ++k) slopes.push_back(static_cast<float>(std::pow(base, k)));
  if (closest != n_heads) {
    const double extra_base = std::pow(2.0, -4.0 / static_cast<double>(closest));
    const std::size_t remaining = std::min(closest, n_heads - closest);
    for (std::size_t k = 0; k < remaining; ++k) {
      slopes.push_back(static_cast<float>(std::pow(extra_base, 2 * k + 1)));
    }
  }
  return slopes;
}

std::vector<float> ForwardResult::distribution(std::size_t r) const { return softmax(logits.row(r)); }

Tensor embed_tokens(const Checkpoint& ck, std::span<const TokenId> tokens) {
  const ModelConfig& c = ck.config;
  if (tokens.empty()) throw DimensionError("empty token sequence");
  if (tokens.size() > c.max_position) {
    throw SpecError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_position " +
                    std::to_string(c.max_position));
  }
  Tensor x({tokens.size(), c.d_model});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= c.vocab_size) {
      throw SpecError("token id " + std::to_string(tokens[t]) + " >= vocab_size " + std::to_string(c.vocab_size));
    }
    auto dst = x.row(t);
    auto src = ck.tok_embed.row(tokens[t]);
    std::copy(src.begin(), src.end(), dst.begin());
    if (ck.pos_embed) {
      auto pe = ck.pos_embed->row(t);
      for (std::size_t e = 0; e < c.d_model; ++e) dst[e] += pe[e];
    }
  }
  if (c.embed_norm) {
    x = normalize_rows(x, ck.embed_norm_gain->data(), opt_span(ck.embed_norm_bias), c.norm_kind, c.norm_eps);
  }
  return x;
}

Tensor run_block(const Checkpoint& ck, const BlockSlot& slot, const Tensor& x, bool rope_enabled) {
  const ModelConfig& c = ck.config;
  const LayerWeights& lw = *slot.weights;
  const std::size_t T = x.dim(0), H = c.n_heads, hd = c.head_dim(), group = c.n_heads / c.n_kv_heads;
  std::vector<std::size_t> positions(T);
  std::iota(positions.begin(), positions.end(), 0);
  const std::vector<float> slopes = c.pe_type == PeType::alibi ? alibi_slopes(H) : std::vector<float>{};

  const Tensor h = normalize_rows(x, lw.attn_norm_gain.data(), opt_span(lw.attn_norm_bias), c.norm_kind, c.norm_eps);

  // Each distinct weight source contributes the heads routed to it.
  std::vector<const LayerWeights*> head_src(H, &lw);
  for (std::size_t hh = 0; hh < slot.head_sources.size(); ++hh) {
    if (slot.head_sources[hh]) head_src[hh] = slot.head_sources[hh];
  }
  std::map<const LayerWeights*, Projections> proj;
  for (const LayerWeights* src : head_src) {
    if (!proj.count(src)) proj.emplace(src, project(c, *src, h, positions, rope_enabled));
  }

  Tensor heads_out({T, c.d_model});
  for (std::size_t hh = 0; hh < H; ++hh) {
    const Projections& p = proj.at(head_src[hh]);
    attend_head(c, hh, slopes, p.q, 0, p.k, p.v, hh / group, 0, T, heads_out);
  }

  Tensor attn;
  if (slot.head_sources.empty()) {
    attn = linear(heads_out, lw.wo, lw.bo);
  } else {
    Tensor wo = lw.wo;
    for (std::size_t hh = 0; hh < H; ++hh) {
      if (head_src[hh] == &lw) continue;
      for (std::size_t r = hh * hd; r < (hh + 1) * hd; ++r) {
        auto src = head_src[hh]->wo.row(r);
        std::copy(src.begin(), src.end(), wo.row(r).begin());
      }
    }
    attn = linear(heads_out, wo, lw.bo);
  }

  Tensor out = x;
  if (c.parallel_residual) {
    const Tensor h2 = normalize_rows(x, lw.mlp_norm_gain.data(), opt_span(lw.mlp_norm_bias), c.norm_kind, c.norm_eps);
    add_inplace(out, attn);
    add_inplace(out, mlp(c, lw, h2));
  } else {
    add_inplace(out, attn);
    const Tensor h2 = normalize_rows(out, lw.mlp_norm_gain.data(), opt_span(lw.mlp_norm_bias), c.norm_kind, c.norm_eps);
    add_inplace(out, mlp(c, lw, h2));
  }
  require_finite(out.data(), "block output");
  return out;
}

Tensor output_logits(const Checkpoint& ck, const Tensor& hidden, std::span<const std::size_t> rows) {
  const ModelConfig& c = ck.config;
  Tensor sel({rows.size(), c.d_model});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = hidden.row(rows[r]);
    std::copy(src.begin(), src.end(), sel.row(r).begin());
  }
  const Tensor hn = normalize_rows(sel, ck.final_norm_gain.data(), opt_span(ck.final_norm_bias), c.norm_kind, c.norm_eps);
  Tensor logits = c.tied_lm_head ? matmul_transposed(hn, ck.tok_embed) : matmul(hn, *ck.lm_head);
  if (ck.lm_head_bias) add_row_bias(logits, ck.lm_head_bias->data());
  return logits;
}

ForwardResult forward_plan(const Checkpoint& ck, const ExecutionPlan& plan, std::span<const TokenId> tokens,
                           const ForwardOptions& options, std::size_t start, const Tensor* start_hidden) {
  if (start > plan.slots.size()) throw SpecError("resume slot beyond the plan");
  if (start > 0 && !start_hidden) throw SpecError("resuming a forward pass needs the hidden state");
  Tensor x = start_hidden ? *start_hidden : embed_tokens(ck, tokens);
  if (x.dim(0) != tokens.size()) throw DimensionError("resume state length differs from the token sequence");

  ForwardResult result;
  if (options.capture) result.hidden.push_back(x);
  for (std::size_t s = start; s < plan.slots.size(); ++s) {
    x = run_block(ck, plan.slots[s], x, plan.rope_enabled);
    if (options.capture) result.hidden.push_back(x);
  }
  if (options.rows == OutputRows::all) {
    if (options.first_row >= tokens.size()) throw SpecError("first output row beyond the sequence");
    result.rows.resize(tokens.size() - options.first_row);
    std::iota(result.rows.begin(), result.rows.end(), options.first_row);
  } else {
    result.rows = {tokens.size() - 1};
  }
  result.logits = output_logits(ck, x, result.rows);
  return result;
}

ForwardResult forward(const Checkpoint& ck, std::span<const TokenId> tokens,
                      std::span<const Intervention> interventions, const ForwardOptions& options) {
  const ExecutionPlan plan = build_plan(ck, interventions);
  return forward_plan(ck, plan, tokens, options);
}

LastTokenProbe::LastTokenProbe(const Checkpoint& ck, std::size_t layer, const Tensor& block_input, bool rope_enabled)
    : ck_(&ck), rope_(rope_enabled) {
  if (layer >= ck.n_layers()) throw SpecError("probe layer " + std::to_string(layer) + " out of range");
  lw_ = &ck.layers[layer];
  const ModelConfig& c = ck.config;
  const std::size_t T = block_input.dim(0);
  pos_ = T - 1;
  auto last = block_input.row(pos_);
  base_.assign(last.begin(), last.end());
  if (pos_ > 0) {
    Tensor prefix({pos_, c.d_model});
    std::copy(block_input.data().begin(), block_input.data().begin() + pos_ * c.d_model, prefix.data().begin());
    const Tensor h =
        normalize_rows(prefix, lw_->attn_norm_gain.data(), opt_span(lw_->attn_norm_bias), c.norm_kind, c.norm_eps);
    std::vector<std::size_t> positions(pos_);
    std::iota(positions.begin(), positions.end(), 0);
    Projections p = project(c, *lw_, h, positions, rope_);
    prefix_k_ = std::move(p.k);
    prefix_v_ = std::move(p.v);
  }
}

std::vector<float> LastTokenProbe::residual(std::span<const float> x_last) const {
  const ModelConfig& c = ck_->config;
  const LayerWeights& lw = *lw_;
  const std::size_t d = c.d_model, H = c.n_heads, group = c.n_heads / c.n_kv_heads, kvd = c.kv_dim();
  if (x_last.size() != d) throw DimensionError("probe vector length differs from d_model");
  const Tensor x({1, d}, std::vector<float>(x_last.begin(), x_last.end()));
  const Tensor h = normalize_rows(x, lw.attn_norm_gain.data(), opt_span(lw.attn_norm_bias), c.norm_kind, c.norm_eps);
  const std::size_t pos[1] = {pos_};
  Projections p = project(c, lw, h, pos, rope_);

  // Keys/values for positions 0..pos: cached prefix plus the probed token.
  Tensor k({pos_ + 1, kvd}), v({pos_ + 1, kvd});
  if (pos_ > 0) {
    std::copy(prefix_k_.data().begin(), prefix_k_.data().end(), k.data().begin());
    std::copy(prefix_v_.data().begin(), prefix_v_.data().end(), v.data().begin());
  }
  std::copy(p.k.data().begin(), p.k.data().end(), k.row(pos_).begin());
  std::copy(p.v.data().begin(), p.v.data().end(), v.row(pos_).begin());

  const std::vector<float> slopes = c.pe_type == PeType::alibi ? alibi_slopes(H) : std::vector<float>{};
  Tensor heads_out({1, d});
  for (std::size_t hh = 0; hh < H; ++hh) {
    attend_head(c, hh, slopes, p.q, pos_, k, v, hh / group, pos_, pos_ + 1, heads_out);
  }
  const Tensor attn = linear(heads_out, lw.wo, lw.bo);

  Tensor out = x;
  if (c.parallel_residual) {
    const Tensor h2 = normalize_rows(x, lw.mlp_norm_gain.data(), opt_span(lw.mlp_norm_bias), c.norm_kind, c.norm_eps);
    add_inplace(out, attn);
    add_inplace(out, mlp(c, lw, h2));
  } else {
    add_inplace(out, attn);
    const Tensor h2 = normalize_rows(out, lw.mlp_norm_gain.data(), opt_span(lw.mlp_norm_bias), c.norm_kind, c.norm_eps);
    add_inplace(out, mlp(c, lw, h2));
  }
  std::vector<float> g(d);
  for (std::size_t e = 0; e < d; ++e) g[e] = out.data()[e] - x_last[e];
  return g;
}

}  // namespace protogap
