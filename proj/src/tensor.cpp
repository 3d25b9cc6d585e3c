#include "protogap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "protogap/error.hpp"

namespace protogap {
namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    n *= d;
  }
  return n;
}

void require_matrix(const Tensor& t, const char* name) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(name) + " must be rank 2, got " + shape_string(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  data_.assign(element_count(shape_), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("buffer of " + std::to_string(data_.size()) + " floats does not fit shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

std::span<float> Tensor::row(std::size_t r) {
  const std::size_t n = shape_.back();
  return std::span<float>(data_).subspan(r * n, n);
}

std::span<const float> Tensor::row(std::size_t r) const {
  const std::size_t n = shape_.back();
  return std::span<const float>(data_).subspan(r * n, n);
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const { return Tensor(std::move(shape), data_); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void require_finite(std::span<const float> values, const char* what) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + what);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = pa[i * k + p];
      const float* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  require_finite(out.data(), "matmul output");
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_transposed inner dimensions differ: " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b.data().data() + j * k;
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  require_finite(out.data(), "matmul output");
  return out;
}

void add_row_bias(Tensor& x, std::span<const float> bias) {
  require_matrix(x, "bias target");
  if (bias.size() != x.dim(1)) throw DimensionError("bias length does not match row width");
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < bias.size(); ++c) row[c] += bias[c];
  }
}

std::vector<float> softmax(std::span<const float> logits) {
  if (logits.empty()) throw DomainError("softmax of an empty vector");
  require_finite(logits, "softmax input");
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    total += e[i];
  }
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(e[i] / total);
  return out;
}

double log_softmax_at(std::span<const float> logits, std::size_t index) {
  if (index >= logits.size()) throw DimensionError("log_softmax index out of range");
  require_finite(logits, "log_softmax input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (float v : logits) total += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(logits[index]) - mx - std::log(total);
}

std::vector<float> normalize(std::span<const float> x, std::span<const float> gain,
                             std::span<const float> bias, NormKind kind, float eps) {
  if (x.size() != gain.size() || (!bias.empty() && bias.size() != x.size())) {
    throw DimensionError("normalize: vector, gain and bias lengths differ");
  }
  if (!(eps > 0.0f)) throw DomainError("normalize: eps must be positive");
  if (x.empty()) throw DimensionError("normalize: empty vector");
  const double n = static_cast<double>(x.size());
  std::vector<float> out(x.size());
  if (kind == NormKind::layernorm) {
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double y = (x[i] - mean) * inv * gain[i];
      if (!bias.empty()) y += bias[i];
      out[i] = static_cast<float>(y);
    }
  } else {
    double ms = 0.0;
    for (float v : x) ms += static_cast<double>(v) * v;
    ms /= n;
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double y = x[i] * inv * gain[i];
      if (!bias.empty()) y += bias[i];
      out[i] = static_cast<float>(y);
    }
  }
  require_finite(out, "normalize output");
  return out;
}

Tensor normalize_rows(const Tensor& x, std::span<const float> gain, std::span<const float> bias,
                      NormKind kind, float eps) {
  require_matrix(x, "normalize_rows input");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    auto y = normalize(x.row(r), gain, bias, kind, eps);
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

Tensor apply_rotary(const Tensor& q_or_k, std::span<const std::size_t> positions, float theta_base,
                    bool enabled, std::size_t rotary_dim) {
  if (!enabled) return q_or_k;
  if (q_or_k.rank() != 3) {
    throw DimensionError("apply_rotary expects [seq, heads, head_dim], got " + shape_string(q_or_k.shape()));
  }
  const std::size_t seq = q_or_k.dim(0), heads = q_or_k.dim(1), hd = q_or_k.dim(2);
  if (rotary_dim == 0) rotary_dim = hd;
  if (rotary_dim > hd) throw ConfigError("rotary dimension exceeds head dimension");
  if (rotary_dim % 2 != 0) throw ConfigError("rotary embedding needs an even rotary dimension");
  if (positions.size() != seq) throw DimensionError("apply_rotary: one position per row required");
  if (!(theta_base > 0.0f)) throw ConfigError("rotary theta base must be positive");

  const std::size_t half = rotary_dim / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t c = 0; c < half; ++c) {
    inv_freq[c] = std::pow(static_cast<double>(theta_base), -2.0 * static_cast<double>(c) / rotary_dim);
  }
  Tensor out = q_or_k;
  auto data = out.data();
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t c = 0; c < half; ++c) {
      const double angle = static_cast<double>(positions[t]) * inv_freq[c];
      const float cs = static_cast<float>(std::cos(angle));
      const float sn = static_cast<float>(std::sin(angle));
      for (std::size_t h = 0; h < heads; ++h) {
        float* v = data.data() + (t * heads + h) * hd;
        const float a = v[c], b = v[c + half];
        v[c] = a * cs - b * sn;
        v[c + half] = b * cs + a * sn;
      }
    }
  }
  return out;
}

}  // namespace protogap
