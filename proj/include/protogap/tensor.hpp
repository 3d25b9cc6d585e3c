#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace protogap {

/// Dense row-major fp32 tensor. Every dimension is positive and the buffer
/// length equals the product of the shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  /// Row `r` of a rank-2 tensor.
  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Same buffer, new shape with equal element count.
  Tensor reshaped(std::vector<std::size_t> shape) const;

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// Throws NumericalError naming `what` if any entry is NaN or Inf.
void require_finite(std::span<const float> values, const char* what);

/// a[m×k] · b[k×n]. Fixed i-k-j accumulation order, so results are
/// bit-stable run to run.
Tensor matmul(const Tensor& a, const Tensor& b);

/// a[m×k] · b[n×k]ᵀ, each output a dot product accumulated left to right.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

/// Adds `bias` (length n) to every row of an m×n tensor.
void add_row_bias(Tensor& x, std::span<const float> bias);

std::vector<float> softmax(std::span<const float> logits);

/// log-softmax evaluated at one index, in double precision.
double log_softmax_at(std::span<const float> logits, std::size_t index);

enum class NormKind { layernorm, rmsnorm };

/// layernorm: (x - mean) / sqrt(var + eps) * gain + bias.
/// rmsnorm:   x / sqrt(mean(x^2) + eps) * gain.
/// `bias` may be empty.
std::vector<float> normalize(std::span<const float> x, std::span<const float> gain,
                             std::span<const float> bias, NormKind kind, float eps);

/// Row-wise normalize of an m×n tensor.
Tensor normalize_rows(const Tensor& x, std::span<const float> gain,
                      std::span<const float> bias, NormKind kind, float eps);

/// Rotary position embedding over a [seq, heads, head_dim] tensor. Rotates
/// the first `rotary_dim` channels of each head using the half-split
/// pairing (channel c with c + rotary_dim/2), angle = pos * base^(-2c/rotary_dim).
/// With enabled == false the input is returned untouched.
Tensor apply_rotary(const Tensor& q_or_k, std::span<const std::size_t> positions,
                    float theta_base, bool enabled, std::size_t rotary_dim = 0);

}  // namespace protogap
