#include <doctest.h>

#include <cmath>
#include <random>

#include "protogap/error.hpp"
#include "protogap/tensor.hpp"

using namespace protogap;

TEST_CASE("matmul against hand arithmetic") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<std::size_t>{2, 2});
  CHECK(c.at(0, 0) == 19);
  CHECK(c.at(0, 1) == 22);
  CHECK(c.at(1, 0) == 43);
  CHECK(c.at(1, 1) == 50);

  CHECK(matmul(Tensor::from_rows({{1}}), Tensor::from_rows({{3}})).at(0, 0) == 3);
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  CHECK(matmul(eye, a) == a);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST_CASE("matmul_transposed agrees with matmul") {
  const Tensor a = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Tensor bt = Tensor::from_rows({{1, 0, 2}, {0, 1, 1}});
  const Tensor b = Tensor::from_rows({{1, 0}, {0, 1}, {2, 1}});
  CHECK(matmul_transposed(a, bt) == matmul(a, b));
}

TEST_CASE("softmax closed forms and shift invariance") {
  const float z[2] = {0.0f, 0.0f};
  auto p = softmax(z);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  const float l[2] = {std::log(2.0f), 0.0f};
  p = softmax(l);
  CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  const float x[4] = {0.3f, -1.2f, 2.0f, 0.0f};
  const float xs[4] = {100.3f, 98.8f, 102.0f, 100.0f};
  const auto a = softmax(x);
  const auto b = softmax(xs);
  for (int k = 0; k < 4; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-5));
}

TEST_CASE("softmax rejects non-finite input") {
  const float bad[2] = {0.0f, NAN};
  CHECK_THROWS_AS(softmax(bad), NumericalError);
}

TEST_CASE("log_softmax_at matches log of softmax") {
  const float x[3] = {1.0f, 2.0f, 3.0f};
  const auto p = softmax(x);
  for (std::size_t k = 0; k < 3; ++k) CHECK(log_softmax_at(x, k) == doctest::Approx(std::log(p[k])).epsilon(1e-6));
}

TEST_CASE("rmsnorm and layernorm") {
  const float ones[2] = {1, 1};
  const float v[2] = {3, 4};
  auto r = normalize(v, ones, {}, NormKind::rmsnorm, 1e-12f);
  CHECK(r[0] == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-6));
  CHECK(r[1] == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-6));
  CHECK(r[0] == doctest::Approx(0.8485).epsilon(1e-4));
  CHECK(r[1] == doctest::Approx(1.1314).epsilon(1e-4));

  r = normalize(ones, ones, {}, NormKind::rmsnorm, 1e-12f);
  CHECK(r[0] == doctest::Approx(1.0));

  const float c[3] = {2, 2, 2};
  const float g[3] = {0.5f, 2.0f, 3.0f};
  r = normalize(c, g, {}, NormKind::layernorm, 1e-5f);
  for (float x : r) CHECK(x == doctest::Approx(0.0));
}

TEST_CASE("rotary embedding") {
  std::mt19937 rng(3);
  std::normal_distribution<float> n(0, 1);
  Tensor q({4, 2, 4});
  for (auto& x : q.data()) x = n(rng);
  const std::size_t pos[4] = {0, 1, 7, 300};
  const Tensor r = apply_rotary(q, pos, 10000.0f, true);

  for (std::size_t c = 0; c < 8; ++c) CHECK(r.data()[c] == q.data()[c]);
  CHECK(apply_rotary(q, pos, 10000.0f, false) == q);

  for (std::size_t head = 0; head < 8; ++head) {
    double a = 0, b = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      a += double(q.data()[head * 4 + c]) * q.data()[head * 4 + c];
      b += double(r.data()[head * 4 + c]) * r.data()[head * 4 + c];
    }
    CHECK(std::sqrt(b) == doctest::Approx(std::sqrt(a)).epsilon(1e-5));
  }
}

TEST_CASE("require_finite names the offending tensor") {
  const float v[2] = {1.0f, INFINITY};
  try {
    require_finite(v, "layers.0.Wq");
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("layers.0.Wq") != std::string::npos);
  }
}
