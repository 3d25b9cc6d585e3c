#include "protogap/jacobian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>

#include "protogap/error.hpp"
#include "protogap/model.hpp"
#include "protogap/parallel.hpp"

namespace protogap {

std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw DimensionError("symmetric_eigenvalues: matrix is not n x n");
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = 0; q < n; ++q) {
        total += a[p * n + q] * a[p * n + q];
        if (p != q) off += a[p * n + q] * a[p * n + q];
      }
    }
    if (off <= 1e-30 * std::max(total, 1e-300)) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t k = 0; k < n; ++k) eig[k] = a[k * n + k];
  std::sort(eig.begin(), eig.end());
  return eig;
}

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

bool finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// One attempt at a fixed epsilon; nullopt when a difference is non-finite.
std::optional<SpectralEstimate> attempt(const ResidualFn& g, std::span<const float> x0, const SpectralOptions& o,
                                        double eps) {
  const std::size_t n = x0.size();
  SpectralEstimate est;
  est.epsilon_used = eps;

  auto diff = [&](const std::vector<double>& dir) {
    std::vector<float> xp(n), xm(n);
    for (std::size_t c = 0; c < n; ++c) {
      xp[c] = static_cast<float>(x0[c] + eps * dir[c]);
      xm[c] = static_cast<float>(x0[c] - eps * dir[c]);
    }
    const std::vector<float> gp = g(xp), gm = g(xm);
    est.evaluations += 2;
    if (gp.size() != gm.size()) throw DimensionError("residual map returned inconsistent lengths");
    std::vector<double> out(gp.size());
    for (std::size_t i = 0; i < gp.size(); ++i) {
      out[i] = (static_cast<double>(gp[i]) - static_cast<double>(gm[i])) / (2.0 * eps);
    }
    return out;
  };

  // Coordinate differences: column c of J, reused by every J^T w.
  std::vector<std::vector<double>> cols(n);
  std::vector<double> e(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    e[c] = 1.0;
    cols[c] = diff(e);
    e[c] = 0.0;
    if (!finite(cols[c])) return std::nullopt;
  }
  const std::size_t m = cols.empty() ? 0 : cols[0].size();
  auto jt = [&](const std::vector<double>& w) {
    std::vector<double> out(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += w[i] * cols[c][i];
      out[c] = s;
    }
    return out;
  };

  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  const double nv = norm2(v);
  for (double& x : v) x /= nv;

  std::vector<std::vector<double>> iterates;
  for (std::size_t t = 0; t < o.iterations; ++t) {
    const std::vector<double> u = diff(v);
    if (!finite(u)) return std::nullopt;
    const double sigma = norm2(u);
    est.history.push_back(sigma);
    iterates.push_back(v);
    const std::vector<double> w = jt(u);
    const double lam = norm2(w);
    if (t + 1 == o.iterations || lam == 0.0) {
      const double l = sigma * sigma;
      double r = 0.0;
      for (std::size_t c = 0; c < n; ++c) r += (w[c] - l * v[c]) * (w[c] - l * v[c]);
      est.residual = l > 0.0 ? std::sqrt(r) / l : 0.0;
      if (lam == 0.0) break;
    }
    for (std::size_t c = 0; c < n; ++c) v[c] = w[c] / lam;
  }
  est.power_norm = est.history.empty() ? 0.0 : est.history.back();
  est.norm = est.power_norm;

  if (o.ritz && est.power_norm > 0.0) {
    iterates.push_back(v);
    std::vector<std::vector<double>> q;
    for (auto cand : iterates) {
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& b : q) {
          double d = 0.0;
          for (std::size_t c = 0; c < n; ++c) d += cand[c] * b[c];
          for (std::size_t c = 0; c < n; ++c) cand[c] -= d * b[c];
        }
      }
      const double len = norm2(cand);
      if (len < 1e-8) continue;
      for (double& x : cand) x /= len;
      q.push_back(std::move(cand));
      if (q.size() == n) break;
    }
    std::vector<std::vector<double>> bq;
    for (const auto& b : q) {
      bq.push_back(diff(b));
      if (!finite(bq.back())) return std::nullopt;
    }
    const std::size_t k = q.size();
    std::vector<double> gram(k * k);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += bq[a][i] * bq[b][i];
        gram[a * k + b] = s;
      }
    }
    const auto eig = symmetric_eigenvalues(std::move(gram), k);
    est.norm = std::max(est.power_norm, std::sqrt(std::max(eig.back(), 0.0)));
  }
  return est;
}

}  // namespace

SpectralEstimate estimate_spectral_norm(const ResidualFn& g, std::span<const float> x0, const SpectralOptions& o) {
  if (!(o.epsilon > 0.0)) throw DomainError("finite-difference epsilon must be positive");
  if (o.iterations == 0) throw DomainError("power iteration needs at least one iteration");
  if (x0.empty()) throw DimensionError("probe point is empty");
  if (auto est = attempt(g, x0, o, o.epsilon)) return *est;
  if (auto est = attempt(g, x0, o, 10.0 * o.epsilon)) {
    est->retried = true;
    return *est;
  }
  SpectralEstimate bad;
  bad.norm = bad.power_norm = std::numeric_limits<double>::quiet_NaN();
  bad.epsilon_used = 10.0 * o.epsilon;
  bad.retried = true;
  bad.flagged = true;
  return bad;
}

JacobianRow residual_jacobian_norm(const Checkpoint& ck, std::size_t layer, const PromptSet& prompts,
                                   const SpectralOptions& o) {
  prompts.validate();
  if (layer >= ck.n_layers()) throw SpecError("layer " + std::to_string(layer) + " out of range");
  JacobianRow row;
  row.layer = layer;
  std::vector<SpectralEstimate> est(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t p) {
    ForwardOptions fo;
    fo.capture = true;
    fo.rows = OutputRows::last;
    const ForwardResult r = forward(ck, prompts.prompts[p], {}, fo);
    const LastTokenProbe probe(ck, layer, r.hidden[layer]);
    const ResidualFn g = [&probe](std::span<const float> x) {
      try {
        return probe.residual(x);
      } catch (const NumericalError&) {
        return std::vector<float>(x.size(), std::numeric_limits<float>::quiet_NaN());
      }
    };
    SpectralOptions po = o;
    po.seed = o.seed + p;
    est[p] = estimate_spectral_norm(g, probe.base_point(), po);
  });
  std::vector<double> ok;
  for (const auto& e : est) {
    row.per_prompt.push_back(e.norm);
    row.residuals.push_back(e.residual);
    if (e.retried) ++row.retried;
    if (e.flagged) {
      ++row.flagged;
    } else {
      ok.push_back(e.norm);
    }
  }
  if (ok.empty()) {
    row.mean = row.max = row.min = std::numeric_limits<double>::quiet_NaN();
  } else {
    double s = 0.0;
    for (double x : ok) s += x;
    row.mean = s / static_cast<double>(ok.size());
    row.max = *std::max_element(ok.begin(), ok.end());
    row.min = *std::min_element(ok.begin(), ok.end());
    row.mean = std::clamp(row.mean, row.min, row.max);
  }
  return row;
}

JacobianReport jacobian_report(const Checkpoint& ck, std::span<const std::size_t> layers, const PromptSet& prompts,
                               const SpectralOptions& o) {
  JacobianReport rep;
  rep.iterations = o.iterations;
  rep.epsilon = o.epsilon;
  for (std::size_t k : layers) rep.rows.push_back(residual_jacobian_norm(ck, k, prompts, o));
  return rep;
}

}  // namespace protogap
