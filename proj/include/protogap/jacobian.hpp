#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "protogap/checkpoint.hpp"
#include "protogap/corpus.hpp"

namespace protogap {

/// A residual update g: R^d -> R^d evaluated at arbitrary points.
using ResidualFn = std::function<std::vector<float>(std::span<const float>)>;

struct SpectralOptions {
  std::size_t iterations = 20;
  double epsilon = 1e-3;
  std::uint64_t seed = 42;
  bool ritz = true;  // Rayleigh-Ritz over the iterates after the power steps
};

struct SpectralEstimate {
  double norm = 0.0;              // estimate of ||J||_2 at the probe point
  double power_norm = 0.0;        // plain power-iteration estimate
  std::vector<double> history;    // ||J v_t|| per iteration, unit v_t
  double residual = 0.0;          // ||J^T J v - l v|| / l at the last iterate
  double epsilon_used = 0.0;
  bool retried = false;           // non-finite differences at epsilon, redone at 10 epsilon
  bool flagged = false;           // still non-finite after the retry
  std::size_t evaluations = 0;    // calls of g
};

/// Spectral norm of the Jacobian of g at x0 by power iteration on J^T J.
/// J v is a central difference along v; J^T w is the central-difference
/// gradient of <w, g(x)>, whose coordinate evaluations do not depend on w
/// and are taken once per probe point.
SpectralEstimate estimate_spectral_norm(const ResidualFn& g, std::span<const float> x0,
                                        const SpectralOptions& options = {});

struct JacobianRow {
  std::size_t layer = 0;
  double mean = 0.0;
  double max = 0.0;
  double min = 0.0;
  std::vector<double> per_prompt;
  std::vector<double> residuals;
  std::size_t retried = 0;
  std::size_t flagged = 0;
};

struct JacobianReport {
  std::vector<JacobianRow> rows;
  std::size_t iterations = 0;
  double epsilon = 0.0;
};

/// ||J_k||_2 of g_k(x) = block_k(x) - x at the final token of each prompt,
/// earlier positions held fixed.
JacobianRow residual_jacobian_norm(const Checkpoint& ck, std::size_t layer, const PromptSet& prompts,
                                   const SpectralOptions& options = {});

JacobianReport jacobian_report(const Checkpoint& ck, std::span<const std::size_t> layers, const PromptSet& prompts,
                               const SpectralOptions& options = {});

/// Eigenvalues of a small symmetric matrix (row-major n x n), cyclic Jacobi.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n);

}  // namespace protogap
