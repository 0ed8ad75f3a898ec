#pragma once

#include <cstdint>
#include <vector>

#include "srlora/matrix.hpp"

namespace srlora {

// Largest dimension accepted by the dense decompositions.
inline constexpr std::size_t kMaxSvdDim = 4096;

inline constexpr double kDefaultPowerTol = 1e-12;
inline constexpr int kDefaultPowerMaxIter = 10000;
inline constexpr std::uint64_t kDefaultPowerSeed = 0x5EEDC0DEULL;
inline constexpr double kDefaultRankThreshold = 1e-6;

struct SvdResult {
  // Non-increasing, length min(rows, cols).
  std::vector<double> singular_values;
  Matrix left_vectors;   // rows x k, orthonormal columns
  Matrix right_vectors;  // cols x k, orthonormal columns
};

// sqrt of the sum of squared entries; equals sqrt(sum sigma_i^2).
double frobenius_norm(const Matrix& w);

// Largest singular value via power iteration on W^T W with a seeded random
// start. Stops when the relative change of the value estimate drops below
// tol (the vector may keep rotating when sigma_1 ~ sigma_2, the value does
// not). One reseeded restart before reporting NonConvergence.
double spectral_norm(const Matrix& w, double tol = kDefaultPowerTol,
                     int max_iter = kDefaultPowerMaxIter,
                     std::uint64_t seed = kDefaultPowerSeed);

// Full SVD by one-sided Jacobi rotations on the taller orientation.
// Column pairs within a sweep follow a fixed round-robin schedule, so the
// disjoint rotations of one round can run in parallel without changing the
// result for any thread count.
SvdResult svd(const Matrix& w);

// ||W||_F^2 / ||W||_2^2, in [1, min(rows, cols)]. Undefined (0/0) for the
// zero matrix, which is reported as ZeroMatrix.
double stable_rank(const Matrix& w);

// Count of singular values above rel_threshold * sigma_1. Zero matrix -> 0.
std::size_t effective_rank(const Matrix& w,
                           double rel_threshold = kDefaultRankThreshold);

// Sample Pearson correlation coefficient.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// sqrt(prod ||W_i||_2^2) * sum srank(W_i): the spectral-norm product paired
// with the summed stable ranks, the capacity indicator tracked by the
// analysis tooling.
double generalization_indicator(const std::vector<Matrix>& weights);

}  // namespace srlora
