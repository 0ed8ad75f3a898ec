#pragma once

#include <vector>

#include "srlora/matrix.hpp"

namespace srlora::ref {

// Plain single-threaded kernels. They stay deliberately simple (textbook
// loop nests, cyclic Jacobi ordering) so the parallel implementations can be
// checked against an independent path; the benchmark target times both.

Matrix matmul(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& w);

// One-sided Jacobi with the classic cyclic (p < q) ordering. Returns the
// singular values in non-increasing order.
std::vector<double> singular_values(const Matrix& w);

double spectral_norm(const Matrix& w, std::uint64_t seed);

}  // namespace srlora::ref
