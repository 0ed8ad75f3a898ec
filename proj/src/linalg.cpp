#include "srlora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "srlora/error.hpp"
#include "srlora/rng.hpp"

namespace srlora {

namespace {

// Rotations whose off-diagonal Gram entry is already below this relative
// level are skipped; a sweep with no rotations means convergence.
constexpr double kJacobiTol = 1e-14;
constexpr int kJacobiMaxSweeps = 64;

// Sum of squared entries, accumulated per row and combined in row order so
// the result does not depend on the thread count.
double sum_squares(const Matrix& w) {
  const std::int64_t m = static_cast<std::int64_t>(w.rows());
  std::vector<double> partial(w.rows(), 0.0);
#pragma omp parallel for schedule(static) if (w.size() >= 65536)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = w.row(static_cast<std::size_t>(i));
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) acc += row[j] * row[j];
    partial[static_cast<std::size_t>(i)] = acc;
  }
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

// Round-robin tournament schedule: n items (one phantom added when n is
// odd), n-1 rounds of disjoint pairs covering every unordered pair once.
std::vector<std::vector<std::pair<std::size_t, std::size_t>>>
tournament_rounds(std::size_t n) {
  const std::size_t even = n + (n % 2);
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> rounds;
  if (even < 2) return rounds;
  rounds.reserve(even - 1);
  for (std::size_t r = 0; r + 1 < even; ++r) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(even / 2);
    auto push = [&](std::size_t a, std::size_t b) {
      if (a >= n || b >= n) return;  // phantom slot
      if (a > b) std::swap(a, b);
      pairs.emplace_back(a, b);
    };
    push(r % (even - 1), even - 1);
    for (std::size_t k = 1; k < even / 2; ++k) {
      push((r + k) % (even - 1), (r + even - 1 - k) % (even - 1));
    }
    rounds.push_back(std::move(pairs));
  }
  return rounds;
}

// Replaces near-null columns of `vectors` (m x k, column-major rows stored
// as a Matrix) with unit vectors orthogonal to all other columns.
void complete_orthonormal_columns(Matrix& vectors,
                                  const std::vector<bool>& degenerate) {
  const std::size_t m = vectors.rows();
  const std::size_t k = vectors.cols();
  for (std::size_t j = 0; j < k; ++j) {
    if (!degenerate[j]) continue;
    for (std::size_t cand = 0; cand < m; ++cand) {
      std::vector<double> v(m, 0.0);
      v[cand] = 1.0;
      for (std::size_t c = 0; c < k; ++c) {
        if (c == j) continue;
        double proj = 0.0;
        for (std::size_t i = 0; i < m; ++i) proj += vectors(i, c) * v[i];
        for (std::size_t i = 0; i < m; ++i) v[i] -= proj * vectors(i, c);
      }
      const double nrm = vector_norm(v);
      if (nrm > 0.5) {
        for (std::size_t i = 0; i < m; ++i) vectors(i, j) = v[i] / nrm;
        break;
      }
    }
  }
}

}  // namespace

double frobenius_norm(const Matrix& w) { return std::sqrt(sum_squares(w)); }

double spectral_norm(const Matrix& w, double tol, int max_iter,
                     std::uint64_t seed) {
  if (tol <= 0.0) {
    throw Error(ErrorCode::ConfigError, "spectral_norm: tol must be > 0");
  }
  if (max_iter < 1) {
    throw Error(ErrorCode::ConfigError, "spectral_norm: max_iter must be >= 1");
  }
  int iters_done = 0;
  double last_estimate = 0.0;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Rng rng(attempt == 0 ? seed : derive_seed(seed, 0xA11));
    std::vector<double> v(w.cols());
    for (double& x : v) x = rng.next_gaussian();
    const double vn = vector_norm(v);
    for (double& x : v) x /= vn;

    double sigma_prev = -1.0;
    for (int iter = 0; iter < max_iter; ++iter) {
      ++iters_done;
      const std::vector<double> u = matvec(w, v);
      const double num = dot(u, u);
      if (num == 0.0) return 0.0;  // random v in the null space => W == 0
      const double sigma = std::sqrt(num / dot(v, v));
      last_estimate = sigma;
      if (sigma_prev >= 0.0 &&
          std::abs(sigma - sigma_prev) <= tol * sigma) {
        return sigma;
      }
      sigma_prev = sigma;
      std::vector<double> z = matvec_t(w, u);
      const double zn = vector_norm(z);
      if (zn == 0.0) return sigma;
      for (double& x : z) x /= zn;
      v = std::move(z);
    }
  }
  throw Error(ErrorCode::NonConvergence,
              "power iteration: " + std::to_string(iters_done) +
                  " iterations, last estimate " +
                  std::to_string(last_estimate));
}

SvdResult svd(const Matrix& w) {
  if (w.rows() > kMaxSvdDim || w.cols() > kMaxSvdDim) {
    throw Error(ErrorCode::DimensionTooLarge,
                "svd: " + std::to_string(w.rows()) + "x" +
                    std::to_string(w.cols()) + " exceeds " +
                    std::to_string(kMaxSvdDim));
  }
  if (w.rows() == 0 || w.cols() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "svd: empty matrix");
  }

  // Work on the taller orientation so there are at most `rows` columns to
  // orthogonalize. Columns are stored as contiguous rows of `cols_of`.
  const bool transposed = w.cols() > w.rows();
  const std::size_t m = transposed ? w.cols() : w.rows();
  const std::size_t n = transposed ? w.rows() : w.cols();
  // cols_of.row(j) holds column j of the oriented matrix.
  Matrix cols_of(n, m);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (transposed) {
        cols_of(i, j) = w(i, j);  // column j of W^T is row j of W
      } else {
        cols_of(j, i) = w(i, j);
      }
    }
  }
  // rot.row(j) holds column j of the accumulated right-rotation matrix.
  Matrix rot = Matrix::identity(n);

  const auto rounds = tournament_rounds(n);
  bool converged = false;
  for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
    std::size_t rotated = 0;
    for (const auto& round : rounds) {
      const std::int64_t npairs = static_cast<std::int64_t>(round.size());
      // Pairs within a round touch disjoint columns.
#pragma omp parallel for schedule(static) reduction(+ : rotated) \
    if (round.size() * m >= 16384)
      for (std::int64_t pi = 0; pi < npairs; ++pi) {
        const auto [p, q] = round[static_cast<std::size_t>(pi)];
        double* cp = cols_of.row(p);
        double* cq = cols_of.row(q);
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          app += cp[k] * cp[k];
          aqq += cq[k] * cq[k];
          apq += cp[k] * cq[k];
        }
        if (apq == 0.0 || apq * apq <= kJacobiTol * kJacobiTol * app * aqq) {
          continue;
        }
        rotated += 1;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double xp = cp[k];
          const double xq = cq[k];
          cp[k] = c * xp - s * xq;
          cq[k] = s * xp + c * xq;
        }
        double* vp = rot.row(p);
        double* vq = rot.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double xp = vp[k];
          const double xq = vq[k];
          vp[k] = c * xp - s * xq;
          vq[k] = s * xp + c * xq;
        }
      }
    }
    converged = rotated == 0;
  }
  if (!converged) {
    throw Error(ErrorCode::NonConvergence,
                "svd: Jacobi sweeps exceeded " +
                    std::to_string(kJacobiMaxSweeps));
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    sigma[j] = vector_norm(std::span<const double>(cols_of.row(j), m));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sigma[a] > sigma[b];
  });

  const double sigma_max = sigma.empty() ? 0.0 : sigma[order[0]];
  const double null_cutoff =
      sigma_max * static_cast<double>(std::max(m, n)) * 1e-15;

  Matrix u(m, n);
  Matrix v(n, n);
  std::vector<double> sorted_sigma(n);
  std::vector<bool> degenerate(n, false);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    sorted_sigma[j] = sigma[src];
    if (sigma[src] <= null_cutoff) {
      degenerate[j] = true;  // direction is noise; rebuilt below
    } else {
      const double* col = cols_of.row(src);
      for (std::size_t i = 0; i < m; ++i) u(i, j) = col[i] / sigma[src];
    }
    const double* rcol = rot.row(src);
    for (std::size_t i = 0; i < n; ++i) v(i, j) = rcol[i];
  }
  complete_orthonormal_columns(u, degenerate);

  SvdResult result;
  result.singular_values = std::move(sorted_sigma);
  if (transposed) {
    result.left_vectors = std::move(v);
    result.right_vectors = std::move(u);
  } else {
    result.left_vectors = std::move(u);
    result.right_vectors = std::move(v);
  }
  return result;
}

double stable_rank(const Matrix& w) {
  const double fro2 = sum_squares(w);
  if (fro2 == 0.0) {
    throw Error(ErrorCode::ZeroMatrix, "stable_rank of the zero matrix");
  }
  const double sn = spectral_norm(w);
  return fro2 / (sn * sn);
}

std::size_t effective_rank(const Matrix& w, double rel_threshold) {
  if (rel_threshold <= 0.0 || rel_threshold >= 1.0) {
    throw Error(ErrorCode::ConfigError,
                "effective_rank: threshold must be in (0, 1)");
  }
  const SvdResult dec = svd(w);
  if (dec.singular_values.empty() || dec.singular_values[0] == 0.0) return 0;
  const double cutoff = rel_threshold * dec.singular_values[0];
  std::size_t count = 0;
  for (double s : dec.singular_values) {
    if (s > cutoff) ++count;
  }
  return count;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "pearson: " + std::to_string(x.size()) + " vs " +
                    std::to_string(y.size()));
  }
  if (x.size() < 2) {
    throw Error(ErrorCode::LengthMismatch, "pearson: need at least 2 samples");
  }
  auto is_constant = [](const std::vector<double>& s) {
    return std::all_of(s.begin(), s.end(),
                       [&](double v) { return v == s.front(); });
  };
  if (is_constant(x) || is_constant(y)) {
    throw Error(ErrorCode::ConstantInput, "pearson: constant sequence");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

double generalization_indicator(const std::vector<Matrix>& weights) {
  double norm_product_sq = 1.0;
  double srank_sum = 0.0;
  for (const Matrix& w : weights) {
    const double fro2 = sum_squares(w);
    if (fro2 == 0.0) {
      throw Error(ErrorCode::ZeroMatrix,
                  "generalization_indicator: zero matrix in sequence");
    }
    const double sn = spectral_norm(w);
    norm_product_sq *= sn * sn;
    srank_sum += fro2 / (sn * sn);
  }
  return std::sqrt(norm_product_sq) * srank_sum;
}

}  // namespace srlora
