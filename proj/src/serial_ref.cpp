#include "srlora/serial_ref.hpp"

#include <algorithm>
#include <cmath>

#include "srlora/error.hpp"
#include "srlora/rng.hpp"

namespace srlora::ref {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "ref::matmul: inner dimensions");
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

double frobenius_norm(const Matrix& w) {
  double acc = 0.0;
  for (double v : w.data()) acc += v * v;
  return std::sqrt(acc);
}

std::vector<double> singular_values(const Matrix& w) {
  const bool transposed = w.cols() > w.rows();
  const Matrix oriented = transposed ? transpose(w) : w;
  const std::size_t m = oriented.rows();
  const std::size_t n = oriented.cols();
  // Column j lives in work.row(j).
  Matrix work = transpose(oriented);

  const double tol = 1e-14;
  for (int sweep = 0; sweep < 64; ++sweep) {
    std::size_t rotated = 0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = work.row(p);
        double* cq = work.row(q);
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          app += cp[k] * cp[k];
          aqq += cq[k] * cq[k];
          apq += cp[k] * cq[k];
        }
        if (apq == 0.0 || apq * apq <= tol * tol * app * aqq) continue;
        ++rotated;
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
      }
    }
    if (rotated == 0) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    sigma[j] = vector_norm(std::span<const double>(work.row(j), m));
  }
  std::sort(sigma.begin(), sigma.end(), std::greater<double>());
  return sigma;
}

double spectral_norm(const Matrix& w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(w.cols());
  for (double& x : v) x = rng.next_gaussian();
  double vn = vector_norm(v);
  for (double& x : v) x /= vn;

  double sigma_prev = -1.0;
  for (int iter = 0; iter < 20000; ++iter) {
    std::vector<double> u(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) acc += w(i, j) * v[j];
      u[i] = acc;
    }
    const double num = dot(u, u);
    if (num == 0.0) return 0.0;
    const double sigma = std::sqrt(num / dot(v, v));
    if (sigma_prev >= 0.0 && std::abs(sigma - sigma_prev) <= 1e-13 * sigma) {
      return sigma;
    }
    sigma_prev = sigma;
    std::vector<double> z(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) z[j] += w(i, j) * u[i];
    }
    const double zn = vector_norm(z);
    if (zn == 0.0) return sigma;
    for (double& x : z) x /= zn;
    v = std::move(z);
  }
  return sigma_prev;
}

}  // namespace srlora::ref
