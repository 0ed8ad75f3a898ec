#include "srlora/adapter.hpp"

#include "srlora/error.hpp"

namespace srlora {

LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t r,
                         std::uint64_t seed) {
  if (r < 1 || r > std::min(d, k)) {
    throw Error(ErrorCode::RankTooLarge,
                "rank " + std::to_string(r) + " outside [1, min(" +
                    std::to_string(d) + ", " + std::to_string(k) + ")]");
  }
  LoraAdapter adapter;
  adapter.d = d;
  adapter.k = k;
  adapter.r = r;
  adapter.b_factor = Matrix(d, r);
  Rng rng(seed);
  adapter.a_factor = Matrix::gaussian(r, k, rng);
  adapter.active_rank = r;
  return adapter;
}

Matrix delta(const LoraAdapter& adapter) {
  if (adapter.active_rank == 0) return Matrix(adapter.d, adapter.k);
  return matmul(take_cols(adapter.b_factor, adapter.active_rank),
                take_rows(adapter.a_factor, adapter.active_rank));
}

Matrix apply_adapted(const LoraAdapter& adapter, const Matrix& w0,
                     const Matrix& x) {
  if (w0.rows() != adapter.d || w0.cols() != adapter.k) {
    throw Error(ErrorCode::ShapeMismatch,
                "apply_adapted: w0 is " + std::to_string(w0.rows()) + "x" +
                    std::to_string(w0.cols()) + ", adapter expects " +
                    std::to_string(adapter.d) + "x" + std::to_string(adapter.k));
  }
  if (x.rows() != adapter.k) {
    throw Error(ErrorCode::ShapeMismatch,
                "apply_adapted: x has " + std::to_string(x.rows()) +
                    " rows, expected " + std::to_string(adapter.k));
  }
  Matrix out = matmul(w0, x);
  if (adapter.active_rank > 0) {
    const Matrix inner =
        matmul(take_rows(adapter.a_factor, adapter.active_rank), x);
    add_in_place(out, matmul(take_cols(adapter.b_factor, adapter.active_rank),
                             inner));
  }
  return out;
}

Matrix merge(const LoraAdapter& adapter, const Matrix& w0) {
  if (w0.rows() != adapter.d || w0.cols() != adapter.k) {
    throw Error(ErrorCode::ShapeMismatch,
                "merge: w0 is " + std::to_string(w0.rows()) + "x" +
                    std::to_string(w0.cols()) + ", adapter expects " +
                    std::to_string(adapter.d) + "x" + std::to_string(adapter.k));
  }
  return add(w0, matmul(adapter.b_factor, adapter.a_factor));
}

std::size_t sample_active_rank(SpuSampler& sampler, LoraAdapter& adapter) {
  if (!adapter.spu_enabled) {
    throw Error(ErrorCode::SpuDisabled,
                "sample_active_rank on an adapter without SPU");
  }
  adapter.active_rank = sampler.draw();
  return adapter.active_rank;
}

long long trainable_params(std::size_t d, std::size_t k, std::size_t r) {
  return static_cast<long long>(d) * static_cast<long long>(r) +
         static_cast<long long>(r) * static_cast<long long>(k);
}

}  // namespace srlora
