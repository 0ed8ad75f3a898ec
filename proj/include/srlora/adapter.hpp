#pragma once

#include <cstdint>

#include "srlora/matrix.hpp"
#include "srlora/rng.hpp"

namespace srlora {

// Low-rank update pair: delta = b_factor * a_factor, with b zero at init so
// the adapted forward starts identical to the frozen one. Under stochastic
// partial updating only the leading active_rank columns of B / rows of A
// participate in a step.
struct LoraAdapter {
  std::size_t d = 0;  // output dim
  std::size_t k = 0;  // input dim
  std::size_t r = 0;  // full rank
  Matrix b_factor;    // d x r
  Matrix a_factor;    // r x k
  bool spu_enabled = false;
  std::size_t active_rank = 0;  // in [1, r]; 0 only when the sampler allows it
};

// Uniform rank draws over {1, ..., max_rank}; a draw of 0 would make the
// step a no-op on the adapter, so 0 stays behind include_zero (off by
// default), which widens the range to {0, ..., max_rank}.
class SpuSampler {
 public:
  SpuSampler(std::uint64_t seed, std::size_t max_rank,
             bool include_zero = false)
      : rng_(seed), max_rank_(max_rank), include_zero_(include_zero) {}

  std::size_t draw() {
    return static_cast<std::size_t>(
        rng_.next_in_range(include_zero_ ? 0 : 1, max_rank_));
  }

  std::size_t max_rank() const { return max_rank_; }

 private:
  Rng rng_;
  std::size_t max_rank_;
  bool include_zero_;
};

// a_factor i.i.d. standard normal from seed, b_factor zero, active_rank = r.
LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t r,
                         std::uint64_t seed);

// b_factor[:, :active_rank] * a_factor[:active_rank, :].
Matrix delta(const LoraAdapter& adapter);

// (w0 + delta) * x evaluated factored: w0*x + B_act*(A_act*x). The full
// d x k delta never materializes here.
Matrix apply_adapted(const LoraAdapter& adapter, const Matrix& w0,
                     const Matrix& x);

// w0 + B*A at the full rank r; inference uses the whole learned subspace
// regardless of the last sampled active_rank.
Matrix merge(const LoraAdapter& adapter, const Matrix& w0);

// Draws a fresh active_rank into the adapter and returns it.
std::size_t sample_active_rank(SpuSampler& sampler, LoraAdapter& adapter);

// d*r + r*k.
long long trainable_params(std::size_t d, std::size_t k, std::size_t r);

}  // namespace srlora
