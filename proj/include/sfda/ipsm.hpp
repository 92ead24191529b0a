#ifndef SFDA_IPSM_HPP
#define SFDA_IPSM_HPP

#include <cstddef>
#include <utility>
#include <vector>

#include "sfda/autograd.hpp"
#include "sfda/tensor.hpp"

namespace sfda {
namespace ipsm {

/// (B,C,H,W) -> (B,K^2,C,H/K,W/K); patch k covers block row k/K, column k%K.
/// H and W must be divisible by K.
Variable split_into_patches(const Variable& x, int k);

/// Exact inverse of split_into_patches on raw tensors.
Tensor reassemble_patches(const Tensor& grid, int k);

/// Entropy of one softmax patch (C,h,w): -(1/(h*w)) sum_hw sum_c p log p,
/// with 0*log(0) = 0. Validates the per-pixel simplex to 1e-4.
double patch_entropy(const Tensor& patch);

/// Entropies of every patch in a (B,P,C,h,w) grid, returned as (B,P).
Tensor patch_entropies(const Tensor& prob_grid);

struct EasyHardSplit {
  std::size_t batch = 0;
  std::size_t patches = 0;
  // easy[k] / hard[k] hold batch indices in ascending order; |easy[k]| = B/2.
  std::vector<std::vector<std::size_t>> easy;
  std::vector<std::vector<std::size_t>> hard;

  // Flattened (batch, patch) index pairs, grouped by patch position. Suitable
  // for gather_patches and for building discriminator position ids.
  std::vector<std::pair<int, int>> easy_pairs() const;
  std::vector<std::pair<int, int>> hard_pairs() const;
};

/// For each patch position, the B/2 lowest-entropy batch members are easy and
/// the rest hard. Ties keep the lower batch index on the easy side. Throws on
/// odd batch sizes and non-finite entropies.
EasyHardSplit rank_easy_hard(const Tensor& entropies);

}  // namespace ipsm
}  // namespace sfda

#endif  // SFDA_IPSM_HPP
