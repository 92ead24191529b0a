#include "sfda/ipsm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "sfda/ops.hpp"

namespace sfda {
namespace ipsm {

Variable split_into_patches(const Variable& x, int k) { return ops::extract_patches(x, k); }

Tensor reassemble_patches(const Tensor& grid, int k) {
  if (grid.rank() != 5) {
    throw std::invalid_argument("reassemble_patches: expected (B,P,C,h,w), got " +
                                grid.shape_str());
  }
  if (k < 1) throw std::invalid_argument("reassemble_patches: k must be >= 1");
  const std::size_t kk = std::size_t(k);
  const std::size_t b = grid.dim(0), p = grid.dim(1), c = grid.dim(2);
  const std::size_t ph = grid.dim(3), pw = grid.dim(4);
  if (p != kk * kk) {
    throw std::invalid_argument("reassemble_patches: grid has " + std::to_string(p) +
                                " patches, expected " + std::to_string(kk * kk));
  }
  const std::size_t h = ph * kk, w = pw * kk;
  Tensor out({int(b), int(c), int(h), int(w)});
  const double* g = grid.data();
  double* o = out.data();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t pi = 0; pi < p; ++pi) {
      const std::size_t r0 = (pi / kk) * ph, c0 = (pi % kk) * pw;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < ph; ++y) {
          const double* src = g + (((n * p + pi) * c + ch) * ph + y) * pw;
          double* dst = o + ((n * c + ch) * h + r0 + y) * w + c0;
          std::copy(src, src + pw, dst);
        }
      }
    }
  }
  return out;
}

double patch_entropy(const Tensor& patch) {
  if (patch.rank() != 3) {
    throw std::invalid_argument("patch_entropy: expected (C,h,w), got " + patch.shape_str());
  }
  const std::size_t c = patch.dim(0), h = patch.dim(1), w = patch.dim(2);
  const std::size_t plane = h * w;
  const double* p = patch.data();
  double total = 0.0;
  for (std::size_t s = 0; s < plane; ++s) {
    double sum = 0.0, ent = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = p[ch * plane + s];
      sum += v;
      if (v > 0.0) ent -= v * std::log(v);
    }
    if (!(std::fabs(sum - 1.0) <= 1e-4)) {
      throw std::invalid_argument("patch_entropy: channel sums must be 1 (got " +
                                  std::to_string(sum) + ")");
    }
    total += ent;
  }
  return total / double(plane);
}

Tensor patch_entropies(const Tensor& prob_grid) {
  if (prob_grid.rank() != 5) {
    throw std::invalid_argument("patch_entropies: expected (B,P,C,h,w), got " +
                                prob_grid.shape_str());
  }
  const std::size_t b = prob_grid.dim(0), p = prob_grid.dim(1);
  const std::size_t c = prob_grid.dim(2), h = prob_grid.dim(3), w = prob_grid.dim(4);
  const std::size_t patch_elems = c * h * w;
  Tensor out({int(b), int(p)});
  Tensor scratch({int(c), int(h), int(w)});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t pi = 0; pi < p; ++pi) {
      const double* src = prob_grid.data() + (n * p + pi) * patch_elems;
      std::copy(src, src + patch_elems, scratch.data());
      out.data()[n * p + pi] = patch_entropy(scratch);
    }
  }
  return out;
}

EasyHardSplit rank_easy_hard(const Tensor& entropies) {
  if (entropies.rank() != 2) {
    throw std::invalid_argument("rank_easy_hard: expected (B,P) entropies, got " +
                                entropies.shape_str());
  }
  const std::size_t b = entropies.dim(0), p = entropies.dim(1);
  if (b % 2 != 0) {
    throw std::invalid_argument("rank_easy_hard: batch size must be even, got " +
                                std::to_string(b));
  }
  const double* e = entropies.data();
  for (std::size_t i = 0; i < b * p; ++i) {
    if (!std::isfinite(e[i])) {
      throw std::invalid_argument("rank_easy_hard: non-finite entropy value");
    }
  }
  EasyHardSplit split;
  split.batch = b;
  split.patches = p;
  split.easy.resize(p);
  split.hard.resize(p);
  std::vector<std::size_t> order(b);
  for (std::size_t k = 0; k < p; ++k) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c2) { return e[a * p + k] < e[c2 * p + k]; });
    split.easy[k].assign(order.begin(), order.begin() + b / 2);
    split.hard[k].assign(order.begin() + b / 2, order.end());
    std::sort(split.easy[k].begin(), split.easy[k].end());
    std::sort(split.hard[k].begin(), split.hard[k].end());
  }
  return split;
}

namespace {
std::vector<std::pair<int, int>> flatten(const std::vector<std::vector<std::size_t>>& groups) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    for (std::size_t bi : groups[k]) out.emplace_back(int(bi), int(k));
  }
  return out;
}
}  // namespace

std::vector<std::pair<int, int>> EasyHardSplit::easy_pairs() const { return flatten(easy); }
std::vector<std::pair<int, int>> EasyHardSplit::hard_pairs() const { return flatten(hard); }

}  // namespace ipsm
}  // namespace sfda
