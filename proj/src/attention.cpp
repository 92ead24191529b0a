#include "sfda/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace sfda {

namespace {

void check_finite(const Variable& v, const char* who) {
  const Tensor& t = v.value();
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) throw std::invalid_argument(std::string(who) + ": non-finite features");
}

}  // namespace

Variable spatial_attention(const Variable& fmat) {
  if (fmat.value().rank() != 3) throw std::invalid_argument("spatial_attention: expected (B,N1,C1)");
  check_finite(fmat, "spatial_attention");
  // gram[b,i,j] = <row i, row j>
  Variable gram = ops::bmm(fmat, fmat, false, true);
  return ops::softmax_dim1(gram);
}

Variable channel_attention(const Variable& fmat) {
  if (fmat.value().rank() != 3) throw std::invalid_argument("channel_attention: expected (B,N1,C1)");
  check_finite(fmat, "channel_attention");
  // gram[b,i,j] = <col i, col j>
  Variable gram = ops::bmm(fmat, fmat, true, false);
  return ops::softmax_dim1(gram);
}

Variable adapt_pool(const Variable& feat, int oh, int ow) {
  const auto& s = feat.value().shape();
  if (s.size() != 4) throw std::invalid_argument("adapt_pool: expected (B,C,H,W)");
  if (oh > s[2] || ow > s[3]) throw std::invalid_argument("adapt_pool: output larger than input");
  return ops::adaptive_avg_pool(feat, oh, ow);
}

DualAttention::DualAttention(int c1, uint64_t init_seed) : c1_(c1) {
  Rng rng = substream(init_seed, "dam.init");
  proj_sp_ = nn::Conv2d(store, "proj_sp", c1, c1, 1, 1, 0, rng, true);
  proj_ch_ = nn::Conv2d(store, "proj_ch", c1, c1, 1, 1, 0, rng, true);
  // identity init: projections start as a no-op and are only trained on demand
  for (nn::Conv2d* conv : {&proj_sp_, &proj_ch_}) {
    conv->w.value().zero();
    for (int c = 0; c < c1; ++c) conv->w.value().at4(c, c, 0, 0) = 1.0;
    conv->b.value().zero();
  }
}

AttentionPack DualAttention::forward(const Variable& feat) const {
  const auto& s = feat.value().shape();
  if (s.size() != 4 || s[1] != c1_)
    throw std::invalid_argument("DualAttention: expected (B," + std::to_string(c1_) + ",H,W)");
  Variable fmat = ops::nchw_to_nmc(feat);  // (B, N1, C1)
  AttentionPack pack;
  pack.spatial = spatial_attention(ops::nchw_to_nmc(project_spatial(feat)));
  pack.channel = channel_attention(ops::nchw_to_nmc(project_channel(feat)));
  // spatial branch: row j of S^T * F is sum_i s_ji F[i,:]
  Variable out_sp = ops::bmm(pack.spatial, fmat, true, false);
  // channel branch: column j of F * R is sum_i r_ji F[:,i]
  Variable out_ch = ops::bmm(fmat, pack.channel, false, false);
  pack.dual = ops::concat_last(out_sp, out_ch);
  pack.size_m = static_cast<int64_t>(pack.dual.value().dim(1)) * pack.dual.value().dim(2);
  return pack;
}

}  // namespace sfda
