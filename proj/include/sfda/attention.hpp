#ifndef SFDA_ATTENTION_HPP
#define SFDA_ATTENTION_HPP

#include "sfda/nn.hpp"

namespace sfda {

/// Spatial / channel attention maps and their concatenation for one feature
/// batch. Both maps are column-stochastic: column j holds the softmax weights
/// with which position (channel) i contributes to j.
struct AttentionPack {
  Variable spatial;  // (B, N1, N1)
  Variable channel;  // (B, C1, C1)
  Variable dual;     // (B, N1, 2*C1)
  int64_t size_m = 0;  // N1 * 2*C1
};

/// fmat: (B, N1, C1) position-major feature matrix.
/// S[b,i,j] = softmax_i <F_i, F_j> over rows.
Variable spatial_attention(const Variable& fmat);

/// R[b,i,j] = softmax_i <F[:,i], F[:,j]> over columns.
Variable channel_attention(const Variable& fmat);

/// Adaptive average pooling of a feature grid (used on target features so
/// their attention maps are comparable with the lower-resolution fake ones).
Variable adapt_pool(const Variable& feat, int oh, int ow);

/// Dual attention module: per-branch trainable 1x1 projections (identity
/// initialized) feed the attention maps; the maps then recombine the
/// *original* features and the two branches are concatenated.
/// One instance is shared between the frozen and adapted branches so the
/// distillation compares features, not projection noise.
class DualAttention {
 public:
  DualAttention(int c1, uint64_t init_seed);

  /// Per-branch 1x1 projection, same shape in and out.
  Variable project_spatial(const Variable& feat) const { return proj_sp_(feat); }
  Variable project_channel(const Variable& feat) const { return proj_ch_(feat); }

  /// feat: (B, C1, H1, W1)
  AttentionPack forward(const Variable& feat) const;

  int channels() const { return c1_; }
  nn::ParamStore store;

 private:
  int c1_;
  nn::Conv2d proj_sp_, proj_ch_;
};

}  // namespace sfda

#endif  // SFDA_ATTENTION_HPP
