#ifndef SFDA_OPS_HPP
#define SFDA_OPS_HPP

#include <utility>
#include <vector>

#include "sfda/autograd.hpp"

namespace sfda {
namespace ops {

// ---- arithmetic (shapes must match exactly) ----
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable add_scalar(const Variable& a, double s);
Variable mul_scalar(const Variable& a, double s);
Variable neg(const Variable& a);
Variable abs(const Variable& a);
Variable square(const Variable& a);
/// log(max(x, eps)); gradient is 1/x where x > eps, 0 where clamped.
Variable log_clamped(const Variable& a, double eps);

// ---- activations ----
Variable relu(const Variable& x);
Variable leaky_relu(const Variable& x, double slope);
Variable sigmoid(const Variable& x);
Variable tanh(const Variable& x);

// ---- reductions ----
Variable sum_all(const Variable& x);
Variable mean_all(const Variable& x);

// ---- shape ----
Variable reshape(const Variable& x, std::vector<int> shape);
/// (N,C,H,W) -> (N, H*W, C) row-per-position matrix view of a feature map.
Variable nchw_to_nmc(const Variable& x);
/// (B,N,Ca) ++ (B,N,Cb) -> (B,N,Ca+Cb)
Variable concat_last(const Variable& a, const Variable& b);
/// (N,Ca,H,W) ++ (N,Cb,H,W) -> (N,Ca+Cb,H,W)
Variable concat_channels(const Variable& a, const Variable& b);
/// (N,F) -> (N,F,h,w), value replicated over the spatial grid.
Variable spatial_broadcast(const Variable& v, int h, int w);

// ---- per-channel broadcast over NCHW (v has shape {C}) ----
Variable chan_sub(const Variable& x, const Variable& v);
Variable chan_mul(const Variable& x, const Variable& v);
Variable chan_add(const Variable& x, const Variable& v);
/// elementwise 1/sqrt(v + eps) on a vector.
Variable rsqrt_shift(const Variable& v, double eps);

// ---- batch statistics per channel (reduce over N,H,W) ----
Variable mean_nhw(const Variable& x);
/// population variance (divide by N*H*W)
Variable var_nhw(const Variable& x);

// ---- nn primitives ----
Variable conv2d(const Variable& x, const Variable& w, const Variable& b, int stride, int pad);
Variable tconv2d(const Variable& x, const Variable& w, const Variable& b, int stride, int pad);
Variable upsample2x(const Variable& x);
Variable adaptive_avg_pool(const Variable& x, int oh, int ow);
/// x (B,F), w (O,F), b (O) -> (B,O)
Variable linear(const Variable& x, const Variable& w, const Variable& b);
/// table (K,E), ids (B) -> (B,E)
Variable embedding(const Variable& table, const std::vector<int>& ids);

// ---- matmul / attention ----
/// batched matmul; stored shapes (B,M,K)/(B,K,N), transposed storage when the
/// corresponding flag is set. trans_a && trans_b is unsupported.
Variable bmm(const Variable& a, const Variable& b, bool trans_a, bool trans_b);
/// x (B,M,N): softmax over dim 1, i.e. each column sums to 1.
Variable softmax_dim1(const Variable& x);
/// NCHW softmax over the channel dim.
Variable softmax_channels(const Variable& x);

// ---- patch ops ----
/// (N,C,H,W) -> (N,k*k,C,H/k,W/k); patch p = py*k+px covers the block at
/// rows [py*H/k, (py+1)*H/k), cols likewise.
Variable extract_patches(const Variable& x, int k);
/// grid (B,K2,C,h,w), idx = list of (batch, patch) pairs -> (M,C,h,w)
Variable gather_patches(const Variable& grid, const std::vector<std::pair<int, int>>& idx);

// ---- fused losses ----
/// logits (N,C,H,W), labels (N,H,W) integer-valued; mean pixel NLL.
Variable cross_entropy(const Variable& logits, const Tensor& labels);

}  // namespace ops
}  // namespace sfda

#endif  // SFDA_OPS_HPP
