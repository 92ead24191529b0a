#ifndef SFDA_KERNELS_HPP
#define SFDA_KERNELS_HPP

#include <cstdint>

namespace sfda {
namespace kernels {

/// Compute kernels come in two flavors: a plain serial reference
/// (namespace serial) and an OpenMP-parallel version (namespace omp).
/// Both accumulate partial sums in the same index order per output
/// element, so results are bit-identical and the test suite compares
/// them with exact equality. The top-level functions dispatch on the
/// configured backend.

struct ConvDims {
  int N = 0, Ci = 0, H = 0, W = 0;   // input
  int Co = 0, KH = 0, KW = 0;        // filters
  int stride = 1, pad = 0;
  int OH = 0, OW = 0;                // output (filled by make_*)
};

ConvDims make_conv_dims(int N, int Ci, int H, int W, int Co, int KH, int KW, int stride, int pad);
ConvDims make_tconv_dims(int N, int Ci, int H, int W, int Co, int KH, int KW, int stride, int pad);

void set_parallel(bool on);
bool parallel_enabled();
void set_threads(int n);  // also forces serial backend when n == 1
int max_threads();

namespace serial {
// y[N,Co,OH,OW]; w[Co,Ci,KH,KW]; b[Co] may be null
void conv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d);
void conv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void conv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d);

// transposed conv: w[Ci,Co,KH,KW]; y[N,Co,OH,OW] with OH=(H-1)*s-2p+KH
void tconv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d);
void tconv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void tconv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d);

// y[b] = opA(a[b]) * opB(bm[b]);  a is B x (M x K) after opA, bm is B x (K x N) after opB
void bmm(const double* a, const double* bm, double* y, int B, int M, int K, int N, bool transA, bool transB);

// normalize over index i of x[b,i,j] (columns of each B slice)
void softmax_dim1(const double* x, double* y, int B, int M, int Ncols);
// per-pixel softmax over channels of x[N,C,H,W]
void softmax_channels(const double* x, double* y, int N, int C, int64_t HW);

// factor-2 bilinear upsample, half-pixel centers, border replicate
void upsample2x_fwd(const double* x, double* y, int N, int C, int H, int W);
void upsample2x_bwd(const double* gy, double* gx, int N, int C, int H, int W);

void adaptive_avgpool_fwd(const double* x, double* y, int N, int C, int H, int W, int OH, int OW);
void adaptive_avgpool_bwd(const double* gy, double* gx, int N, int C, int H, int W, int OH, int OW);
}  // namespace serial

namespace omp {
void conv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d);
void conv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void conv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d);
void tconv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d);
void tconv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void tconv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d);
void bmm(const double* a, const double* bm, double* y, int B, int M, int K, int N, bool transA, bool transB);
void softmax_dim1(const double* x, double* y, int B, int M, int Ncols);
void softmax_channels(const double* x, double* y, int N, int C, int64_t HW);
void upsample2x_fwd(const double* x, double* y, int N, int C, int H, int W);
void upsample2x_bwd(const double* gy, double* gx, int N, int C, int H, int W);
void adaptive_avgpool_fwd(const double* x, double* y, int N, int C, int H, int W, int OH, int OW);
void adaptive_avgpool_bwd(const double* gy, double* gx, int N, int C, int H, int W, int OH, int OW);
}  // namespace omp

// dispatching entry points used by the autograd ops
void conv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d);
void conv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void conv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d);
void tconv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d);
void tconv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void tconv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d);
void bmm(const double* a, const double* bm, double* y, int B, int M, int K, int N, bool transA, bool transB);
void softmax_dim1(const double* x, double* y, int B, int M, int Ncols);
void softmax_channels(const double* x, double* y, int N, int C, int64_t HW);
void upsample2x_fwd(const double* x, double* y, int N, int C, int H, int W);
void upsample2x_bwd(const double* gy, double* gx, int N, int C, int H, int W);
void adaptive_avgpool_fwd(const double* x, double* y, int N, int C, int H, int W, int OH, int OW);
void adaptive_avgpool_bwd(const double* gy, double* gx, int N, int C, int H, int W, int OH, int OW);

}  // namespace kernels
}  // namespace sfda

#endif  // SFDA_KERNELS_HPP
