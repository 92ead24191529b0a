#include "sfda/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sfda {
namespace kernels {

namespace {
bool g_parallel = true;
}

void set_parallel(bool on) { g_parallel = on; }
bool parallel_enabled() { return g_parallel; }

void set_threads(int n) {
  if (n < 1) n = 1;
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
  g_parallel = n > 1;
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define SFDA_DISPATCH(fn, ...)            \
  do {                                    \
    if (g_parallel)                       \
      omp::fn(__VA_ARGS__);               \
    else                                  \
      serial::fn(__VA_ARGS__);            \
  } while (0)

void conv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d) {
  SFDA_DISPATCH(conv2d_fwd, x, w, b, y, d);
}
void conv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  SFDA_DISPATCH(conv2d_bwd_input, gy, w, gx, d);
}
void conv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d) {
  SFDA_DISPATCH(conv2d_bwd_weight, x, gy, gw, gb, d);
}
void tconv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d) {
  SFDA_DISPATCH(tconv2d_fwd, x, w, b, y, d);
}
void tconv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  SFDA_DISPATCH(tconv2d_bwd_input, gy, w, gx, d);
}
void tconv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d) {
  SFDA_DISPATCH(tconv2d_bwd_weight, x, gy, gw, gb, d);
}
void bmm(const double* a, const double* bm, double* y, int B, int M, int K, int N, bool transA, bool transB) {
  SFDA_DISPATCH(bmm, a, bm, y, B, M, K, N, transA, transB);
}
void softmax_dim1(const double* x, double* y, int B, int M, int Ncols) {
  SFDA_DISPATCH(softmax_dim1, x, y, B, M, Ncols);
}
void softmax_channels(const double* x, double* y, int N, int C, int64_t HW) {
  SFDA_DISPATCH(softmax_channels, x, y, N, C, HW);
}
void upsample2x_fwd(const double* x, double* y, int N, int C, int H, int W) {
  SFDA_DISPATCH(upsample2x_fwd, x, y, N, C, H, W);
}
void upsample2x_bwd(const double* gy, double* gx, int N, int C, int H, int W) {
  SFDA_DISPATCH(upsample2x_bwd, gy, gx, N, C, H, W);
}
void adaptive_avgpool_fwd(const double* x, double* y, int N, int C, int H, int W, int OH, int OW) {
  SFDA_DISPATCH(adaptive_avgpool_fwd, x, y, N, C, H, W, OH, OW);
}
void adaptive_avgpool_bwd(const double* gy, double* gx, int N, int C, int H, int W, int OH, int OW) {
  SFDA_DISPATCH(adaptive_avgpool_bwd, gy, gx, N, C, H, W, OH, OW);
}

#undef SFDA_DISPATCH

}  // namespace kernels
}  // namespace sfda
