#include "sfda/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

// OpenMP kernels. Parallelism is always over disjoint output slices and the
// per-element accumulation order matches the serial reference exactly, so
// outputs are bit-identical for any thread count.

namespace sfda {
namespace kernels {
namespace omp {

static inline int div_ceil_nonneg(int a, int s) { return a <= 0 ? 0 : (a + s - 1) / s; }

void conv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wcs = wks * d.Ci;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < d.N; ++n)
    for (int co = 0; co < d.Co; ++co) {
      double* yp = y + n * yns + co * ycs;
      for (int oh = 0; oh < d.OH; ++oh) {
        double* yrow = yp + static_cast<int64_t>(oh) * d.OW;
        const double bias = b ? b[co] : 0.0;
        for (int ow = 0; ow < d.OW; ++ow) yrow[ow] = bias;
        for (int ci = 0; ci < d.Ci; ++ci)
          for (int kh = 0; kh < d.KH; ++kh) {
            const int ih = oh * d.stride + kh - d.pad;
            if (ih < 0 || ih >= d.H) continue;
            const double* xrow = x + n * xns + ci * xcs + static_cast<int64_t>(ih) * d.W;
            const double* wrow = w + co * wcs + ci * wks + static_cast<int64_t>(kh) * d.KW;
            for (int kw = 0; kw < d.KW; ++kw) {
              const int ow_lo = div_ceil_nonneg(d.pad - kw, d.stride);
              const int ow_hi = std::min(d.OW - 1, (d.W - 1 + d.pad - kw) / d.stride);
              const double wv = wrow[kw];
              const double* xs = xrow + kw - d.pad;
              for (int ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += wv * xs[static_cast<int64_t>(ow) * d.stride];
            }
          }
      }
    }
}

void conv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wcs = wks * d.Ci;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < d.N; ++n)
    for (int ci = 0; ci < d.Ci; ++ci) {
      double* gp = gx + n * xns + ci * xcs;
      // per-element contribution order is (co, kh, kw), same as the reference
      for (int co = 0; co < d.Co; ++co)
        for (int kh = 0; kh < d.KH; ++kh)
          for (int kw = 0; kw < d.KW; ++kw) {
            const double wv = w[co * wcs + ci * wks + static_cast<int64_t>(kh) * d.KW + kw];
            for (int oh = 0; oh < d.OH; ++oh) {
              const int ih = oh * d.stride + kh - d.pad;
              if (ih < 0 || ih >= d.H) continue;
              double* grow = gp + static_cast<int64_t>(ih) * d.W;
              const double* gyrow = gy + n * yns + co * ycs + static_cast<int64_t>(oh) * d.OW;
              const int ow_lo = div_ceil_nonneg(d.pad - kw, d.stride);
              const int ow_hi = std::min(d.OW - 1, (d.W - 1 + d.pad - kw) / d.stride);
              for (int ow = ow_lo; ow <= ow_hi; ++ow)
                grow[ow * d.stride + kw - d.pad] += wv * gyrow[ow];
            }
          }
    }
}

void conv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wcs = wks * d.Ci;
#pragma omp parallel for collapse(2) schedule(static)
  for (int co = 0; co < d.Co; ++co)
    for (int ci = 0; ci < d.Ci; ++ci)
      for (int kh = 0; kh < d.KH; ++kh)
        for (int kw = 0; kw < d.KW; ++kw) {
          double acc = 0.0;
          const int ow_lo = div_ceil_nonneg(d.pad - kw, d.stride);
          const int ow_hi = std::min(d.OW - 1, (d.W - 1 + d.pad - kw) / d.stride);
          for (int n = 0; n < d.N; ++n)
            for (int oh = 0; oh < d.OH; ++oh) {
              const int ih = oh * d.stride + kh - d.pad;
              if (ih < 0 || ih >= d.H) continue;
              const double* xrow = x + n * xns + ci * xcs + static_cast<int64_t>(ih) * d.W + kw - d.pad;
              const double* gyrow = gy + n * yns + co * ycs + static_cast<int64_t>(oh) * d.OW;
              for (int ow = ow_lo; ow <= ow_hi; ++ow)
                acc += xrow[static_cast<int64_t>(ow) * d.stride] * gyrow[ow];
            }
          gw[co * wcs + ci * wks + static_cast<int64_t>(kh) * d.KW + kw] += acc;
        }
  if (gb) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < d.Co; ++co) {
      double acc = 0.0;
      for (int n = 0; n < d.N; ++n) {
        const double* gyp = gy + n * yns + co * ycs;
        for (int64_t i = 0; i < ycs; ++i) acc += gyp[i];
      }
      gb[co] += acc;
    }
  }
}

void tconv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wos = wks * d.Co;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < d.N; ++n)
    for (int co = 0; co < d.Co; ++co) {
      double* yp = y + n * yns + co * ycs;
      for (int oh = 0; oh < d.OH; ++oh) {
        double* yrow = yp + static_cast<int64_t>(oh) * d.OW;
        const double bias = b ? b[co] : 0.0;
        for (int ow = 0; ow < d.OW; ++ow) yrow[ow] = bias;
        for (int ci = 0; ci < d.Ci; ++ci)
          for (int kh = 0; kh < d.KH; ++kh) {
            const int t = oh + d.pad - kh;
            if (t < 0 || t % d.stride != 0) continue;
            const int ih = t / d.stride;
            if (ih >= d.H) continue;
            const double* xrow = x + n * xns + ci * xcs + static_cast<int64_t>(ih) * d.W;
            const double* wrow = w + ci * wos + co * wks + static_cast<int64_t>(kh) * d.KW;
            for (int kw = 0; kw < d.KW; ++kw) {
              // ow = iw*stride + kw - pad must land in [0, OW)
              const int iw_lo = div_ceil_nonneg(d.pad - kw, d.stride);
              const int iw_hi = std::min(d.W - 1, (d.OW - 1 + d.pad - kw) / d.stride);
              const double wv = wrow[kw];
              for (int iw = iw_lo; iw <= iw_hi; ++iw)
                yrow[iw * d.stride + kw - d.pad] += wv * xrow[iw];
            }
          }
      }
    }
}

void tconv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wos = wks * d.Co;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < d.N; ++n)
    for (int ci = 0; ci < d.Ci; ++ci) {
      double* gp = gx + n * xns + ci * xcs;
      for (int ih = 0; ih < d.H; ++ih) {
        double* grow = gp + static_cast<int64_t>(ih) * d.W;
        for (int co = 0; co < d.Co; ++co)
          for (int kh = 0; kh < d.KH; ++kh) {
            const int oh = ih * d.stride + kh - d.pad;
            if (oh < 0 || oh >= d.OH) continue;
            const double* gyrow = gy + n * yns + co * ycs + static_cast<int64_t>(oh) * d.OW;
            const double* wrow = w + ci * wos + co * wks + static_cast<int64_t>(kh) * d.KW;
            for (int kw = 0; kw < d.KW; ++kw) {
              const int iw_lo = div_ceil_nonneg(d.pad - kw, d.stride);
              const int iw_hi = std::min(d.W - 1, (d.OW - 1 + d.pad - kw) / d.stride);
              const double wv = wrow[kw];
              const double* gys = gyrow + kw - d.pad;
              for (int iw = iw_lo; iw <= iw_hi; ++iw)
                grow[iw] += wv * gys[static_cast<int64_t>(iw) * d.stride];
            }
          }
      }
    }
}

void tconv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wos = wks * d.Co;
#pragma omp parallel for collapse(2) schedule(static)
  for (int ci = 0; ci < d.Ci; ++ci)
    for (int co = 0; co < d.Co; ++co)
      for (int kh = 0; kh < d.KH; ++kh)
        for (int kw = 0; kw < d.KW; ++kw) {
          double acc = 0.0;
          const int iw_lo = div_ceil_nonneg(d.pad - kw, d.stride);
          const int iw_hi = std::min(d.W - 1, (d.OW - 1 + d.pad - kw) / d.stride);
          for (int n = 0; n < d.N; ++n)
            for (int ih = 0; ih < d.H; ++ih) {
              const int oh = ih * d.stride + kh - d.pad;
              if (oh < 0 || oh >= d.OH) continue;
              const double* xrow = x + n * xns + ci * xcs + static_cast<int64_t>(ih) * d.W;
              const double* gyrow = gy + n * yns + co * ycs + static_cast<int64_t>(oh) * d.OW + kw - d.pad;
              for (int iw = iw_lo; iw <= iw_hi; ++iw)
                acc += xrow[iw] * gyrow[static_cast<int64_t>(iw) * d.stride];
            }
          gw[ci * wos + co * wks + static_cast<int64_t>(kh) * d.KW + kw] += acc;
        }
  if (gb) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < d.Co; ++co) {
      double acc = 0.0;
      for (int n = 0; n < d.N; ++n) {
        const double* gyp = gy + n * yns + co * ycs;
        for (int64_t i = 0; i < ycs; ++i) acc += gyp[i];
      }
      gb[co] += acc;
    }
  }
}

void bmm(const double* a, const double* bm, double* y, int B, int M, int K, int N, bool transA, bool transB) {
  const int64_t as = static_cast<int64_t>(M) * K, bs = static_cast<int64_t>(K) * N, ys = static_cast<int64_t>(M) * N;
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < M; ++i) {
      const double* A = a + b * as;
      const double* Bm = bm + b * bs;
      double* yrow = y + b * ys + static_cast<int64_t>(i) * N;
      if (!transA && !transB) {
        for (int j = 0; j < N; ++j) yrow[j] = 0.0;
        for (int k = 0; k < K; ++k) {
          const double av = A[static_cast<int64_t>(i) * K + k];
          const double* brow = Bm + static_cast<int64_t>(k) * N;
          for (int j = 0; j < N; ++j) yrow[j] += av * brow[j];
        }
      } else {
        for (int j = 0; j < N; ++j) {
          double acc = 0.0;
          for (int k = 0; k < K; ++k) {
            const double av = transA ? A[static_cast<int64_t>(k) * M + i] : A[static_cast<int64_t>(i) * K + k];
            const double bv = transB ? Bm[static_cast<int64_t>(j) * K + k] : Bm[static_cast<int64_t>(k) * N + j];
            acc += av * bv;
          }
          yrow[j] = acc;
        }
      }
    }
}

void softmax_dim1(const double* x, double* y, int B, int M, int Ncols) {
  const int64_t ss = static_cast<int64_t>(M) * Ncols;
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < Ncols; ++j) {
      const double* col = x + b * ss + j;
      double* out = y + b * ss + j;
      double mx = col[0];
      for (int i = 1; i < M; ++i) mx = std::max(mx, col[static_cast<int64_t>(i) * Ncols]);
      double sum = 0.0;
      for (int i = 0; i < M; ++i) {
        const double e = std::exp(col[static_cast<int64_t>(i) * Ncols] - mx);
        out[static_cast<int64_t>(i) * Ncols] = e;
        sum += e;
      }
      for (int i = 0; i < M; ++i) out[static_cast<int64_t>(i) * Ncols] /= sum;
    }
}

void softmax_channels(const double* x, double* y, int N, int C, int64_t HW) {
  const int64_t ns = static_cast<int64_t>(C) * HW;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n)
    for (int64_t p = 0; p < HW; ++p) {
      const double* px = x + n * ns + p;
      double* py = y + n * ns + p;
      double mx = px[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, px[c * HW]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(px[c * HW] - mx);
        py[c * HW] = e;
        sum += e;
      }
      for (int c = 0; c < C; ++c) py[c * HW] /= sum;
    }
}

void upsample2x_fwd(const double* x, double* y, int N, int C, int H, int W) {
  const int64_t planes = static_cast<int64_t>(N) * C;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p)
    serial::upsample2x_fwd(x + p * H * W, y + p * 4ll * H * W, 1, 1, H, W);
}

void upsample2x_bwd(const double* gy, double* gx, int N, int C, int H, int W) {
  const int64_t planes = static_cast<int64_t>(N) * C;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p)
    serial::upsample2x_bwd(gy + p * 4ll * H * W, gx + p * H * W, 1, 1, H, W);
}

void adaptive_avgpool_fwd(const double* x, double* y, int N, int C, int H, int W, int OH, int OW) {
  const int64_t planes = static_cast<int64_t>(N) * C;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p)
    serial::adaptive_avgpool_fwd(x + p * H * W, y + p * static_cast<int64_t>(OH) * OW, 1, 1, H, W, OH, OW);
}

void adaptive_avgpool_bwd(const double* gy, double* gx, int N, int C, int H, int W, int OH, int OW) {
  const int64_t planes = static_cast<int64_t>(N) * C;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p)
    serial::adaptive_avgpool_bwd(gy + p * static_cast<int64_t>(OH) * OW, gx + p * H * W, 1, 1, H, W, OH, OW);
}

}  // namespace omp
}  // namespace kernels
}  // namespace sfda
