#include "sfda/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

// Reference kernels: straight quadruple loops, no tricks. The OpenMP
// versions must match these bit for bit (same per-element accumulation
// order), which the kernel tests enforce.

namespace sfda {
namespace kernels {

ConvDims make_conv_dims(int N, int Ci, int H, int W, int Co, int KH, int KW, int stride, int pad) {
  ConvDims d{N, Ci, H, W, Co, KH, KW, stride, pad, 0, 0};
  d.OH = (H + 2 * pad - KH) / stride + 1;
  d.OW = (W + 2 * pad - KW) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0) throw std::invalid_argument("conv: empty output");
  return d;
}

ConvDims make_tconv_dims(int N, int Ci, int H, int W, int Co, int KH, int KW, int stride, int pad) {
  ConvDims d{N, Ci, H, W, Co, KH, KW, stride, pad, 0, 0};
  d.OH = (H - 1) * stride - 2 * pad + KH;
  d.OW = (W - 1) * stride - 2 * pad + KW;
  if (d.OH <= 0 || d.OW <= 0) throw std::invalid_argument("tconv: empty output");
  return d;
}

namespace serial {

void conv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wcs = wks * d.Ci;
  for (int n = 0; n < d.N; ++n)
    for (int co = 0; co < d.Co; ++co)
      for (int oh = 0; oh < d.OH; ++oh)
        for (int ow = 0; ow < d.OW; ++ow) {
          double acc = b ? b[co] : 0.0;
          for (int ci = 0; ci < d.Ci; ++ci)
            for (int kh = 0; kh < d.KH; ++kh) {
              const int ih = oh * d.stride + kh - d.pad;
              if (ih < 0 || ih >= d.H) continue;
              for (int kw = 0; kw < d.KW; ++kw) {
                const int iw = ow * d.stride + kw - d.pad;
                if (iw < 0 || iw >= d.W) continue;
                acc += x[n * xns + ci * xcs + ih * d.W + iw] * w[co * wcs + ci * wks + kh * d.KW + kw];
              }
            }
          y[n * yns + co * ycs + oh * d.OW + ow] = acc;
        }
}

void conv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wcs = wks * d.Ci;
  for (int n = 0; n < d.N; ++n)
    for (int ci = 0; ci < d.Ci; ++ci)
      for (int ih = 0; ih < d.H; ++ih)
        for (int iw = 0; iw < d.W; ++iw) {
          double acc = 0.0;
          for (int co = 0; co < d.Co; ++co)
            for (int kh = 0; kh < d.KH; ++kh) {
              const int t = ih + d.pad - kh;
              if (t < 0 || t % d.stride != 0) continue;
              const int oh = t / d.stride;
              if (oh >= d.OH) continue;
              for (int kw = 0; kw < d.KW; ++kw) {
                const int u = iw + d.pad - kw;
                if (u < 0 || u % d.stride != 0) continue;
                const int ow = u / d.stride;
                if (ow >= d.OW) continue;
                acc += gy[n * yns + co * ycs + oh * d.OW + ow] * w[co * wcs + ci * wks + kh * d.KW + kw];
              }
            }
          gx[n * xns + ci * xcs + ih * d.W + iw] += acc;
        }
}

void conv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wcs = wks * d.Ci;
  for (int co = 0; co < d.Co; ++co)
    for (int ci = 0; ci < d.Ci; ++ci)
      for (int kh = 0; kh < d.KH; ++kh)
        for (int kw = 0; kw < d.KW; ++kw) {
          double acc = 0.0;
          for (int n = 0; n < d.N; ++n)
            for (int oh = 0; oh < d.OH; ++oh) {
              const int ih = oh * d.stride + kh - d.pad;
              if (ih < 0 || ih >= d.H) continue;
              for (int ow = 0; ow < d.OW; ++ow) {
                const int iw = ow * d.stride + kw - d.pad;
                if (iw < 0 || iw >= d.W) continue;
                acc += x[n * xns + ci * xcs + ih * d.W + iw] * gy[n * yns + co * ycs + oh * d.OW + ow];
              }
            }
          gw[co * wcs + ci * wks + kh * d.KW + kw] += acc;
        }
  if (gb) {
    for (int co = 0; co < d.Co; ++co) {
      double acc = 0.0;
      for (int n = 0; n < d.N; ++n)
        for (int64_t i = 0; i < ycs; ++i) acc += gy[n * yns + co * ycs + i];
      gb[co] += acc;
    }
  }
}

void tconv2d_fwd(const double* x, const double* w, const double* b, double* y, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wos = wks * d.Co;
  for (int n = 0; n < d.N; ++n)
    for (int co = 0; co < d.Co; ++co)
      for (int oh = 0; oh < d.OH; ++oh)
        for (int ow = 0; ow < d.OW; ++ow) {
          double acc = b ? b[co] : 0.0;
          for (int ci = 0; ci < d.Ci; ++ci)
            for (int kh = 0; kh < d.KH; ++kh) {
              const int t = oh + d.pad - kh;
              if (t < 0 || t % d.stride != 0) continue;
              const int ih = t / d.stride;
              if (ih >= d.H) continue;
              for (int kw = 0; kw < d.KW; ++kw) {
                const int u = ow + d.pad - kw;
                if (u < 0 || u % d.stride != 0) continue;
                const int iw = u / d.stride;
                if (iw >= d.W) continue;
                acc += x[n * xns + ci * xcs + ih * d.W + iw] * w[ci * wos + co * wks + kh * d.KW + kw];
              }
            }
          y[n * yns + co * ycs + oh * d.OW + ow] = acc;
        }
}

void tconv2d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wos = wks * d.Co;
  for (int n = 0; n < d.N; ++n)
    for (int ci = 0; ci < d.Ci; ++ci)
      for (int ih = 0; ih < d.H; ++ih)
        for (int iw = 0; iw < d.W; ++iw) {
          double acc = 0.0;
          for (int co = 0; co < d.Co; ++co)
            for (int kh = 0; kh < d.KH; ++kh) {
              const int oh = ih * d.stride + kh - d.pad;
              if (oh < 0 || oh >= d.OH) continue;
              for (int kw = 0; kw < d.KW; ++kw) {
                const int ow = iw * d.stride + kw - d.pad;
                if (ow < 0 || ow >= d.OW) continue;
                acc += gy[n * yns + co * ycs + oh * d.OW + ow] * w[ci * wos + co * wks + kh * d.KW + kw];
              }
            }
          gx[n * xns + ci * xcs + ih * d.W + iw] += acc;
        }
}

void tconv2d_bwd_weight(const double* x, const double* gy, double* gw, double* gb, const ConvDims& d) {
  const int64_t xcs = static_cast<int64_t>(d.H) * d.W, xns = xcs * d.Ci;
  const int64_t ycs = static_cast<int64_t>(d.OH) * d.OW, yns = ycs * d.Co;
  const int64_t wks = static_cast<int64_t>(d.KH) * d.KW, wos = wks * d.Co;
  for (int ci = 0; ci < d.Ci; ++ci)
    for (int co = 0; co < d.Co; ++co)
      for (int kh = 0; kh < d.KH; ++kh)
        for (int kw = 0; kw < d.KW; ++kw) {
          double acc = 0.0;
          for (int n = 0; n < d.N; ++n)
            for (int ih = 0; ih < d.H; ++ih) {
              const int oh = ih * d.stride + kh - d.pad;
              if (oh < 0 || oh >= d.OH) continue;
              for (int iw = 0; iw < d.W; ++iw) {
                const int ow = iw * d.stride + kw - d.pad;
                if (ow < 0 || ow >= d.OW) continue;
                acc += x[n * xns + ci * xcs + ih * d.W + iw] * gy[n * yns + co * ycs + oh * d.OW + ow];
              }
            }
          gw[ci * wos + co * wks + kh * d.KW + kw] += acc;
        }
  if (gb) {
    for (int co = 0; co < d.Co; ++co) {
      double acc = 0.0;
      for (int n = 0; n < d.N; ++n)
        for (int64_t i = 0; i < ycs; ++i) acc += gy[n * yns + co * ycs + i];
      gb[co] += acc;
    }
  }
}

void bmm(const double* a, const double* bm, double* y, int B, int M, int K, int N, bool transA, bool transB) {
  const int64_t as = static_cast<int64_t>(M) * K, bs = static_cast<int64_t>(K) * N, ys = static_cast<int64_t>(M) * N;
  for (int b = 0; b < B; ++b) {
    const double* A = a + b * as;
    const double* Bm = bm + b * bs;
    double* Y = y + b * ys;
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) {
          const double av = transA ? A[static_cast<int64_t>(k) * M + i] : A[static_cast<int64_t>(i) * K + k];
          const double bv = transB ? Bm[static_cast<int64_t>(j) * K + k] : Bm[static_cast<int64_t>(k) * N + j];
          acc += av * bv;
        }
        Y[static_cast<int64_t>(i) * N + j] = acc;
      }
  }
}

void softmax_dim1(const double* x, double* y, int B, int M, int Ncols) {
  const int64_t ss = static_cast<int64_t>(M) * Ncols;
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

// shared mapping for the fixed factor-2 bilinear resample
static inline void up2_map(int o, int in_dim, int* i0, int* i1, double* w1) {
  const double s = (o + 0.5) * 0.5 - 0.5;
  double f = std::floor(s);
  *w1 = s - f;
  int lo = static_cast<int>(f);
  int hi = lo + 1;
  if (lo < 0) lo = 0;
  if (hi > in_dim - 1) hi = in_dim - 1;
  *i0 = lo;
  *i1 = hi;
}

void upsample2x_fwd(const double* x, double* y, int N, int C, int H, int W) {
  const int OH = 2 * H, OW = 2 * W;
  const int64_t xps = static_cast<int64_t>(H) * W, yps = static_cast<int64_t>(OH) * OW;
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const double* in = x + p * xps;
    double* out = y + p * yps;
    for (int oy = 0; oy < OH; ++oy) {
      int y0, y1;
      double wy;
      up2_map(oy, H, &y0, &y1, &wy);
      for (int ox = 0; ox < OW; ++ox) {
        int x0, x1;
        double wx;
        up2_map(ox, W, &x0, &x1, &wx);
        out[static_cast<int64_t>(oy) * OW + ox] =
            (1 - wy) * ((1 - wx) * in[static_cast<int64_t>(y0) * W + x0] + wx * in[static_cast<int64_t>(y0) * W + x1]) +
            wy * ((1 - wx) * in[static_cast<int64_t>(y1) * W + x0] + wx * in[static_cast<int64_t>(y1) * W + x1]);
      }
    }
  }
}

void upsample2x_bwd(const double* gy, double* gx, int N, int C, int H, int W) {
  const int OH = 2 * H, OW = 2 * W;
  const int64_t xps = static_cast<int64_t>(H) * W, yps = static_cast<int64_t>(OH) * OW;
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const double* gout = gy + p * yps;
    double* gin = gx + p * xps;
    for (int oy = 0; oy < OH; ++oy) {
      int y0, y1;
      double wy;
      up2_map(oy, H, &y0, &y1, &wy);
      for (int ox = 0; ox < OW; ++ox) {
        int x0, x1;
        double wx;
        up2_map(ox, W, &x0, &x1, &wx);
        const double g = gout[static_cast<int64_t>(oy) * OW + ox];
        gin[static_cast<int64_t>(y0) * W + x0] += (1 - wy) * (1 - wx) * g;
        gin[static_cast<int64_t>(y0) * W + x1] += (1 - wy) * wx * g;
        gin[static_cast<int64_t>(y1) * W + x0] += wy * (1 - wx) * g;
        gin[static_cast<int64_t>(y1) * W + x1] += wy * wx * g;
      }
    }
  }
}

void adaptive_avgpool_fwd(const double* x, double* y, int N, int C, int H, int W, int OH, int OW) {
  const int64_t xps = static_cast<int64_t>(H) * W, yps = static_cast<int64_t>(OH) * OW;
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const double* in = x + p * xps;
    double* out = y + p * yps;
    for (int oh = 0; oh < OH; ++oh) {
      const int h0 = (oh * H) / OH, h1 = ((oh + 1) * H + OH - 1) / OH;
      for (int ow = 0; ow < OW; ++ow) {
        const int w0 = (ow * W) / OW, w1 = ((ow + 1) * W + OW - 1) / OW;
        double acc = 0.0;
        for (int ih = h0; ih < h1; ++ih)
          for (int iw = w0; iw < w1; ++iw) acc += in[static_cast<int64_t>(ih) * W + iw];
        out[static_cast<int64_t>(oh) * OW + ow] = acc / ((h1 - h0) * (w1 - w0));
      }
    }
  }
}

void adaptive_avgpool_bwd(const double* gy, double* gx, int N, int C, int H, int W, int OH, int OW) {
  const int64_t xps = static_cast<int64_t>(H) * W, yps = static_cast<int64_t>(OH) * OW;
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const double* gout = gy + p * yps;
    double* gin = gx + p * xps;
    for (int oh = 0; oh < OH; ++oh) {
      const int h0 = (oh * H) / OH, h1 = ((oh + 1) * H + OH - 1) / OH;
      for (int ow = 0; ow < OW; ++ow) {
        const int w0 = (ow * W) / OW, w1 = ((ow + 1) * W + OW - 1) / OW;
        const double g = gout[static_cast<int64_t>(oh) * OW + ow] / ((h1 - h0) * (w1 - w0));
        for (int ih = h0; ih < h1; ++ih)
          for (int iw = w0; iw < w1; ++iw) gin[static_cast<int64_t>(ih) * W + iw] += g;
      }
    }
  }
}

}  // namespace serial
}  // namespace kernels
}  // namespace sfda
