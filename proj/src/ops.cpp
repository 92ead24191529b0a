#include "sfda/ops.hpp"

#include <cmath>
#include <stdexcept>

#include "sfda/kernels.hpp"

namespace sfda {
namespace ops {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Elementwise helper: y[i] = f(x[i]); backward multiplies the incoming grad by
// df(x, y) and accumulates into x.
template <class Fwd, class Dfdx>
Variable unary(const Variable& x, Fwd f, Dfdx df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = f(xv[i]);
  return make_op(std::move(y), {x}, [df](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gx = p.grad();
    const Tensor& xv = p.value();
    const int64_t n = xv.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace

Variable add(const Variable& a, const Variable& b) {
  require(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor y(a.value().shape());
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(y), {a, b}, [](VarNode& self) {
    for (int k = 0; k < 2; ++k) {
      Variable p = self.parents[k];
      if (p.requires_grad()) accumulate_grad(p, self.grad.data(), self.grad.numel());
    }
  });
}

Variable sub(const Variable& a, const Variable& b) {
  require(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor y(a.value().shape());
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(y), {a, b}, [](VarNode& self) {
    Variable pa = self.parents[0], pb = self.parents[1];
    const int64_t n = self.grad.numel();
    if (pa.requires_grad()) accumulate_grad(pa, self.grad.data(), n);
    if (pb.requires_grad()) {
      Tensor& g = pb.grad();
      for (int64_t i = 0; i < n; ++i) g[i] -= self.grad[i];
    }
  });
}

Variable mul(const Variable& a, const Variable& b) {
  require(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor y(a.value().shape());
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(y), {a, b}, [](VarNode& self) {
    Variable pa = self.parents[0], pb = self.parents[1];
    const int64_t n = self.grad.numel();
    if (pa.requires_grad()) {
      Tensor& g = pa.grad();
      const Tensor& bv = pb.value();
      for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * bv[i];
    }
    if (pb.requires_grad()) {
      Tensor& g = pb.grad();
      const Tensor& av = pa.value();
      for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Variable add_scalar(const Variable& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Variable mul_scalar(const Variable& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Variable neg(const Variable& a) { return mul_scalar(a, -1.0); }

Variable abs(const Variable& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Variable square(const Variable& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Variable log_clamped(const Variable& a, double eps) {
  return unary(a, [eps](double x) { return std::log(x > eps ? x : eps); },
               [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

Variable relu(const Variable& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Variable leaky_relu(const Variable& x, double slope) {
  return unary(x, [slope](double v) { return v > 0 ? v : slope * v; },
               [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Variable sigmoid(const Variable& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
               [](double, double y) { return y * (1.0 - y); });
}

Variable tanh(const Variable& x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Variable sum_all(const Variable& x) {
  double acc = 0.0;
  const int64_t n = x.value().numel();
  for (int64_t i = 0; i < n; ++i) acc += x.value()[i];
  Tensor y({1});
  y[0] = acc;
  return make_op(std::move(y), {x}, [](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& g = p.grad();
    const double gv = self.grad[0];
    const int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) g[i] += gv;
  });
}

Variable mean_all(const Variable& x) {
  const int64_t n = x.value().numel();
  require(n > 0, "mean_all: empty tensor");
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(n));
}

Variable reshape(const Variable& x, std::vector<int> shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_op(std::move(y), {x}, [](VarNode& self) {
    Variable p = self.parents[0];
    if (p.requires_grad()) accumulate_grad(p, self.grad.data(), self.grad.numel());
  });
}

Variable nchw_to_nmc(const Variable& x) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "nchw_to_nmc: rank != 4");
  const int N = s[0], C = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];
  Tensor y({N, static_cast<int>(HW), C});
  const double* xd = x.value().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = xd + (static_cast<int64_t>(n) * C + c) * HW;
      double* dst = y.data() + static_cast<int64_t>(n) * HW * C + c;
      for (int64_t p = 0; p < HW; ++p) dst[p * C] = src[p];
    }
  return make_op(std::move(y), {x}, [N, C, HW](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gx = p.grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double* dst = gx.data() + (static_cast<int64_t>(n) * C + c) * HW;
        const double* src = self.grad.data() + static_cast<int64_t>(n) * HW * C + c;
        for (int64_t q = 0; q < HW; ++q) dst[q] += src[q * C];
      }
  });
}

Variable concat_last(const Variable& a, const Variable& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[1] == sb[1], "concat_last: shape mismatch");
  const int B = sa[0], N = sa[1], Ca = sa[2], Cb = sb[2];
  Tensor y({B, N, Ca + Cb});
  for (int bi = 0; bi < B; ++bi)
    for (int n = 0; n < N; ++n) {
      double* row = y.data() + (static_cast<int64_t>(bi) * N + n) * (Ca + Cb);
      const double* ra = a.value().data() + (static_cast<int64_t>(bi) * N + n) * Ca;
      const double* rb = b.value().data() + (static_cast<int64_t>(bi) * N + n) * Cb;
      for (int c = 0; c < Ca; ++c) row[c] = ra[c];
      for (int c = 0; c < Cb; ++c) row[Ca + c] = rb[c];
    }
  return make_op(std::move(y), {a, b}, [B, N, Ca, Cb](VarNode& self) {
    Variable pa = self.parents[0], pb = self.parents[1];
    for (int bi = 0; bi < B; ++bi)
      for (int n = 0; n < N; ++n) {
        const double* row = self.grad.data() + (static_cast<int64_t>(bi) * N + n) * (Ca + Cb);
        if (pa.requires_grad()) {
          double* ga = pa.grad().data() + (static_cast<int64_t>(bi) * N + n) * Ca;
          for (int c = 0; c < Ca; ++c) ga[c] += row[c];
        }
        if (pb.requires_grad()) {
          double* gb = pb.grad().data() + (static_cast<int64_t>(bi) * N + n) * Cb;
          for (int c = 0; c < Cb; ++c) gb[c] += row[Ca + c];
        }
      }
  });
}

Variable concat_channels(const Variable& a, const Variable& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  require(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
          "concat_channels: shape mismatch");
  const int N = sa[0], Ca = sa[1], Cb = sb[1];
  const int64_t HW = static_cast<int64_t>(sa[2]) * sa[3];
  Tensor y({N, Ca + Cb, sa[2], sa[3]});
  for (int n = 0; n < N; ++n) {
    double* dst = y.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW;
    const double* pa = a.value().data() + static_cast<int64_t>(n) * Ca * HW;
    const double* pb = b.value().data() + static_cast<int64_t>(n) * Cb * HW;
    for (int64_t i = 0; i < Ca * HW; ++i) dst[i] = pa[i];
    for (int64_t i = 0; i < Cb * HW; ++i) dst[Ca * HW + i] = pb[i];
  }
  return make_op(std::move(y), {a, b}, [N, Ca, Cb, HW](VarNode& self) {
    Variable pa = self.parents[0], pb = self.parents[1];
    for (int n = 0; n < N; ++n) {
      const double* src = self.grad.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW;
      if (pa.requires_grad()) {
        double* ga = pa.grad().data() + static_cast<int64_t>(n) * Ca * HW;
        for (int64_t i = 0; i < Ca * HW; ++i) ga[i] += src[i];
      }
      if (pb.requires_grad()) {
        double* gb = pb.grad().data() + static_cast<int64_t>(n) * Cb * HW;
        for (int64_t i = 0; i < Cb * HW; ++i) gb[i] += src[Ca * HW + i];
      }
    }
  });
}

Variable spatial_broadcast(const Variable& v, int h, int w) {
  const auto& s = v.value().shape();
  require(s.size() == 2, "spatial_broadcast: rank != 2");
  const int N = s[0], F = s[1];
  const int64_t HW = static_cast<int64_t>(h) * w;
  Tensor y({N, F, h, w});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f) {
      const double val = v.value().at2(n, f);
      double* dst = y.data() + (static_cast<int64_t>(n) * F + f) * HW;
      for (int64_t i = 0; i < HW; ++i) dst[i] = val;
    }
  return make_op(std::move(y), {v}, [N, F, HW](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gv = p.grad();
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f) {
        const double* src = self.grad.data() + (static_cast<int64_t>(n) * F + f) * HW;
        double acc = 0.0;
        for (int64_t i = 0; i < HW; ++i) acc += src[i];
        gv.at2(n, f) += acc;
      }
  });
}

namespace {

enum class ChanOp { kSub, kMul, kAdd };

Variable chan_broadcast(const Variable& x, const Variable& v, ChanOp op) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "chan op: x rank != 4");
  require(v.value().rank() == 1 && v.value().dim(0) == s[1], "chan op: vector length != C");
  const int N = s[0], C = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];
  Tensor y(s);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double vc = v.value()[c];
      const double* src = x.value().data() + (static_cast<int64_t>(n) * C + c) * HW;
      double* dst = y.data() + (static_cast<int64_t>(n) * C + c) * HW;
      switch (op) {
        case ChanOp::kSub:
          for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] - vc;
          break;
        case ChanOp::kMul:
          for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] * vc;
          break;
        case ChanOp::kAdd:
          for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + vc;
          break;
      }
    }
  return make_op(std::move(y), {x, v}, [N, C, HW, op](VarNode& self) {
    Variable px = self.parents[0], pv = self.parents[1];
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* g = self.grad.data() + (static_cast<int64_t>(n) * C + c) * HW;
        if (px.requires_grad()) {
          double* gx = px.grad().data() + (static_cast<int64_t>(n) * C + c) * HW;
          if (op == ChanOp::kMul) {
            const double vc = pv.value()[c];
            for (int64_t i = 0; i < HW; ++i) gx[i] += g[i] * vc;
          } else {
            for (int64_t i = 0; i < HW; ++i) gx[i] += g[i];
          }
        }
        if (pv.requires_grad()) {
          double acc = 0.0;
          if (op == ChanOp::kMul) {
            const double* xv = px.value().data() + (static_cast<int64_t>(n) * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) acc += g[i] * xv[i];
          } else {
            for (int64_t i = 0; i < HW; ++i) acc += g[i];
            if (op == ChanOp::kSub) acc = -acc;
          }
          pv.grad()[c] += acc;
        }
      }
  });
}

}  // namespace

Variable chan_sub(const Variable& x, const Variable& v) { return chan_broadcast(x, v, ChanOp::kSub); }
Variable chan_mul(const Variable& x, const Variable& v) { return chan_broadcast(x, v, ChanOp::kMul); }
Variable chan_add(const Variable& x, const Variable& v) { return chan_broadcast(x, v, ChanOp::kAdd); }

Variable rsqrt_shift(const Variable& v, double eps) {
  return unary(v, [eps](double x) { return 1.0 / std::sqrt(x + eps); },
               [](double, double y) { return -0.5 * y * y * y; });
}

Variable mean_nhw(const Variable& x) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "mean_nhw: rank != 4");
  const int N = s[0], C = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];
  const double inv_m = 1.0 / (static_cast<double>(N) * HW);
  Tensor mu({C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = x.value().data() + (static_cast<int64_t>(n) * C + c) * HW;
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += src[i];
      mu[c] += acc;
    }
  for (int c = 0; c < C; ++c) mu[c] *= inv_m;
  return make_op(std::move(mu), {x}, [N, C, HW, inv_m](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gx = p.grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double gv = self.grad[c] * inv_m;
        double* dst = gx.data() + (static_cast<int64_t>(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] += gv;
      }
  });
}

Variable var_nhw(const Variable& x) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "var_nhw: rank != 4");
  const int N = s[0], C = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];
  const double inv_m = 1.0 / (static_cast<double>(N) * HW);
  Tensor mu({C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = x.value().data() + (static_cast<int64_t>(n) * C + c) * HW;
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += src[i];
      mu[c] += acc;
    }
  for (int c = 0; c < C; ++c) mu[c] *= inv_m;
  Tensor var({C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = x.value().data() + (static_cast<int64_t>(n) * C + c) * HW;
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) {
        const double d = src[i] - mu[c];
        acc += d * d;
      }
      var[c] += acc;
    }
  for (int c = 0; c < C; ++c) var[c] *= inv_m;
  // d var_c / d x_i = 2 (x_i - mu_c) / M  (the mu-dependence cancels)
  return make_op(std::move(var), {x}, [N, C, HW, inv_m, mu](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gx = p.grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double gv = self.grad[c] * 2.0 * inv_m;
        const double* src = p.value().data() + (static_cast<int64_t>(n) * C + c) * HW;
        double* dst = gx.data() + (static_cast<int64_t>(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] += gv * (src[i] - mu[c]);
      }
  });
}

Variable conv2d(const Variable& x, const Variable& w, const Variable& b, int stride, int pad) {
  const auto& xs = x.value().shape();
  const auto& ws = w.value().shape();
  require(xs.size() == 4 && ws.size() == 4, "conv2d: rank != 4");
  require(ws[1] == xs[1], "conv2d: channel mismatch");
  if (b.defined()) require(b.value().rank() == 1 && b.value().dim(0) == ws[0], "conv2d: bad bias");
  const kernels::ConvDims d =
      kernels::make_conv_dims(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad);
  Tensor y({d.N, d.Co, d.OH, d.OW});
  kernels::conv2d_fwd(x.value().data(), w.value().data(), b.defined() ? b.value().data() : nullptr,
                      y.data(), d);
  std::vector<Variable> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(y), std::move(parents), [d](VarNode& self) {
    Variable px = self.parents[0], pw = self.parents[1];
    const bool has_b = self.parents.size() > 2;
    const double* gy = self.grad.data();
    if (px.requires_grad()) kernels::conv2d_bwd_input(gy, pw.value().data(), px.grad().data(), d);
    bool need_b = has_b && self.parents[2].requires_grad();
    if (pw.requires_grad() || need_b) {
      Tensor scratch;
      double* gw;
      if (pw.requires_grad()) {
        gw = pw.grad().data();
      } else {
        scratch = Tensor(pw.value().shape());
        gw = scratch.data();
      }
      Variable pb;
      if (need_b) pb = self.parents[2];
      kernels::conv2d_bwd_weight(px.value().data(), gy, gw, need_b ? pb.grad().data() : nullptr, d);
    }
  });
}

Variable tconv2d(const Variable& x, const Variable& w, const Variable& b, int stride, int pad) {
  const auto& xs = x.value().shape();
  const auto& ws = w.value().shape();  // (Ci, Co, KH, KW)
  require(xs.size() == 4 && ws.size() == 4, "tconv2d: rank != 4");
  require(ws[0] == xs[1], "tconv2d: channel mismatch");
  if (b.defined()) require(b.value().rank() == 1 && b.value().dim(0) == ws[1], "tconv2d: bad bias");
  const kernels::ConvDims d =
      kernels::make_tconv_dims(xs[0], xs[1], xs[2], xs[3], ws[1], ws[2], ws[3], stride, pad);
  Tensor y({d.N, d.Co, d.OH, d.OW});
  kernels::tconv2d_fwd(x.value().data(), w.value().data(), b.defined() ? b.value().data() : nullptr,
                       y.data(), d);
  std::vector<Variable> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(y), std::move(parents), [d](VarNode& self) {
    Variable px = self.parents[0], pw = self.parents[1];
    const bool has_b = self.parents.size() > 2;
    const double* gy = self.grad.data();
    if (px.requires_grad()) kernels::tconv2d_bwd_input(gy, pw.value().data(), px.grad().data(), d);
    bool need_b = has_b && self.parents[2].requires_grad();
    if (pw.requires_grad() || need_b) {
      Tensor scratch;
      double* gw;
      if (pw.requires_grad()) {
        gw = pw.grad().data();
      } else {
        scratch = Tensor(pw.value().shape());
        gw = scratch.data();
      }
      Variable pb;
      if (need_b) pb = self.parents[2];
      kernels::tconv2d_bwd_weight(px.value().data(), gy, gw, need_b ? pb.grad().data() : nullptr, d);
    }
  });
}

Variable upsample2x(const Variable& x) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "upsample2x: rank != 4");
  Tensor y({s[0], s[1], 2 * s[2], 2 * s[3]});
  kernels::upsample2x_fwd(x.value().data(), y.data(), s[0], s[1], s[2], s[3]);
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  return make_op(std::move(y), {x}, [N, C, H, W](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    kernels::upsample2x_bwd(self.grad.data(), p.grad().data(), N, C, H, W);
  });
}

Variable adaptive_avg_pool(const Variable& x, int oh, int ow) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "adaptive_avg_pool: rank != 4");
  require(oh > 0 && ow > 0 && oh <= s[2] && ow <= s[3], "adaptive_avg_pool: bad output size");
  Tensor y({s[0], s[1], oh, ow});
  kernels::adaptive_avgpool_fwd(x.value().data(), y.data(), s[0], s[1], s[2], s[3], oh, ow);
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  return make_op(std::move(y), {x}, [N, C, H, W, oh, ow](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    kernels::adaptive_avgpool_bwd(self.grad.data(), p.grad().data(), N, C, H, W, oh, ow);
  });
}

Variable linear(const Variable& x, const Variable& w, const Variable& b) {
  const auto& xs = x.value().shape();
  const auto& ws = w.value().shape();
  require(xs.size() == 2 && ws.size() == 2 && ws[1] == xs[1], "linear: shape mismatch");
  const int B = xs[0], F = xs[1], O = ws[0];
  if (b.defined()) require(b.value().rank() == 1 && b.value().dim(0) == O, "linear: bad bias");
  Tensor y({B, O});
  for (int n = 0; n < B; ++n)
    for (int o = 0; o < O; ++o) {
      double acc = b.defined() ? b.value()[o] : 0.0;
      const double* xr = x.value().data() + static_cast<int64_t>(n) * F;
      const double* wr = w.value().data() + static_cast<int64_t>(o) * F;
      for (int f = 0; f < F; ++f) acc += xr[f] * wr[f];
      y.at2(n, o) = acc;
    }
  std::vector<Variable> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(y), std::move(parents), [B, F, O](VarNode& self) {
    Variable px = self.parents[0], pw = self.parents[1];
    const bool has_b = self.parents.size() > 2;
    for (int n = 0; n < B; ++n)
      for (int o = 0; o < O; ++o) {
        const double g = self.grad.at2(n, o);
        if (g == 0.0) continue;
        if (px.requires_grad()) {
          double* gx = px.grad().data() + static_cast<int64_t>(n) * F;
          const double* wr = pw.value().data() + static_cast<int64_t>(o) * F;
          for (int f = 0; f < F; ++f) gx[f] += g * wr[f];
        }
        if (pw.requires_grad()) {
          double* gw = pw.grad().data() + static_cast<int64_t>(o) * F;
          const double* xr = px.value().data() + static_cast<int64_t>(n) * F;
          for (int f = 0; f < F; ++f) gw[f] += g * xr[f];
        }
        if (has_b) {
          Variable pb = self.parents[2];
          if (pb.requires_grad()) pb.grad()[o] += g;
        }
      }
  });
}

Variable embedding(const Variable& table, const std::vector<int>& ids) {
  const auto& ts = table.value().shape();
  require(ts.size() == 2, "embedding: table rank != 2");
  const int K = ts[0], E = ts[1];
  const int B = static_cast<int>(ids.size());
  Tensor y({B, E});
  for (int n = 0; n < B; ++n) {
    require(ids[n] >= 0 && ids[n] < K, "embedding: id out of range");
    const double* src = table.value().data() + static_cast<int64_t>(ids[n]) * E;
    double* dst = y.data() + static_cast<int64_t>(n) * E;
    for (int e = 0; e < E; ++e) dst[e] = src[e];
  }
  return make_op(std::move(y), {table}, [ids, E](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gt = p.grad();
    for (size_t n = 0; n < ids.size(); ++n) {
      const double* src = self.grad.data() + static_cast<int64_t>(n) * E;
      double* dst = gt.data() + static_cast<int64_t>(ids[n]) * E;
      for (int e = 0; e < E; ++e) dst[e] += src[e];
    }
  });
}

Variable bmm(const Variable& a, const Variable& b, bool trans_a, bool trans_b) {
  require(!(trans_a && trans_b), "bmm: double transpose unsupported");
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], "bmm: rank/batch mismatch");
  const int B = sa[0];
  const int M = trans_a ? sa[2] : sa[1];
  const int K = trans_a ? sa[1] : sa[2];
  const int Kb = trans_b ? sb[2] : sb[1];
  const int N = trans_b ? sb[1] : sb[2];
  require(K == Kb, "bmm: inner dim mismatch");
  Tensor y({B, M, N});
  kernels::bmm(a.value().data(), b.value().data(), y.data(), B, M, K, N, trans_a, trans_b);
  return make_op(std::move(y), {a, b}, [B, M, K, N, trans_a, trans_b](VarNode& self) {
    Variable pa = self.parents[0], pb = self.parents[1];
    const double* gy = self.grad.data();
    if (pa.requires_grad()) {
      Tensor t(pa.value().shape());
      if (!trans_a && !trans_b)  // gA = gY * B^T
        kernels::bmm(gy, pb.value().data(), t.data(), B, M, N, K, false, true);
      else if (trans_a)  // stored gA (K,M) = B * gY^T
        kernels::bmm(pb.value().data(), gy, t.data(), B, K, N, M, false, true);
      else  // trans_b: gA = gY * B_stored
        kernels::bmm(gy, pb.value().data(), t.data(), B, M, N, K, false, false);
      accumulate_grad(pa, t.data(), t.numel());
    }
    if (pb.requires_grad()) {
      Tensor t(pb.value().shape());
      if (!trans_a && !trans_b)  // gB = A^T * gY
        kernels::bmm(pa.value().data(), gy, t.data(), B, K, M, N, true, false);
      else if (trans_a)  // gB = A_stored * gY
        kernels::bmm(pa.value().data(), gy, t.data(), B, K, M, N, false, false);
      else  // trans_b: stored gB (N,K) = gY^T * A
        kernels::bmm(gy, pa.value().data(), t.data(), B, N, M, K, true, false);
      accumulate_grad(pb, t.data(), t.numel());
    }
  });
}

Variable softmax_dim1(const Variable& x) {
  const auto& s = x.value().shape();
  require(s.size() == 3, "softmax_dim1: rank != 3");
  const int B = s[0], M = s[1], N = s[2];
  Tensor y(s);
  kernels::softmax_dim1(x.value().data(), y.data(), B, M, N);
  return make_op(std::move(y), {x}, [B, M, N](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gx = p.grad();
    const int64_t ss = static_cast<int64_t>(M) * N;
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < N; ++j) {
        const double* yc = self.value.data() + b * ss + j;
        const double* gc = self.grad.data() + b * ss + j;
        double dot = 0.0;
        for (int i = 0; i < M; ++i) dot += gc[static_cast<int64_t>(i) * N] * yc[static_cast<int64_t>(i) * N];
        double* out = gx.data() + b * ss + j;
        for (int i = 0; i < M; ++i) {
          const int64_t k = static_cast<int64_t>(i) * N;
          out[k] += yc[k] * (gc[k] - dot);
        }
      }
  });
}

Variable softmax_channels(const Variable& x) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "softmax_channels: rank != 4");
  const int N = s[0], C = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];
  Tensor y(s);
  kernels::softmax_channels(x.value().data(), y.data(), N, C, HW);
  return make_op(std::move(y), {x}, [N, C, HW](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gx = p.grad();
    const int64_t ns = static_cast<int64_t>(C) * HW;
    for (int n = 0; n < N; ++n)
      for (int64_t q = 0; q < HW; ++q) {
        const double* yc = self.value.data() + n * ns + q;
        const double* gc = self.grad.data() + n * ns + q;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += gc[c * HW] * yc[c * HW];
        double* out = gx.data() + n * ns + q;
        for (int c = 0; c < C; ++c) out[c * HW] += yc[c * HW] * (gc[c * HW] - dot);
      }
  });
}

Variable extract_patches(const Variable& x, int k) {
  const auto& s = x.value().shape();
  require(s.size() == 4, "extract_patches: rank != 4");
  require(k >= 1 && s[2] % k == 0 && s[3] % k == 0, "extract_patches: grid does not divide input");
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int h2 = H / k, w2 = W / k;
  Tensor y({N, k * k, C, h2, w2});
  double* yd = y.data();
  const double* xd = x.value().data();
  for (int n = 0; n < N; ++n)
    for (int py = 0; py < k; ++py)
      for (int px = 0; px < k; ++px)
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < h2; ++i) {
            const double* src = xd + ((static_cast<int64_t>(n) * C + c) * H + py * h2 + i) * W + px * w2;
            double* dst = yd + (((static_cast<int64_t>(n) * k * k + py * k + px) * C + c) * h2 + i) * w2;
            for (int j = 0; j < w2; ++j) dst[j] = src[j];
          }
  return make_op(std::move(y), {x}, [N, C, H, W, k, h2, w2](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    double* gx = p.grad().data();
    const double* gy = self.grad.data();
    for (int n = 0; n < N; ++n)
      for (int py = 0; py < k; ++py)
        for (int px = 0; px < k; ++px)
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < h2; ++i) {
              double* dst = gx + ((static_cast<int64_t>(n) * C + c) * H + py * h2 + i) * W + px * w2;
              const double* src =
                  gy + (((static_cast<int64_t>(n) * k * k + py * k + px) * C + c) * h2 + i) * w2;
              for (int j = 0; j < w2; ++j) dst[j] += src[j];
            }
  });
}

Variable gather_patches(const Variable& grid, const std::vector<std::pair<int, int>>& idx) {
  const auto& s = grid.value().shape();
  require(s.size() == 5, "gather_patches: rank != 5");
  const int K2 = s[1];
  const int64_t ps = static_cast<int64_t>(s[2]) * s[3] * s[4];  // one patch
  const int M = static_cast<int>(idx.size());
  Tensor y({M, s[2], s[3], s[4]});
  for (int m = 0; m < M; ++m) {
    require(idx[m].first >= 0 && idx[m].first < s[0] && idx[m].second >= 0 && idx[m].second < K2,
            "gather_patches: index out of range");
    const double* src = grid.value().data() + (static_cast<int64_t>(idx[m].first) * K2 + idx[m].second) * ps;
    double* dst = y.data() + m * ps;
    for (int64_t i = 0; i < ps; ++i) dst[i] = src[i];
  }
  return make_op(std::move(y), {grid}, [idx, K2, ps](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    Tensor& gg = p.grad();
    for (size_t m = 0; m < idx.size(); ++m) {
      const double* src = self.grad.data() + static_cast<int64_t>(m) * ps;
      double* dst = gg.data() + (static_cast<int64_t>(idx[m].first) * K2 + idx[m].second) * ps;
      for (int64_t i = 0; i < ps; ++i) dst[i] += src[i];
    }
  });
}

Variable cross_entropy(const Variable& logits, const Tensor& labels) {
  const auto& s = logits.value().shape();
  require(s.size() == 4, "cross_entropy: rank != 4");
  const int N = s[0], C = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];
  require(labels.numel() == static_cast<int64_t>(N) * HW, "cross_entropy: label count mismatch");
  const int64_t ns = static_cast<int64_t>(C) * HW;
  Tensor probs(s);
  kernels::softmax_channels(logits.value().data(), probs.data(), N, C, HW);
  double loss = 0.0;
  const double inv = 1.0 / (static_cast<double>(N) * HW);
  for (int n = 0; n < N; ++n)
    for (int64_t q = 0; q < HW; ++q) {
      const int y = static_cast<int>(std::llround(labels[n * HW + q]));
      require(y >= 0 && y < C, "cross_entropy: label out of range");
      const double p = probs.data()[n * ns + static_cast<int64_t>(y) * HW + q];
      loss -= std::log(p > 1e-300 ? p : 1e-300);
    }
  Tensor out({1});
  out[0] = loss * inv;
  Tensor lab = labels;  // keep a copy for the backward pass
  return make_op(std::move(out), {logits}, [probs, lab, N, C, HW, ns, inv](VarNode& self) {
    Variable p = self.parents[0];
    if (!p.requires_grad()) return;
    const double g = self.grad[0] * inv;
    Tensor& gx = p.grad();
    for (int n = 0; n < N; ++n)
      for (int64_t q = 0; q < HW; ++q) {
        const int y = static_cast<int>(std::llround(lab[n * HW + q]));
        for (int c = 0; c < C; ++c) {
          const int64_t k = n * ns + static_cast<int64_t>(c) * HW + q;
          gx[k] += g * (probs[k] - (c == y ? 1.0 : 0.0));
        }
      }
  });
}

}  // namespace ops
}  // namespace sfda
