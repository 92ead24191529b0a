// Times the serial kernels against their OpenMP counterparts at the tensor
// shapes the training loop actually produces, and checks the outputs agree
// bitwise (both paths accumulate in the same index order).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "sfda/kernels.hpp"
#include "sfda/rng.hpp"
#include "sfda/tensor.hpp"

using namespace sfda;
using kernels::ConvDims;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

double time_of(const std::function<void()>& fn, int reps) {
  fn();  // warm-up; also fills the buffer used for the bitwise comparison
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.numel() == b.numel() &&
         std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(double)) == 0;
}

struct Row {
  std::string name;
  double serial_ms = 0, omp_ms = 0;
  bool match = true;
};

std::vector<Row> g_rows;

void bench(const std::string& name, int reps, Tensor& serial_out, Tensor& omp_out,
           const std::function<void()>& serial_fn, const std::function<void()>& omp_fn) {
  Row r;
  r.name = name;
  r.serial_ms = time_of(serial_fn, reps);
  r.omp_ms = time_of(omp_fn, reps);
  r.match = bitwise_equal(serial_out, omp_out);
  g_rows.push_back(r);
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::max(1, std::atoi(argv[1]));
  Rng rng(99);

  // Early trunk conv at a 64x64 input, batch 8.
  {
    ConvDims d = kernels::make_conv_dims(8, 32, 64, 64, 64, 3, 3, 2, 1);
    Tensor x = randn({8, 32, 64, 64}, rng), w = randn({64, 32, 3, 3}, rng);
    Tensor b = randn({64}, rng);
    Tensor so({8, 64, d.OH, d.OW}), po({8, 64, d.OH, d.OW});
    bench("conv2d fwd 8x32x64x64 -> 64c s2", reps, so, po,
          [&] { kernels::serial::conv2d_fwd(x.data(), w.data(), b.data(), so.data(), d); },
          [&] { kernels::omp::conv2d_fwd(x.data(), w.data(), b.data(), po.data(), d); });

    // Backward kernels accumulate into their output, so zero it per call the
    // way autograd hands them a fresh gradient buffer.
    Tensor gy = randn({8, 64, d.OH, d.OW}, rng);
    Tensor sgx(x.shape()), pgx(x.shape());
    auto zero = [](Tensor& t) { std::memset(t.data(), 0, size_t(t.numel()) * sizeof(double)); };
    bench("conv2d bwd-input (same)", reps, sgx, pgx,
          [&] {
            zero(sgx);
            kernels::serial::conv2d_bwd_input(gy.data(), w.data(), sgx.data(), d);
          },
          [&] {
            zero(pgx);
            kernels::omp::conv2d_bwd_input(gy.data(), w.data(), pgx.data(), d);
          });

    Tensor sgw(w.shape()), pgw(w.shape()), sgb({64}), pgb({64});
    bench("conv2d bwd-weight (same)", reps, sgw, pgw,
          [&] {
            zero(sgw);
            zero(sgb);
            kernels::serial::conv2d_bwd_weight(x.data(), gy.data(), sgw.data(), sgb.data(), d);
          },
          [&] {
            zero(pgw);
            zero(pgb);
            kernels::omp::conv2d_bwd_weight(x.data(), gy.data(), pgw.data(), pgb.data(), d);
          });
  }

  // 1x1 attention projections on the (B,128,8,8) trunk output.
  {
    ConvDims d = kernels::make_conv_dims(8, 128, 8, 8, 128, 1, 1, 1, 0);
    Tensor x = randn({8, 128, 8, 8}, rng), w = randn({128, 128, 1, 1}, rng);
    Tensor so({8, 128, 8, 8}), po({8, 128, 8, 8});
    bench("conv2d fwd 8x128x8x8 1x1", reps, so, po,
          [&] { kernels::serial::conv2d_fwd(x.data(), w.data(), nullptr, so.data(), d); },
          [&] { kernels::omp::conv2d_fwd(x.data(), w.data(), nullptr, po.data(), d); });
  }

  // Generator upsampling stack.
  {
    ConvDims d = kernels::make_tconv_dims(8, 128, 8, 8, 64, 4, 4, 2, 1);
    Tensor x = randn({8, 128, 8, 8}, rng), w = randn({128, 64, 4, 4}, rng);
    Tensor so({8, 64, d.OH, d.OW}), po({8, 64, d.OH, d.OW});
    bench("tconv2d fwd 8x128x8x8 -> 64c x2", reps, so, po,
          [&] { kernels::serial::tconv2d_fwd(x.data(), w.data(), nullptr, so.data(), d); },
          [&] { kernels::omp::tconv2d_fwd(x.data(), w.data(), nullptr, po.data(), d); });
  }

  // Attention affinity products, 64 spatial positions x 128 channels.
  {
    Tensor a = randn({8, 64, 128}, rng), b = randn({8, 128, 64}, rng);
    Tensor so({8, 64, 64}), po({8, 64, 64});
    bench("bmm 8x(64x128)(128x64)", reps, so, po,
          [&] { kernels::serial::bmm(a.data(), b.data(), so.data(), 8, 64, 128, 64, false, false); },
          [&] { kernels::omp::bmm(a.data(), b.data(), po.data(), 8, 64, 128, 64, false, false); });
  }
  {
    Tensor a = randn({8, 128, 64}, rng), b = randn({8, 64, 128}, rng);
    Tensor so({8, 128, 128}), po({8, 128, 128});
    bench("bmm 8x(128x64)(64x128)", reps, so, po,
          [&] {
            kernels::serial::bmm(a.data(), b.data(), so.data(), 8, 128, 64, 128, false, false);
          },
          [&] { kernels::omp::bmm(a.data(), b.data(), po.data(), 8, 128, 64, 128, false, false); });
  }

  // Column softmax over attention matrices, channel softmax over logits.
  {
    Tensor x = randn({8, 64, 64}, rng);
    Tensor so(x.shape()), po(x.shape());
    bench("softmax_dim1 8x64x64", reps, so, po,
          [&] { kernels::serial::softmax_dim1(x.data(), so.data(), 8, 64, 64); },
          [&] { kernels::omp::softmax_dim1(x.data(), po.data(), 8, 64, 64); });
  }
  {
    Tensor x = randn({8, 5, 64, 64}, rng);
    Tensor so(x.shape()), po(x.shape());
    bench("softmax_channels 8x5x64x64", reps, so, po,
          [&] { kernels::serial::softmax_channels(x.data(), so.data(), 8, 5, 64 * 64); },
          [&] { kernels::omp::softmax_channels(x.data(), po.data(), 8, 5, 64 * 64); });
  }

  // Decoder upsampling and the pooled-feature path.
  {
    Tensor x = randn({8, 64, 32, 32}, rng);
    Tensor so({8, 64, 64, 64}), po({8, 64, 64, 64});
    bench("upsample2x fwd 8x64x32x32", reps, so, po,
          [&] { kernels::serial::upsample2x_fwd(x.data(), so.data(), 8, 64, 32, 32); },
          [&] { kernels::omp::upsample2x_fwd(x.data(), po.data(), 8, 64, 32, 32); });
  }
  {
    Tensor x = randn({8, 128, 8, 8}, rng);
    Tensor so({8, 128, 4, 4}), po({8, 128, 4, 4});
    bench("adaptive_avgpool 8x128x8x8 -> 4x4", reps, so, po,
          [&] { kernels::serial::adaptive_avgpool_fwd(x.data(), so.data(), 8, 128, 8, 8, 4, 4); },
          [&] { kernels::omp::adaptive_avgpool_fwd(x.data(), po.data(), 8, 128, 8, 8, 4, 4); });
  }

  std::printf("threads available: %d, reps per kernel: %d\n\n", kernels::max_threads(), reps);
  std::printf("%-36s %12s %12s %9s %6s\n", "kernel", "serial ms", "omp ms", "speedup", "equal");
  bool all_match = true;
  for (const Row& r : g_rows) {
    std::printf("%-36s %12.3f %12.3f %8.2fx %6s\n", r.name.c_str(), r.serial_ms, r.omp_ms,
                r.serial_ms / r.omp_ms, r.match ? "yes" : "NO");
    all_match = all_match && r.match;
  }
  if (!all_match) {
    std::printf("\nmismatch between serial and omp outputs\n");
    return 1;
  }
  return 0;
}
