#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "sfda/nn.hpp"
#include "sfda/rng.hpp"

using namespace sfda;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(double) * size_t(a.numel())) == 0;
}

}  // namespace

TEST_CASE("archive round-trips bit-exactly") {
  Rng rng(901);
  nn::Archive ar;
  ar.put("alpha", randn({3, 4}, rng));
  ar.put("beta.w", randn({2, 2, 3, 3}, rng, 1e-7));
  Tensor odd({5});
  odd[0] = -0.0;
  odd[1] = 1e308;
  odd[2] = 5e-324;  // denormal
  odd[3] = -1.0 / 3.0;
  odd[4] = 0.0;
  ar.put("odd", odd);

  const char* path = "nn_archive_test.bin";
  ar.write(path);
  nn::Archive back = nn::Archive::read(path);
  REQUIRE(back.entries.size() == 3);
  for (size_t i = 0; i < ar.entries.size(); ++i) {
    CHECK(back.entries[i].first == ar.entries[i].first);
    CHECK(bitwise_equal(back.entries[i].second, ar.entries[i].second));
  }
  CHECK(back.find("alpha") != nullptr);
  CHECK(back.find("nope") == nullptr);
  std::remove(path);
}

TEST_CASE("param store bookkeeping") {
  Rng rng(902);
  nn::ParamStore ps;
  Variable w = ps.add_param("w", randn({2, 3}, rng));
  Tensor* buf = ps.add_buffer("buf", Tensor({4}, 1.5));
  REQUIRE(ps.params().size() == 1);
  CHECK(w.requires_grad());
  CHECK((*buf)[0] == 1.5);

  CHECK_FALSE(ps.any_grad_nonzero());
  w.grad()[0] = 2.0;
  CHECK(ps.any_grad_nonzero());
  ps.zero_grad();
  CHECK_FALSE(ps.any_grad_nonzero());

  const uint64_t c0 = ps.checksum();
  w.value()[0] += 1.0;
  CHECK(ps.checksum() != c0);
  w.value()[0] -= 1.0;
  CHECK(ps.checksum() == c0);
  (*buf)[1] = -7.0;
  CHECK(ps.checksum() != c0);
  (*buf)[1] = 1.5;
  CHECK(ps.checksum() == c0);

  ps.set_requires_grad(false);
  CHECK_FALSE(w.requires_grad());
  ps.set_requires_grad(true);
  CHECK(w.requires_grad());

  nn::Archive ar;
  ps.export_to(ar, "m.");
  const uint64_t before = ps.checksum();
  w.value()[0] = 99.0;
  (*buf)[0] = 99.0;
  ps.import_from(ar, "m.");
  CHECK(ps.checksum() == before);
  CHECK_THROWS(ps.import_from(ar, "wrong."));
}

TEST_CASE("batchnorm train mode matches per-channel oracle") {
  Rng rng(903);
  nn::ParamStore ps;
  nn::BatchNorm2d bn(ps, "bn", 3);
  bn.gamma.value()[0] = 1.3;
  bn.gamma.value()[1] = 0.7;
  bn.gamma.value()[2] = -0.4;
  bn.beta.value()[0] = 0.1;
  bn.beta.value()[1] = -2.0;

  Tensor x = randn({2, 3, 4, 5}, rng);
  Variable out = bn(Variable(x), true, false);

  // two-pass oracle per channel
  const int n = 2, c = 3, h = 4, w = 5;
  const int m = n * h * w;
  for (int ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) mu += x.at4(b, ch, y, xx);
    mu /= m;
    double var = 0.0;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double d = x.at4(b, ch, y, xx) - mu;
          var += d * d;
        }
    var /= m;  // population variance
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double want = bn.gamma.value()[ch] * (x.at4(b, ch, y, xx) - mu) /
                                  std::sqrt(var + bn.eps) +
                              bn.beta.value()[ch];
          CHECK(out.value().at4(b, ch, y, xx) == doctest::Approx(want).epsilon(1e-12));
        }
  }
}

TEST_CASE("batchnorm running-stat update and eval mode") {
  Rng rng(904);
  nn::ParamStore ps;
  nn::BatchNorm2d bn(ps, "bn", 2);
  Tensor x = randn({3, 2, 2, 2}, rng);

  // expected updated running stats
  std::vector<double> want_mean(2), want_var(2);
  for (int ch = 0; ch < 2; ++ch) {
    double mu = 0.0;
    for (int b = 0; b < 3; ++b)
      for (int y = 0; y < 2; ++y)
        for (int xx = 0; xx < 2; ++xx) mu += x.at4(b, ch, y, xx);
    mu /= 12.0;
    double var = 0.0;
    for (int b = 0; b < 3; ++b)
      for (int y = 0; y < 2; ++y)
        for (int xx = 0; xx < 2; ++xx) {
          const double d = x.at4(b, ch, y, xx) - mu;
          var += d * d;
        }
    var /= 12.0;
    want_mean[ch] = 0.9 * 0.0 + 0.1 * mu;
    want_var[ch] = 0.9 * 1.0 + 0.1 * var;
  }

  bn(Variable(x), true, true);
  for (int ch = 0; ch < 2; ++ch) {
    CHECK((*bn.running_mean)[ch] == doctest::Approx(want_mean[ch]).epsilon(1e-12));
    CHECK((*bn.running_var)[ch] == doctest::Approx(want_var[ch]).epsilon(1e-12));
  }

  // eval mode normalizes with the buffers and leaves them untouched
  Tensor rm = *bn.running_mean;
  Tensor rv = *bn.running_var;
  Variable out = bn(Variable(x), false, false);
  CHECK(bitwise_equal(rm, *bn.running_mean));
  CHECK(bitwise_equal(rv, *bn.running_var));
  const double want = (x.at4(0, 0, 0, 0) - rm[0]) / std::sqrt(rv[0] + bn.eps);
  CHECK(out.value().at4(0, 0, 0, 0) == doctest::Approx(want).epsilon(1e-12));

  // train without update keeps buffers fixed too
  bn(Variable(x), true, false);
  CHECK(bitwise_equal(rm, *bn.running_mean));
}

TEST_CASE("sgd follows the nesterov recurrence") {
  Rng rng(905);
  nn::ParamStore ps;
  Variable p = ps.add_param("p", randn({4}, rng));
  Tensor ref = p.value();
  const double lr = 0.1, mu = 0.9, wd = 1e-4;
  nn::Sgd opt(ps.params(), lr, mu, wd, true);

  Tensor vel({4});
  for (int stepi = 0; stepi < 5; ++stepi) {
    Tensor g = randn({4}, rng);
    p.grad() = g;
    opt.step();
    for (int j = 0; j < 4; ++j) {
      const double gj = g[j] + wd * ref[j];
      vel[j] = mu * vel[j] + gj;
      ref[j] -= lr * (gj + mu * vel[j]);
      CHECK(p.value()[j] == doctest::Approx(ref[j]).epsilon(1e-12));
    }
    opt.zero_grad();
  }
}

TEST_CASE("adam follows the bias-corrected recurrence") {
  Rng rng(906);
  nn::ParamStore ps;
  Variable p = ps.add_param("p", randn({3}, rng));
  Tensor ref = p.value();
  const double lr = 0.01, b1 = 0.5, b2 = 0.999, eps = 1e-8;
  nn::Adam opt(ps.params(), lr, b1, b2, eps);

  Tensor m({3}), v({3});
  for (int stepi = 1; stepi <= 5; ++stepi) {
    Tensor g = randn({3}, rng);
    p.grad() = g;
    opt.step();
    for (int j = 0; j < 3; ++j) {
      m[j] = b1 * m[j] + (1 - b1) * g[j];
      v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
      const double mh = m[j] / (1 - std::pow(b1, stepi));
      const double vh = v[j] / (1 - std::pow(b2, stepi));
      ref[j] -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(p.value()[j] == doctest::Approx(ref[j]).epsilon(1e-12));
    }
    opt.zero_grad();
  }
}

TEST_CASE("optimizer state round-trip resumes identically") {
  Rng grng(907);
  std::vector<Tensor> grads;
  for (int i = 0; i < 6; ++i) grads.push_back(randn({5}, grng));

  auto run = [&](bool reload) {
    Rng rng(908);
    nn::ParamStore ps;
    Variable p = ps.add_param("p", randn({5}, rng));
    auto opt = std::make_unique<nn::Sgd>(ps.params(), 0.05);
    for (int i = 0; i < 3; ++i) {
      p.grad() = grads[size_t(i)];
      opt->step();
    }
    if (reload) {
      nn::Archive ar;
      for (auto& [name, t] : opt->export_state("opt.")) ar.put(name, t);
      opt = std::make_unique<nn::Sgd>(ps.params(), 0.05);
      opt->import_state(ar, "opt.");
    }
    for (int i = 3; i < 6; ++i) {
      p.grad() = grads[size_t(i)];
      opt->step();
    }
    return p.value();
  };
  CHECK(bitwise_equal(run(false), run(true)));

  auto run_adam = [&](bool reload) {
    Rng rng(909);
    nn::ParamStore ps;
    Variable p = ps.add_param("p", randn({5}, rng));
    auto opt = std::make_unique<nn::Adam>(ps.params(), 0.01);
    for (int i = 0; i < 3; ++i) {
      p.grad() = grads[size_t(i)];
      opt->step();
    }
    if (reload) {
      nn::Archive ar;
      for (auto& [name, t] : opt->export_state("opt.")) ar.put(name, t);
      opt = std::make_unique<nn::Adam>(ps.params(), 0.01);
      opt->import_state(ar, "opt.");
    }
    for (int i = 3; i < 6; ++i) {
      p.grad() = grads[size_t(i)];
      opt->step();
    }
    return p.value();
  };
  CHECK(bitwise_equal(run_adam(false), run_adam(true)));
}

TEST_CASE("layer shapes and init determinism") {
  auto build = [](uint64_t seed) {
    Rng rng(seed);
    nn::ParamStore ps;
    nn::Conv2d conv(ps, "c", 3, 8, 3, 2, 1, rng);
    nn::Linear lin(ps, "l", 8, 2, rng);
    return ps.checksum();
  };
  CHECK(build(42) == build(42));
  CHECK(build(42) != build(43));

  Rng rng(910);
  nn::ParamStore ps;
  nn::Conv2d conv(ps, "c", 3, 8, 3, 2, 1, rng);
  nn::TConv2d tconv(ps, "t", 8, 4, 4, 2, 1, rng);
  nn::Linear lin(ps, "l", 4, 2, rng);
  Variable x(randn({2, 3, 8, 8}, rng));
  Variable y = conv(x);
  CHECK(y.value().shape() == std::vector<int>{2, 8, 4, 4});
  Variable z = tconv(y);
  CHECK(z.value().shape() == std::vector<int>{2, 4, 8, 8});
  Variable flat(z.value().reshaped({2 * 8 * 8, 4}));
  CHECK(lin(flat).value().shape() == std::vector<int>{2 * 8 * 8, 2});
}
