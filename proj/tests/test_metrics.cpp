#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "sfda/metrics.hpp"
#include "sfda/rng.hpp"

using namespace sfda;
using metrics::ConfusionMatrix;

namespace {

Tensor labels_of(std::vector<double> v) {
  const int n = int(v.size());
  return Tensor({n}, std::move(v));
}

Tensor rand_labels(int n, int c, Rng& rng) {
  Tensor t({n});
  for (int i = 0; i < n; ++i) t[i] = double(rng.below(uint64_t(c)));
  return t;
}

}  // namespace

TEST_CASE("confusion matrix accumulation") {
  ConfusionMatrix cm(3);
  CHECK(cm.total() == 0);

  Tensor same = labels_of({0, 1, 2, 1});
  cm.add(same, same);
  CHECK(cm.total() == 4);
  CHECK(cm.at(0, 0) + cm.at(1, 1) + cm.at(2, 2) == 4);

  // empty input leaves the matrix unchanged
  cm.add(Tensor({0}), Tensor({0}));
  CHECK(cm.total() == 4);

  CHECK_THROWS(cm.add(labels_of({3}), labels_of({0})));     // id out of range
  CHECK_THROWS(cm.add(labels_of({0, 1}), labels_of({0})));  // shape mismatch
  CHECK_THROWS(cm.add(labels_of({0.5}), labels_of({0})));   // non-integer label
}

TEST_CASE("streaming equals one-shot; merge is addition") {
  Rng rng(900);
  Tensor pred = rand_labels(200, 4, rng);
  Tensor truth = rand_labels(200, 4, rng);

  ConfusionMatrix whole(4);
  whole.add(pred, truth);

  Tensor p1({100}), p2({100}), t1({100}), t2({100});
  for (int i = 0; i < 100; ++i) {
    p1[i] = pred[i];
    t1[i] = truth[i];
    p2[i] = pred[100 + i];
    t2[i] = truth[100 + i];
  }
  ConfusionMatrix a(4), b(4);
  a.add(p1, t1);
  b.add(p2, t2);

  ConfusionMatrix streamed(4);
  streamed.add(p1, t1);
  streamed.add(p2, t2);

  a.merge(b);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t p = 0; p < 4; ++p) {
      CHECK(streamed.at(t, p) == whole.at(t, p));
      CHECK(a.at(t, p) == whole.at(t, p));
    }
}

TEST_CASE("iou scores: trivial and hand-counted cases") {
  // perfect prediction
  ConfusionMatrix perfect(3);
  Tensor l = labels_of({0, 1, 2, 0, 1, 2});
  perfect.add(l, l);
  metrics::SegScores ps = metrics::iou_scores(perfect);
  for (double v : ps.iou) CHECK(v == 1.0);
  CHECK(ps.mean_iou == 1.0);
  CHECK(ps.pixel_accuracy == 1.0);
  CHECK(ps.mean_pixel_accuracy == 1.0);

  // disjoint binary masks
  ConfusionMatrix disjoint(2);
  disjoint.add(labels_of({1, 1, 0, 0}), labels_of({0, 0, 1, 1}));
  metrics::SegScores ds = metrics::iou_scores(disjoint);
  CHECK(ds.iou[0] == 0.0);
  CHECK(ds.iou[1] == 0.0);
  CHECK(ds.mean_iou == 0.0);

  // truth [0,0,1,1], pred [0,1,1,1]
  ConfusionMatrix cm(2);
  cm.add(labels_of({0, 1, 1, 1}), labels_of({0, 0, 1, 1}));
  metrics::SegScores s = metrics::iou_scores(cm);
  CHECK(s.iou[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.iou[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(s.mean_iou == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
  CHECK(s.pixel_accuracy == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(s.mean_pixel_accuracy == doctest::Approx(0.75).epsilon(1e-12));  // (1/2 + 1)/2

  CHECK_THROWS(metrics::iou_scores(ConfusionMatrix(2)));  // empty matrix
}

TEST_CASE("zero-union classes are excluded from the mean") {
  ConfusionMatrix cm(3);  // class 2 never appears
  cm.add(labels_of({0, 1, 1}), labels_of({0, 0, 1}));
  metrics::SegScores s = metrics::iou_scores(cm);
  CHECK(std::isnan(s.iou[2]));
  CHECK(s.iou[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.iou[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.mean_iou == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("pixel accuracy is invariant under joint relabeling") {
  Rng rng(901);
  Tensor pred = rand_labels(300, 4, rng);
  Tensor truth = rand_labels(300, 4, rng);
  ConfusionMatrix cm(4);
  cm.add(pred, truth);

  const int perm[4] = {2, 0, 3, 1};
  Tensor pred2({300}), truth2({300});
  for (int i = 0; i < 300; ++i) {
    pred2[i] = perm[int(pred[i])];
    truth2[i] = perm[int(truth[i])];
  }
  ConfusionMatrix cm2(4);
  cm2.add(pred2, truth2);
  CHECK(metrics::iou_scores(cm).pixel_accuracy ==
        doctest::Approx(metrics::iou_scores(cm2).pixel_accuracy).epsilon(1e-12));
}

TEST_CASE("score bounds hold for random matrices") {
  Rng rng(902);
  for (int rep = 0; rep < 100; ++rep) {
    ConfusionMatrix cm(5);
    cm.add(rand_labels(64, 5, rng), rand_labels(64, 5, rng));
    metrics::SegScores s = metrics::iou_scores(cm);
    double mx = 0.0;
    for (double v : s.iou)
      if (!std::isnan(v)) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
      }
    CHECK(s.mean_iou <= mx + 1e-12);
    CHECK(s.pixel_accuracy >= 0.0);
    CHECK(s.pixel_accuracy <= 1.0);
  }
}

TEST_CASE("argmax labels with first-max tie break") {
  Tensor scores({1, 3, 1, 2});
  // pixel 0: clear winner channel 2; pixel 1: tie between channels 0 and 2
  scores.at4(0, 0, 0, 0) = 0.1;
  scores.at4(0, 1, 0, 0) = 0.2;
  scores.at4(0, 2, 0, 0) = 0.9;
  scores.at4(0, 0, 0, 1) = 0.4;
  scores.at4(0, 1, 0, 1) = 0.1;
  scores.at4(0, 2, 0, 1) = 0.4;
  Tensor lab = metrics::argmax_labels(scores);
  REQUIRE(lab.shape() == std::vector<int>{1, 1, 2});
  CHECK(lab[0] == 2.0);
  CHECK(lab[1] == 0.0);  // earliest channel wins the tie

  Rng rng(903);
  Tensor r({2, 4, 3, 3});
  for (int64_t i = 0; i < r.numel(); ++i) r[i] = rng.normal();
  Tensor got = metrics::argmax_labels(r);
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        int best = 0;
        for (int c = 1; c < 4; ++c)
          if (r.at4(b, c, y, x) > r.at4(b, best, y, x)) best = c;
        CHECK(got.at3(b, y, x) == double(best));
      }

  CHECK_THROWS(metrics::argmax_labels(Tensor({3, 3})));
}

TEST_CASE("iou csv layout") {
  ConfusionMatrix cm(3);
  cm.add(labels_of({0, 1, 1}), labels_of({0, 0, 1}));
  metrics::SegScores s = metrics::iou_scores(cm);
  const char* path = "metrics_iou_test.csv";
  metrics::write_iou_csv(path, s);

  std::ifstream f(path);
  REQUIRE(bool(f));
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(header == "class_0,class_1,class_2,mIoU");
  // class 2 has no pixels: blank cell
  std::stringstream ss(row);
  std::string cell;
  std::vector<std::string> cells;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  REQUIRE(cells.size() == 4);
  CHECK(std::stod(cells[0]) == doctest::Approx(0.5));
  CHECK(cells[2].empty());
  CHECK(std::stod(cells[3]) == doctest::Approx(s.mean_iou));
  std::remove(path);
}
