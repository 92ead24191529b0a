#include "sfda/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace sfda {
namespace metrics {

namespace {

std::size_t label_at(const double* p, std::size_t i, std::size_t c, const char* who) {
  const double v = p[i];
  if (!(v >= 0.0) || v != std::floor(v) || std::size_t(v) >= c) {
    throw std::invalid_argument(std::string(who) + ": label " + std::to_string(v) +
                                " outside [0," + std::to_string(c) + ")");
  }
  return std::size_t(v);
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : c_(num_classes), counts_(c_ * c_, 0) {
  if (num_classes == 0) throw std::invalid_argument("ConfusionMatrix: need at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t v : counts_) t += v;
  return t;
}

void ConfusionMatrix::add(const Tensor& pred, const Tensor& truth) {
  if (!pred.same_shape(truth)) {
    throw std::invalid_argument("ConfusionMatrix::add: shape mismatch " + pred.shape_str() +
                                " vs " + truth.shape_str());
  }
  const double* pp = pred.data();
  const double* tp = truth.data();
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const std::size_t t = label_at(tp, i, c_, "truth");
    const std::size_t p = label_at(pp, i, c_, "pred");
    ++counts_[t * c_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

SegScores iou_scores(const ConfusionMatrix& cm) {
  const std::size_t c = cm.num_classes();
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("iou_scores: empty confusion matrix");

  SegScores s;
  s.iou.assign(c, std::numeric_limits<double>::quiet_NaN());
  std::uint64_t trace = 0;
  double iou_sum = 0.0, recall_sum = 0.0;
  std::size_t iou_n = 0, recall_n = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t tp = cm.at(k, k), row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    trace += tp;
    const std::uint64_t uni = row + col - tp;  // TP + FP + FN
    if (uni > 0) {
      s.iou[k] = double(tp) / double(uni);
      iou_sum += s.iou[k];
      ++iou_n;
    }
    if (row > 0) {
      recall_sum += double(tp) / double(row);
      ++recall_n;
    }
  }
  s.mean_iou = iou_sum / double(iou_n);
  s.pixel_accuracy = double(trace) / double(total);
  s.mean_pixel_accuracy = recall_sum / double(recall_n);
  return s;
}

Tensor argmax_labels(const Tensor& scores) {
  if (scores.rank() != 4) {
    throw std::invalid_argument("argmax_labels: expected (B,C,H,W), got " + scores.shape_str());
  }
  const std::size_t b = scores.dim(0), c = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  const std::size_t plane = h * w;
  Tensor out({int(b), int(h), int(w)});
  const double* p = scores.data();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t s = 0; s < plane; ++s) {
      std::size_t best = 0;
      double best_v = p[(n * c) * plane + s];
      for (std::size_t ch = 1; ch < c; ++ch) {
        const double v = p[(n * c + ch) * plane + s];
        if (v > best_v) {
          best_v = v;
          best = ch;
        }
      }
      out.data()[n * plane + s] = double(best);
    }
  }
  return out;
}

void write_iou_csv(const std::string& path, const SegScores& scores) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_iou_csv: cannot open " + path);
  for (std::size_t k = 0; k < scores.iou.size(); ++k) f << "class_" << k << ",";
  f << "mIoU\n";
  for (double v : scores.iou) {
    if (std::isnan(v)) {
      f << ",";
    } else {
      f << v << ",";
    }
  }
  f << scores.mean_iou << "\n";
}

}  // namespace metrics
}  // namespace sfda
