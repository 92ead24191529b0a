#ifndef SFDA_METRICS_HPP
#define SFDA_METRICS_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sfda/tensor.hpp"

namespace sfda {
namespace metrics {

/// C x C pixel counts; rows index ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  std::size_t num_classes() const { return c_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * c_ + pred]; }
  std::uint64_t total() const;

  /// Adds one batch of labels. Tensors must share a shape and hold integer
  /// values in [0, C). Accumulation is associative across batches.
  void add(const Tensor& pred, const Tensor& truth);

  /// Merge by addition, for matrices built in parallel.
  void merge(const ConfusionMatrix& other);

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

struct SegScores {
  std::vector<double> iou;      // NaN for classes absent from both pred and truth
  double mean_iou = 0.0;        // mean over classes with nonzero union
  double pixel_accuracy = 0.0;  // trace / total
  double mean_pixel_accuracy = 0.0;  // mean recall over classes present in truth
};

/// Throws on an all-empty matrix.
SegScores iou_scores(const ConfusionMatrix& cm);

/// (B,C,H,W) scores -> (B,H,W) label map; the lowest class index wins ties.
Tensor argmax_labels(const Tensor& scores);

/// One-row CSV: per-class IoU columns followed by mIoU (blank cell for
/// undefined classes).
void write_iou_csv(const std::string& path, const SegScores& scores);

}  // namespace metrics
}  // namespace sfda

#endif  // SFDA_METRICS_HPP
