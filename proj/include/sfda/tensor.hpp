#ifndef SFDA_TENSOR_HPP
#define SFDA_TENSOR_HPP

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfda {

/// Dense row-major tensor of doubles. Shape is a small dim vector
/// (NCHW for images/features, arbitrary rank elsewhere).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), fill);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dim");
      n *= d;
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 4-d accessor (NCHW). Bounds are the caller's problem; kernels index raw.
  double& at4(int n, int c, int h, int w) {
    return data_[static_cast<size_t>(((static_cast<int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at4(int n, int c, int h, int w) const {
    return data_[static_cast<size_t>(((static_cast<int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double& at3(int a, int b, int c) {
    return data_[static_cast<size_t>((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + c)];
  }
  double at3(int a, int b, int c) const {
    return data_[static_cast<size_t>((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + c)];
  }
  double& at2(int a, int b) { return data_[static_cast<size_t>(static_cast<int64_t>(a) * shape_[1] + b)]; }
  double at2(int a, int b) const { return data_[static_cast<size_t>(static_cast<int64_t>(a) * shape_[1] + b)]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> new_shape) const {
    if (numel_of(new_shape) != numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline void check_shape(const Tensor& t, const std::vector<int>& want, const char* who) {
  if (t.shape() != want)
    throw std::invalid_argument(std::string(who) + ": unexpected shape " + t.shape_str());
}

}  // namespace sfda

#endif  // SFDA_TENSOR_HPP
