#ifndef SFDA_NN_HPP
#define SFDA_NN_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sfda/autograd.hpp"
#include "sfda/ops.hpp"
#include "sfda/rng.hpp"

namespace sfda {
namespace nn {

/// Flat name -> tensor container; the on-disk checkpoint unit.
/// Layout: magic "SFDAPRM1", u32 entry count, then per entry
/// u32 name length, name bytes, u32 rank, i32 dims, f64 payload.
/// Everything little-endian; doubles are written raw so round-trips
/// are bit-exact.
struct Archive {
  std::vector<std::pair<std::string, Tensor>> entries;

  void put(const std::string& name, Tensor t) { entries.emplace_back(name, std::move(t)); }
  const Tensor* find(const std::string& name) const;
  void write(const std::string& path) const;
  static Archive read(const std::string& path);
};

/// Named parameters (trainable Variables) and buffers (plain tensors,
/// e.g. BN running stats) of one network, in registration order.
class ParamStore {
 public:
  Variable add_param(const std::string& name, Tensor init);
  Tensor* add_buffer(const std::string& name, Tensor init);

  std::vector<Variable> params() const;
  const std::vector<std::pair<std::string, Variable>>& named_params() const { return params_; }
  const std::vector<std::pair<std::string, std::unique_ptr<Tensor>>>& named_buffers() const {
    return buffers_;
  }

  void zero_grad();
  void set_requires_grad(bool on);
  bool any_grad_nonzero() const;

  /// FNV-1a over all parameter and buffer bytes, registration order.
  uint64_t checksum() const;

  void export_to(Archive& ar, const std::string& prefix) const;
  /// Loads every registered entry from the archive; throws if one is missing
  /// or has the wrong shape.
  void import_from(const Archive& ar, const std::string& prefix);

 private:
  std::vector<std::pair<std::string, Variable>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
};

// ---- layers ----

struct Conv2d {
  Variable w, b;
  int stride = 1, pad = 0;
  Conv2d() = default;
  /// He-normal weight init, zero bias.
  Conv2d(ParamStore& ps, const std::string& name, int ci, int co, int k, int stride, int pad, Rng& rng,
         bool bias = true);
  Variable operator()(const Variable& x) const { return ops::conv2d(x, w, b, stride, pad); }
};

struct TConv2d {
  Variable w, b;  // (Ci, Co, KH, KW)
  int stride = 1, pad = 0;
  TConv2d() = default;
  TConv2d(ParamStore& ps, const std::string& name, int ci, int co, int k, int stride, int pad, Rng& rng,
          bool bias = true);
  Variable operator()(const Variable& x) const { return ops::tconv2d(x, w, b, stride, pad); }
};

struct BatchNorm2d {
  Variable gamma, beta;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& ps, const std::string& name, int c);
  /// train: normalize with batch statistics (population variance);
  /// update: fold batch stats into the running buffers.
  Variable operator()(const Variable& x, bool train, bool update) const;
};

struct Linear {
  Variable w, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true);
  Variable operator()(const Variable& x) const { return ops::linear(x, w, b); }
};

// ---- optimizers ----

class Sgd {
 public:
  Sgd(std::vector<Variable> params, double lr, double momentum = 0.9, double weight_decay = 1e-4,
      bool nesterov = true);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step();
  void zero_grad();
  std::vector<std::pair<std::string, Tensor>> export_state(const std::string& prefix) const;
  void import_state(const Archive& ar, const std::string& prefix);

 private:
  std::vector<Variable> params_;
  std::vector<Tensor> velocity_;
  double lr_, momentum_, weight_decay_;
  bool nesterov_;
};

class Adam {
 public:
  Adam(std::vector<Variable> params, double lr, double beta1 = 0.5, double beta2 = 0.999,
       double eps = 1e-8);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step();
  void zero_grad();
  std::vector<std::pair<std::string, Tensor>> export_state(const std::string& prefix) const;
  void import_state(const Archive& ar, const std::string& prefix);

 private:
  std::vector<Variable> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace nn
}  // namespace sfda

#endif  // SFDA_NN_HPP
