#include "sfda/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sfda {
namespace nn {

namespace {

constexpr char kMagic[8] = {'S', 'F', 'D', 'A', 'P', 'R', 'M', '1'};

template <class T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& f) {
  T v;
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw std::runtime_error("archive: truncated file");
  return v;
}

}  // namespace

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

void Archive::write(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("archive: cannot open for write: " + path);
  f.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(f, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    write_pod<uint32_t>(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(f, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_pod<int32_t>(f, t.dim(i));
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  }
  if (!f) throw std::runtime_error("archive: write failed: " + path);
}

Archive Archive::read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("archive: cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("archive: bad magic: " + path);
  Archive ar;
  const uint32_t n = read_pod<uint32_t>(f);
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t len = read_pod<uint32_t>(f);
    std::string name(len, '\0');
    f.read(name.data(), len);
    const uint32_t rank = read_pod<uint32_t>(f);
    std::vector<int> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = read_pod<int32_t>(f);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    if (!f) throw std::runtime_error("archive: truncated entry: " + name);
    ar.entries.emplace_back(std::move(name), std::move(t));
  }
  return ar;
}

Variable ParamStore::add_param(const std::string& name, Tensor init) {
  for (const auto& [n, v] : params_)
    if (n == name) throw std::logic_error("duplicate param: " + name);
  Variable v(std::move(init), true);
  params_.emplace_back(name, v);
  return v;
}

Tensor* ParamStore::add_buffer(const std::string& name, Tensor init) {
  for (const auto& [n, b] : buffers_)
    if (n == name) throw std::logic_error("duplicate buffer: " + name);
  buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(init)));
  return buffers_.back().second.get();
}

std::vector<Variable> ParamStore::params() const {
  std::vector<Variable> out;
  out.reserve(params_.size());
  for (const auto& [n, v] : params_) out.push_back(v);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [n, v] : params_) {
    Variable p = v;
    p.zero_grad();
  }
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [n, v] : params_) v.node()->requires_grad = on;
}

bool ParamStore::any_grad_nonzero() const {
  for (const auto& [n, v] : params_) {
    const Tensor& g = v.grad_view();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (g[i] != 0.0) return true;
  }
  return false;
}

uint64_t ParamStore::checksum() const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    const size_t n = sizeof(double) * static_cast<size_t>(t.numel());
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [n, v] : params_) mix(v.value());
  for (const auto& [n, b] : buffers_) mix(*b);
  return h;
}

void ParamStore::export_to(Archive& ar, const std::string& prefix) const {
  for (const auto& [n, v] : params_) ar.put(prefix + n, v.value());
  for (const auto& [n, b] : buffers_) ar.put(prefix + n, *b);
}

void ParamStore::import_from(const Archive& ar, const std::string& prefix) {
  auto pull = [&](const std::string& name, Tensor& dst) {
    const Tensor* src = ar.find(prefix + name);
    if (!src) throw std::runtime_error("checkpoint missing entry: " + prefix + name);
    if (src->shape() != dst.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + prefix + name);
    dst = *src;
  };
  for (auto& [n, v] : params_) pull(n, v.value());
  for (auto& [n, b] : buffers_) pull(n, *b);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int ci, int co, int k, int stride_, int pad_,
               Rng& rng, bool bias)
    : stride(stride_), pad(pad_) {
  Tensor wt({co, ci, k, k});
  const double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  for (int64_t i = 0; i < wt.numel(); ++i) wt[i] = rng.normal(0.0, std);
  w = ps.add_param(name + ".w", std::move(wt));
  if (bias) b = ps.add_param(name + ".b", Tensor({co}));
}

TConv2d::TConv2d(ParamStore& ps, const std::string& name, int ci, int co, int k, int stride_, int pad_,
                 Rng& rng, bool bias)
    : stride(stride_), pad(pad_) {
  Tensor wt({ci, co, k, k});
  const double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  for (int64_t i = 0; i < wt.numel(); ++i) wt[i] = rng.normal(0.0, std);
  w = ps.add_param(name + ".w", std::move(wt));
  if (bias) b = ps.add_param(name + ".b", Tensor({co}));
}

BatchNorm2d::BatchNorm2d(ParamStore& ps, const std::string& name, int c) {
  gamma = ps.add_param(name + ".gamma", Tensor({c}, 1.0));
  beta = ps.add_param(name + ".beta", Tensor({c}));
  running_mean = ps.add_buffer(name + ".running_mean", Tensor({c}));
  running_var = ps.add_buffer(name + ".running_var", Tensor({c}, 1.0));
}

Variable BatchNorm2d::operator()(const Variable& x, bool train, bool update) const {
  Variable mu, var;
  if (train) {
    mu = ops::mean_nhw(x);
    var = ops::var_nhw(x);
    if (update) {
      const int c = running_mean->dim(0);
      for (int i = 0; i < c; ++i) {
        (*running_mean)[i] = (1.0 - momentum) * (*running_mean)[i] + momentum * mu.value()[i];
        (*running_var)[i] = (1.0 - momentum) * (*running_var)[i] + momentum * var.value()[i];
      }
    }
  } else {
    mu = Variable(*running_mean);
    var = Variable(*running_var);
  }
  Variable xhat = ops::chan_mul(ops::chan_sub(x, mu), ops::rsqrt_shift(var, eps));
  return ops::chan_add(ops::chan_mul(xhat, gamma), beta);
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias) {
  Tensor wt({out, in});
  const double std = std::sqrt(2.0 / static_cast<double>(in));
  for (int64_t i = 0; i < wt.numel(); ++i) wt[i] = rng.normal(0.0, std);
  w = ps.add_param(name + ".w", std::move(wt));
  if (bias) b = ps.add_param(name + ".b", Tensor({out}));
}

Sgd::Sgd(std::vector<Variable> params, double lr, double momentum, double weight_decay, bool nesterov)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay),
      nesterov_(nesterov) {
  for (const auto& p : params_) velocity_.emplace_back(p.value().shape());
}

void Sgd::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Variable& p = params_[i];
    const Tensor& g = p.grad_view();
    if (g.empty()) continue;
    Tensor& vel = velocity_[i];
    Tensor& w = p.value();
    for (int64_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j] + weight_decay_ * w[j];
      vel[j] = momentum_ * vel[j] + gj;
      const double d = nesterov_ ? gj + momentum_ * vel[j] : vel[j];
      w[j] -= lr_ * d;
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<std::pair<std::string, Tensor>> Sgd::export_state(const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < velocity_.size(); ++i)
    out.emplace_back(prefix + "v" + std::to_string(i), velocity_[i]);
  return out;
}

void Sgd::import_state(const Archive& ar, const std::string& prefix) {
  for (size_t i = 0; i < velocity_.size(); ++i) {
    const Tensor* t = ar.find(prefix + "v" + std::to_string(i));
    if (!t) throw std::runtime_error("optimizer state missing: " + prefix + "v" + std::to_string(i));
    if (t->shape() != velocity_[i].shape()) throw std::runtime_error("optimizer state shape mismatch");
    velocity_[i] = *t;
  }
}

Adam::Adam(std::vector<Variable> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value().shape());
    v_.emplace_back(p.value().shape());
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Variable& p = params_[i];
    const Tensor& g = p.grad_view();
    if (g.empty()) continue;
    Tensor& w = p.value();
    for (int64_t j = 0; j < w.numel(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<std::pair<std::string, Tensor>> Adam::export_state(const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < m_.size(); ++i) {
    out.emplace_back(prefix + "m" + std::to_string(i), m_[i]);
    out.emplace_back(prefix + "v" + std::to_string(i), v_[i]);
  }
  Tensor tt({1});
  tt[0] = static_cast<double>(t_);
  out.emplace_back(prefix + "t", std::move(tt));
  return out;
}

void Adam::import_state(const Archive& ar, const std::string& prefix) {
  for (size_t i = 0; i < m_.size(); ++i) {
    const Tensor* tm = ar.find(prefix + "m" + std::to_string(i));
    const Tensor* tv = ar.find(prefix + "v" + std::to_string(i));
    if (!tm || !tv) throw std::runtime_error("optimizer state missing under " + prefix);
    m_[i] = *tm;
    v_[i] = *tv;
  }
  const Tensor* tt = ar.find(prefix + "t");
  if (!tt) throw std::runtime_error("optimizer state missing step counter");
  t_ = static_cast<int64_t>((*tt)[0]);
}

}  // namespace nn
}  // namespace sfda
