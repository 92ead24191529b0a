#include "sfda/models.hpp"

#include <cmath>
#include <stdexcept>

namespace sfda {

SegModel::SegModel(const ModelConfig& cfg, uint64_t init_seed) : num_classes_(cfg.num_classes) {
  if (cfg.num_classes < 2) throw std::invalid_argument("SegModel: need at least 2 classes");
  Rng rng = substream(init_seed, "seg.init");
  e1_ = nn::Conv2d(store, "e1", 3, 32, 3, 2, 1, rng, false);
  e2_ = nn::Conv2d(store, "e2", 32, 64, 3, 2, 1, rng, false);
  e3_ = nn::Conv2d(store, "e3", 64, 64, 3, 2, 1, rng, false);
  e4_ = nn::Conv2d(store, "e4", 64, kFeatChannels, 3, 1, 1, rng, false);
  d1_ = nn::Conv2d(store, "d1", kFeatChannels, 64, 3, 1, 1, rng, false);
  d2_ = nn::Conv2d(store, "d2", 64, 32, 3, 1, 1, rng, false);
  d3_ = nn::Conv2d(store, "d3", 32, cfg.num_classes, 3, 1, 1, rng, true);
  bns_.emplace_back("e1.bn", nn::BatchNorm2d(store, "e1.bn", 32));
  bns_.emplace_back("e2.bn", nn::BatchNorm2d(store, "e2.bn", 64));
  bns_.emplace_back("e3.bn", nn::BatchNorm2d(store, "e3.bn", 64));
  bns_.emplace_back("e4.bn", nn::BatchNorm2d(store, "e4.bn", kFeatChannels));
  bns_.emplace_back("d1.bn", nn::BatchNorm2d(store, "d1.bn", 64));
  bns_.emplace_back("d2.bn", nn::BatchNorm2d(store, "d2.bn", 32));
}

SegModel::Out SegModel::forward(const Variable& images, const FwdOpts& opts) const {
  const auto& s = images.value().shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("SegModel: expected (B,3,H,W) input");
  if (s[2] % kStride != 0 || s[3] % kStride != 0)
    throw std::invalid_argument("SegModel: image dims must be divisible by " + std::to_string(kStride));

  Out out;
  auto block = [&](const nn::Conv2d& conv, int bn_idx, const Variable& x) {
    Variable pre = conv(x);
    if (opts.capture_bn_inputs) out.bn_inputs.push_back(pre);
    return ops::relu(bns_[bn_idx].second(pre, opts.train_bn, opts.update_running));
  };

  Variable x = block(e1_, 0, images);
  x = block(e2_, 1, x);
  x = block(e3_, 2, x);
  x = block(e4_, 3, x);
  out.feat = x;

  x = block(d1_, 4, ops::upsample2x(x));
  x = block(d2_, 5, ops::upsample2x(x));
  out.logits = d3_(ops::upsample2x(x));
  if (opts.need_probs) out.probs = ops::softmax_channels(out.logits);
  return out;
}

BNSnapshot bn_snapshot(const SegModel& model) {
  if (model.bns_.empty()) throw std::logic_error("bn_snapshot: model has no BN layers");
  BNSnapshot snap;
  for (const auto& [id, bn] : model.bns_) snap.layers.push_back({id, *bn.running_mean, *bn.running_var});
  return snap;
}

BatchBNStats batch_bn_stats(const SegModel& model, const Variable& images, bool frozen_bn_eval) {
  if (images.value().dim(0) < 2)
    throw std::invalid_argument("batch_bn_stats: batch size must be >= 2");
  SegModel::FwdOpts opts;
  opts.train_bn = !frozen_bn_eval;
  opts.update_running = false;
  opts.capture_bn_inputs = true;
  opts.need_probs = false;
  SegModel::Out out = model.forward(images, opts);
  BatchBNStats stats;
  for (const Variable& v : out.bn_inputs) {
    stats.mean.push_back(ops::mean_nhw(v));
    stats.var.push_back(ops::var_nhw(v));
  }
  return stats;
}

Generator::Generator(const ModelConfig& cfg, uint64_t init_seed)
    : latent_(cfg.gen_latent), image_(cfg.gen_image) {
  if (latent_ < 1) throw std::invalid_argument("Generator: bad latent dim");
  int ups = 0;
  for (int r = 4; r < image_; r *= 2) ++ups;
  if (4 << ups != image_) throw std::invalid_argument("Generator: resolution must be 4*2^n");
  Rng rng = substream(init_seed, "gen.init");
  int ch = 256;
  head_ = nn::TConv2d(store, "head", latent_, ch, 4, 1, 0, rng, false);
  bns_.emplace_back(store, "head.bn", ch);
  for (int i = 0; i < ups; ++i) {
    const int next = std::max(32, ch / 2);
    ups_.emplace_back(store, "up" + std::to_string(i), ch, next, 4, 2, 1, rng, false);
    bns_.emplace_back(store, "up" + std::to_string(i) + ".bn", next);
    ch = next;
  }
  to_rgb_ = nn::Conv2d(store, "to_rgb", ch, 3, 3, 1, 1, rng, true);
}

Variable Generator::forward(const Variable& z, bool train_bn, bool update_running) const {
  const auto& s = z.value().shape();
  if (s.size() != 2 || s[1] != latent_) throw std::invalid_argument("Generator: expected (B,Z) latent");
  for (int64_t i = 0; i < z.value().numel(); ++i)
    if (!std::isfinite(z.value()[i])) throw std::invalid_argument("Generator: non-finite latent");
  Variable x = ops::reshape(z, {s[0], latent_, 1, 1});
  x = ops::relu(bns_[0](head_(x), train_bn, update_running));
  for (size_t i = 0; i < ups_.size(); ++i)
    x = ops::relu(bns_[i + 1](ups_[i](x), train_bn, update_running));
  return ops::sigmoid(to_rgb_(x));
}

PatchDiscriminator::PatchDiscriminator(const ModelConfig& cfg, uint64_t init_seed)
    : classes_(cfg.disc_classes) {
  if (classes_ < 1) throw std::invalid_argument("PatchDiscriminator: bad class count");
  Rng rng = substream(init_seed, "disc.init");
  c1_ = nn::Conv2d(store, "c1", cfg.num_classes, 32, 3, 1, 1, rng, true);
  c2_ = nn::Conv2d(store, "c2", 64, 64, 3, 2, 1, rng, true);
  c3_ = nn::Conv2d(store, "c3", 64, 64, 3, 2, 1, rng, true);
  Tensor emb({classes_, cfg.disc_embed});
  for (int64_t i = 0; i < emb.numel(); ++i) emb[i] = rng.normal(0.0, 0.1);
  embed_ = store.add_param("embed", std::move(emb));
  embed_proj_ = nn::Linear(store, "embed_proj", cfg.disc_embed, 32, rng, true);
  head_ = nn::Linear(store, "head", 64, 1, rng, true);
}

Variable PatchDiscriminator::forward(const Variable& patches, const std::vector<int>& ids) const {
  const auto& s = patches.value().shape();
  if (s.size() != 4) throw std::invalid_argument("PatchDiscriminator: expected (M,C,h,w) patches");
  if (static_cast<int>(ids.size()) != s[0])
    throw std::invalid_argument("PatchDiscriminator: one patch class per patch required");
  for (int id : ids)
    if (id < 0 || id >= classes_)
      throw std::invalid_argument("PatchDiscriminator: patch class out of range");
  Variable f = ops::leaky_relu(c1_(patches), 0.2);
  Variable cond = embed_proj_(ops::embedding(embed_, ids));
  Variable x = ops::concat_channels(f, ops::spatial_broadcast(cond, s[2], s[3]));
  x = ops::leaky_relu(c2_(x), 0.2);
  x = ops::leaky_relu(c3_(x), 0.2);
  x = ops::adaptive_avg_pool(x, 1, 1);
  x = ops::reshape(x, {s[0], 64});
  // A saturated sigmoid rounds to exactly 0/1 in doubles, which the log-based
  // adversarial losses reject; squeeze the output just inside the open
  // interval instead.
  constexpr double kEdge = 1e-7;
  return ops::add_scalar(ops::mul_scalar(ops::sigmoid(head_(x)), 1.0 - 2.0 * kEdge), kEdge);
}

}  // namespace sfda
