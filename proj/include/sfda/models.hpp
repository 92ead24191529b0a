#ifndef SFDA_MODELS_HPP
#define SFDA_MODELS_HPP

#include <string>
#include <vector>

#include "sfda/nn.hpp"

namespace sfda {

struct ModelConfig {
  int num_classes = 5;
  int gen_latent = 256;   // Z
  int gen_image = 32;     // fake sample resolution (square)
  int disc_embed = 256;   // patch-class embedding width
  int disc_classes = 16;  // K*K patch classes known to the discriminator
};

/// Per-BN-layer stored running statistics, in forward order.
struct BNSnapshot {
  struct Layer {
    std::string id;
    Tensor mean;
    Tensor var;
  };
  std::vector<Layer> layers;
};

/// Per-BN-layer differentiable batch statistics of the layer inputs.
struct BatchBNStats {
  std::vector<Variable> mean;
  std::vector<Variable> var;
};

/// Encoder-decoder segmentation net. Encoder: 4 conv-BN-ReLU blocks
/// (32-64-64-128, stride 2 on the first three) -> stride-8 features with
/// C1 = 128 channels. Decoder: 3 bilinear-upsample + conv blocks to
/// per-pixel logits.
class SegModel {
 public:
  static constexpr int kStride = 8;
  static constexpr int kFeatChannels = 128;

  SegModel(const ModelConfig& cfg, uint64_t init_seed);

  struct Out {
    Variable feat;    // (B, C1, H/8, W/8)
    Variable logits;  // (B, C, H, W)
    Variable probs;   // per-pixel softmax of logits
    std::vector<Variable> bn_inputs;  // filled when capture_bn_inputs is set
  };
  struct FwdOpts {
    bool train_bn = false;        // batch stats instead of running stats
    bool update_running = false;  // fold batch stats into running buffers
    bool capture_bn_inputs = false;
    bool need_probs = true;
  };
  Out forward(const Variable& images, const FwdOpts& opts) const;

  int num_classes() const { return num_classes_; }
  int bn_layer_count() const { return static_cast<int>(bns_.size()); }

  nn::ParamStore store;

 private:
  friend BNSnapshot bn_snapshot(const SegModel&);
  int num_classes_;
  nn::Conv2d e1_, e2_, e3_, e4_, d1_, d2_, d3_;
  std::vector<std::pair<std::string, nn::BatchNorm2d>> bns_;  // forward order
};

/// Running-stats snapshot of every BN layer (the mu-bar / sigma-bar of the
/// frozen source model).
BNSnapshot bn_snapshot(const SegModel& model);

/// Batch mean / population variance of each BN layer's input features for
/// one image batch (differentiable w.r.t. the images); batch size must be
/// >= 2.
BatchBNStats batch_bn_stats(const SegModel& model, const Variable& images, bool frozen_bn_eval = true);

/// DCGAN-style generator: latent vector -> tconv-BN-ReLU stack -> 3-channel
/// image squashed to [0,1] by a sigmoid. Output resolution = cfg.gen_image.
class Generator {
 public:
  Generator(const ModelConfig& cfg, uint64_t init_seed);
  /// z: (B, Z)
  Variable forward(const Variable& z, bool train_bn, bool update_running) const;
  int latent_dim() const { return latent_; }
  int image_size() const { return image_; }

  nn::ParamStore store;

 private:
  int latent_, image_;
  nn::TConv2d head_;
  std::vector<nn::TConv2d> ups_;
  std::vector<nn::BatchNorm2d> bns_;
  nn::Conv2d to_rgb_;
};

/// Patch-class-conditional discriminator over prediction-map patches.
/// The class embedding is projected and concatenated with the first conv's
/// features; output is a per-patch probability-easy score in (0,1).
class PatchDiscriminator {
 public:
  PatchDiscriminator(const ModelConfig& cfg, uint64_t init_seed);
  /// patches: (M, C, h, w); ids: patch class per row, each in [0, K*K).
  /// Returns (M, 1) scores.
  Variable forward(const Variable& patches, const std::vector<int>& ids) const;
  int patch_classes() const { return classes_; }

  nn::ParamStore store;

 private:
  int classes_;
  nn::Conv2d c1_, c2_, c3_;
  Variable embed_;  // (K*K, E)
  nn::Linear embed_proj_, head_;
};

}  // namespace sfda

#endif  // SFDA_MODELS_HPP
