#ifndef SFDA_DATASET_HPP
#define SFDA_DATASET_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sfda/tensor.hpp"

namespace sfda {
namespace data {

enum class Domain { kSource, kTarget };

/// Appearance-only distribution shift; identity for the source domain.
struct ShiftParams {
  double hue_deg = 0.0;
  double noise_std = 0.0;
  double texture_freq_scale = 1.0;
};

struct SceneSpec {
  int num_classes = 5;
  int height = 64;
  int width = 64;
  Domain domain = Domain::kSource;
  ShiftParams shift;
};

SceneSpec source_spec(int classes = 5, int height = 64, int width = 64);
/// Default target shift: +40 degree hue rotation, noise std 0.05,
/// texture frequency x1.6.
SceneSpec target_spec(int classes = 5, int height = 64, int width = 64);

struct LabeledSample {
  Tensor image;   // (3,H,W) in [0,1], snapped to the 8-bit grid
  Tensor labels;  // (H,W) integer class ids
};

/// Layered scene: horizon-split background (classes 0,1) plus 2-6 random
/// shapes (classes 2..C-1). The domain shift touches the image only, so the
/// same seed yields bit-identical labels for source and target specs.
LabeledSample generate_scene(uint64_t seed, const SceneSpec& spec);

struct DatasetManifest {
  std::string root;  // split directory holding manifest.json
  std::string split;
  int count = 0;
  uint64_t seed = 0;
  SceneSpec spec;
  std::vector<std::string> image_files;  // relative to root
  std::vector<std::string> label_files;
};

/// Writes n samples under out_dir (images/NNNNN.png + labels/NNNNN.png) plus
/// manifest.json. Refuses to clobber an existing manifest unless force is set.
DatasetManifest build_dataset(int n, const SceneSpec& spec, uint64_t seed,
                              const std::string& out_dir, bool force = false);

DatasetManifest load_manifest(const std::string& dir);

/// Stacks the requested samples in index order: images (B,3,H,W), labels (B,H,W).
std::pair<Tensor, Tensor> load_batch(const DatasetManifest& manifest,
                                     const std::vector<int>& indices);

/// Log of files read through this module, kept so callers can prove a run
/// never touched a forbidden directory (the source-free guard).
namespace io_trace {
void clear();
void record(const std::string& path);
std::vector<std::string> snapshot();
bool any_under(const std::string& dir);
}  // namespace io_trace

}  // namespace data
}  // namespace sfda

#endif  // SFDA_DATASET_HPP
