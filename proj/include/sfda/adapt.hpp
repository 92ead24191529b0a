#ifndef SFDA_ADAPT_HPP
#define SFDA_ADAPT_HPP

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfda/attention.hpp"
#include "sfda/dataset.hpp"
#include "sfda/losses.hpp"
#include "sfda/metrics.hpp"
#include "sfda/models.hpp"

namespace sfda {
namespace train {

/// A training loss went NaN/Inf. We abort instead of skipping the batch:
/// silently dropped steps would mask bugs in a reference implementation.
struct NumericalAbort : std::runtime_error {
  explicit NumericalAbort(const std::string& what) : std::runtime_error(what) {}
};

struct AdaptConfig {
  LossWeights weights;

  int patch_k = 4;  // K; 1 disables the patch branch entirely
  int batch = 8;    // even
  int epochs = 2;

  // student / segmentation optimizer (SGD + Nesterov, poly decay)
  double seg_lr = 2.5e-4;
  double seg_momentum = 0.9;
  double seg_weight_decay = 1e-4;
  double seg_poly_power = 0.9;

  // generator / discriminator (Adam)
  double gen_lr = 1e-3;
  double disc_lr = 1e-3;

  int fake_size = 32;  // synthetic-sample resolution
  int latent = 256;

  uint64_t seed = 1;

  // ablations
  bool use_bns = true;
  bool use_dad = true;
  bool use_ipsm = true;
  bool transfer_only = false;

  // plumbing switches
  bool dam_train_proj = false;   // train the DAM 1x1 projections with the student
  bool frozen_bn_eval = true;    // teacher BN runs on stored running stats
  bool shared_bn_update = true;  // student BN running stats track fake/target batches

  // source pretraining
  double pretrain_lr = 0.05;
  int pretrain_epochs = 30;
  double pretrain_min_miou = 0.80;   // hard gate on the source test split
  double pretrain_stop_miou = 0.92;  // early stop once comfortably past the gate
};

/// The patch branch is active only when every prerequisite holds; K = 1
/// degenerates to "no patches" by construction.
inline bool ipsm_active(const AdaptConfig& c) {
  return c.use_ipsm && c.patch_k > 1 && !c.transfer_only;
}

/// Flat `key = value` text, '#' comments. Unknown keys are rejected.
/// `tau` defaults to whatever `beta` ends up as unless set explicitly.
AdaptConfig load_config(const std::string& path);
void save_config(const AdaptConfig& cfg, const std::string& path);

/// B even and >= 2; K in [1,5]; image dims divisible by K and by the model
/// stride; positive learning rates; finite non-negative weights.
void validate_config(const AdaptConfig& cfg, int image_h, int image_w);

// ---- checkpoints: a directory holding params.bin + meta.txt ----

struct CheckpointMeta {
  std::string kind;  // "pretrain" | "adapt-best" | "adapt-last" | ...
  int num_classes = 0;
  int epoch = 0;
  int iteration = 0;
  uint64_t seed = 0;
  double miou = std::numeric_limits<double>::quiet_NaN();
};

void save_checkpoint(const std::string& dir, const nn::ParamStore& store, const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_meta(const std::string& dir);
/// Loads params.bin into an already-constructed store (shape-checked).
void load_checkpoint(const std::string& dir, nn::ParamStore& store);

// ---- metric history ----

/// One CSV row. Loss cells are NaN when the term is disabled or the row is
/// evaluation-only; mIoU/mPA are filled on evaluation rows.
struct HistoryRow {
  int iteration = 0;
  int epoch = 0;
  bool has_losses = false;
  double gen = std::numeric_limits<double>::quiet_NaN();
  double bns = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  double dad_ss = std::numeric_limits<double>::quiet_NaN();
  double dad_st = std::numeric_limits<double>::quiet_NaN();
  double tar = std::numeric_limits<double>::quiet_NaN();
  double adv_t = std::numeric_limits<double>::quiet_NaN();
  double adv_d = std::numeric_limits<double>::quiet_NaN();
  bool has_eval = false;
  double miou = std::numeric_limits<double>::quiet_NaN();
  double mpa = std::numeric_limits<double>::quiet_NaN();
};

/// Column set depends on the ablation flags (e.g. no adversarial columns
/// without the patch branch, no l_tar in transfer-only mode).
std::vector<std::string> history_columns(const AdaptConfig& cfg);
/// Value of one named column for a row; NaN when the cell is blank.
double history_cell(const HistoryRow& row, const std::string& column);
void write_history_csv(const std::string& path, const AdaptConfig& cfg,
                       const std::vector<HistoryRow>& rows);
std::vector<HistoryRow> read_history_csv(const std::string& path, const AdaptConfig& cfg);

// ---- training state ----

struct TrainState {
  AdaptConfig cfg;
  ModelConfig mc;

  std::unique_ptr<SegModel> frozen;  // teacher, never updated
  std::unique_ptr<SegModel> shared;  // student
  std::unique_ptr<Generator> gen;
  std::unique_ptr<PatchDiscriminator> disc;  // null unless the patch branch is on
  std::unique_ptr<DualAttention> dam;

  std::unique_ptr<nn::Sgd> seg_opt;
  std::unique_ptr<nn::Adam> gen_opt;
  std::unique_ptr<nn::Adam> disc_opt;

  BNSnapshot source_stats;         // teacher's stored BN statistics
  uint64_t frozen_checksum = 0;    // for the immutability invariant

  Rng rng{0};
  int iteration = 0;       // completed iterations
  int max_iterations = 1;  // poly-decay horizon

  Tensor fake_cache;        // images from the freshly updated generator
  Tensor frozen_fake_probs; // teacher outputs on fake_cache
  Tensor frozen_fake_feat;
  bool have_fake = false;

  std::optional<Tensor> fixed_z;  // test hook: reuse one latent batch everywhere
};

/// Builds every component and loads the teacher from `source_ckpt_dir`.
/// The student starts from the same checkpoint, or freshly initialized in
/// transfer-only mode.
TrainState make_state(const AdaptConfig& cfg, const ModelConfig& mc,
                      const std::string& source_ckpt_dir, int max_iterations);

/// Stage one: one generator step (BNS - alpha*MAE - beta*DAD_ss + tau*DAD_st),
/// then one student step on a fresh fake batch (alpha*MAE + beta*DAD_ss).
/// The fresh fakes and the teacher's outputs on them are cached for the
/// adaptation step. The teacher is never touched.
HistoryRow knowledge_transfer_step(TrainState& st, const Tensor& target_images);

/// Stage two: student step on L_TAR + alpha*MAE + beta*DAD_ss (+ gamma*ADV_T
/// on hard patches), then one discriminator step on detached patches.
HistoryRow model_adaptation_step(TrainState& st, const Tensor& target_images);

/// Runs the model over a labeled split in eval mode (running BN stats) and
/// scores the argmax predictions.
metrics::SegScores evaluate_model(const SegModel& model, const data::DatasetManifest& m, int batch);

// ---- entry points ----

/// One cross-entropy step; returns the loss before the update.
double pretrain_step(SegModel& model, nn::Sgd& opt, const Tensor& images, const Tensor& labels);

struct PretrainResult {
  metrics::SegScores test_scores;
  int epochs_run = 0;
  std::string ckpt_dir;
};

/// Supervised source training with a hard quality gate on the source test
/// split. Fails loudly (with the final metric) if the gate is missed.
PretrainResult pretrain_source(const data::DatasetManifest& train_m, const data::DatasetManifest& test_m,
                               const AdaptConfig& cfg, const std::string& out_dir);

struct RunResult {
  std::vector<HistoryRow> history;
  double best_miou = 0.0;
  int best_iteration = 0;
  std::string best_dir;
  std::string last_dir;
  std::string history_csv;
};

/// The full alternating loop over the target split. Labels of `target_test`
/// are used for evaluation only; no source data enters here by construction.
/// Restartable: an existing `out_dir/last` checkpoint resumes the run at the
/// epoch boundary it recorded.
RunResult run_adaptation(const AdaptConfig& cfg, const std::string& source_ckpt_dir,
                         const data::DatasetManifest& target_train,
                         const data::DatasetManifest& target_test, const std::string& out_dir);

}  // namespace train
}  // namespace sfda

#endif  // SFDA_ADAPT_HPP
