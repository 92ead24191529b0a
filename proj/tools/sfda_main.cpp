// Command-line front end: dataset generation, source pretraining, the
// source-free adaptation loop, checkpoint evaluation, and figure emission.
//
// Exit codes: 0 success, 2 usage/input error, 3 numerical abort.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <string>
#include <vector>

#include "sfda/adapt.hpp"
#include "sfda/dataset.hpp"
#include "sfda/ops.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfda;

namespace {

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string out = "data";
  int classes = 5;
  int size = 64;
  int n_train = 500;
  int n_test = 100;
  uint64_t seed = 1;
  std::string shift = "default";
  bool force = false;
};

data::ShiftParams shift_preset(const std::string& name) {
  if (name == "default") return {40.0, 0.05, 1.6};
  if (name == "mild") return {20.0, 0.02, 1.3};
  if (name == "strong") return {80.0, 0.10, 2.2};
  throw std::invalid_argument("unknown shift preset: " + name);
}

void cmd_gen_data(const GenDataArgs& a) {
  data::SceneSpec src = data::source_spec(a.classes, a.size, a.size);
  data::SceneSpec tgt = src;
  tgt.domain = data::Domain::kTarget;
  tgt.shift = shift_preset(a.shift);

  // The same per-split seed feeds both domains, so a source/target pair
  // shares geometry (and therefore labels) and differs only in appearance.
  const uint64_t train_seed = substream(a.seed, "split.train").raw();
  const uint64_t test_seed = substream(a.seed, "split.test").raw();

  struct Job {
    std::string dir;
    const data::SceneSpec* spec;
    int n;
    uint64_t seed;
  };
  const std::vector<Job> jobs = {
      {a.out + "/source/train", &src, a.n_train, train_seed},
      {a.out + "/source/test", &src, a.n_test, test_seed},
      {a.out + "/target/train", &tgt, a.n_train, train_seed},
      {a.out + "/target/test", &tgt, a.n_test, test_seed},
  };
  for (const Job& j : jobs) {
    data::build_dataset(j.n, *j.spec, j.seed, j.dir, a.force);
    std::cout << j.dir << "/manifest.json\n";
  }
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
  std::string train_dir, test_dir, out;
  std::string config;
  int epochs = -1;
  double lr = -1.0;
  int batch = -1;
  uint64_t seed = 0;
  bool seed_set = false;
  double min_miou = -1.0, stop_miou = -1.0;
};

void cmd_pretrain(const PretrainArgs& a) {
  train::AdaptConfig cfg =
      a.config.empty() ? train::AdaptConfig{} : train::load_config(a.config);
  if (a.epochs >= 0) cfg.pretrain_epochs = a.epochs;
  if (a.lr > 0) cfg.pretrain_lr = a.lr;
  if (a.batch > 0) cfg.batch = a.batch;
  if (a.seed_set) cfg.seed = a.seed;
  if (a.min_miou >= 0) cfg.pretrain_min_miou = a.min_miou;
  if (a.stop_miou >= 0) cfg.pretrain_stop_miou = a.stop_miou;

  data::DatasetManifest tr = data::load_manifest(a.train_dir);
  data::DatasetManifest te = data::load_manifest(a.test_dir);
  train::PretrainResult res = train::pretrain_source(tr, te, cfg, a.out);
  std::printf("pretrained %d epochs, checkpoint at %s\n", res.epochs_run, res.ckpt_dir.c_str());
  std::printf("source test mIoU = %.4f\n", res.test_scores.mean_iou);
}

// ------------------------------------------------------------------- adapt

struct AdaptArgs {
  std::string ckpt, train_dir, test_dir, out;
  std::string config;
  // trap options; supplying any of them is a hard error
  std::string source_data, source_train, source_test;
};

void write_run_record(const std::string& out_dir, const train::AdaptConfig& cfg,
                      const train::RunResult& res) {
  json j;
  const std::string path = out_dir + "/run.json";
  json figures = json::array();
  if (fs::exists(path)) {
    std::ifstream in(path);
    json old = json::parse(in);
    if (old.contains("figures")) figures = old["figures"];
  }
  j["id"] = fs::path(out_dir).filename().string();
  j["seed"] = cfg.seed;
  j["config"] = "config.txt";
  j["history"] = "history.csv";
  j["best"] = "best";
  j["last"] = "last";
  j["best_miou"] = res.best_miou;
  j["best_iteration"] = res.best_iteration;
  j["figures"] = figures;
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

void cmd_adapt(const AdaptArgs& a, const train::AdaptConfig& cfg) {
  if (!a.source_data.empty() || !a.source_train.empty() || !a.source_test.empty())
    throw std::invalid_argument("source-free mode forbids source data");
  data::DatasetManifest tr = data::load_manifest(a.train_dir);
  data::DatasetManifest te = data::load_manifest(a.test_dir);
  train::RunResult res = train::run_adaptation(cfg, a.ckpt, tr, te, a.out);
  write_run_record(a.out, cfg, res);
  double final_miou = std::nan("");
  for (auto it = res.history.rbegin(); it != res.history.rend(); ++it)
    if (it->has_eval) {
      final_miou = it->miou;
      break;
    }
  std::printf("run %s: %d history rows\n", a.out.c_str(), int(res.history.size()));
  std::printf("final target mIoU = %.4f, best = %.4f (iteration %d)\n", final_miou, res.best_miou,
              res.best_iteration);
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt, data_dir, out_csv;
  int batch = 8;
};

void cmd_eval(const EvalArgs& a) {
  train::CheckpointMeta meta = train::read_checkpoint_meta(a.ckpt);
  data::DatasetManifest m = data::load_manifest(a.data_dir);
  if (meta.num_classes != m.spec.num_classes)
    throw std::invalid_argument("checkpoint and dataset disagree on the class count");
  ModelConfig mc;
  mc.num_classes = meta.num_classes;
  SegModel model(mc, 0);
  train::load_checkpoint(a.ckpt, model.store);
  metrics::SegScores s = train::evaluate_model(model, m, a.batch);

  std::printf("%-10s %s\n", "class", "iou");
  for (size_t c = 0; c < s.iou.size(); ++c) {
    if (std::isnan(s.iou[c]))
      std::printf("%-10zu -\n", c);
    else
      std::printf("%-10zu %.4f\n", c, s.iou[c]);
  }
  std::printf("mIoU %.4f  PA %.4f  mPA %.4f\n", s.mean_iou, s.pixel_accuracy,
              s.mean_pixel_accuracy);
  if (!a.out_csv.empty()) metrics::write_iou_csv(a.out_csv, s);
}

// -------------------------------------------------------------------- plot

struct PlotArgs {
  std::vector<std::string> runs;
  std::string out;
  int samples = 8;
};

struct RunInfo {
  std::string dir;
  train::AdaptConfig cfg;
  std::vector<train::HistoryRow> rows;
  double best_miou = 0.0;
};

RunInfo load_run(const std::string& dir) {
  RunInfo r;
  r.dir = dir;
  r.cfg = train::load_config(dir + "/config.txt");
  r.rows = train::read_history_csv(dir + "/history.csv", r.cfg);
  if (r.rows.empty()) throw std::invalid_argument("empty history in " + dir);
  r.best_miou = train::read_checkpoint_meta(dir + "/best").miou;
  return r;
}

std::string fmt_val(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// One small panel per loss term plus a mIoU panel, each with its own scale.
cv::Mat draw_loss_curves(const RunInfo& run) {
  std::vector<std::string> series;
  for (const auto& c : train::history_columns(run.cfg))
    if (c != "iteration" && c != "epoch" && c != "mpa") series.push_back(c);

  const int cw = 380, ch = 260, ncols = 3;
  const int nrows = (int(series.size()) + ncols - 1) / ncols;
  cv::Mat img(nrows * ch, ncols * cw, CV_8UC3, cv::Scalar(255, 255, 255));

  for (size_t si = 0; si < series.size(); ++si) {
    const std::string& name = series[si];
    std::vector<cv::Point2d> pts;
    double lo = 0, hi = 0;
    bool first = true;
    for (const auto& r : run.rows) {
      const double v = train::history_cell(r, name);
      if (!std::isfinite(v)) continue;
      pts.emplace_back(double(r.iteration), v);
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
    const int ox = int(si) % ncols * cw, oy = int(si) / ncols * ch;
    const cv::Rect box(ox + 46, oy + 34, cw - 66, ch - 64);
    cv::rectangle(img, box, cv::Scalar(180, 180, 180));
    cv::putText(img, name, {ox + 46, oy + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
    if (pts.empty()) continue;
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double xmax = std::max(1.0, pts.back().x);
    auto map = [&](const cv::Point2d& p) {
      int x = box.x + int(std::lround(p.x / xmax * (box.width - 1)));
      int y = box.y + box.height - 1 - int(std::lround((p.y - lo) / (hi - lo) * (box.height - 1)));
      return cv::Point(x, y);
    };
    const cv::Scalar color(180, 90, 30);
    if (pts.size() == 1) {
      cv::circle(img, map(pts[0]), 3, color, cv::FILLED);
    } else {
      for (size_t i = 0; i + 1 < pts.size(); ++i)
        cv::line(img, map(pts[i]), map(pts[i + 1]), color, 1, cv::LINE_AA);
    }
    cv::putText(img, fmt_val(hi), {ox + 4, box.y + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                cv::Scalar(90, 90, 90), 1, cv::LINE_AA);
    cv::putText(img, fmt_val(lo), {ox + 4, box.y + box.height - 2}, cv::FONT_HERSHEY_SIMPLEX,
                0.35, cv::Scalar(90, 90, 90), 1, cv::LINE_AA);
    cv::putText(img, "last " + fmt_val(pts.back().y), {ox + 46, oy + ch - 12},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
  }
  return img;
}

cv::Mat draw_k_sweep(std::vector<RunInfo> runs) {
  std::sort(runs.begin(), runs.end(),
            [](const RunInfo& a, const RunInfo& b) { return a.cfg.patch_k < b.cfg.patch_k; });
  const int w = 640, h = 420;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(img, "best target mIoU by patch count K", {20, 28}, cv::FONT_HERSHEY_SIMPLEX, 0.6,
              cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
  const cv::Rect box(60, 50, w - 90, h - 110);
  cv::rectangle(img, box, cv::Scalar(180, 180, 180));
  double hi = 0;
  for (const auto& r : runs) hi = std::max(hi, r.best_miou);
  hi = std::max(hi * 1.15, 1e-6);
  const int n = int(runs.size());
  const int slot = box.width / n;
  for (int i = 0; i < n; ++i) {
    const int bw = std::max(12, slot / 2);
    const int x = box.x + i * slot + (slot - bw) / 2;
    const int bh = int(std::lround(runs[i].best_miou / hi * (box.height - 4)));
    cv::rectangle(img, cv::Rect(x, box.y + box.height - bh, bw, bh), cv::Scalar(160, 110, 40),
                  cv::FILLED);
    cv::putText(img, "K=" + std::to_string(runs[i].cfg.patch_k), {x, box.y + box.height + 24},
                cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", runs[i].best_miou);
    cv::putText(img, buf, {x, box.y + box.height - bh - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
  }
  return img;
}

cv::Vec3b class_color(int c) {
  static const cv::Vec3b table[] = {
      {96, 64, 32},  {64, 160, 64}, {40, 40, 200},  {40, 200, 200}, {200, 80, 200},
      {220, 150, 40}, {40, 120, 230}, {160, 160, 160}, {130, 60, 130}, {60, 200, 140},
  };
  return table[size_t(c) % (sizeof table / sizeof table[0])];
}

cv::Mat tensor_to_bgr(const Tensor& img3, int64_t offset, int h, int w) {
  cv::Mat m(h, w, CV_8UC3);
  const int64_t plane = int64_t(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int64_t p = offset + int64_t(y) * w + x;
      const auto q = [&](int ch) {
        return uchar(std::lround(255.0 * std::clamp(img3[p + ch * plane], 0.0, 1.0)));
      };
      m.at<cv::Vec3b>(y, x) = {q(2), q(1), q(0)};
    }
  return m;
}

/// Top row: generator samples; bottom row: the student's predicted maps.
cv::Mat draw_samples(const RunInfo& run, int n) {
  train::CheckpointMeta meta = train::read_checkpoint_meta(run.dir + "/best");
  ModelConfig mc;
  mc.num_classes = meta.num_classes;
  mc.gen_latent = run.cfg.latent;
  mc.gen_image = run.cfg.fake_size;
  mc.disc_classes = run.cfg.patch_k * run.cfg.patch_k;
  Generator gen(mc, 0);
  SegModel model(mc, 0);
  nn::Archive ar = nn::Archive::read(run.dir + "/last/state.bin");
  gen.store.import_from(ar, "gen.");
  model.store.import_from(ar, "shared.");

  NoGradGuard ng;
  Rng zr = substream(run.cfg.seed, "plot.z");
  Tensor z({n, mc.gen_latent});
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = zr.normal();
  Variable fake = gen.forward(Variable(z), /*train_bn=*/true, /*update_running=*/false);
  SegModel::FwdOpts o;
  o.need_probs = false;
  Tensor labels = metrics::argmax_labels(model.forward(fake, o).logits.value());

  const int hw = mc.gen_image, scale = std::max(1, 128 / hw), cell = hw * scale, margin = 6;
  cv::Mat img(2 * cell + 3 * margin, n * cell + (n + 1) * margin, CV_8UC3,
              cv::Scalar(255, 255, 255));
  for (int i = 0; i < n; ++i) {
    cv::Mat pic = tensor_to_bgr(fake.value(), int64_t(i) * 3 * hw * hw, hw, hw);
    cv::Mat lab(hw, hw, CV_8UC3);
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x)
        lab.at<cv::Vec3b>(y, x) =
            class_color(int(labels[int64_t(i) * hw * hw + int64_t(y) * hw + x]));
    cv::Mat big_pic, big_lab;
    cv::resize(pic, big_pic, {}, scale, scale, cv::INTER_NEAREST);
    cv::resize(lab, big_lab, {}, scale, scale, cv::INTER_NEAREST);
    const int x0 = margin + i * (cell + margin);
    big_pic.copyTo(img(cv::Rect(x0, margin, cell, cell)));
    big_lab.copyTo(img(cv::Rect(x0, 2 * margin + cell, cell, cell)));
  }
  return img;
}

void record_figures(const std::string& run_dir, const std::vector<std::string>& figures) {
  const std::string path = run_dir + "/run.json";
  if (!fs::exists(path)) return;
  json j;
  {
    std::ifstream in(path);
    j = json::parse(in);
  }
  std::vector<std::string> have = j.value("figures", std::vector<std::string>{});
  for (const auto& f : figures)
    if (std::find(have.begin(), have.end(), f) == have.end()) have.push_back(f);
  j["figures"] = have;
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

void cmd_plot(const PlotArgs& a) {
  std::vector<RunInfo> runs;
  for (const auto& d : a.runs) runs.push_back(load_run(d));
  const std::string out = a.out.empty() ? runs.front().dir : a.out;
  fs::create_directories(out);

  std::vector<std::string> made;
  const std::string curves = out + "/loss_curves.png";
  cv::imwrite(curves, draw_loss_curves(runs.front()));
  made.push_back(curves);
  if (runs.size() > 1) {
    const std::string sweep = out + "/miou_vs_k.png";
    cv::imwrite(sweep, draw_k_sweep(runs));
    made.push_back(sweep);
  }
  const std::string samples = out + "/samples.png";
  cv::imwrite(samples, draw_samples(runs.front(), a.samples));
  made.push_back(samples);

  for (const auto& f : made) std::cout << f << "\n";
  record_figures(runs.front().dir, made);
  if (runs.size() > 1)
    for (size_t i = 1; i < runs.size(); ++i)
      record_figures(runs[i].dir, {out + "/miou_vs_k.png"});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"source-free domain adaptation on toy segmentation scenes"};
  app.require_subcommand(1);

  GenDataArgs gd;
  CLI::App* gen = app.add_subcommand("gen-data", "generate paired source/target splits");
  gen->add_option("--out", gd.out, "output root directory");
  gen->add_option("--classes", gd.classes, "number of classes");
  gen->add_option("--size", gd.size, "square image size");
  gen->add_option("--n-train", gd.n_train, "training samples per split");
  gen->add_option("--n-test", gd.n_test, "test samples per split");
  gen->add_option("--seed", gd.seed, "dataset seed");
  gen->add_option("--shift", gd.shift, "domain shift preset: default|mild|strong");
  gen->add_flag("--force", gd.force, "overwrite existing splits");
  gen->callback([&] { cmd_gen_data(gd); });

  PretrainArgs pt;
  CLI::App* pre = app.add_subcommand("pretrain", "train the source model");
  pre->add_option("--train", pt.train_dir, "source train split directory")->required();
  pre->add_option("--test", pt.test_dir, "source test split directory")->required();
  pre->add_option("--out", pt.out, "checkpoint directory")->required();
  pre->add_option("--config", pt.config, "config file");
  pre->add_option("--epochs", pt.epochs, "pretraining epoch budget");
  pre->add_option("--lr", pt.lr, "pretraining learning rate");
  pre->add_option("--batch", pt.batch, "batch size");
  CLI::Option* pse = pre->add_option("--seed", pt.seed, "seed");
  pre->add_option("--min-miou", pt.min_miou, "source-test quality gate");
  pre->add_option("--stop-miou", pt.stop_miou, "early-stop threshold");
  pre->callback([&] {
    pt.seed_set = pse->count() > 0;
    cmd_pretrain(pt);
  });

  AdaptArgs ad;
  train::AdaptConfig acfg;
  std::string adapt_config_file;
  CLI::App* adp = app.add_subcommand("adapt", "source-free adaptation to the target domain");
  adp->add_option("--ckpt", ad.ckpt, "source checkpoint directory")->required();
  adp->add_option("--train", ad.train_dir, "target train split directory")->required();
  adp->add_option("--test", ad.test_dir, "target test split (labels used for evaluation only)")
      ->required();
  adp->add_option("--out", ad.out, "run output directory")->required();
  adp->add_option("--config", adapt_config_file, "config file");
  CLI::Option* o_epochs = adp->add_option("--epochs", acfg.epochs, "adaptation epochs");
  CLI::Option* o_k = adp->add_option("-K,--patch-k", acfg.patch_k, "patch grid size");
  CLI::Option* o_batch = adp->add_option("--batch", acfg.batch, "batch size (even)");
  CLI::Option* o_seed = adp->add_option("--seed", acfg.seed, "run seed");
  CLI::Option* o_alpha = adp->add_option("--alpha", acfg.weights.alpha, "prediction-distill weight");
  CLI::Option* o_beta = adp->add_option("--beta", acfg.weights.beta, "attention-distill weight");
  CLI::Option* o_tau = adp->add_option("--tau", acfg.weights.tau, "cross-domain attention weight");
  CLI::Option* o_gamma = adp->add_option("--gamma", acfg.weights.gamma, "adversarial patch weight");
  CLI::Option* o_seg_lr = adp->add_option("--seg-lr", acfg.seg_lr, "student learning rate");
  CLI::Option* o_gen_lr = adp->add_option("--gen-lr", acfg.gen_lr, "generator learning rate");
  CLI::Option* o_disc_lr = adp->add_option("--disc-lr", acfg.disc_lr, "discriminator learning rate");
  CLI::Option* o_fake = adp->add_option("--fake-size", acfg.fake_size, "synthetic sample resolution");
  CLI::Option* o_latent = adp->add_option("--latent", acfg.latent, "generator latent width");
  bool no_bns = false, no_dad = false, no_ipsm = false, transfer_only = false, train_proj = false;
  adp->add_flag("--no-bns", no_bns, "drop the statistics term");
  adp->add_flag("--no-dad", no_dad, "drop the attention terms");
  adp->add_flag("--no-ipsm", no_ipsm, "drop the patch branch");
  adp->add_flag("--transfer-only", transfer_only, "distill into a fresh model, no target losses");
  adp->add_flag("--dam-train-proj", train_proj, "train the attention projections");
  // The whole point is adaptation without source data; naming a source split
  // here is rejected outright.
  adp->add_option("--source-data", ad.source_data, "(forbidden)")->group("");
  adp->add_option("--source-train", ad.source_train, "(forbidden)")->group("");
  adp->add_option("--source-test", ad.source_test, "(forbidden)")->group("");
  adp->callback([&] {
    train::AdaptConfig cfg =
        adapt_config_file.empty() ? train::AdaptConfig{} : train::load_config(adapt_config_file);
    if (o_epochs->count()) cfg.epochs = acfg.epochs;
    if (o_k->count()) cfg.patch_k = acfg.patch_k;
    if (o_batch->count()) cfg.batch = acfg.batch;
    if (o_seed->count()) cfg.seed = acfg.seed;
    if (o_alpha->count()) cfg.weights.alpha = acfg.weights.alpha;
    if (o_beta->count()) {
      cfg.weights.beta = acfg.weights.beta;
      if (!o_tau->count()) cfg.weights.tau = acfg.weights.beta;  // tau tracks beta
    }
    if (o_tau->count()) cfg.weights.tau = acfg.weights.tau;
    if (o_gamma->count()) cfg.weights.gamma = acfg.weights.gamma;
    if (o_seg_lr->count()) cfg.seg_lr = acfg.seg_lr;
    if (o_gen_lr->count()) cfg.gen_lr = acfg.gen_lr;
    if (o_disc_lr->count()) cfg.disc_lr = acfg.disc_lr;
    if (o_fake->count()) cfg.fake_size = acfg.fake_size;
    if (o_latent->count()) cfg.latent = acfg.latent;
    if (no_bns) cfg.use_bns = false;
    if (no_dad) cfg.use_dad = false;
    if (no_ipsm) cfg.use_ipsm = false;
    if (transfer_only) cfg.transfer_only = true;
    if (train_proj) cfg.dam_train_proj = true;
    cmd_adapt(ad, cfg);
  });

  EvalArgs ev;
  CLI::App* evl = app.add_subcommand("eval", "score a checkpoint on a labeled split");
  evl->add_option("--ckpt", ev.ckpt, "checkpoint directory")->required();
  evl->add_option("--data", ev.data_dir, "split directory")->required();
  evl->add_option("--batch", ev.batch, "batch size");
  evl->add_option("--out", ev.out_csv, "write the per-class IoU table to this CSV");
  evl->callback([&] { cmd_eval(ev); });

  PlotArgs pl;
  CLI::App* plt = app.add_subcommand("plot", "emit figures for one or more runs");
  plt->add_option("runs", pl.runs, "run directories")->required()->expected(-1);
  plt->add_option("--out", pl.out, "figure output directory (default: first run)");
  plt->add_option("--samples", pl.samples, "generator samples in the grid figure");
  plt->callback([&] { cmd_plot(pl); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const train::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
