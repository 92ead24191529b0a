#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "sfda/adapt.hpp"
#include "sfda/ipsm.hpp"
#include "sfda/ops.hpp"

using namespace sfda;
namespace fs = std::filesystem;

namespace {

struct GlobalCleanup {
  GlobalCleanup() { fs::remove_all("adapt_tmp"); }
} cleanup_once;

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::path("adapt_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
};

train::AdaptConfig tiny_cfg() {
  train::AdaptConfig c;
  c.batch = 4;
  c.epochs = 1;
  c.patch_k = 2;
  c.fake_size = 16;
  c.latent = 32;
  c.seed = 11;
  return c;
}

Tensor stack_images(const data::SceneSpec& spec, const std::vector<uint64_t>& seeds) {
  Tensor out({int(seeds.size()), 3, spec.height, spec.width});
  const int64_t n = int64_t(3) * spec.height * spec.width;
  for (size_t i = 0; i < seeds.size(); ++i) {
    data::LabeledSample s = data::generate_scene(seeds[i], spec);
    std::copy(s.image.data(), s.image.data() + n, out.data() + int64_t(i) * n);
  }
  return out;
}

/// A source "checkpoint" whose BN running stats have seen real source scenes;
/// good enough for exercising the training mechanics.
std::string warm_ckpt(const std::string& dir, int classes, int hw, uint64_t seed) {
  ModelConfig mc;
  mc.num_classes = classes;
  SegModel m(mc, seed);
  data::SceneSpec spec = data::source_spec(classes, hw, hw);
  for (uint64_t i = 0; i < 3; ++i) {
    NoGradGuard ng;
    SegModel::FwdOpts o;
    o.train_bn = true;
    o.update_running = true;
    o.need_probs = false;
    m.forward(Variable(stack_images(spec, {900 + 2 * i, 901 + 2 * i})), o);
  }
  train::CheckpointMeta meta;
  meta.kind = "pretrain";
  meta.num_classes = classes;
  meta.seed = seed;
  meta.miou = 0.5;
  train::save_checkpoint(dir, m.store, meta);
  return dir;
}

const data::DatasetManifest& target_train_split() {
  static data::DatasetManifest m = data::build_dataset(
      8, data::target_spec(4, 32, 32), 501, "adapt_tmp/data/train");
  return m;
}
const data::DatasetManifest& target_test_split() {
  static data::DatasetManifest m = data::build_dataset(
      4, data::target_spec(4, 32, 32), 502, "adapt_tmp/data/test");
  return m;
}

}  // namespace

TEST_CASE("config files parse, default tau tracks beta, bad input rejected") {
  TmpDir tmp("config");
  const std::string p = (tmp.path / "a.txt").string();
  {
    std::ofstream f(p);
    f << "# comment\n"
         "beta = 0.3\n"
         "patch_k = 3   # trailing comment\n"
         "use_ipsm = false\n";
  }
  train::AdaptConfig c = train::load_config(p);
  CHECK(c.weights.beta == 0.3);
  CHECK(c.weights.tau == 0.3);  // tracks beta unless set
  CHECK(c.patch_k == 3);
  CHECK_FALSE(c.use_ipsm);
  CHECK(c.weights.alpha == 1.0);

  {
    std::ofstream f(p);
    f << "beta = 0.3\ntau = 0.7\n";
  }
  CHECK(train::load_config(p).weights.tau == 0.7);

  auto expect_reject = [&](const std::string& body) {
    std::ofstream f(p);
    f << body;
    f.close();
    CHECK_THROWS(train::load_config(p));
  };
  expect_reject("no_such_key = 1\n");
  expect_reject("alpha 0.5\n");
  expect_reject("alpha = zebra\n");
  expect_reject("batch = 4.5\n");
  expect_reject("use_bns = maybe\n");
  CHECK_THROWS(train::load_config((tmp.path / "missing.txt").string()));

  // full round-trip
  train::AdaptConfig a = tiny_cfg();
  a.weights.alpha = 0.25;
  a.weights.tau = 0.125;
  a.use_dad = false;
  a.transfer_only = true;
  a.pretrain_lr = 0.07;
  const std::string q = (tmp.path / "b.txt").string();
  train::save_config(a, q);
  train::AdaptConfig b = train::load_config(q);
  CHECK(b.weights.alpha == a.weights.alpha);
  CHECK(b.weights.tau == a.weights.tau);
  CHECK(b.patch_k == a.patch_k);
  CHECK(b.batch == a.batch);
  CHECK(b.use_dad == a.use_dad);
  CHECK(b.transfer_only == a.transfer_only);
  CHECK(b.pretrain_lr == a.pretrain_lr);
  CHECK(b.seed == a.seed);
}

TEST_CASE("config validation") {
  train::AdaptConfig c = tiny_cfg();
  train::validate_config(c, 32, 32);  // fine

  auto bad = [&](auto mutate, int h = 32, int w = 32) {
    train::AdaptConfig m = tiny_cfg();
    mutate(m);
    CHECK_THROWS(train::validate_config(m, h, w));
  };
  bad([](auto& m) { m.batch = 5; });
  bad([](auto& m) { m.batch = 0; });
  bad([](auto& m) { m.patch_k = 0; });
  bad([](auto& m) { m.patch_k = 6; });
  bad([](auto& m) { m.epochs = -1; });
  bad([](auto& m) { m.seg_lr = 0.0; });
  bad([](auto& m) { m.weights.alpha = -0.5; });
  bad([](auto& m) { m.fake_size = 20; });
  bad([](auto& m) { m.latent = 0; });
  bad([](auto& m) { m.patch_k = 5; });             // 32 not divisible by 5
  bad([](auto& m) { (void)m; }, 30, 32);           // stride
  bad([](auto& m) { (void)m; }, 0, 32);
  train::AdaptConfig k5 = tiny_cfg();
  k5.patch_k = 5;
  train::validate_config(k5, 40, 40);  // 40 = 8*5
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  TmpDir tmp("ckpt");
  ModelConfig mc;
  mc.num_classes = 4;
  SegModel a(mc, 33);
  train::CheckpointMeta meta;
  meta.kind = "pretrain";
  meta.num_classes = 4;
  meta.epoch = 7;
  meta.iteration = 91;
  meta.seed = 33;
  meta.miou = 0.8125;
  const std::string dir = (tmp.path / "c").string();
  train::save_checkpoint(dir, a.store, meta);

  train::CheckpointMeta r = train::read_checkpoint_meta(dir);
  CHECK(r.kind == "pretrain");
  CHECK(r.num_classes == 4);
  CHECK(r.epoch == 7);
  CHECK(r.iteration == 91);
  CHECK(r.seed == 33);
  CHECK(r.miou == 0.8125);

  SegModel b(mc, 1234);  // different init, fully overwritten by the load
  CHECK(b.store.checksum() != a.store.checksum());
  train::load_checkpoint(dir, b.store);
  CHECK(b.store.checksum() == a.store.checksum());

  CHECK_THROWS(train::read_checkpoint_meta((tmp.path / "nope").string()));
  CHECK_THROWS(train::load_checkpoint((tmp.path / "nope").string(), b.store));
}

TEST_CASE("history columns follow the ablation flags") {
  train::AdaptConfig c = tiny_cfg();
  auto cols = train::history_columns(c);
  auto has = [&](const char* n) {
    return std::find(cols.begin(), cols.end(), std::string(n)) != cols.end();
  };
  CHECK(cols.front() == "iteration");
  CHECK(has("l_gen"));
  CHECK(has("l_bns"));
  CHECK(has("l_mae"));
  CHECK(has("l_dad_ss"));
  CHECK(has("l_dad_st"));
  CHECK(has("l_tar"));
  CHECK(has("l_adv_t"));
  CHECK(has("l_adv_d"));
  CHECK(has("miou"));

  c.use_ipsm = false;
  cols = train::history_columns(c);
  CHECK_FALSE(has("l_adv_t"));
  CHECK_FALSE(has("l_adv_d"));
  CHECK(has("l_tar"));

  c = tiny_cfg();
  c.patch_k = 1;  // one patch = no patch branch
  cols = train::history_columns(c);
  CHECK_FALSE(has("l_adv_t"));

  c = tiny_cfg();
  c.transfer_only = true;
  cols = train::history_columns(c);
  CHECK_FALSE(has("l_tar"));
  CHECK_FALSE(has("l_adv_t"));
  CHECK(has("l_mae"));

  c = tiny_cfg();
  c.use_bns = false;
  CHECK_FALSE([&] {
    auto cc = train::history_columns(c);
    return std::find(cc.begin(), cc.end(), std::string("l_bns")) != cc.end();
  }());

  c = tiny_cfg();
  c.use_dad = false;
  cols = train::history_columns(c);
  CHECK_FALSE(has("l_dad_ss"));
  CHECK_FALSE(has("l_dad_st"));
}

TEST_CASE("history csv round-trips") {
  TmpDir tmp("hist");
  train::AdaptConfig c = tiny_cfg();
  std::vector<train::HistoryRow> rows;
  train::HistoryRow r0;
  r0.has_eval = true;
  r0.miou = 0.25;
  r0.mpa = 0.5;
  rows.push_back(r0);
  train::HistoryRow r1;
  r1.iteration = 1;
  r1.epoch = 1;
  r1.has_losses = true;
  r1.gen = -0.125;
  r1.bns = 3.5;
  r1.mae = 0.0625;
  r1.dad_ss = 0.03125;
  r1.dad_st = 0.015625;
  r1.tar = -0.5;
  r1.adv_t = 0.7;
  r1.adv_d = 1.4;
  r1.has_eval = true;
  r1.miou = 0.375;
  r1.mpa = 0.625;
  rows.push_back(r1);

  const std::string p = (tmp.path / "h.csv").string();
  train::write_history_csv(p, c, rows);
  auto back = train::read_history_csv(p, c);
  REQUIRE(back.size() == 2);
  CHECK_FALSE(back[0].has_losses);
  CHECK(back[0].has_eval);
  CHECK(back[0].miou == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(back[1].has_losses);
  CHECK(back[1].iteration == 1);
  CHECK(back[1].gen == doctest::Approx(-0.125).epsilon(1e-9));
  CHECK(back[1].adv_d == doctest::Approx(1.4).epsilon(1e-9));
  CHECK(back[1].miou == doctest::Approx(0.375).epsilon(1e-9));

  // a different column set must refuse to load this file
  train::AdaptConfig other = tiny_cfg();
  other.use_ipsm = false;
  CHECK_THROWS(train::read_history_csv(p, other));
  CHECK_THROWS(train::read_history_csv((tmp.path / "missing.csv").string(), c));
}

TEST_CASE("supervised loss decreases over the first steps on one repeated sample") {
  ModelConfig mc;
  mc.num_classes = 4;
  SegModel model(mc, 5);
  nn::Sgd opt(model.store.params(), 0.01, 0.9, 1e-4);

  data::SceneSpec spec = data::source_spec(4, 32, 32);
  data::LabeledSample s = data::generate_scene(77, spec);
  Tensor images({2, 3, 32, 32});
  Tensor labels({2, 32, 32});
  for (int b = 0; b < 2; ++b) {
    std::copy(s.image.data(), s.image.data() + s.image.numel(),
              images.data() + b * s.image.numel());
    std::copy(s.labels.data(), s.labels.data() + s.labels.numel(),
              labels.data() + b * s.labels.numel());
  }
  std::vector<double> losses;
  for (int i = 0; i < 10; ++i) losses.push_back(train::pretrain_step(model, opt, images, labels));
  for (size_t i = 0; i + 1 < losses.size(); ++i) CHECK(losses[i + 1] < losses[i]);
}

TEST_CASE("pretrain entry point: gates and reload-stable metrics") {
  TmpDir tmp("pretrain");
  data::SceneSpec spec = data::source_spec(4, 32, 32);
  data::DatasetManifest tr = data::build_dataset(8, spec, 601, (tmp.path / "train").string());
  data::DatasetManifest te = data::build_dataset(4, spec, 602, (tmp.path / "test").string());

  train::AdaptConfig c = tiny_cfg();
  c.pretrain_epochs = 0;
  CHECK_THROWS_WITH_AS(train::pretrain_source(tr, te, c, (tmp.path / "out0").string()),
                       doctest::Contains("gate unreachable"), std::invalid_argument);

  c.pretrain_epochs = 1;
  c.pretrain_min_miou = 0.999;  // one epoch on 8 samples cannot reach this
  CHECK_THROWS_WITH_AS(train::pretrain_source(tr, te, c, (tmp.path / "out1").string()),
                       doctest::Contains("gate unreachable"), std::runtime_error);

  c.pretrain_min_miou = 0.0;  // mechanics only; the real gate is exercised end to end
  c.pretrain_stop_miou = 2.0;
  train::PretrainResult res = train::pretrain_source(tr, te, c, (tmp.path / "out2").string());
  CHECK(res.epochs_run == 1);
  CHECK(fs::exists(tmp.path / "out2" / "params.bin"));
  CHECK(train::read_checkpoint_meta(res.ckpt_dir).kind == "pretrain");

  // reload -> identical metrics
  ModelConfig mc;
  mc.num_classes = 4;
  SegModel reloaded(mc, 999);
  train::load_checkpoint(res.ckpt_dir, reloaded.store);
  metrics::SegScores again = train::evaluate_model(reloaded, te, c.batch);
  CHECK(again.mean_iou == res.test_scores.mean_iou);
  CHECK(again.pixel_accuracy == res.test_scores.pixel_accuracy);
}

TEST_CASE("make_state wiring") {
  TmpDir tmp("state");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 21);
  ModelConfig mc;
  mc.num_classes = 4;

  train::AdaptConfig c = tiny_cfg();
  train::TrainState st = train::make_state(c, mc, ckpt, 10);
  CHECK(st.frozen->store.checksum() == st.shared->store.checksum());  // student starts at the teacher
  CHECK(st.frozen_checksum == st.frozen->store.checksum());
  for (const auto& p : st.frozen->store.params()) CHECK_FALSE(p.requires_grad());
  for (const auto& p : st.shared->store.params()) CHECK(p.requires_grad());
  for (const auto& p : st.dam->store.params()) CHECK_FALSE(p.requires_grad());  // identity-frozen
  REQUIRE(st.disc != nullptr);
  CHECK(st.disc->patch_classes() == 4);  // K^2
  CHECK(st.source_stats.layers.size() == size_t(st.frozen->bn_layer_count()));
  CHECK(st.mc.gen_image == 16);
  CHECK(st.mc.gen_latent == 32);

  train::AdaptConfig c1 = tiny_cfg();
  c1.patch_k = 1;
  CHECK(train::make_state(c1, mc, ckpt, 10).disc == nullptr);
  train::AdaptConfig c2 = tiny_cfg();
  c2.use_ipsm = false;
  CHECK(train::make_state(c2, mc, ckpt, 10).disc == nullptr);

  train::AdaptConfig c3 = tiny_cfg();
  c3.transfer_only = true;
  train::TrainState st3 = train::make_state(c3, mc, ckpt, 10);
  CHECK(st3.shared->store.checksum() != st3.frozen->store.checksum());  // fresh student
  CHECK(st3.disc == nullptr);
}

TEST_CASE("pure-statistics generator run: bns trend is downward") {
  TmpDir tmp("bns_trend");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 22);
  ModelConfig mc;
  mc.num_classes = 4;

  train::AdaptConfig c = tiny_cfg();
  c.weights.alpha = 0.0;
  c.weights.beta = 0.0;
  c.weights.tau = 0.0;
  c.use_dad = false;
  c.use_ipsm = false;
  train::TrainState st = train::make_state(c, mc, ckpt, 50);

  Rng zrng(4242);
  Tensor z({c.batch, c.latent});
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = zrng.normal();
  st.fixed_z = z;

  Tensor target = stack_images(data::target_spec(4, 32, 32), {1, 2, 3, 4});
  std::vector<double> bns;
  for (int i = 0; i < 50; ++i) {
    train::HistoryRow r = train::knowledge_transfer_step(st, target);
    CHECK(std::isfinite(r.gen));
    bns.push_back(r.bns);
  }
  const double first = std::accumulate(bns.begin(), bns.begin() + 10, 0.0) / 10.0;
  const double last = std::accumulate(bns.end() - 10, bns.end(), 0.0) / 10.0;
  CHECK(last < first);
  CHECK(bns.back() < bns.front());
}

TEST_CASE("discriminator trend on a fixed split") {
  TmpDir tmp("d_trend");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 16, 23);
  ModelConfig mc;
  mc.num_classes = 4;
  train::AdaptConfig c = tiny_cfg();
  train::TrainState st = train::make_state(c, mc, ckpt, 20);
  REQUIRE(st.disc != nullptr);

  Tensor probs;
  {
    NoGradGuard ng;
    SegModel::FwdOpts o;
    o.train_bn = true;
    Tensor target = stack_images(data::target_spec(4, 16, 16), {11, 12, 13, 14});
    probs = st.shared->forward(Variable(target), o).probs.value();
  }
  Variable grid(ipsm::split_into_patches(Variable(probs), c.patch_k).value());
  ipsm::EasyHardSplit split = ipsm::rank_easy_hard(ipsm::patch_entropies(grid.value()));
  std::vector<int> easy_ids, hard_ids;
  for (const auto& p : split.easy_pairs()) easy_ids.push_back(p.second);
  for (const auto& p : split.hard_pairs()) hard_ids.push_back(p.second);

  std::vector<double> ld;
  for (int i = 0; i < 20; ++i) {
    st.disc->store.zero_grad();
    Variable es = st.disc->forward(ops::gather_patches(grid, split.easy_pairs()), easy_ids);
    Variable hs = st.disc->forward(ops::gather_patches(grid, split.hard_pairs()), hard_ids);
    Variable l = losses::adv_d(es, hs);
    ld.push_back(l.scalar());
    l.backward();
    st.disc_opt->step();
  }
  CHECK(ld.back() < ld.front());
  const double first = std::accumulate(ld.begin(), ld.begin() + 5, 0.0) / 5.0;
  const double last = std::accumulate(ld.end() - 5, ld.end(), 0.0) / 5.0;
  CHECK(last < first);
}

TEST_CASE("teacher stays bit-frozen while everything else trains") {
  TmpDir tmp("frozen");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 3, 16, 24);
  ModelConfig mc;
  mc.num_classes = 3;
  train::AdaptConfig c = tiny_cfg();
  c.batch = 2;
  train::TrainState st = train::make_state(c, mc, ckpt, 100);

  const uint64_t frozen0 = st.frozen->store.checksum();
  const uint64_t shared0 = st.shared->store.checksum();
  const uint64_t gen0 = st.gen->store.checksum();
  const uint64_t disc0 = st.disc->store.checksum();

  data::SceneSpec spec = data::target_spec(3, 16, 16);
  for (int i = 0; i < 100; ++i) {
    st.rng = substream(c.seed, "it", uint64_t(i));
    Tensor target = stack_images(spec, {uint64_t(2 * i), uint64_t(2 * i + 1)});
    train::knowledge_transfer_step(st, target);
    train::model_adaptation_step(st, target);
    st.iteration += 1;
  }
  CHECK(st.frozen->store.checksum() == frozen0);
  CHECK(st.shared->store.checksum() != shared0);
  CHECK(st.gen->store.checksum() != gen0);
  CHECK(st.disc->store.checksum() != disc0);
  CHECK_FALSE(st.frozen->store.any_grad_nonzero());
}

TEST_CASE("K=1 runs exactly like the no-patch configuration") {
  TmpDir tmp("k1");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 16, 25);
  ModelConfig mc;
  mc.num_classes = 4;

  train::AdaptConfig ca = tiny_cfg();
  ca.patch_k = 1;  // patch branch off by construction
  train::AdaptConfig cb = tiny_cfg();
  cb.use_ipsm = false;

  train::TrainState sa = train::make_state(ca, mc, ckpt, 4);
  train::TrainState sb = train::make_state(cb, mc, ckpt, 4);

  data::SceneSpec spec = data::target_spec(4, 16, 16);
  for (int i = 0; i < 4; ++i) {
    std::vector<uint64_t> seeds = {uint64_t(40 + 4 * i), uint64_t(41 + 4 * i),
                                   uint64_t(42 + 4 * i), uint64_t(43 + 4 * i)};
    Tensor target = stack_images(spec, seeds);
    sa.rng = substream(7, "it", uint64_t(i));
    sb.rng = substream(7, "it", uint64_t(i));
    train::HistoryRow ra = train::knowledge_transfer_step(sa, target);
    train::HistoryRow rb = train::knowledge_transfer_step(sb, target);
    CHECK(ra.gen == rb.gen);
    CHECK(ra.mae == rb.mae);
    train::HistoryRow aa = train::model_adaptation_step(sa, target);
    train::HistoryRow ab = train::model_adaptation_step(sb, target);
    CHECK(aa.tar == ab.tar);
    CHECK(std::isnan(aa.adv_t));
    CHECK(std::isnan(ab.adv_t));
    sa.iteration += 1;
    sb.iteration += 1;
  }
  CHECK(sa.shared->store.checksum() == sb.shared->store.checksum());
  CHECK(sa.gen->store.checksum() == sb.gen->store.checksum());
}

TEST_CASE("zero-weight adaptation equals a plain max-square loop") {
  TmpDir tmp("maxsq");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 16, 26);
  ModelConfig mc;
  mc.num_classes = 4;

  train::AdaptConfig c = tiny_cfg();
  c.weights.alpha = 0.0;
  c.weights.beta = 0.0;
  c.weights.tau = 0.0;
  c.weights.gamma = 0.0;
  c.use_ipsm = false;

  data::SceneSpec spec = data::target_spec(4, 16, 16);
  std::vector<Tensor> batches;
  for (int i = 0; i < 5; ++i)
    batches.push_back(stack_images(spec, {uint64_t(60 + 4 * i), uint64_t(61 + 4 * i),
                                          uint64_t(62 + 4 * i), uint64_t(63 + 4 * i)}));

  train::TrainState st = train::make_state(c, mc, ckpt, 1);
  for (const Tensor& b : batches) {
    train::HistoryRow r = train::model_adaptation_step(st, b);
    CHECK(std::isfinite(r.tar));
  }

  // the reference: forward, max-square, SGD, nothing else
  SegModel ref(mc, substream(c.seed, "init.shared").raw());
  train::load_checkpoint(ckpt, ref.store);
  nn::Sgd opt(ref.store.params(), c.seg_lr, c.seg_momentum, c.seg_weight_decay);
  for (const Tensor& b : batches) {
    ref.store.zero_grad();
    SegModel::FwdOpts o;
    o.train_bn = true;
    o.update_running = c.shared_bn_update;
    Variable l = losses::max_square(ref.forward(Variable(b), o).probs);
    l.backward();
    opt.step();
  }
  CHECK(st.shared->store.checksum() == ref.store.checksum());
}

TEST_CASE("full run: history layout, determinism, artifacts") {
  TmpDir tmp("run");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 27);
  const auto& tr = target_train_split();
  const auto& te = target_test_split();

  train::AdaptConfig c = tiny_cfg();
  c.epochs = 2;  // 8 train samples / batch 4 -> 2 iterations per epoch
  train::RunResult a = train::run_adaptation(c, ckpt, tr, te, (tmp.path / "a").string());

  // layout: 1 initial eval row + 4 loss rows; eval merged into epoch-final rows
  REQUIRE(a.history.size() == 5);
  CHECK(a.history[0].has_eval);
  CHECK_FALSE(a.history[0].has_losses);
  CHECK(a.history[0].iteration == 0);
  for (size_t i = 1; i < a.history.size(); ++i) {
    CHECK(a.history[i].has_losses);
    CHECK(a.history[i].iteration == int(i));
    CHECK(a.history[i].iteration > a.history[i - 1].iteration);  // monotone
    CHECK(std::isfinite(a.history[i].tar));
    CHECK(std::isfinite(a.history[i].adv_t));
    CHECK(std::isfinite(a.history[i].adv_d));
  }
  CHECK(a.history[2].has_eval);
  CHECK(a.history[4].has_eval);
  CHECK_FALSE(a.history[1].has_eval);
  CHECK(fs::exists(a.best_dir + "/params.bin"));
  CHECK(fs::exists(a.last_dir + "/state.bin"));
  CHECK(fs::exists(a.history_csv));
  CHECK(fs::exists(tmp.path / "a" / "config.txt"));
  CHECK(train::read_checkpoint_meta(a.best_dir).miou == doctest::Approx(a.best_miou).epsilon(1e-12));

  // same seed, fresh directory -> identical history
  train::RunResult b = train::run_adaptation(c, ckpt, tr, te, (tmp.path / "b").string());
  REQUIRE(b.history.size() == a.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    if (a.history[i].has_losses) {
      CHECK(a.history[i].gen == doctest::Approx(b.history[i].gen).epsilon(1e-12));
      CHECK(a.history[i].tar == doctest::Approx(b.history[i].tar).epsilon(1e-12));
    }
    if (a.history[i].has_eval) CHECK(a.history[i].miou == doctest::Approx(b.history[i].miou).epsilon(1e-12));
  }

  // source-free by construction: nothing under any "source" directory was read
  data::io_trace::clear();
  train::RunResult c2 = train::run_adaptation(c, ckpt, tr, te, (tmp.path / "c").string());
  CHECK(c2.history.size() == a.history.size());
  CHECK(data::io_trace::any_under("adapt_tmp/data"));
  CHECK_FALSE(data::io_trace::any_under((tmp.path / "src").string()));
}

TEST_CASE("zero-epoch run reports the source metrics unchanged") {
  TmpDir tmp("zero");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 28);
  const auto& te = target_test_split();
  train::AdaptConfig c = tiny_cfg();
  c.epochs = 0;
  train::RunResult r = train::run_adaptation(c, ckpt, target_train_split(), te,
                                             (tmp.path / "out").string());
  REQUIRE(r.history.size() == 1);
  CHECK(r.history[0].has_eval);

  ModelConfig mc;
  mc.num_classes = 4;
  SegModel src(mc, 1);
  train::load_checkpoint(ckpt, src.store);
  metrics::SegScores direct = train::evaluate_model(src, te, c.batch);
  CHECK(r.history[0].miou == direct.mean_iou);
  CHECK(r.best_miou == direct.mean_iou);
}

TEST_CASE("interrupted runs pick up from the last checkpoint") {
  TmpDir tmp("resume");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 29);
  const auto& tr = target_train_split();
  const auto& te = target_test_split();
  const std::string out = (tmp.path / "out").string();

  train::AdaptConfig c = tiny_cfg();
  c.epochs = 1;
  train::RunResult first = train::run_adaptation(c, ckpt, tr, te, out);
  REQUIRE(first.history.size() == 3);  // eval + 2 iterations

  c.epochs = 2;
  train::RunResult second = train::run_adaptation(c, ckpt, tr, te, out);
  REQUIRE(second.history.size() == 5);
  // the first leg is preserved verbatim
  for (size_t i = 0; i < first.history.size(); ++i) {
    CHECK(second.history[i].iteration == first.history[i].iteration);
    if (first.history[i].has_losses)
      CHECK(second.history[i].gen == doctest::Approx(first.history[i].gen).epsilon(1e-9));
  }
  CHECK(second.history[3].iteration == 3);
  CHECK(second.history[4].has_eval);

  // re-running a finished schedule is a no-op
  train::RunResult third = train::run_adaptation(c, ckpt, tr, te, out);
  CHECK(third.history.size() == second.history.size());
  CHECK(third.best_miou == second.best_miou);
}

TEST_CASE("transfer-only distillation trains a fresh student") {
  TmpDir tmp("transfer");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 30);
  train::AdaptConfig c = tiny_cfg();
  c.transfer_only = true;
  c.epochs = 1;
  train::RunResult r = train::run_adaptation(c, ckpt, target_train_split(), target_test_split(),
                                             (tmp.path / "out").string());
  REQUIRE(r.history.size() == 3);
  for (size_t i = 1; i < r.history.size(); ++i) {
    CHECK(std::isfinite(r.history[i].gen));
    CHECK(std::isfinite(r.history[i].mae));
    CHECK(std::isnan(r.history[i].tar));
    CHECK(std::isnan(r.history[i].adv_t));
  }
  // the csv lacks the adaptation columns
  std::ifstream in(r.history_csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("l_tar") == std::string::npos);
  CHECK(header.find("l_adv") == std::string::npos);
  CHECK(header.find("l_mae") != std::string::npos);
}

TEST_CASE("run rejects bad inputs") {
  TmpDir tmp("reject");
  const std::string ckpt = warm_ckpt((tmp.path / "src").string(), 4, 32, 31);
  train::AdaptConfig c = tiny_cfg();
  c.epochs = 1;
  c.batch = 100;  // larger than the split
  CHECK_THROWS(train::run_adaptation(c, ckpt, target_train_split(), target_test_split(),
                                     (tmp.path / "o1").string()));
  train::AdaptConfig odd = tiny_cfg();
  odd.batch = 3;
  CHECK_THROWS(train::run_adaptation(odd, ckpt, target_train_split(), target_test_split(),
                                     (tmp.path / "o2").string()));
}
