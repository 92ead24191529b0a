#include "sfda/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "sfda/ipsm.hpp"
#include "sfda/ops.hpp"

namespace fs = std::filesystem;

namespace sfda {
namespace train {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for '" + key + "': " + v);
  }
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int i = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return i;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for '" + key + "': " + v);
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    uint64_t i = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return i;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad seed for '" + key + "': " + v);
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean for '" + key + "': " + v);
}

void apply_key(AdaptConfig& c, const std::string& key, const std::string& v, bool& tau_set) {
  if (key == "alpha") c.weights.alpha = parse_double(key, v);
  else if (key == "beta") c.weights.beta = parse_double(key, v);
  else if (key == "tau") { c.weights.tau = parse_double(key, v); tau_set = true; }
  else if (key == "gamma") c.weights.gamma = parse_double(key, v);
  else if (key == "patch_k") c.patch_k = parse_int(key, v);
  else if (key == "batch") c.batch = parse_int(key, v);
  else if (key == "epochs") c.epochs = parse_int(key, v);
  else if (key == "seg_lr") c.seg_lr = parse_double(key, v);
  else if (key == "seg_momentum") c.seg_momentum = parse_double(key, v);
  else if (key == "seg_weight_decay") c.seg_weight_decay = parse_double(key, v);
  else if (key == "seg_poly_power") c.seg_poly_power = parse_double(key, v);
  else if (key == "gen_lr") c.gen_lr = parse_double(key, v);
  else if (key == "disc_lr") c.disc_lr = parse_double(key, v);
  else if (key == "fake_size") c.fake_size = parse_int(key, v);
  else if (key == "latent") c.latent = parse_int(key, v);
  else if (key == "seed") c.seed = parse_u64(key, v);
  else if (key == "use_bns") c.use_bns = parse_bool(key, v);
  else if (key == "use_dad") c.use_dad = parse_bool(key, v);
  else if (key == "use_ipsm") c.use_ipsm = parse_bool(key, v);
  else if (key == "transfer_only") c.transfer_only = parse_bool(key, v);
  else if (key == "dam_train_proj") c.dam_train_proj = parse_bool(key, v);
  else if (key == "frozen_bn_eval") c.frozen_bn_eval = parse_bool(key, v);
  else if (key == "shared_bn_update") c.shared_bn_update = parse_bool(key, v);
  else if (key == "pretrain_lr") c.pretrain_lr = parse_double(key, v);
  else if (key == "pretrain_epochs") c.pretrain_epochs = parse_int(key, v);
  else if (key == "pretrain_min_miou") c.pretrain_min_miou = parse_double(key, v);
  else if (key == "pretrain_stop_miou") c.pretrain_stop_miou = parse_double(key, v);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void require_finite(double v, const char* term, int iteration) {
  if (!std::isfinite(v))
    throw NumericalAbort(std::string(term) + " went non-finite at iteration " +
                         std::to_string(iteration + 1));
}

Variable zero_scalar() { return Variable(Tensor({1}, 0.0)); }

void zero_all(TrainState& st) {
  st.frozen->store.zero_grad();
  st.shared->store.zero_grad();
  st.gen->store.zero_grad();
  st.dam->store.zero_grad();
  if (st.disc) st.disc->store.zero_grad();
}

Tensor sample_latent(TrainState& st) {
  if (st.fixed_z) {
    const auto& z = *st.fixed_z;
    if (z.shape() != std::vector<int>{st.cfg.batch, st.mc.gen_latent})
      throw std::invalid_argument("fixed_z shape mismatch");
    return z;
  }
  Tensor z({st.cfg.batch, st.mc.gen_latent});
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = st.rng.normal();
  return z;
}

double poly_lr(const AdaptConfig& cfg, int iter, int max_iter) {
  double frac = double(iter) / double(std::max(1, max_iter));
  frac = std::clamp(frac, 0.0, 1.0);
  return cfg.seg_lr * std::pow(1.0 - frac, cfg.seg_poly_power);
}

void write_meta(const std::string& dir, const CheckpointMeta& m) {
  std::ofstream out(dir + "/meta.txt");
  if (!out) throw std::runtime_error("cannot write " + dir + "/meta.txt");
  out << "kind = " << m.kind << "\n"
      << "num_classes = " << m.num_classes << "\n"
      << "epoch = " << m.epoch << "\n"
      << "iteration = " << m.iteration << "\n"
      << "seed = " << m.seed << "\n"
      << "miou = " << fmt(m.miou) << "\n";
}

/// Full training state (student, generator, DAM, discriminator, optimizer
/// moments) in one archive, used for resuming.
void save_run_state(const TrainState& st, const std::string& dir) {
  nn::Archive ar;
  st.shared->store.export_to(ar, "shared.");
  st.gen->store.export_to(ar, "gen.");
  st.dam->store.export_to(ar, "dam.");
  if (st.disc) st.disc->store.export_to(ar, "disc.");
  for (auto& [k, t] : st.seg_opt->export_state("opt.seg.")) ar.put(k, std::move(t));
  for (auto& [k, t] : st.gen_opt->export_state("opt.gen.")) ar.put(k, std::move(t));
  if (st.disc_opt)
    for (auto& [k, t] : st.disc_opt->export_state("opt.disc.")) ar.put(k, std::move(t));
  ar.write(dir + "/state.bin");
}

void load_run_state(TrainState& st, const std::string& dir) {
  nn::Archive ar = nn::Archive::read(dir + "/state.bin");
  st.shared->store.import_from(ar, "shared.");
  st.gen->store.import_from(ar, "gen.");
  st.dam->store.import_from(ar, "dam.");
  if (st.disc) st.disc->store.import_from(ar, "disc.");
  st.seg_opt->import_state(ar, "opt.seg.");
  st.gen_opt->import_state(ar, "opt.gen.");
  if (st.disc_opt) st.disc_opt->import_state(ar, "opt.disc.");
}

}  // namespace

AdaptConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config: " + path);
  AdaptConfig cfg;
  bool tau_set = false;
  std::string line;
  while (std::getline(in, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: malformed line '" + line + "'");
    apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), tau_set);
  }
  if (!tau_set) cfg.weights.tau = cfg.weights.beta;
  return cfg;
}

void save_config(const AdaptConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config: " + path);
  out << "# loss weights\n"
      << "alpha = " << fmt(c.weights.alpha) << "\n"
      << "beta = " << fmt(c.weights.beta) << "\n"
      << "tau = " << fmt(c.weights.tau) << "\n"
      << "gamma = " << fmt(c.weights.gamma) << "\n"
      << "# schedule\n"
      << "patch_k = " << c.patch_k << "\n"
      << "batch = " << c.batch << "\n"
      << "epochs = " << c.epochs << "\n"
      << "seg_lr = " << fmt(c.seg_lr) << "\n"
      << "seg_momentum = " << fmt(c.seg_momentum) << "\n"
      << "seg_weight_decay = " << fmt(c.seg_weight_decay) << "\n"
      << "seg_poly_power = " << fmt(c.seg_poly_power) << "\n"
      << "gen_lr = " << fmt(c.gen_lr) << "\n"
      << "disc_lr = " << fmt(c.disc_lr) << "\n"
      << "fake_size = " << c.fake_size << "\n"
      << "latent = " << c.latent << "\n"
      << "seed = " << c.seed << "\n"
      << "# ablations\n"
      << "use_bns = " << (c.use_bns ? "true" : "false") << "\n"
      << "use_dad = " << (c.use_dad ? "true" : "false") << "\n"
      << "use_ipsm = " << (c.use_ipsm ? "true" : "false") << "\n"
      << "transfer_only = " << (c.transfer_only ? "true" : "false") << "\n"
      << "# plumbing\n"
      << "dam_train_proj = " << (c.dam_train_proj ? "true" : "false") << "\n"
      << "frozen_bn_eval = " << (c.frozen_bn_eval ? "true" : "false") << "\n"
      << "shared_bn_update = " << (c.shared_bn_update ? "true" : "false") << "\n"
      << "# source pretraining\n"
      << "pretrain_lr = " << fmt(c.pretrain_lr) << "\n"
      << "pretrain_epochs = " << c.pretrain_epochs << "\n"
      << "pretrain_min_miou = " << fmt(c.pretrain_min_miou) << "\n"
      << "pretrain_stop_miou = " << fmt(c.pretrain_stop_miou) << "\n";
}

void validate_config(const AdaptConfig& c, int image_h, int image_w) {
  if (c.batch < 2 || c.batch % 2 != 0)
    throw std::invalid_argument("config: batch must be even and >= 2");
  if (c.patch_k < 1 || c.patch_k > 5)
    throw std::invalid_argument("config: patch_k must lie in [1,5]");
  if (c.epochs < 0) throw std::invalid_argument("config: negative epoch count");
  if (!(c.seg_lr > 0) || !(c.gen_lr > 0) || !(c.disc_lr > 0))
    throw std::invalid_argument("config: learning rates must be positive");
  auto ok_weight = [](double w) { return std::isfinite(w) && w >= 0.0; };
  if (!ok_weight(c.weights.alpha) || !ok_weight(c.weights.beta) || !ok_weight(c.weights.tau) ||
      !ok_weight(c.weights.gamma))
    throw std::invalid_argument("config: loss weights must be finite and non-negative");
  if (image_h <= 0 || image_w <= 0) throw std::invalid_argument("config: bad image dims");
  if (image_h % SegModel::kStride != 0 || image_w % SegModel::kStride != 0)
    throw std::invalid_argument("config: image dims must be divisible by the model stride");
  if (image_h % c.patch_k != 0 || image_w % c.patch_k != 0)
    throw std::invalid_argument("config: image dims must be divisible by patch_k");
  if (c.fake_size <= 0 || c.fake_size % SegModel::kStride != 0)
    throw std::invalid_argument("config: fake_size must be divisible by the model stride");
  if (c.latent <= 0) throw std::invalid_argument("config: latent dim must be positive");
  if (c.pretrain_epochs < 0) throw std::invalid_argument("config: negative pretrain epochs");
}

void save_checkpoint(const std::string& dir, const nn::ParamStore& store, const CheckpointMeta& meta) {
  fs::create_directories(dir);
  nn::Archive ar;
  store.export_to(ar, "");
  ar.write(dir + "/params.bin");
  write_meta(dir, meta);
}

CheckpointMeta read_checkpoint_meta(const std::string& dir) {
  std::ifstream in(dir + "/meta.txt");
  if (!in) throw std::invalid_argument("cannot open checkpoint meta: " + dir + "/meta.txt");
  CheckpointMeta m;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad checkpoint meta line: " + line);
    std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (key == "kind") m.kind = v;
    else if (key == "num_classes") m.num_classes = parse_int(key, v);
    else if (key == "epoch") m.epoch = parse_int(key, v);
    else if (key == "iteration") m.iteration = parse_int(key, v);
    else if (key == "seed") m.seed = parse_u64(key, v);
    else if (key == "miou") m.miou = parse_double(key, v);
    else throw std::runtime_error("bad checkpoint meta key: " + key);
  }
  return m;
}

void load_checkpoint(const std::string& dir, nn::ParamStore& store) {
  nn::Archive ar = nn::Archive::read(dir + "/params.bin");
  store.import_from(ar, "");
}

std::vector<std::string> history_columns(const AdaptConfig& cfg) {
  std::vector<std::string> cols = {"iteration", "epoch", "l_gen"};
  if (cfg.use_bns) cols.push_back("l_bns");
  cols.push_back("l_mae");
  if (cfg.use_dad) {
    cols.push_back("l_dad_ss");
    cols.push_back("l_dad_st");
  }
  if (!cfg.transfer_only) cols.push_back("l_tar");
  if (ipsm_active(cfg)) {
    cols.push_back("l_adv_t");
    cols.push_back("l_adv_d");
  }
  cols.push_back("miou");
  cols.push_back("mpa");
  return cols;
}

double history_cell(const HistoryRow& r, const std::string& col) {
  if (col == "iteration") return double(r.iteration);
  if (col == "epoch") return double(r.epoch);
  if (col == "l_gen") return r.has_losses ? r.gen : std::nan("");
  if (col == "l_bns") return r.has_losses ? r.bns : std::nan("");
  if (col == "l_mae") return r.has_losses ? r.mae : std::nan("");
  if (col == "l_dad_ss") return r.has_losses ? r.dad_ss : std::nan("");
  if (col == "l_dad_st") return r.has_losses ? r.dad_st : std::nan("");
  if (col == "l_tar") return r.has_losses ? r.tar : std::nan("");
  if (col == "l_adv_t") return r.has_losses ? r.adv_t : std::nan("");
  if (col == "l_adv_d") return r.has_losses ? r.adv_d : std::nan("");
  if (col == "miou") return r.has_eval ? r.miou : std::nan("");
  if (col == "mpa") return r.has_eval ? r.mpa : std::nan("");
  throw std::logic_error("unknown history column " + col);
}

namespace {

void set_cell(HistoryRow& r, const std::string& col, double v) {
  if (col == "l_gen") r.gen = v;
  else if (col == "l_bns") r.bns = v;
  else if (col == "l_mae") r.mae = v;
  else if (col == "l_dad_ss") r.dad_ss = v;
  else if (col == "l_dad_st") r.dad_st = v;
  else if (col == "l_tar") r.tar = v;
  else if (col == "l_adv_t") r.adv_t = v;
  else if (col == "l_adv_d") r.adv_d = v;
  else if (col == "miou") r.miou = v;
  else if (col == "mpa") r.mpa = v;
}

}  // namespace

void write_history_csv(const std::string& path, const AdaptConfig& cfg,
                       const std::vector<HistoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write history: " + path);
  const auto cols = history_columns(cfg);
  for (size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  out << std::setprecision(12);
  for (const auto& r : rows) {
    out << r.iteration << "," << r.epoch;
    for (size_t i = 2; i < cols.size(); ++i) {
      out << ",";
      const double v = history_cell(r, cols[i]);
      if (std::isfinite(v)) out << v;
    }
    out << "\n";
  }
}

std::vector<HistoryRow> read_history_csv(const std::string& path, const AdaptConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open history: " + path);
  const auto cols = history_columns(cfg);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("history is empty: " + path);
  {
    std::ostringstream want;
    for (size_t i = 0; i < cols.size(); ++i) want << (i ? "," : "") << cols[i];
    if (trim(line) != want.str())
      throw std::runtime_error("history columns do not match the config: " + path);
  }
  std::vector<HistoryRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    cells.resize(cols.size());  // trailing empty cells drop out of getline
    HistoryRow r;
    r.iteration = parse_int("iteration", cells[0]);
    r.epoch = parse_int("epoch", cells[1]);
    for (size_t i = 2; i < cols.size(); ++i) {
      if (trim(cells[i]).empty()) continue;
      set_cell(r, cols[i], parse_double(cols[i], trim(cells[i])));
      if (cols[i] == "miou" || cols[i] == "mpa") r.has_eval = true;
      else r.has_losses = true;
    }
    rows.push_back(r);
  }
  return rows;
}

TrainState make_state(const AdaptConfig& cfg, const ModelConfig& mc,
                      const std::string& source_ckpt_dir, int max_iterations) {
  TrainState st;
  st.cfg = cfg;
  st.mc = mc;
  st.mc.gen_latent = cfg.latent;
  st.mc.gen_image = cfg.fake_size;
  st.mc.disc_classes = cfg.patch_k * cfg.patch_k;

  st.frozen = std::make_unique<SegModel>(st.mc, substream(cfg.seed, "init.frozen").raw());
  load_checkpoint(source_ckpt_dir, st.frozen->store);
  st.frozen->store.set_requires_grad(false);
  st.frozen_checksum = st.frozen->store.checksum();
  st.source_stats = bn_snapshot(*st.frozen);

  st.shared = std::make_unique<SegModel>(st.mc, substream(cfg.seed, "init.shared").raw());
  if (!cfg.transfer_only) load_checkpoint(source_ckpt_dir, st.shared->store);

  st.gen = std::make_unique<Generator>(st.mc, substream(cfg.seed, "init.gen").raw());
  st.dam = std::make_unique<DualAttention>(SegModel::kFeatChannels,
                                           substream(cfg.seed, "init.dam").raw());
  st.dam->store.set_requires_grad(cfg.dam_train_proj);

  auto seg_params = st.shared->store.params();
  if (cfg.dam_train_proj)
    for (auto& p : st.dam->store.params()) seg_params.push_back(p);
  st.seg_opt = std::make_unique<nn::Sgd>(std::move(seg_params), cfg.seg_lr, cfg.seg_momentum,
                                         cfg.seg_weight_decay);
  st.gen_opt = std::make_unique<nn::Adam>(st.gen->store.params(), cfg.gen_lr);
  if (ipsm_active(cfg)) {
    st.disc = std::make_unique<PatchDiscriminator>(st.mc, substream(cfg.seed, "init.disc").raw());
    st.disc_opt = std::make_unique<nn::Adam>(st.disc->store.params(), cfg.disc_lr);
  }

  st.rng = substream(cfg.seed, "adapt.state");
  st.max_iterations = std::max(1, max_iterations);
  return st;
}

HistoryRow knowledge_transfer_step(TrainState& st, const Tensor& target_images) {
  const AdaptConfig& cfg = st.cfg;
  HistoryRow row;
  row.iteration = st.iteration + 1;
  row.has_losses = true;

  // ---- stage one: generator step ----
  // Gradients may flow through the student's activations into the fakes, but
  // neither teacher nor student parameters move here.
  zero_all(st);
  st.shared->store.set_requires_grad(false);
  st.dam->store.set_requires_grad(false);

  Variable fake1 = st.gen->forward(Variable(sample_latent(st)), /*train_bn=*/true,
                                   /*update_running=*/false);

  SegModel::FwdOpts fopts;
  fopts.train_bn = !cfg.frozen_bn_eval;
  fopts.capture_bn_inputs = cfg.use_bns;
  SegModel::Out f_out = st.frozen->forward(fake1, fopts);

  SegModel::FwdOpts sopts;
  sopts.train_bn = true;
  SegModel::Out s_out = st.shared->forward(fake1, sopts);

  Variable l_bns = zero_scalar();
  Variable l_dad_ss_g = zero_scalar();
  Variable l_dad_st = zero_scalar();
  Variable l_mae_g = losses::mae(s_out.probs, f_out.probs);
  if (cfg.use_bns) {
    BatchBNStats stats;
    for (const auto& x : f_out.bn_inputs) {
      stats.mean.push_back(ops::mean_nhw(x));
      stats.var.push_back(ops::var_nhw(x));
    }
    l_bns = losses::bns(stats, st.source_stats);
  }
  if (cfg.use_dad) {
    AttentionPack fp = st.dam->forward(f_out.feat);
    AttentionPack sp = st.dam->forward(s_out.feat);
    l_dad_ss_g = losses::dad_ss(fp, sp);

    // The pooled target-side attention is a constant for this step.
    Tensor ts, tc;
    {
      NoGradGuard ng;
      SegModel::FwdOpts topts;
      topts.train_bn = true;
      topts.need_probs = false;
      SegModel::Out t_out = st.shared->forward(Variable(target_images), topts);
      AttentionPack tp = st.dam->forward(
          adapt_pool(t_out.feat, f_out.feat.value().dim(2), f_out.feat.value().dim(3)));
      ts = tp.spatial.value();
      tc = tp.channel.value();
    }
    l_dad_st = losses::dad_st(fp.spatial, fp.channel, Variable(ts), Variable(tc));
  }
  Variable l_gen = losses::generator_objective(l_bns, l_mae_g, l_dad_ss_g, l_dad_st, cfg.weights);
  row.gen = l_gen.scalar();
  require_finite(row.gen, "generator objective", st.iteration);
  if (cfg.use_bns) {
    row.bns = l_bns.scalar();
    require_finite(row.bns, "l_bns", st.iteration);
  }
  if (cfg.use_dad) {
    row.dad_st = l_dad_st.scalar();
    require_finite(row.dad_st, "l_dad_st", st.iteration);
  }
  l_gen.backward();
  st.gen_opt->step();
  st.shared->store.set_requires_grad(true);
  st.dam->store.set_requires_grad(cfg.dam_train_proj);

  // ---- stage two: student step on fakes from the updated generator ----
  zero_all(st);
  {
    NoGradGuard ng;
    Variable fake2 = st.gen->forward(Variable(sample_latent(st)), /*train_bn=*/true,
                                     /*update_running=*/true);
    st.fake_cache = fake2.value();
    SegModel::FwdOpts f2;
    f2.train_bn = !cfg.frozen_bn_eval;
    SegModel::Out fr = st.frozen->forward(Variable(st.fake_cache), f2);
    st.frozen_fake_probs = fr.probs.value();
    st.frozen_fake_feat = fr.feat.value();
    st.have_fake = true;
  }
  SegModel::FwdOpts s2;
  s2.train_bn = true;
  s2.update_running = cfg.shared_bn_update;
  SegModel::Out sh = st.shared->forward(Variable(st.fake_cache), s2);
  Variable l_mae = losses::mae(sh.probs, Variable(st.frozen_fake_probs));
  Variable l_dad = zero_scalar();
  if (cfg.use_dad) {
    AttentionPack fp = st.dam->forward(Variable(st.frozen_fake_feat));
    AttentionPack sp = st.dam->forward(sh.feat);
    l_dad = losses::dad_ss(fp, sp);
  }
  Variable obj = losses::transfer_objective(l_mae, l_dad, cfg.weights);
  row.mae = l_mae.scalar();
  require_finite(row.mae, "l_mae", st.iteration);
  if (cfg.use_dad) {
    row.dad_ss = l_dad.scalar();
    require_finite(row.dad_ss, "l_dad_ss", st.iteration);
  }
  require_finite(obj.scalar(), "transfer objective", st.iteration);
  obj.backward();
  st.seg_opt->set_lr(poly_lr(cfg, st.iteration, st.max_iterations));
  st.seg_opt->step();
  return row;
}

HistoryRow model_adaptation_step(TrainState& st, const Tensor& target_images) {
  const AdaptConfig& cfg = st.cfg;
  if (cfg.transfer_only)
    throw std::logic_error("model_adaptation_step called in transfer-only mode");
  if (target_images.dim(0) % 2 != 0)
    throw std::invalid_argument("adaptation requires an even batch");
  HistoryRow row;
  row.iteration = st.iteration + 1;
  row.has_losses = true;

  zero_all(st);
  const bool patches_on = ipsm_active(cfg);
  if (patches_on) st.disc->store.set_requires_grad(false);

  SegModel::FwdOpts topts;
  topts.train_bn = true;
  topts.update_running = cfg.shared_bn_update;
  SegModel::Out t_out = st.shared->forward(Variable(target_images), topts);
  Variable l_tar = losses::max_square(t_out.probs);
  row.tar = l_tar.scalar();
  require_finite(row.tar, "l_tar", st.iteration);

  Variable l_adv_t = zero_scalar();
  Variable grid;
  ipsm::EasyHardSplit split;
  if (patches_on) {
    grid = ipsm::split_into_patches(t_out.probs, cfg.patch_k);
    split = ipsm::rank_easy_hard(ipsm::patch_entropies(grid.value()));
    const auto hard = split.hard_pairs();
    std::vector<int> hard_ids;
    hard_ids.reserve(hard.size());
    for (const auto& p : hard) hard_ids.push_back(p.second);
    Variable scores = st.disc->forward(ops::gather_patches(grid, hard), hard_ids);
    l_adv_t = losses::adv_t(scores);
    row.adv_t = l_adv_t.scalar();
    require_finite(row.adv_t, "l_adv_t", st.iteration);
  }

  // Reuse the cached fake batch so every distillation term stays defined
  // during adaptation. Running stats already saw these fakes in the transfer
  // step, so this pass leaves them alone.
  Variable l_mae = zero_scalar();
  Variable l_dad = zero_scalar();
  const bool fake_terms =
      st.have_fake && (cfg.weights.alpha != 0.0 || (cfg.use_dad && cfg.weights.beta != 0.0));
  if (fake_terms) {
    SegModel::FwdOpts fop;
    fop.train_bn = true;
    SegModel::Out sh = st.shared->forward(Variable(st.fake_cache), fop);
    l_mae = losses::mae(sh.probs, Variable(st.frozen_fake_probs));
    if (cfg.use_dad) {
      AttentionPack fp = st.dam->forward(Variable(st.frozen_fake_feat));
      AttentionPack sp = st.dam->forward(sh.feat);
      l_dad = losses::dad_ss(fp, sp);
    }
  }
  Variable obj = losses::adaptation_objective(l_tar, l_mae, l_dad, l_adv_t, cfg.weights);
  require_finite(obj.scalar(), "adaptation objective", st.iteration);
  obj.backward();
  st.seg_opt->set_lr(poly_lr(cfg, st.iteration, st.max_iterations));
  st.seg_opt->step();

  if (patches_on) {
    st.disc->store.set_requires_grad(true);
    zero_all(st);
    Variable grid_const(grid.value());  // the discriminator never trains the student
    const auto easy = split.easy_pairs();
    const auto hard = split.hard_pairs();
    std::vector<int> easy_ids, hard_ids;
    for (const auto& p : easy) easy_ids.push_back(p.second);
    for (const auto& p : hard) hard_ids.push_back(p.second);
    Variable es = st.disc->forward(ops::gather_patches(grid_const, easy), easy_ids);
    Variable hs = st.disc->forward(ops::gather_patches(grid_const, hard), hard_ids);
    Variable l_d = losses::adv_d(es, hs);
    row.adv_d = l_d.scalar();
    require_finite(row.adv_d, "l_adv_d", st.iteration);
    l_d.backward();
    st.disc_opt->step();
  }
  return row;
}

metrics::SegScores evaluate_model(const SegModel& model, const data::DatasetManifest& m, int batch) {
  if (m.count == 0) throw std::invalid_argument("evaluate_model: empty split");
  if (batch < 1) throw std::invalid_argument("evaluate_model: bad batch size");
  metrics::ConfusionMatrix cm(static_cast<size_t>(model.num_classes()));
  NoGradGuard ng;
  for (int start = 0; start < m.count; start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(start + batch, m.count); ++i) idx.push_back(i);
    auto [imgs, labs] = data::load_batch(m, idx);
    SegModel::FwdOpts o;
    o.need_probs = false;
    SegModel::Out out = model.forward(Variable(imgs), o);
    cm.add(metrics::argmax_labels(out.logits.value()), labs);
  }
  return metrics::iou_scores(cm);
}

double pretrain_step(SegModel& model, nn::Sgd& opt, const Tensor& images, const Tensor& labels) {
  model.store.zero_grad();
  SegModel::FwdOpts o;
  o.train_bn = true;
  o.update_running = true;
  o.need_probs = false;
  SegModel::Out out = model.forward(Variable(images), o);
  Variable ce = ops::cross_entropy(out.logits, labels);
  const double loss = ce.scalar();
  ce.backward();
  opt.step();
  return loss;
}

PretrainResult pretrain_source(const data::DatasetManifest& train_m,
                               const data::DatasetManifest& test_m, const AdaptConfig& cfg,
                               const std::string& out_dir) {
  if (train_m.count == 0) throw std::invalid_argument("pretrain: empty train split");
  if (test_m.count == 0) throw std::invalid_argument("pretrain: empty test split");
  validate_config(cfg, train_m.spec.height, train_m.spec.width);
  if (cfg.pretrain_epochs == 0)
    throw std::invalid_argument("pretrain: gate unreachable with a zero-epoch budget");

  ModelConfig mc;
  mc.num_classes = train_m.spec.num_classes;
  SegModel model(mc, substream(cfg.seed, "init.pretrain").raw());
  nn::Sgd opt(model.store.params(), cfg.pretrain_lr, cfg.seg_momentum, cfg.seg_weight_decay);

  const int bs = std::min(cfg.batch, train_m.count);
  const int iters_per_epoch = std::max(1, train_m.count / bs);
  const int64_t max_iters = int64_t(iters_per_epoch) * cfg.pretrain_epochs;
  Rng order_rng = substream(cfg.seed, "pretrain.order");

  PretrainResult res;
  int64_t it = 0;
  for (int e = 0; e < cfg.pretrain_epochs; ++e) {
    std::vector<int> idx(size_t(train_m.count));
    std::iota(idx.begin(), idx.end(), 0);
    order_rng.shuffle(idx);
    for (int b = 0; b < iters_per_epoch; ++b) {
      std::vector<int> slice(idx.begin() + int64_t(b) * bs, idx.begin() + int64_t(b) * bs + bs);
      auto [imgs, labs] = data::load_batch(train_m, slice);
      opt.set_lr(cfg.pretrain_lr *
                 std::pow(1.0 - double(it) / double(max_iters), cfg.seg_poly_power));
      const double loss = pretrain_step(model, opt, imgs, labs);
      if (!std::isfinite(loss))
        throw NumericalAbort("pretraining loss went non-finite at iteration " +
                             std::to_string(it + 1));
      ++it;
    }
    res.epochs_run = e + 1;
    res.test_scores = evaluate_model(model, test_m, cfg.batch);
    if (res.test_scores.mean_iou >= cfg.pretrain_stop_miou) break;
  }
  if (!(res.test_scores.mean_iou >= cfg.pretrain_min_miou)) {
    std::ostringstream os;
    os << "pretrain: gate unreachable, source test mIoU " << std::setprecision(4)
       << res.test_scores.mean_iou << " < " << cfg.pretrain_min_miou << " after "
       << res.epochs_run << " epochs";
    throw std::runtime_error(os.str());
  }
  CheckpointMeta meta;
  meta.kind = "pretrain";
  meta.num_classes = mc.num_classes;
  meta.epoch = res.epochs_run;
  meta.iteration = int(it);
  meta.seed = cfg.seed;
  meta.miou = res.test_scores.mean_iou;
  save_checkpoint(out_dir, model.store, meta);
  res.ckpt_dir = out_dir;
  return res;
}

RunResult run_adaptation(const AdaptConfig& cfg, const std::string& source_ckpt_dir,
                         const data::DatasetManifest& target_train,
                         const data::DatasetManifest& target_test, const std::string& out_dir) {
  validate_config(cfg, target_train.spec.height, target_train.spec.width);
  if (target_train.spec.num_classes != target_test.spec.num_classes)
    throw std::invalid_argument("target splits disagree on the class count");
  if (target_test.count == 0) throw std::invalid_argument("empty target test split");
  if (cfg.epochs > 0 && target_train.count < cfg.batch)
    throw std::invalid_argument("target train split smaller than one batch");

  ModelConfig mc;
  mc.num_classes = target_train.spec.num_classes;
  const int iters_per_epoch = cfg.epochs > 0 ? target_train.count / cfg.batch : 0;
  TrainState st = make_state(cfg, mc, source_ckpt_dir, cfg.epochs * iters_per_epoch);

  fs::create_directories(out_dir);
  const std::string best_dir = out_dir + "/best";
  const std::string last_dir = out_dir + "/last";
  const std::string csv = out_dir + "/history.csv";
  if (!fs::exists(out_dir + "/config.txt")) save_config(cfg, out_dir + "/config.txt");

  std::vector<HistoryRow> history;
  int start_epoch = 0;
  double best_miou = -1.0;
  int best_iteration = 0;

  auto meta_for = [&](const std::string& kind, int epoch, double miou) {
    CheckpointMeta m;
    m.kind = kind;
    m.num_classes = st.mc.num_classes;
    m.epoch = epoch;
    m.iteration = st.iteration;
    m.seed = cfg.seed;
    m.miou = miou;
    return m;
  };
  auto save_last = [&](int epoch, double miou) {
    save_checkpoint(last_dir, st.shared->store, meta_for("adapt-last", epoch, miou));
    save_run_state(st, last_dir);
  };

  if (fs::exists(last_dir + "/meta.txt")) {
    CheckpointMeta lm = read_checkpoint_meta(last_dir);
    load_run_state(st, last_dir);
    st.iteration = lm.iteration;
    start_epoch = lm.epoch;
    history = read_history_csv(csv, cfg);
    CheckpointMeta bm = read_checkpoint_meta(best_dir);
    best_miou = bm.miou;
    best_iteration = bm.iteration;
  } else {
    metrics::SegScores s0 = evaluate_model(*st.shared, target_test, cfg.batch);
    HistoryRow r0;
    r0.has_eval = true;
    r0.miou = s0.mean_iou;
    r0.mpa = s0.mean_pixel_accuracy;
    history.push_back(r0);
    best_miou = s0.mean_iou;
    save_checkpoint(best_dir, st.shared->store, meta_for("adapt-best", 0, best_miou));
    save_last(0, s0.mean_iou);
    write_history_csv(csv, cfg, history);
  }

  for (int e = start_epoch; e < cfg.epochs; ++e) {
    std::vector<int> idx(size_t(target_train.count));
    std::iota(idx.begin(), idx.end(), 0);
    Rng order = substream(cfg.seed, "adapt.order", uint64_t(e));
    order.shuffle(idx);
    for (int b = 0; b < iters_per_epoch; ++b) {
      st.rng = substream(cfg.seed, "adapt.iter", uint64_t(st.iteration));
      std::vector<int> slice(idx.begin() + int64_t(b) * cfg.batch,
                             idx.begin() + int64_t(b) * cfg.batch + cfg.batch);
      auto [imgs, labs] = data::load_batch(target_train, slice);
      (void)labs;  // target labels feed evaluation only, never training
      HistoryRow row = knowledge_transfer_step(st, imgs);
      if (!cfg.transfer_only) {
        HistoryRow arow = model_adaptation_step(st, imgs);
        row.tar = arow.tar;
        row.adv_t = arow.adv_t;
        row.adv_d = arow.adv_d;
      }
      st.iteration += 1;
      row.epoch = e + 1;
      history.push_back(row);
    }
    metrics::SegScores sc = evaluate_model(*st.shared, target_test, cfg.batch);
    history.back().has_eval = true;
    history.back().miou = sc.mean_iou;
    history.back().mpa = sc.mean_pixel_accuracy;
    if (sc.mean_iou > best_miou) {
      best_miou = sc.mean_iou;
      best_iteration = st.iteration;
      save_checkpoint(best_dir, st.shared->store, meta_for("adapt-best", e + 1, best_miou));
    }
    save_last(e + 1, sc.mean_iou);
    write_history_csv(csv, cfg, history);
  }

  if (st.frozen->store.checksum() != st.frozen_checksum)
    throw std::logic_error("teacher parameters changed during adaptation");

  write_history_csv(csv, cfg, history);
  RunResult res;
  res.history = std::move(history);
  res.best_miou = best_miou;
  res.best_iteration = best_iteration;
  res.best_dir = best_dir;
  res.last_dir = last_dir;
  res.history_csv = csv;
  return res;
}

}  // namespace train
}  // namespace sfda
