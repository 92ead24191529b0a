#include "sfda/losses.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "sfda/ops.hpp"

namespace sfda {
namespace losses {

namespace {

constexpr double kSimplexTol = 1e-4;
constexpr double kKlEps = 1e-8;
constexpr double kLogEps = 1e-12;

Variable constant(const Tensor& t) { return Variable(t, false); }

void check_simplex_channels(const Tensor& probs, const char* who) {
  if (probs.rank() != 4) {
    throw std::invalid_argument(std::string(who) + ": expected (B,C,H,W) probabilities, got " +
                                probs.shape_str());
  }
  const std::size_t b = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  const double* p = probs.data();
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t s = 0; s < plane; ++s) {
      double sum = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) sum += p[(n * c + ch) * plane + s];
      if (!(std::fabs(sum - 1.0) <= kSimplexTol)) {
        throw std::invalid_argument(std::string(who) + ": channel sums must be 1 (got " +
                                    std::to_string(sum) + ")");
      }
    }
  }
}

void check_scores(const Tensor& scores, const char* who) {
  if (scores.numel() == 0) throw std::invalid_argument(std::string(who) + ": empty score tensor");
  const double* p = scores.data();
  for (std::size_t i = 0; i < scores.numel(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) {
      throw std::invalid_argument(std::string(who) + ": scores must lie strictly in (0,1), got " +
                                  std::to_string(p[i]));
    }
  }
}

// Mean over batch and columns of sum_i p_i log(p_i / q_i). Attention maps are
// column-stochastic over dim 1, so a (B,M,N) input holds B*N distributions.
Variable kl_columns(const Variable& p, const Variable& q, const char* who) {
  if (!p.value().same_shape(q.value())) {
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + p.value().shape_str() +
                                " vs " + q.value().shape_str());
  }
  if (p.value().rank() != 3) {
    throw std::invalid_argument(std::string(who) + ": expected (B,M,N) attention maps");
  }
  const double n_dists = double(p.value().dim(0)) * double(p.value().dim(2));
  Variable logratio = ops::sub(ops::log_clamped(p, kKlEps), ops::log_clamped(q, kKlEps));
  return ops::mul_scalar(ops::sum_all(ops::mul(p, logratio)), 1.0 / n_dists);
}

}  // namespace

Variable max_square(const Variable& probs) {
  check_simplex_channels(probs.value(), "max_square");
  const Tensor& t = probs.value();
  const double denom = double(t.dim(0)) * double(t.dim(2)) * double(t.dim(3));
  return ops::neg(ops::mul_scalar(ops::sum_all(ops::square(probs)), 1.0 / denom));
}

Variable bns(const BatchBNStats& stats, const BNSnapshot& snapshot) {
  if (stats.mean.size() != snapshot.layers.size() || stats.var.size() != snapshot.layers.size()) {
    throw std::invalid_argument("bns: layer count mismatch (batch " +
                                std::to_string(stats.mean.size()) + " vs snapshot " +
                                std::to_string(snapshot.layers.size()) + ")");
  }
  Variable total;
  for (std::size_t l = 0; l < snapshot.layers.size(); ++l) {
    const auto& layer = snapshot.layers[l];
    if (!stats.mean[l].value().same_shape(layer.mean) ||
        !stats.var[l].value().same_shape(layer.var)) {
      throw std::invalid_argument("bns: channel count mismatch at layer " + layer.id);
    }
    Variable dm = ops::sum_all(ops::square(ops::sub(stats.mean[l], constant(layer.mean))));
    Variable dv = ops::sum_all(ops::square(ops::sub(stats.var[l], constant(layer.var))));
    Variable term = ops::add(dm, dv);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

Variable mae(const Variable& pred_shared, const Variable& pred_frozen) {
  if (!pred_shared.value().same_shape(pred_frozen.value())) {
    throw std::invalid_argument("mae: shape mismatch " + pred_shared.value().shape_str() + " vs " +
                                pred_frozen.value().shape_str());
  }
  return ops::mean_all(ops::abs(ops::sub(pred_shared, pred_frozen.detach())));
}

Variable dad_ss(const AttentionPack& frozen, const AttentionPack& shared) {
  if (!frozen.dual.value().same_shape(shared.dual.value())) {
    throw std::invalid_argument("dad_ss: dual map shape mismatch " +
                                frozen.dual.value().shape_str() + " vs " +
                                shared.dual.value().shape_str());
  }
  // (1/M)||A_f - A_s||_1 averaged over the batch is just the elementwise mean.
  return ops::mean_all(ops::abs(ops::sub(frozen.dual.detach(), shared.dual)));
}

Variable dad_st(const Variable& s_src, const Variable& r_src, const Variable& s_tgt,
                const Variable& r_tgt) {
  Variable kl_s = kl_columns(s_src, s_tgt, "dad_st[spatial]");
  Variable kl_r = kl_columns(r_src, r_tgt, "dad_st[channel]");
  return ops::add(kl_s, kl_r);
}

Variable adv_d(const Variable& easy_scores, const Variable& hard_scores) {
  check_scores(easy_scores.value(), "adv_d easy");
  check_scores(hard_scores.value(), "adv_d hard");
  const std::size_t ne = easy_scores.value().numel();
  const std::size_t nh = hard_scores.value().numel();
  if (ne != nh) {
    throw std::invalid_argument("adv_d: group sizes differ (" + std::to_string(ne) + " easy vs " +
                                std::to_string(nh) + " hard)");
  }
  Variable log_e = ops::sum_all(ops::log_clamped(easy_scores, kLogEps));
  Variable log_h = ops::sum_all(ops::log_clamped(ops::add_scalar(ops::neg(hard_scores), 1.0), kLogEps));
  return ops::neg(ops::mul_scalar(ops::add(log_e, log_h), 1.0 / double(ne + nh)));
}

Variable adv_t(const Variable& hard_scores) {
  check_scores(hard_scores.value(), "adv_t");
  return ops::neg(ops::mean_all(ops::log_clamped(hard_scores, kLogEps)));
}

Variable generator_objective(const Variable& l_bns, const Variable& l_mae, const Variable& l_dad_ss,
                             const Variable& l_dad_st, const LossWeights& w) {
  Variable out = ops::sub(l_bns, ops::mul_scalar(l_mae, w.alpha));
  out = ops::sub(out, ops::mul_scalar(l_dad_ss, w.beta));
  return ops::add(out, ops::mul_scalar(l_dad_st, w.tau));
}

Variable transfer_objective(const Variable& l_mae, const Variable& l_dad_ss,
                            const LossWeights& w) {
  return ops::add(ops::mul_scalar(l_mae, w.alpha), ops::mul_scalar(l_dad_ss, w.beta));
}

Variable adaptation_objective(const Variable& l_tar, const Variable& l_mae,
                              const Variable& l_dad_ss, const Variable& l_adv_t,
                              const LossWeights& w) {
  Variable out = ops::add(l_tar, ops::mul_scalar(l_mae, w.alpha));
  out = ops::add(out, ops::mul_scalar(l_dad_ss, w.beta));
  return ops::add(out, ops::mul_scalar(l_adv_t, w.gamma));
}

}  // namespace losses
}  // namespace sfda
