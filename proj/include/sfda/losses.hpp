#ifndef SFDA_LOSSES_HPP
#define SFDA_LOSSES_HPP

#include "sfda/attention.hpp"
#include "sfda/models.hpp"

namespace sfda {

struct LossWeights {
  double alpha = 1.0;  // MAE
  double beta = 0.5;   // DAD source-source
  double tau = 0.5;    // DAD source-target (defaults to beta)
  double gamma = 0.01;  // adversarial patch term
};

namespace losses {

/// Maximum-square self-supervision: -(1/(H*W)) sum_hw sum_c p^2, batch mean.
/// Rejects inputs whose channel sums stray more than 1e-4 from 1.
Variable max_square(const Variable& probs);

/// sum_l ||mu_l - mu_bar_l||^2 + sum_l ||var_l - var_bar_l||^2.
Variable bns(const BatchBNStats& stats, const BNSnapshot& snapshot);

/// Elementwise-mean |shared - frozen|; the frozen side is detached here so
/// no gradient ever reaches the teacher.
Variable mae(const Variable& pred_shared, const Variable& pred_frozen);

/// Batch mean of (1/M) * ||A_frozen - A_shared||_1 with M = N1*2C1; the
/// frozen pack is detached here.
Variable dad_ss(const AttentionPack& frozen, const AttentionPack& shared);

/// KL(S_src || S_tgt) + KL(R_src || R_tgt), each the mean over batch and
/// columns of sum_i p_i log(p_i/q_i), logs clamped at 1e-8. Neither side is
/// detached; the caller controls gradient flow.
Variable dad_st(const Variable& s_src, const Variable& r_src, const Variable& s_tgt,
                const Variable& r_tgt);

/// Discriminator objective as a minimization:
/// -(sum log D(easy) + sum log(1 - D(hard))) / (n_easy + n_hard).
Variable adv_d(const Variable& easy_scores, const Variable& hard_scores);

/// Fooling objective for the adapted model: -mean log D(hard).
Variable adv_t(const Variable& hard_scores);

// Stage objectives (weighted scalar combinations).
Variable generator_objective(const Variable& l_bns, const Variable& l_mae, const Variable& l_dad_ss,
                             const Variable& l_dad_st, const LossWeights& w);
Variable transfer_objective(const Variable& l_mae, const Variable& l_dad_ss, const LossWeights& w);
Variable adaptation_objective(const Variable& l_tar, const Variable& l_mae, const Variable& l_dad_ss,
                              const Variable& l_adv_t, const LossWeights& w);

}  // namespace losses
}  // namespace sfda

#endif  // SFDA_LOSSES_HPP
