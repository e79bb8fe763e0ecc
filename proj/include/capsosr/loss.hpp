#ifndef CAPSOSR_LOSS_HPP_
#define CAPSOSR_LOSS_HPP_

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsosr/autodiff.hpp"
#include "capsosr/decoder.hpp"
#include "capsosr/targets.hpp"
#include "capsosr/tensor.hpp"
#include "capsosr/variational.hpp"

namespace capsosr {

inline constexpr double kLegacyDenomEps = 1e-8;

enum class LossMode { kCvae, kLegacyMargin, kSoftmaxBaseline };

struct LossBreakdown {
  double total = 0.0;
  double kl_term = 0.0;
  double contrastive_term = 0.0;
  double reconstruction_term = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double lambda = 0.0;
  LossMode mode = LossMode::kCvae;
};

// ---------------------------------------------------------------------------
// CVAE objective: L = d(C, sg[T_y]) + alpha * L_contr + beta * L_rec
// ---------------------------------------------------------------------------

inline LossBreakdown total_loss_cvae(const CapsuleDistribution& c, int64_t y,
                                     const TargetBank& bank, const Tensor& x_hat, const Tensor& x,
                                     double alpha, double beta) {
  LossBreakdown out;
  out.mode = LossMode::kCvae;
  out.alpha = alpha;
  out.beta = beta;
  out.kl_term = kl_attraction_loss(c, y, bank);
  out.contrastive_term = contrastive_loss(c, y, bank);
  out.reconstruction_term = reconstruction_loss(x_hat, x);
  out.total = out.kl_term + alpha * out.contrastive_term + beta * out.reconstruction_term;
  return out;
}

struct LossBreakdownVars {
  Var total;
  Var kl;
  Var contrastive;
  Var reconstruction;
};

// Batched tape form. Each term is a per-sample mean over the batch; the
// stop-gradient routing follows the targets module builders.
inline LossBreakdownVars total_loss_cvae_op(const Var& mu_c, const Var& var_c, const Var& mu_t,
                                            const Var& var_t, const std::vector<int64_t>& labels,
                                            const TargetBank& bank, const Var& x_hat,
                                            const Var& x_target, double alpha, double beta) {
  LossBreakdownVars out;
  out.kl = kl_attraction_loss_op(mu_c, var_c, mu_t, var_t, labels);
  out.contrastive = contrastive_loss_op(mu_c, var_c, mu_t, var_t, labels, bank);
  out.reconstruction = reconstruction_loss_op(x_hat, x_target);
  out.total = add(out.kl, add(mul_scalar(out.contrastive, alpha), mul_scalar(out.reconstruction, beta)));
  return out;
}

// ---------------------------------------------------------------------------
// Legacy margin-KL objective:
//   L_j = y_j * KL(C_j || N(0,1)) + lambda * (1 - y_j) * KL(C_j || N(1,1))
//   L   = sum_j L_j + beta_legacy * L_rec
// The KL is evaluated at the capsule's (mu, var) parameters.
// ---------------------------------------------------------------------------

namespace detail {

// KL(N(mu, var) || N(m2, 1)) for one slot
inline double kl_to_unit_prior(const Tensor& mu, const Tensor& var, int64_t slot, int64_t d,
                               double m2) {
  double s = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    double m = mu[slot * d + i], v = var[slot * d + i];
    if (!(v > 0.0)) throw std::invalid_argument("legacy loss: variance must be positive");
    double dm = m - m2;
    s += 0.5 * (v + dm * dm - 1.0 - std::log(v));
  }
  return s;
}

}  // namespace detail

inline LossBreakdown total_loss_legacy(const CapsuleDistribution& c, int64_t y,
                                       double beta_legacy, double lambda, const Tensor& x_hat,
                                       const Tensor& x) {
  int64_t K = c.mu.dim(0), d = c.mu.dim(1);
  detail::check_label(y, K, "total_loss_legacy");
  LossBreakdown out;
  out.mode = LossMode::kLegacyMargin;
  out.beta = beta_legacy;
  out.lambda = lambda;
  double margin = 0.0;
  for (int64_t j = 0; j < K; ++j) {
    if (j == y) {
      margin += detail::kl_to_unit_prior(c.mu, c.var, j, d, 0.0);
    } else {
      margin += lambda * detail::kl_to_unit_prior(c.mu, c.var, j, d, 1.0);
    }
  }
  out.kl_term = margin;
  out.reconstruction_term = reconstruction_loss(x_hat, x);
  out.total = margin + beta_legacy * out.reconstruction_term;
  return out;
}

inline LossBreakdownVars total_loss_legacy_op(const Var& mu_c, const Var& var_c,
                                              const std::vector<int64_t>& labels,
                                              double beta_legacy, double lambda, const Var& x_hat,
                                              const Var& x_target) {
  Tape& t = *mu_c.tape();
  const Tensor& mv = mu_c.value();
  int64_t B = mv.dim(0), K = mv.dim(1);
  // per-slot KL against N(0,1) and N(1,1), each [B,K]
  Var lv = log(var_c);
  Var kl0 = mul_scalar(
      sum_last_axis(add_scalar(sub(add(var_c, square(mu_c)), lv), -1.0)), 0.5);
  Var kl1 = mul_scalar(
      sum_last_axis(add_scalar(sub(add(var_c, square(add_scalar(mu_c, -1.0))), lv), -1.0)), 0.5);
  Tensor w0({B, K}), w1({B, K});
  for (int64_t b = 0; b < B; ++b) {
    detail::check_label(labels[b], K, "total_loss_legacy_op");
    for (int64_t j = 0; j < K; ++j) {
      w0[b * K + j] = (j == labels[b]) ? 1.0 : 0.0;
      w1[b * K + j] = (j == labels[b]) ? 0.0 : lambda;
    }
  }
  Var margin = mul_scalar(
      sum(add(mul(kl0, t.constant(w0)), mul(kl1, t.constant(w1)))), 1.0 / static_cast<double>(B));
  LossBreakdownVars out;
  out.kl = margin;
  out.contrastive = t.constant(Tensor::scalar(0.0));
  out.reconstruction = reconstruction_loss_op(x_hat, x_target);
  out.total = add(margin, mul_scalar(out.reconstruction, beta_legacy));
  return out;
}

// ---------------------------------------------------------------------------
// Legacy closed-set prediction: softmax_k of 1 / (KL(C_k || N(0,1)) + eps)
// ---------------------------------------------------------------------------

inline Tensor legacy_closed_set_probs(const CapsuleDistribution& c) {
  int64_t K = c.mu.dim(0), d = c.mu.dim(1);
  Tensor w({K});
  for (int64_t j = 0; j < K; ++j) {
    w[j] = 1.0 / (detail::kl_to_unit_prior(c.mu, c.var, j, d, 0.0) + kLegacyDenomEps);
  }
  double mx = w[0];
  for (int64_t j = 1; j < K; ++j) mx = std::max(mx, w[j]);
  double z = 0.0;
  Tensor probs({K});
  for (int64_t j = 0; j < K; ++j) {
    probs[j] = std::exp(w[j] - mx);
    z += probs[j];
  }
  for (int64_t j = 0; j < K; ++j) probs[j] /= z;
  return probs;
}

}  // namespace capsosr

#endif  // CAPSOSR_LOSS_HPP_
