#ifndef CAPSOSR_TARGETS_HPP_
#define CAPSOSR_TARGETS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "capsosr/autodiff.hpp"
#include "capsosr/tensor.hpp"
#include "capsosr/variational.hpp"

namespace capsosr {

enum class TargetMode { kFixed, kLearnable };

// The K per-class prior Gaussian targets. Target k spans all K capsule
// slots: mu[k, j, :] is its mean on slot j. Fixed mode (one-hot means,
// unit variances) never receives gradient updates.
struct TargetBank {
  Tensor mu;   // [K, K, d]
  Tensor var;  // [K, K, d], strictly positive
  TargetMode mode = TargetMode::kLearnable;
  double margin = 10.0;                   // shared m_k
  std::vector<double> per_class_margin;   // optional override, size K
  double alpha = 1.0;

  int64_t num_classes() const { return mu.dim(0); }
  int64_t latent_dim() const { return mu.dim(2); }

  double margin_for(int64_t k) const {
    if (!per_class_margin.empty()) return per_class_margin.at(static_cast<size_t>(k));
    return margin;
  }

  // Views of target k as a CapsuleDistribution over the K slots.
  CapsuleDistribution target(int64_t k) const {
    int64_t K = num_classes(), d = latent_dim();
    Tensor m({K, d}), v({K, d});
    for (int64_t i = 0; i < K * d; ++i) {
      m[i] = mu[k * K * d + i];
      v[i] = var[k * K * d + i];
    }
    return CapsuleDistribution{std::move(m), std::move(v)};
  }
};

// mu[k, j, :] = 1 if j == k else 0; var = 1 everywhere.
inline TargetBank init_targets(int64_t k_classes, int64_t d, TargetMode mode) {
  if (k_classes < 2) throw std::invalid_argument("init_targets: K must be >= 2");
  if (d < 1) throw std::invalid_argument("init_targets: d must be >= 1");
  TargetBank bank;
  bank.mu = Tensor({k_classes, k_classes, d});
  bank.var = Tensor({k_classes, k_classes, d}, 1.0);
  for (int64_t k = 0; k < k_classes; ++k)
    for (int64_t i = 0; i < d; ++i) bank.mu[(k * k_classes + k) * d + i] = 1.0;
  bank.mode = mode;
  return bank;
}

namespace detail {

inline void check_label(int64_t y, int64_t k_classes, const char* op) {
  if (y < 0 || y >= k_classes) {
    throw std::invalid_argument(std::string(op) + ": label out of range");
  }
}

}  // namespace detail

// L_KL = d(C, sg[T_y]). Value form; the stop-gradient contract is carried by
// the tape builder below.
inline double kl_attraction_loss(const CapsuleDistribution& c, int64_t y, const TargetBank& bank) {
  detail::check_label(y, bank.num_classes(), "kl_attraction_loss");
  CapsuleDistribution t = bank.target(y);
  return capsule_distance(c, t.mu, t.var);
}

// L_contr = 1/(K-1) * sum_{k != y} [ m_k - d(sg[C], T_k) ]^+
inline double contrastive_loss(const CapsuleDistribution& c, int64_t y, const TargetBank& bank) {
  int64_t K = bank.num_classes();
  if (K < 2) throw std::invalid_argument("contrastive_loss: needs K >= 2");
  detail::check_label(y, K, "contrastive_loss");
  double total = 0.0;
  for (int64_t k = 0; k < K; ++k) {
    if (k == y) continue;
    CapsuleDistribution t = bank.target(k);
    double dist = capsule_distance(c, t.mu, t.var);
    total += std::max(bank.margin_for(k) - dist, 0.0);
  }
  return total / static_cast<double>(K - 1);
}

// Collapse monitor: min over i < j of d(T_i, T_j), treating T_i as a
// capsule distribution.
inline double min_pairwise_target_distance(const TargetBank& bank) {
  int64_t K = bank.num_classes();
  if (K < 2) throw std::invalid_argument("min_pairwise_target_distance: needs K >= 2");
  double best = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < K; ++i) {
    CapsuleDistribution ti = bank.target(i);
    for (int64_t j = i + 1; j < K; ++j) {
      CapsuleDistribution tj = bank.target(j);
      best = std::min(best, capsule_distance(ti, tj.mu, tj.var));
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Tape builders (batched). Labels are 0-based.
// ---------------------------------------------------------------------------

// mean_b d(C_b, sg[T_{y_b}]): gradient reaches the capsules only.
inline Var kl_attraction_loss_op(const Var& mu_c, const Var& var_c, const Var& mu_t,
                                 const Var& var_t, const std::vector<int64_t>& labels) {
  Var dmat = capsule_distance_matrix(mu_c, var_c, stop_gradient(mu_t), stop_gradient(var_t));
  return mean(gather_index(dmat, labels));
}

// mean_b 1/(K-1) sum_{k != y_b} [ m_k - d(sg[C_b], T_k) ]^+ : gradient
// reaches the targets only, and only where the hinge is active.
inline Var contrastive_loss_op(const Var& mu_c, const Var& var_c, const Var& mu_t,
                               const Var& var_t, const std::vector<int64_t>& labels,
                               const TargetBank& bank) {
  Tape& t = *mu_c.tape();
  int64_t B = mu_c.value().dim(0);
  int64_t K = mu_t.value().dim(0);
  if (K < 2) throw std::invalid_argument("contrastive_loss_op: needs K >= 2");
  Var dmat = capsule_distance_matrix(stop_gradient(mu_c), stop_gradient(var_c), mu_t, var_t);
  Tensor margins({B, K});
  Tensor mask({B, K});
  for (int64_t b = 0; b < B; ++b) {
    detail::check_label(labels[b], K, "contrastive_loss_op");
    for (int64_t k = 0; k < K; ++k) {
      margins[b * K + k] = bank.margin_for(k);
      mask[b * K + k] = (k == labels[b]) ? 0.0 : 1.0;
    }
  }
  Var hinge = relu(sub(t.constant(margins), dmat));
  Var masked = mul(hinge, t.constant(mask));
  double scale = 1.0 / (static_cast<double>(B) * static_cast<double>(K - 1));
  return mul_scalar(sum(masked), scale);
}

}  // namespace capsosr

#endif  // CAPSOSR_TARGETS_HPP_
