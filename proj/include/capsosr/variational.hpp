#ifndef CAPSOSR_VARIATIONAL_HPP_
#define CAPSOSR_VARIATIONAL_HPP_

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "capsosr/autodiff.hpp"
#include "capsosr/capsnet.hpp"
#include "capsosr/random.hpp"
#include "capsosr/tensor.hpp"

namespace capsosr {

// Lower bound applied to variances after softplus, keeping the KL finite
// under extreme optimization.
inline constexpr double kVarianceFloor = 1e-8;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// The K per-class diagonal Gaussians produced by the probabilistic capsule
// head for one input. Variances are stored directly (post-softplus), not as
// log-variances.
struct CapsuleDistribution {
  Tensor mu;   // [K, d]
  Tensor var;  // [K, d], strictly positive
};

struct LatentSample {
  Tensor z;      // [K, d]
  Tensor noise;  // the epsilon draw used, [K, d]
};

struct ClassPosterior {
  Tensor probs;      // [K]
  double gamma = 1.0;
  Tensor distances;  // [K]
};

// Two affine maps f2 -> d shared across the K capsule slots: one for means,
// one for pre-softplus variances.
struct HeadParams {
  Tensor w_mu;   // [d, f2]
  Tensor b_mu;   // [d]
  Tensor w_var;  // [d, f2]
  Tensor b_var;  // [d]
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline CapsuleDistribution probabilistic_head(const ClassCapsules& v, const HeadParams& p) {
  const Tensor& caps = v.capsules;
  if (caps.ndim() != 2 || p.w_mu.ndim() != 2 || p.w_mu.dim(1) != caps.dim(1) ||
      !p.w_mu.same_shape(p.w_var) || p.b_mu.numel() != p.w_mu.dim(0) ||
      p.b_var.numel() != p.w_var.dim(0)) {
    throw std::invalid_argument("probabilistic_head: shape mismatch");
  }
  int64_t K = caps.dim(0), f2 = caps.dim(1), d = p.w_mu.dim(0);
  Tensor mu({K, d}), var({K, d});
  for (int64_t k = 0; k < K; ++k)
    for (int64_t o = 0; o < d; ++o) {
      double sm = p.b_mu[o], sv = p.b_var[o];
      for (int64_t i = 0; i < f2; ++i) {
        sm += p.w_mu[o * f2 + i] * caps[k * f2 + i];
        sv += p.w_var[o * f2 + i] * caps[k * f2 + i];
      }
      mu[k * d + o] = sm;
      var[k * d + o] = std::max(softplus_value(sv), kVarianceFloor);
    }
  return CapsuleDistribution{std::move(mu), std::move(var)};
}

inline LatentSample reparameterize(const CapsuleDistribution& dist, Rng& noise_source) {
  if (!dist.mu.same_shape(dist.var)) throw std::invalid_argument("reparameterize: mu/var mismatch");
  for (int64_t i = 0; i < dist.var.numel(); ++i) {
    if (!(dist.var[i] > 0.0)) throw std::invalid_argument("reparameterize: non-positive variance");
  }
  Tensor noise = noise_source.normal_tensor(dist.mu.shape());
  Tensor z(dist.mu.shape());
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = dist.mu[i] + std::sqrt(dist.var[i]) * noise[i];
  return LatentSample{std::move(z), std::move(noise)};
}

// KL( N(mu1, diag var1) || N(mu2, diag var2) )
// = sum_i [ log sqrt(var2/var1) + (var1 + (mu1-mu2)^2) / (2 var2) - 1/2 ]
inline double kl_diag_gauss(const Tensor& mu1, const Tensor& var1, const Tensor& mu2,
                            const Tensor& var2) {
  if (mu1.numel() != var1.numel() || mu1.numel() != mu2.numel() || mu1.numel() != var2.numel()) {
    throw std::invalid_argument("kl_diag_gauss: size mismatch");
  }
  double kl = 0.0;
  for (int64_t i = 0; i < mu1.numel(); ++i) {
    if (!(var1[i] > 0.0) || !(var2[i] > 0.0)) {
      throw std::invalid_argument("kl_diag_gauss: variances must be strictly positive");
    }
    double dm = mu1[i] - mu2[i];
    kl += 0.5 * std::log(var2[i] / var1[i]) + (var1[i] + dm * dm) / (2.0 * var2[i]) - 0.5;
  }
  return kl;
}

// d(C, T) = (1/K) sum_k KL(C^(k) || T^(k)) with T given as [K,d] means and variances.
inline double capsule_distance(const CapsuleDistribution& c, const Tensor& t_mu,
                               const Tensor& t_var) {
  if (!c.mu.same_shape(t_mu) || !c.var.same_shape(t_var)) {
    throw std::invalid_argument("capsule_distance: shape mismatch");
  }
  int64_t K = c.mu.dim(0), d = c.mu.dim(1);
  double total = 0.0;
  for (int64_t k = 0; k < K; ++k) {
    Tensor m1({d}), v1({d}), m2({d}), v2({d});
    for (int64_t i = 0; i < d; ++i) {
      m1[i] = c.mu[k * d + i];
      v1[i] = c.var[k * d + i];
      m2[i] = t_mu[k * d + i];
      v2[i] = t_var[k * d + i];
    }
    total += kl_diag_gauss(m1, v1, m2, v2);
  }
  return total / static_cast<double>(K);
}

// probs_k = softmax_k( -gamma * d_k ), computed with max subtraction.
inline ClassPosterior class_posterior(const Tensor& distances, double gamma) {
  if (distances.numel() == 0) throw std::invalid_argument("class_posterior: empty distances");
  if (!(gamma > 0.0)) throw std::invalid_argument("class_posterior: gamma must be positive");
  int64_t K = distances.numel();
  double mn = distances[0];
  for (int64_t k = 1; k < K; ++k) mn = std::min(mn, distances[k]);
  Tensor probs({K});
  double z = 0.0;
  for (int64_t k = 0; k < K; ++k) {
    probs[k] = std::exp(-gamma * (distances[k] - mn));
    z += probs[k];
  }
  for (int64_t k = 0; k < K; ++k) probs[k] /= z;
  ClassPosterior out;
  out.probs = std::move(probs);
  out.gamma = gamma;
  out.distances = distances;
  return out;
}

// ---------------------------------------------------------------------------
// Tape op: pairwise capsule-set distance matrix
// D[b,t] = (1/S) sum_{s,i} KL( N(muC[b,s,i], varC[b,s,i]) || N(muT[t,s,i], varT[t,s,i]) )
// muC/varC: [B,S,d], muT/varT: [K,S,d] -> D: [B,K]
// ---------------------------------------------------------------------------

inline Var capsule_distance_matrix(const Var& mu_c, const Var& var_c, const Var& mu_t,
                                   const Var& var_t) {
  Tape& t = *mu_c.tape();
  const Tensor& mc = mu_c.value();
  const Tensor& vc = var_c.value();
  const Tensor& mt = mu_t.value();
  const Tensor& vt = var_t.value();
  if (mc.ndim() != 3 || !mc.same_shape(vc) || mt.ndim() != 3 || !mt.same_shape(vt) ||
      mc.dim(1) != mt.dim(1) || mc.dim(2) != mt.dim(2)) {
    throw std::invalid_argument("capsule_distance_matrix: shape mismatch");
  }
  int64_t B = mc.dim(0), S = mc.dim(1), d = mc.dim(2), K = mt.dim(0);
  int64_t sd = S * d;
  for (int64_t i = 0; i < vc.numel(); ++i)
    if (!(vc[i] > 0.0)) throw std::invalid_argument("capsule_distance_matrix: non-positive variance");
  for (int64_t i = 0; i < vt.numel(); ++i)
    if (!(vt[i] > 0.0)) throw std::invalid_argument("capsule_distance_matrix: non-positive variance");
  Tensor out({B, K});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t k = 0; k < K; ++k) {
      double acc = 0.0;
      const double* m1 = mc.data() + b * sd;
      const double* v1 = vc.data() + b * sd;
      const double* m2 = mt.data() + k * sd;
      const double* v2 = vt.data() + k * sd;
      for (int64_t i = 0; i < sd; ++i) {
        double dm = m1[i] - m2[i];
        acc += 0.5 * std::log(v2[i] / v1[i]) + (v1[i] + dm * dm) / (2.0 * v2[i]) - 0.5;
      }
      out[b * K + k] = acc / static_cast<double>(S);
    }
  bool ng = t.needs_grad(mu_c.id()) || t.needs_grad(var_c.id()) || t.needs_grad(mu_t.id()) ||
            t.needs_grad(var_t.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), mcid = mu_c.id(), vcid = var_c.id(), mtid = mu_t.id(),
            vtid = var_t.id();
    t.set_backward(self, [=](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const Tensor& m_c = tp.value(mcid);
      const Tensor& v_c = tp.value(vcid);
      const Tensor& m_t = tp.value(mtid);
      const Tensor& v_t = tp.value(vtid);
      double invS = 1.0 / static_cast<double>(S);
      bool need_mc = tp.needs_grad(mcid), need_vc = tp.needs_grad(vcid);
      bool need_mt = tp.needs_grad(mtid), need_vt = tp.needs_grad(vtid);
      double* gmc = need_mc ? tp.grad_ref(mcid).data() : nullptr;
      double* gvc = need_vc ? tp.grad_ref(vcid).data() : nullptr;
      double* gmt = need_mt ? tp.grad_ref(mtid).data() : nullptr;
      double* gvt = need_vt ? tp.grad_ref(vtid).data() : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t k = 0; k < K; ++k) {
          double gv = g[b * K + k];
          if (gv == 0.0) continue;
          const double* m1 = m_c.data() + b * sd;
          const double* v1 = v_c.data() + b * sd;
          const double* m2 = m_t.data() + k * sd;
          const double* v2 = v_t.data() + k * sd;
          for (int64_t i = 0; i < sd; ++i) {
            double dm = m1[i] - m2[i];
            if (gmc) gmc[b * sd + i] += gv * invS * dm / v2[i];
            if (gvc) gvc[b * sd + i] += gv * invS * (-0.5 / v1[i] + 0.5 / v2[i]);
            if (gmt) gmt[k * sd + i] -= gv * invS * dm / v2[i];
            if (gvt)
              gvt[k * sd + i] +=
                  gv * invS * (0.5 / v2[i] - (v1[i] + dm * dm) / (2.0 * v2[i] * v2[i]));
          }
        }
    });
  }
  return v;
}

}  // namespace capsosr

#endif  // CAPSOSR_VARIATIONAL_HPP_
