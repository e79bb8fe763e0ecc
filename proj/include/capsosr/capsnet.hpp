#ifndef CAPSOSR_CAPSNET_HPP_
#define CAPSOSR_CAPSNET_HPP_

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "capsosr/autodiff.hpp"
#include "capsosr/tensor.hpp"

namespace capsosr {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// First capsule layer, reshaped from a convolutional feature map. Each of the
// n rows is one capsule vector of dimension f1; (groups, h, w) remembers the
// grid it came from.
struct PrimaryCapsules {
  Tensor capsules;  // [n, f1]
  int64_t groups = 0;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
};

struct ClassCapsules {
  Tensor capsules;  // [K, f2]
};

struct PoseWeights {
  Tensor w;  // [n, K, f2, f1]
};

enum class RoutingMode { kStandard, kGated };

// Which axis the coupling normalization runs over. kClasses is the Sabour
// convention (each input capsule's coupling distributes over the K outputs)
// and is the default; kInputs normalizes over the input capsules instead.
enum class RoutingAxis { kClasses, kInputs };

struct RoutingState {
  Tensor logits;        // b, [n, K]
  Tensor coefficients;  // c used in the final iteration, [n, K]
  int64_t iteration = 0;
  RoutingMode mode = RoutingMode::kStandard;
  double gate_bias = 0.0;
};

// ---------------------------------------------------------------------------
// squash: v -> (|v|^2 / (1 + |v|^2)) * v / |v|
// ---------------------------------------------------------------------------

inline Tensor squash(const Tensor& v) {
  if (!v.all_finite()) throw std::invalid_argument("squash: non-finite input");
  double n2 = dot(v, v);
  Tensor out(v.shape());
  if (n2 == 0.0) return out;  // defined as the zero vector at v = 0
  double n = std::sqrt(n2);
  double scale = n / (1.0 + n2);
  for (int64_t i = 0; i < v.numel(); ++i) out[i] = scale * v[i];
  return out;
}

// squash applied independently to each vector along the last axis
inline Tensor squash_rows(const Tensor& m) {
  if (!m.all_finite()) throw std::invalid_argument("squash: non-finite input");
  if (m.ndim() < 1) throw std::invalid_argument("squash_rows: rank must be >= 1");
  int64_t f = m.dim(m.ndim() - 1);
  int64_t rows = m.numel() / f;
  Tensor out(m.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = m.data() + r * f;
    double* dst = out.data() + r * f;
    double n2 = 0.0;
    for (int64_t i = 0; i < f; ++i) n2 += src[i] * src[i];
    if (n2 == 0.0) continue;
    double n = std::sqrt(n2);
    double scale = n / (1.0 + n2);
    for (int64_t i = 0; i < f; ++i) dst[i] = scale * src[i];
  }
  return out;
}

// Tape version over the last axis. Gradient at the zero vector is zero
// (also the true limit of the Jacobian).
inline Var squash_capsules(const Var& a) {
  Tape& t = *a.tape();
  Tensor out = squash_rows(a.value());
  bool ng = t.needs_grad(a.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id();
    int64_t f = a.value().dim(a.value().ndim() - 1);
    int64_t rows = a.value().numel() / f;
    t.set_backward(self, [self, aid, f, rows](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const Tensor& x = tp.value(aid);
      Tensor& gx = tp.grad_ref(aid);
      for (int64_t r = 0; r < rows; ++r) {
        const double* vr = x.data() + r * f;
        const double* gr = g.data() + r * f;
        double* dst = gx.data() + r * f;
        double n2 = 0.0, vg = 0.0;
        for (int64_t i = 0; i < f; ++i) {
          n2 += vr[i] * vr[i];
          vg += vr[i] * gr[i];
        }
        if (n2 == 0.0) continue;
        double n = std::sqrt(n2);
        double sigma = n / (1.0 + n2);
        double dsigma = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
        for (int64_t i = 0; i < f; ++i) dst[i] += sigma * gr[i] + (dsigma / n) * vg * vr[i];
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// pose transform: u_hat[i,j] = W[i,j] . u[i]
// ---------------------------------------------------------------------------

inline Tensor pose_transform(const PrimaryCapsules& u, const PoseWeights& w) {
  const Tensor& uc = u.capsules;
  const Tensor& wt = w.w;
  if (uc.ndim() != 2 || wt.ndim() != 4 || wt.dim(0) != uc.dim(0) || wt.dim(3) != uc.dim(1)) {
    throw std::invalid_argument("pose_transform: shape mismatch " + uc.shape_str() + " vs " +
                                wt.shape_str());
  }
  int64_t n = uc.dim(0), f1 = uc.dim(1), k = wt.dim(1), f2 = wt.dim(2);
  Tensor out({n, k, f2});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < k; ++j)
      for (int64_t a = 0; a < f2; ++a) {
        double s = 0.0;
        for (int64_t b = 0; b < f1; ++b) s += wt[((i * k + j) * f2 + a) * f1 + b] * uc[i * f1 + b];
        out[(i * k + j) * f2 + a] = s;
      }
  return out;
}

// Tape version, batched: u [B,n,f1], w [n,K,f2,f1] -> [B,n,K,f2]
inline Var pose_transform_op(const Var& u, const Var& w) {
  Tape& t = *u.tape();
  const Tensor& uv = u.value();
  const Tensor& wv = w.value();
  if (uv.ndim() != 3 || wv.ndim() != 4 || wv.dim(0) != uv.dim(1) || wv.dim(3) != uv.dim(2)) {
    throw std::invalid_argument("pose_transform_op: shape mismatch");
  }
  int64_t B = uv.dim(0), n = uv.dim(1), f1 = uv.dim(2), K = wv.dim(1), f2 = wv.dim(2);
  Tensor out({B, n, K, f2});
  const double* U = uv.data();
  const double* W = wv.data();
#pragma omp parallel for schedule(static)
  for (int64_t bn = 0; bn < B * n; ++bn) {
    int64_t b = bn / n, i = bn % n;
    const double* ui = U + (b * n + i) * f1;
    double* ob = out.data() + (b * n + i) * K * f2;
    const double* wi = W + i * K * f2 * f1;
    for (int64_t j = 0; j < K; ++j)
      for (int64_t a = 0; a < f2; ++a) {
        double s = 0.0;
        const double* wrow = wi + (j * f2 + a) * f1;
        for (int64_t c = 0; c < f1; ++c) s += wrow[c] * ui[c];
        ob[j * f2 + a] = s;
      }
  }
  bool ng = t.needs_grad(u.id()) || t.needs_grad(w.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), uid = u.id(), wid = w.id();
    t.set_backward(self, [=](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const double* G = g.data();
      if (tp.needs_grad(uid)) {
        Tensor& gu = tp.grad_ref(uid);
        const double* W2 = tp.value(wid).data();
#pragma omp parallel for schedule(static)
        for (int64_t bn = 0; bn < B * n; ++bn) {
          int64_t b = bn / n, i = bn % n;
          double* gui = gu.data() + (b * n + i) * f1;
          const double* gb = G + (b * n + i) * K * f2;
          const double* wi = W2 + i * K * f2 * f1;
          for (int64_t j = 0; j < K; ++j)
            for (int64_t a = 0; a < f2; ++a) {
              double gv = gb[j * f2 + a];
              if (gv == 0.0) continue;
              const double* wrow = wi + (j * f2 + a) * f1;
              for (int64_t c = 0; c < f1; ++c) gui[c] += gv * wrow[c];
            }
        }
      }
      if (tp.needs_grad(wid)) {
        Tensor& gw = tp.grad_ref(wid);
        const double* U2 = tp.value(uid).data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
          double* gwi = gw.data() + i * K * f2 * f1;
          for (int64_t b = 0; b < B; ++b) {
            const double* ui = U2 + (b * n + i) * f1;
            const double* gb = G + (b * n + i) * K * f2;
            for (int64_t j = 0; j < K; ++j)
              for (int64_t a = 0; a < f2; ++a) {
                double gv = gb[j * f2 + a];
                if (gv == 0.0) continue;
                double* wrow = gwi + (j * f2 + a) * f1;
                for (int64_t c = 0; c < f1; ++c) wrow[c] += gv * ui[c];
              }
          }
        }
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Dynamic routing
// ---------------------------------------------------------------------------

namespace detail {

// One normalization of logits b [n,K] into coefficients c.
inline Tensor routing_normalize(const Tensor& b, RoutingMode mode, double gate_bias,
                                RoutingAxis axis) {
  int64_t n = b.dim(0), K = b.dim(1);
  Tensor c(b.shape());
  if (axis == RoutingAxis::kClasses) {
    for (int64_t i = 0; i < n; ++i) {
      double mx = b[i * K];
      for (int64_t j = 1; j < K; ++j) mx = std::max(mx, b[i * K + j]);
      double z = 0.0;
      for (int64_t j = 0; j < K; ++j) z += std::exp(b[i * K + j] - mx);
      for (int64_t j = 0; j < K; ++j) c[i * K + j] = std::exp(b[i * K + j] - mx) / z;
    }
  } else {
    for (int64_t j = 0; j < K; ++j) {
      double mx = b[j];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, b[i * K + j]);
      double z = 0.0;
      for (int64_t i = 0; i < n; ++i) z += std::exp(b[i * K + j] - mx);
      for (int64_t i = 0; i < n; ++i) c[i * K + j] = std::exp(b[i * K + j] - mx) / z;
    }
  }
  if (mode == RoutingMode::kGated) {
    for (int64_t i = 0; i < c.numel(); ++i) c[i] = std::max(c[i] + gate_bias, 0.0);
  }
  return c;
}

}  // namespace detail

// Value-level routing for one sample. u_hat is [n, K, f2]. Returns the class
// capsules of the final iteration together with the final routing state.
inline std::pair<ClassCapsules, RoutingState> dynamic_routing(
    const Tensor& u_hat, int64_t iterations, RoutingMode mode = RoutingMode::kStandard,
    std::optional<double> gate_bias = std::nullopt, RoutingAxis axis = RoutingAxis::kClasses) {
  if (iterations < 1) throw std::invalid_argument("dynamic_routing: iterations must be >= 1");
  if (u_hat.ndim() != 3) throw std::invalid_argument("dynamic_routing: u_hat must be [n,K,f2]");
  if ((mode == RoutingMode::kGated) != gate_bias.has_value()) {
    throw std::invalid_argument("dynamic_routing: gate_bias must be supplied iff mode is gated");
  }
  int64_t n = u_hat.dim(0), K = u_hat.dim(1), f2 = u_hat.dim(2);
  double bias = gate_bias.value_or(0.0);
  Tensor b({n, K});
  Tensor c;
  Tensor v({K, f2});
  for (int64_t it = 0; it < iterations; ++it) {
    c = detail::routing_normalize(b, mode, bias, axis);
    v.fill(0.0);
    for (int64_t j = 0; j < K; ++j) {
      for (int64_t i = 0; i < n; ++i) {
        double cij = c[i * K + j];
        if (cij == 0.0) continue;
        for (int64_t a = 0; a < f2; ++a) v[j * f2 + a] += cij * u_hat[(i * K + j) * f2 + a];
      }
    }
    v = squash_rows(v);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < K; ++j) {
        double agr = 0.0;
        for (int64_t a = 0; a < f2; ++a) agr += u_hat[(i * K + j) * f2 + a] * v[j * f2 + a];
        b[i * K + j] += agr;
      }
  }
  RoutingState state{std::move(b), std::move(c), iterations, mode, bias};
  return {ClassCapsules{std::move(v)}, std::move(state)};
}

// Batched coefficient computation used by the model's forward pass. The
// routing loop runs on values only; gradients flow through the final
// weighted sum and squash, with the coefficients held constant.
inline Tensor routing_coefficients(const Tensor& u_hat_batched, int64_t iterations,
                                   RoutingMode mode, double gate_bias,
                                   RoutingAxis axis = RoutingAxis::kClasses) {
  if (iterations < 1) throw std::invalid_argument("routing_coefficients: iterations must be >= 1");
  if (u_hat_batched.ndim() != 4) {
    throw std::invalid_argument("routing_coefficients: expected [B,n,K,f2]");
  }
  int64_t B = u_hat_batched.dim(0), n = u_hat_batched.dim(1), K = u_hat_batched.dim(2),
          f2 = u_hat_batched.dim(3);
  Tensor coeffs({B, n, K});
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < B; ++bi) {
    Tensor slice({n, K, f2});
    const double* src = u_hat_batched.data() + bi * n * K * f2;
    for (int64_t i = 0; i < n * K * f2; ++i) slice[i] = src[i];
    auto [caps, state] = dynamic_routing(
        slice, iterations, mode,
        mode == RoutingMode::kGated ? std::optional<double>(gate_bias) : std::nullopt, axis);
    for (int64_t i = 0; i < n * K; ++i) coeffs[bi * n * K + i] = state.coefficients[i];
  }
  return coeffs;
}

// s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:], with c a constant.
inline Var routing_combine(const Var& u_hat, const Tensor& coeffs) {
  Tape& t = *u_hat.tape();
  const Tensor& uv = u_hat.value();
  if (uv.ndim() != 4 || coeffs.ndim() != 3 || coeffs.dim(0) != uv.dim(0) ||
      coeffs.dim(1) != uv.dim(1) || coeffs.dim(2) != uv.dim(2)) {
    throw std::invalid_argument("routing_combine: shape mismatch");
  }
  int64_t B = uv.dim(0), n = uv.dim(1), K = uv.dim(2), f2 = uv.dim(3);
  Tensor out({B, K, f2});
  const double* U = uv.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < K; ++j) {
        double cij = coeffs[(b * n + i) * K + j];
        if (cij == 0.0) continue;
        const double* up = U + ((b * n + i) * K + j) * f2;
        double* op = out.data() + (b * K + j) * f2;
        for (int64_t a = 0; a < f2; ++a) op[a] += cij * up[a];
      }
  bool ng = t.needs_grad(u_hat.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), uid = u_hat.id();
    t.set_backward(self, [self, uid, coeffs, B, n, K, f2](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      Tensor& gu = tp.grad_ref(uid);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < K; ++j) {
            double cij = coeffs[(b * n + i) * K + j];
            if (cij == 0.0) continue;
            const double* gp = g.data() + (b * K + j) * f2;
            double* up = gu.data() + ((b * n + i) * K + j) * f2;
            for (int64_t a = 0; a < f2; ++a) up[a] += cij * gp[a];
          }
    });
  }
  return v;
}

// Reshapes a convolutional feature map [C,H,W] with C = groups*f1 into
// primary capsules [groups*H*W, f1] (capsule (g,y,x) takes the channel block
// g*f1 .. g*f1+f1-1 at position (y,x)), then squashes each capsule.
inline PrimaryCapsules make_primary_capsules(const Tensor& feature, int64_t f1) {
  if (feature.ndim() != 3) throw std::invalid_argument("make_primary_capsules: expected [C,H,W]");
  int64_t C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
  if (C % f1 != 0) throw std::invalid_argument("make_primary_capsules: C not divisible by f1");
  int64_t G = C / f1;
  Tensor caps({G * H * W, f1});
  for (int64_t g = 0; g < G; ++g)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        int64_t row = (g * H + y) * W + x;
        for (int64_t d = 0; d < f1; ++d) caps[row * f1 + d] = feature[((g * f1 + d) * H + y) * W + x];
      }
  return PrimaryCapsules{squash_rows(caps), G, H, W};
}

// Tape version: feat [B,C,H,W] -> capsules [B, G*H*W, f1] (pre-squash).
inline Var to_primary_capsules_op(const Var& feat, int64_t f1) {
  Tape& t = *feat.tape();
  const Tensor& fv = feat.value();
  if (fv.ndim() != 4) throw std::invalid_argument("to_primary_capsules_op: expected [B,C,H,W]");
  int64_t B = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
  if (C % f1 != 0) throw std::invalid_argument("to_primary_capsules_op: C not divisible by f1");
  int64_t G = C / f1, n = G * H * W;
  Tensor out({B, n, f1});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t g = 0; g < G; ++g)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          int64_t row = (g * H + y) * W + x;
          for (int64_t d = 0; d < f1; ++d)
            out[(b * n + row) * f1 + d] = fv[((b * C + g * f1 + d) * H + y) * W + x];
        }
  bool ng = t.needs_grad(feat.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), fid = feat.id();
    t.set_backward(self, [self, fid, B, C, H, W, G, f1, n](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      Tensor& gf = tp.grad_ref(fid);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t gi = 0; gi < G; ++gi)
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
              int64_t row = (gi * H + y) * W + x;
              for (int64_t d = 0; d < f1; ++d)
                gf[((b * C + gi * f1 + d) * H + y) * W + x] += g[(b * n + row) * f1 + d];
            }
    });
  }
  return v;
}

}  // namespace capsosr

#endif  // CAPSOSR_CAPSNET_HPP_
