#ifndef CAPSOSR_NN_HPP_
#define CAPSOSR_NN_HPP_

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capsosr/autodiff.hpp"
#include "capsosr/random.hpp"
#include "capsosr/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace capsosr {

// ---------------------------------------------------------------------------
// Linear: out[n,o] = b[o] + sum_i x[n,i] * w[o,i]
// ---------------------------------------------------------------------------

inline Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& t = *x.tape();
  if (x.value().ndim() != 2 || w.value().ndim() != 2 || b.value().ndim() != 1 ||
      x.value().dim(1) != w.value().dim(1) || w.value().dim(0) != b.value().dim(0)) {
    throw std::invalid_argument("linear: incompatible shapes");
  }
  int64_t n = x.value().dim(0), ni = x.value().dim(1), no = w.value().dim(0);
  Tensor out({n, no});
  {
    const double* X = x.value().data();
    const double* W = w.value().data();
    const double* B = b.value().data();
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t o = 0; o < no; ++o) {
        double s = B[o];
        const double* xr = X + r * ni;
        const double* wo = W + o * ni;
        for (int64_t i = 0; i < ni; ++i) s += xr[i] * wo[i];
        out[r * no + o] = s;
      }
    }
  }
  bool ng = t.needs_grad(x.id()) || t.needs_grad(w.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), xid = x.id(), wid = w.id(), bid = b.id();
    t.set_backward(self, [self, xid, wid, bid, n, ni, no](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      if (tp.needs_grad(xid)) {
        Tensor& gx = tp.grad_ref(xid);
        const double* W = tp.value(wid).data();
        for (int64_t r = 0; r < n; ++r)
          for (int64_t o = 0; o < no; ++o) {
            double gv = g[r * no + o];
            if (gv == 0.0) continue;
            for (int64_t i = 0; i < ni; ++i) gx[r * ni + i] += gv * W[o * ni + i];
          }
      }
      if (tp.needs_grad(wid)) {
        Tensor& gw = tp.grad_ref(wid);
        const double* X = tp.value(xid).data();
        for (int64_t r = 0; r < n; ++r)
          for (int64_t o = 0; o < no; ++o) {
            double gv = g[r * no + o];
            if (gv == 0.0) continue;
            for (int64_t i = 0; i < ni; ++i) gw[o * ni + i] += gv * X[r * ni + i];
          }
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t o = 0; o < no; ++o) gb[o] += g[r * no + o];
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Conv2d: x [B,Ci,H,W], w [Co,Ci,kh,kw], b [Co]
// ---------------------------------------------------------------------------

struct ConvSpec {
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t out_pad = 0;  // transposed conv only
};

inline Var conv2d(const Var& x, const Var& w, const Var& b, ConvSpec spec) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.ndim() != 4 || wv.ndim() != 4 || xv.dim(1) != wv.dim(1)) {
    throw std::invalid_argument("conv2d: incompatible shapes " + xv.shape_str() + " * " + wv.shape_str());
  }
  int64_t B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  int64_t s = spec.stride, p = spec.pad;
  int64_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: output would be empty");
  Tensor out({B, Co, Ho, Wo});
  const double* X = xv.data();
  const double* Wt = wv.data();
  const double* Bs = b.value().data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = Bs[co];
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = oy * s - p + ky;
              if (iy < 0 || iy >= H) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = ox * s - p + kx;
                if (ix < 0 || ix >= W) continue;
                acc += X[((n * Ci + ci) * H + iy) * W + ix] * Wt[((co * Ci + ci) * kh + ky) * kw + kx];
              }
            }
          out[((n * Co + co) * Ho + oy) * Wo + ox] = acc;
        }
  }
  bool ng = t.needs_grad(x.id()) || t.needs_grad(w.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), xid = x.id(), wid = w.id(), bid = b.id();
    t.set_backward(self, [=](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const double* G = g.data();
      if (tp.needs_grad(xid)) {
        Tensor& gx = tp.grad_ref(xid);
        double* GX = gx.data();
        const double* Wt2 = tp.value(wid).data();
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < B; ++n) {
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t oy = 0; oy < Ho; ++oy)
              for (int64_t ox = 0; ox < Wo; ++ox) {
                double gv = G[((n * Co + co) * Ho + oy) * Wo + ox];
                if (gv == 0.0) continue;
                for (int64_t ci = 0; ci < Ci; ++ci)
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t iy = oy * s - p + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      int64_t ix = ox * s - p + kx;
                      if (ix < 0 || ix >= W) continue;
                      GX[((n * Ci + ci) * H + iy) * W + ix] +=
                          gv * Wt2[((co * Ci + ci) * kh + ky) * kw + kx];
                    }
                  }
              }
        }
      }
      if (tp.needs_grad(wid)) {
        Tensor& gw = tp.grad_ref(wid);
        double* GW = gw.data();
        const double* X2 = tp.value(xid).data();
        // parallel over output channels: each co owns a disjoint weight slice,
        // and the batch sum runs in a fixed order (deterministic)
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < Co; ++co) {
          for (int64_t n = 0; n < B; ++n)
            for (int64_t oy = 0; oy < Ho; ++oy)
              for (int64_t ox = 0; ox < Wo; ++ox) {
                double gv = G[((n * Co + co) * Ho + oy) * Wo + ox];
                if (gv == 0.0) continue;
                for (int64_t ci = 0; ci < Ci; ++ci)
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t iy = oy * s - p + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      int64_t ix = ox * s - p + kx;
                      if (ix < 0 || ix >= W) continue;
                      GW[((co * Ci + ci) * kh + ky) * kw + kx] +=
                          gv * X2[((n * Ci + ci) * H + iy) * W + ix];
                    }
                  }
              }
        }
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t n = 0; n < B; ++n)
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t oy = 0; oy < Ho; ++oy)
              for (int64_t ox = 0; ox < Wo; ++ox)
                gb[co] += G[((n * Co + co) * Ho + oy) * Wo + ox];
      }
    });
  }
  return v;
}

// ConvTranspose2d: x [B,Ci,H,W], w [Ci,Co,kh,kw], b [Co].
// out spatial = (in-1)*stride - 2*pad + k + out_pad
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b, ConvSpec spec) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.ndim() != 4 || wv.ndim() != 4 || xv.dim(1) != wv.dim(0)) {
    throw std::invalid_argument("conv_transpose2d: incompatible shapes");
  }
  int64_t B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t Co = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  int64_t s = spec.stride, p = spec.pad, op = spec.out_pad;
  int64_t Ho = (H - 1) * s - 2 * p + kh + op, Wo = (W - 1) * s - 2 * p + kw + op;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv_transpose2d: output would be empty");
  Tensor out({B, Co, Ho, Wo});
  const double* X = xv.data();
  const double* Wt = wv.data();
  const double* Bs = b.value().data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < B; ++n) {
    double* on = out.data() + n * Co * Ho * Wo;
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t i = 0; i < Ho * Wo; ++i) on[co * Ho * Wo + i] = Bs[co];
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t iy = 0; iy < H; ++iy)
        for (int64_t ix = 0; ix < W; ++ix) {
          double xval = X[((n * Ci + ci) * H + iy) * W + ix];
          if (xval == 0.0) continue;
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t oy = iy * s - p + ky;
              if (oy < 0 || oy >= Ho) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ox = ix * s - p + kx;
                if (ox < 0 || ox >= Wo) continue;
                on[(co * Ho + oy) * Wo + ox] += xval * Wt[((ci * Co + co) * kh + ky) * kw + kx];
              }
            }
        }
  }
  bool ng = t.needs_grad(x.id()) || t.needs_grad(w.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), xid = x.id(), wid = w.id(), bid = b.id();
    t.set_backward(self, [=](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const double* G = g.data();
      if (tp.needs_grad(xid)) {
        Tensor& gx = tp.grad_ref(xid);
        double* GX = gx.data();
        const double* Wt2 = tp.value(wid).data();
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < B; ++n) {
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t iy = 0; iy < H; ++iy)
              for (int64_t ix = 0; ix < W; ++ix) {
                double acc = 0.0;
                for (int64_t co = 0; co < Co; ++co)
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t oy = iy * s - p + ky;
                    if (oy < 0 || oy >= Ho) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      int64_t ox = ix * s - p + kx;
                      if (ox < 0 || ox >= Wo) continue;
                      acc += G[((n * Co + co) * Ho + oy) * Wo + ox] *
                             Wt2[((ci * Co + co) * kh + ky) * kw + kx];
                    }
                  }
                GX[((n * Ci + ci) * H + iy) * W + ix] += acc;
              }
        }
      }
      if (tp.needs_grad(wid)) {
        Tensor& gw = tp.grad_ref(wid);
        double* GW = gw.data();
        const double* X2 = tp.value(xid).data();
#pragma omp parallel for schedule(static)
        for (int64_t ci = 0; ci < Ci; ++ci) {
          for (int64_t n = 0; n < B; ++n)
            for (int64_t iy = 0; iy < H; ++iy)
              for (int64_t ix = 0; ix < W; ++ix) {
                double xval = X2[((n * Ci + ci) * H + iy) * W + ix];
                if (xval == 0.0) continue;
                for (int64_t co = 0; co < Co; ++co)
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t oy = iy * s - p + ky;
                    if (oy < 0 || oy >= Ho) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      int64_t ox = ix * s - p + kx;
                      if (ox < 0 || ox >= Wo) continue;
                      GW[((ci * Co + co) * kh + ky) * kw + kx] +=
                          xval * G[((n * Co + co) * Ho + oy) * Wo + ox];
                    }
                  }
              }
        }
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t n = 0; n < B; ++n)
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t i = 0; i < Ho * Wo; ++i) gb[co] += G[(n * Co + co) * Ho * Wo + i];
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Batch normalization over channel axis 1 (input [B,C] or [B,C,H,W]).
// Training normalizes with batch statistics and updates running stats in
// place; eval normalizes with the running stats.
// ---------------------------------------------------------------------------

inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor* running_mean,
                      Tensor* running_var, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (xv.ndim() != 2 && xv.ndim() != 4) throw std::invalid_argument("batch_norm: expected 2-D or 4-D");
  int64_t B = xv.dim(0), C = xv.dim(1);
  int64_t spatial = xv.numel() / (B * C);
  int64_t m = B * spatial;
  if (gamma.value().numel() != C || beta.value().numel() != C ||
      running_mean->numel() != C || running_var->numel() != C) {
    throw std::invalid_argument("batch_norm: channel-parameter size mismatch");
  }
  auto x_at = [&](const double* X, int64_t n, int64_t c, int64_t i) {
    return X[(n * C + c) * spatial + i];
  };
  Tensor mu({C}), var({C});
  if (training) {
    const double* X = xv.data();
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t n = 0; n < B; ++n)
        for (int64_t i = 0; i < spatial; ++i) s += x_at(X, n, c, i);
      mu[c] = s / static_cast<double>(m);
      double v2 = 0.0;
      for (int64_t n = 0; n < B; ++n)
        for (int64_t i = 0; i < spatial; ++i) {
          double d = x_at(X, n, c, i) - mu[c];
          v2 += d * d;
        }
      var[c] = v2 / static_cast<double>(m);
    }
    for (int64_t c = 0; c < C; ++c) {
      (*running_mean)[c] = (1.0 - momentum) * (*running_mean)[c] + momentum * mu[c];
      (*running_var)[c] = (1.0 - momentum) * (*running_var)[c] + momentum * var[c];
    }
  } else {
    mu = *running_mean;
    var = *running_var;
  }
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  {
    const double* X = xv.data();
    const double* G = gamma.value().data();
    const double* Bt = beta.value().data();
    for (int64_t n = 0; n < B; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double inv = 1.0 / std::sqrt(var[c] + eps);
        for (int64_t i = 0; i < spatial; ++i) {
          int64_t off = (n * C + c) * spatial + i;
          xhat[off] = (X[off] - mu[c]) * inv;
          out[off] = G[c] * xhat[off] + Bt[c];
        }
      }
  }
  bool ng = t.needs_grad(x.id()) || t.needs_grad(gamma.id()) || t.needs_grad(beta.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), xid = x.id(), gid = gamma.id(), bid = beta.id();
    t.set_backward(self, [=](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const double* G = g.data();
      if (tp.needs_grad(gid)) {
        Tensor& gg = tp.grad_ref(gid);
        for (int64_t n = 0; n < B; ++n)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < spatial; ++i) {
              int64_t off = (n * C + c) * spatial + i;
              gg[c] += G[off] * xhat[off];
            }
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t n = 0; n < B; ++n)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < spatial; ++i) gb[c] += G[(n * C + c) * spatial + i];
      }
      if (tp.needs_grad(xid)) {
        Tensor& gx = tp.grad_ref(xid);
        const double* Gm = tp.value(gid).data();
        for (int64_t c = 0; c < C; ++c) {
          double inv = 1.0 / std::sqrt(var[c] + eps);
          if (training) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int64_t n = 0; n < B; ++n)
              for (int64_t i = 0; i < spatial; ++i) {
                int64_t off = (n * C + c) * spatial + i;
                sum_g += G[off];
                sum_gx += G[off] * xhat[off];
              }
            double mg = sum_g / static_cast<double>(m);
            double mgx = sum_gx / static_cast<double>(m);
            for (int64_t n = 0; n < B; ++n)
              for (int64_t i = 0; i < spatial; ++i) {
                int64_t off = (n * C + c) * spatial + i;
                gx[off] += Gm[c] * inv * (G[off] - mg - xhat[off] * mgx);
              }
          } else {
            for (int64_t n = 0; n < B; ++n)
              for (int64_t i = 0; i < spatial; ++i) {
                int64_t off = (n * C + c) * spatial + i;
                gx[off] += Gm[c] * inv * G[off];
              }
          }
        }
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Parameter store + Adam
// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  bool trainable = true;
};

class ParamStore {
 public:
  Param& add(const std::string& name, Tensor init, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate param " + name);
    index_[name] = params_.size();
    params_.push_back(Param{name, std::move(init), Tensor{}, Tensor{}, Tensor{}, trainable});
    Param& p = params_.back();
    p.grad = Tensor(p.value.shape());
    p.adam_m = Tensor(p.value.shape());
    p.adam_v = Tensor(p.value.shape());
    return p;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Param& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown param " + name);
    return params_[it->second];
  }

  const Param& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown param " + name);
    return params_[it->second];
  }

  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }

  void zero_grads() {
    for (Param& p : params_) p.grad.fill(0.0);
  }

 private:
  std::vector<Param> params_;  // insertion order is the serialization order
  std::unordered_map<std::string, size_t> index_;
};

// Binds store parameters onto a tape, one leaf per name per step, so that
// multiple uses of a parameter accumulate onto the same leaf.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, ParamStore& store, bool with_grad = true)
      : tape_(tape), store_(store), with_grad_(with_grad) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Param& p = store_.get(name);
    Var v = (with_grad_ && p.trainable) ? tape_.leaf(p.value) : tape_.constant(p.value);
    bound_.emplace(name, v);
    return v;
  }

  // After backward(): copy leaf gradients into the store.
  void export_grads() {
    for (auto& [name, var] : bound_) {
      Param& p = store_.get(name);
      if (!p.trainable || !with_grad_) continue;
      const Tensor& g = tape_.grad(var.id());
      for (int64_t i = 0; i < g.numel(); ++i) p.grad[i] += g[i];
    }
  }

 private:
  Tape& tape_;
  ParamStore& store_;
  bool with_grad_;
  std::map<std::string, Var> bound_;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Param& p : store.all()) {
      if (!p.trainable) continue;
      for (int64_t i = 0; i < p.value.numel(); ++i) {
        double g = p.grad[i];
        p.adam_m[i] = beta1_ * p.adam_m[i] + (1.0 - beta1_) * g;
        p.adam_v[i] = beta2_ * p.adam_v[i] + (1.0 - beta2_) * g * g;
        double mhat = p.adam_m[i] / bc1;
        double vhat = p.adam_v[i] / bc2;
        p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Fan-in-scaled initializers
inline Tensor he_normal_init(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return rng.normal_tensor(std::move(shape), 0.0, stddev);
}

inline Tensor glorot_normal_init(Rng& rng, std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return rng.normal_tensor(std::move(shape), 0.0, stddev);
}

}  // namespace capsosr

#endif  // CAPSOSR_NN_HPP_
