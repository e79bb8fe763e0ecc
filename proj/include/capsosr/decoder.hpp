#ifndef CAPSOSR_DECODER_HPP_
#define CAPSOSR_DECODER_HPP_

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "capsosr/autodiff.hpp"
#include "capsosr/random.hpp"
#include "capsosr/tensor.hpp"

namespace capsosr {

// ---------------------------------------------------------------------------
// Class embedding shift: every capsule slot k receives z[k] + embedding(y)
// ---------------------------------------------------------------------------

inline Tensor embed_and_shift(const Tensor& z, int64_t label, const Tensor& table) {
  if (z.ndim() != 2 || table.ndim() != 2 || z.dim(1) != table.dim(1)) {
    throw std::invalid_argument("embed_and_shift: shape mismatch");
  }
  if (label < 0 || label >= table.dim(0)) {
    throw std::invalid_argument("embed_and_shift: label out of range");
  }
  int64_t K = z.dim(0), d = z.dim(1);
  Tensor out(z.shape());
  for (int64_t k = 0; k < K; ++k)
    for (int64_t i = 0; i < d; ++i) out[k * d + i] = z[k * d + i] + table[label * d + i];
  return out;
}

// Tape: rows of `table` [K,d] selected per sample -> [B,d]
inline Var embedding_rows(const Var& table, const std::vector<int64_t>& labels) {
  Tape& t = *table.tape();
  const Tensor& tv = table.value();
  if (tv.ndim() != 2) throw std::invalid_argument("embedding_rows: table must be 2-D");
  int64_t B = static_cast<int64_t>(labels.size()), K = tv.dim(0), d = tv.dim(1);
  Tensor out({B, d});
  for (int64_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K) throw std::invalid_argument("embedding_rows: label out of range");
    for (int64_t i = 0; i < d; ++i) out[b * d + i] = tv[labels[b] * d + i];
  }
  bool ng = t.needs_grad(table.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), tid = table.id();
    t.set_backward(self, [self, tid, labels, d](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      Tensor& gt = tp.grad_ref(tid);
      for (size_t b = 0; b < labels.size(); ++b)
        for (int64_t i = 0; i < d; ++i) gt[labels[b] * d + i] += g[static_cast<int64_t>(b) * d + i];
    });
  }
  return v;
}

// z [B,K,d] + e [B,d] broadcast over the K slots
inline Var add_slotwise(const Var& z, const Var& e) {
  detail::check_same_tape(z, e);
  Tape& t = *z.tape();
  const Tensor& zv = z.value();
  const Tensor& ev = e.value();
  if (zv.ndim() != 3 || ev.ndim() != 2 || zv.dim(0) != ev.dim(0) || zv.dim(2) != ev.dim(1)) {
    throw std::invalid_argument("add_slotwise: shape mismatch");
  }
  int64_t B = zv.dim(0), K = zv.dim(1), d = zv.dim(2);
  Tensor out(zv.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t k = 0; k < K; ++k)
      for (int64_t i = 0; i < d; ++i) out[(b * K + k) * d + i] = zv[(b * K + k) * d + i] + ev[b * d + i];
  bool ng = t.needs_grad(z.id()) || t.needs_grad(e.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), zid = z.id(), eid = e.id();
    t.set_backward(self, [self, zid, eid, B, K, d](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      if (tp.needs_grad(zid)) {
        Tensor& gz = tp.grad_ref(zid);
        for (int64_t i = 0; i < g.numel(); ++i) gz[i] += g[i];
      }
      if (tp.needs_grad(eid)) {
        Tensor& ge = tp.grad_ref(eid);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t k = 0; k < K; ++k)
            for (int64_t i = 0; i < d; ++i) ge[b * d + i] += g[(b * K + k) * d + i];
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Reconstruction loss: per-sample sum of squared pixel differences, averaged
// over the batch. 4-D inputs are treated as [B,...]; lower ranks as one sample.
// ---------------------------------------------------------------------------

inline double reconstruction_loss(const Tensor& x_hat, const Tensor& x) {
  if (!x_hat.same_shape(x)) throw std::invalid_argument("reconstruction_loss: shape mismatch");
  int64_t batch = x.ndim() == 4 ? x.dim(0) : 1;
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = x_hat[i] - x[i];
    s += d * d;
  }
  return s / static_cast<double>(batch);
}

inline Var reconstruction_loss_op(const Var& x_hat, const Var& x_target) {
  detail::check_same_shape(x_hat, x_target, "reconstruction_loss_op");
  int64_t batch = x_hat.value().ndim() == 4 ? x_hat.value().dim(0) : 1;
  Var diff = sub(x_hat, x_target);
  return mul_scalar(sum(square(diff)), 1.0 / static_cast<double>(batch));
}

// ---------------------------------------------------------------------------
// Teacher forcing: the decoder sees the true label during training and the
// estimate otherwise. The evaluation path never reads y_true.
// ---------------------------------------------------------------------------

inline int64_t select_decoder_label(std::optional<int64_t> y_true, int64_t y_pred, bool training) {
  if (training) {
    if (!y_true.has_value()) throw std::invalid_argument("select_decoder_label: training requires y_true");
    return *y_true;
  }
  return y_pred;
}

// ---------------------------------------------------------------------------
// Lateral dropout gates: each gate is open (scaled by 1/(1-p)) with
// probability 1-p during training. With rate >= 1 every gate is closed.
// ---------------------------------------------------------------------------

struct DropoutGates {
  std::vector<double> scale;  // per-lateral multiplier (0 = dropped)
};

inline DropoutGates make_dropout_gates(int64_t n_laterals, double rate, bool training,
                                       Rng& noise_source) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("make_dropout_gates: rate in [0,1]");
  DropoutGates g;
  g.scale.resize(static_cast<size_t>(n_laterals), 1.0);
  if (!training || rate == 0.0) return g;
  for (auto& s : g.scale) {
    bool keep = rate < 1.0 && noise_source.uniform() >= rate;
    s = keep ? 1.0 / (1.0 - rate) : 0.0;
  }
  return g;
}

}  // namespace capsosr

#endif  // CAPSOSR_DECODER_HPP_
