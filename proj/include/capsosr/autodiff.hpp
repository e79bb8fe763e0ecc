#ifndef CAPSOSR_AUTODIFF_HPP_
#define CAPSOSR_AUTODIFF_HPP_

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "capsosr/tensor.hpp"

namespace capsosr {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int32_t id) : tape_(tape), id_(id) {}
  const Tensor& value() const;
  const Tensor& grad() const;
  int32_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int32_t id_ = -1;
};

// Wengert-list reverse-mode tape. Nodes are appended in topological order
// during the forward pass; backward() walks them once in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false); }

  // Leaf whose gradient is requested (a trainable parameter or an input
  // being differentiated).
  Var leaf(Tensor value) { return push(std::move(value), true); }

  Var push(Tensor value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, needs_grad});
    return Var(this, static_cast<int32_t>(nodes_.size()) - 1);
  }

  void set_backward(int32_t id, std::function<void(Tape&)> fn) {
    nodes_[static_cast<size_t>(id)].backward = std::move(fn);
  }

  const Tensor& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  // Gradient buffer of a node; allocated on demand (zeros).
  Tensor& grad_ref(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_alloc) {
      n.grad = Tensor(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

  bool grad_reached(int32_t id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }

  // Gradient of a node after backward(); zeros if the node was never reached.
  const Tensor& grad(int32_t id) {
    return grad_ref(id);
  }

  // Runs reverse accumulation from `root` (must be a scalar).
  void backward(const Var& root) {
    if (root.tape() != this) throw std::invalid_argument("backward: var not on this tape");
    if (value(root.id()).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    grad_ref(root.id())[0] = 1.0;
    for (int32_t i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.needs_grad || !n.backward || !n.grad_alloc) continue;
      n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
    bool grad_alloc = false;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void check_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("ops require vars on the same tape");
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                                " vs " + b.value().shape_str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "add");
  Tape& t = *a.tape();
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id(), bid = b.id();
    t.set_backward(self, [self, aid, bid](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      if (tp.needs_grad(aid)) {
        Tensor& ga = tp.grad_ref(aid);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      }
    });
  }
  return v;
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id(), bid = b.id();
    t.set_backward(self, [self, aid, bid](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      if (tp.needs_grad(aid)) {
        Tensor& ga = tp.grad_ref(aid);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    });
  }
  return v;
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id(), bid = b.id();
    t.set_backward(self, [self, aid, bid](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      if (tp.needs_grad(aid)) {
        Tensor& ga = tp.grad_ref(aid);
        const Tensor& bv = tp.value(bid);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        const Tensor& av = tp.value(aid);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return v;
}

inline Var div(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "div");
  Tape& t = *a.tape();
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
  bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id(), bid = b.id();
    t.set_backward(self, [self, aid, bid](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const Tensor& av = tp.value(aid);
      const Tensor& bv = tp.value(bid);
      if (tp.needs_grad(aid)) {
        Tensor& ga = tp.grad_ref(aid);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / bv[i];
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// fwd: y = f(x); dydx: given (x, y) returns f'(x)
template <typename F, typename D>
Var ew_unary(const Var& a, F fwd, D dydx) {
  Tape& t = *a.tape();
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(a.value()[i]);
  bool ng = t.needs_grad(a.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id();
    t.set_backward(self, [self, aid, dydx](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      const Tensor& x = tp.value(aid);
      const Tensor& y = tp.value(self);
      Tensor& ga = tp.grad_ref(aid);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dydx(x[i], y[i]);
    });
  }
  return v;
}

}  // namespace detail

inline Var neg(const Var& a) {
  return detail::ew_unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var exp(const Var& a) {
  return detail::ew_unary(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::ew_unary(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  return detail::ew_unary(a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}

inline Var square(const Var& a) {
  return detail::ew_unary(a, [](double x) { return x * x; },
                          [](double x, double) { return 2.0 * x; });
}

inline Var relu(const Var& a) {
  return detail::ew_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::ew_unary(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

// log(1 + exp(x)) with the overflow-safe branch
inline double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Var softplus(const Var& a) {
  return detail::ew_unary(
      a, [](double x) { return softplus_value(x); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

inline Var clamp_min(const Var& a, double lo) {
  return detail::ew_unary(a, [lo](double x) { return x < lo ? lo : x; },
                          [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::ew_unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var mul_scalar(const Var& a, double c) {
  return detail::ew_unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tape& t = *a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  bool ng = t.needs_grad(a.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id();
    t.set_backward(self, [self, aid](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      Tensor& ga = tp.grad_ref(aid);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  }
  return v;
}

// Identity forward, zero backward.
inline Var stop_gradient(const Var& a) {
  Tape& t = *a.tape();
  return t.push(a.value(), false);
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
  bool ng = t.needs_grad(a.id());
  Var v = t.push(Tensor::scalar(s), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id();
    t.set_backward(self, [self, aid](Tape& tp) {
      double g = tp.grad_ref(self)[0];
      Tensor& ga = tp.grad_ref(aid);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  }
  return v;
}

inline Var mean(const Var& a) {
  int64_t n = a.value().numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(n));
}

// Sums out the trailing axis: [..., f] -> [...]
inline Var sum_last_axis(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (av.ndim() < 1) throw std::invalid_argument("sum_last_axis: rank must be >= 1");
  int64_t f = av.dim(av.ndim() - 1);
  int64_t rows = av.numel() / f;
  std::vector<int64_t> shape(av.shape().begin(), av.shape().end() - 1);
  Tensor out(shape);
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t i = 0; i < f; ++i) s += av[r * f + i];
    out[r] = s;
  }
  bool ng = t.needs_grad(a.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id();
    t.set_backward(self, [self, aid, f, rows](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      Tensor& ga = tp.grad_ref(aid);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < f; ++i) ga[r * f + i] += g[r];
    });
  }
  return v;
}

// Picks a[i, idx[i]] from a [n, m] matrix -> [n]
inline Var gather_index(const Var& a, const std::vector<int64_t>& idx) {
  Tape& t = *a.tape();
  if (a.value().ndim() != 2) throw std::invalid_argument("gather_index: expected 2-D input");
  int64_t n = a.value().dim(0), m = a.value().dim(1);
  if (static_cast<int64_t>(idx.size()) != n) throw std::invalid_argument("gather_index: index count");
  Tensor out({n});
  for (int64_t i = 0; i < n; ++i) {
    if (idx[i] < 0 || idx[i] >= m) throw std::invalid_argument("gather_index: index out of range");
    out[i] = a.value()[i * m + idx[i]];
  }
  bool ng = t.needs_grad(a.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id();
    t.set_backward(self, [self, aid, idx, m](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      Tensor& ga = tp.grad_ref(aid);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i * m + idx[i]] += g[i];
    });
  }
  return v;
}

inline Var matmul(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  if (a.value().ndim() != 2 || b.value().ndim() != 2 || a.value().dim(1) != b.value().dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + a.value().shape_str() + " x " +
                                b.value().shape_str());
  }
  Tape& t = *a.tape();
  int64_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  Tensor out({m, n});
  {
    const double* A = a.value().data();
    const double* B = b.value().data();
    double* C = out.data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < k; ++p) {
        double av = A[i * k + p];
        if (av == 0.0) continue;
        for (int64_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
      }
  }
  bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
  Var v = t.push(std::move(out), ng);
  if (ng) {
    int32_t self = v.id(), aid = a.id(), bid = b.id();
    t.set_backward(self, [self, aid, bid, m, k, n](Tape& tp) {
      const Tensor& g = tp.grad_ref(self);
      if (tp.needs_grad(aid)) {
        Tensor& ga = tp.grad_ref(aid);  // dA = G @ B^T
        const double* B = tp.value(bid).data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            double gv = g[i * n + j];
            if (gv == 0.0) continue;
            for (int64_t p = 0; p < k; ++p) ga[i * k + p] += gv * B[p * n + j];
          }
      }
      if (tp.needs_grad(bid)) {
        Tensor& gb = tp.grad_ref(bid);  // dB = A^T @ G
        const double* A = tp.value(aid).data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double av = A[i * k + p];
            if (av == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return v;
}

// Mean negative log-likelihood of labels under softmax(logits). Stable
// log-sum-exp; backward is (softmax - onehot) / batch.
inline Var cross_entropy_with_labels(const Var& logits, const std::vector<int64_t>& labels) {
  Tape& t = *logits.tape();
  if (logits.value().ndim() != 2) throw std::invalid_argument("cross_entropy: expected [B,K] logits");
  int64_t bsz = logits.value().dim(0), k = logits.value().dim(1);
  if (static_cast<int64_t>(labels.size()) != bsz) throw std::invalid_argument("cross_entropy: label count");
  const Tensor& lv = logits.value();
  Tensor probs({bsz, k});
  double loss = 0.0;
  for (int64_t i = 0; i < bsz; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::invalid_argument("cross_entropy: label out of range");
    double mx = lv[i * k];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, lv[i * k + j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(lv[i * k + j] - mx);
    double logz = mx + std::log(z);
    for (int64_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(lv[i * k + j] - logz);
    loss -= lv[i * k + labels[i]] - logz;
  }
  loss /= static_cast<double>(bsz);
  bool ng = t.needs_grad(logits.id());
  Var v = t.push(Tensor::scalar(loss), ng);
  if (ng) {
    int32_t self = v.id(), lid = logits.id();
    t.set_backward(self, [self, lid, probs, labels, bsz, k](Tape& tp) {
      double g = tp.grad_ref(self)[0] / static_cast<double>(bsz);
      Tensor& gl = tp.grad_ref(lid);
      for (int64_t i = 0; i < bsz; ++i)
        for (int64_t j = 0; j < k; ++j)
          gl[i * k + j] += g * (probs[i * k + j] - (labels[i] == j ? 1.0 : 0.0));
    });
  }
  return v;
}

}  // namespace capsosr

#endif  // CAPSOSR_AUTODIFF_HPP_
