#ifndef CAPSOSR_DETECTOR_HPP_
#define CAPSOSR_DETECTOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsosr/targets.hpp"
#include "capsosr/tensor.hpp"
#include "capsosr/variational.hpp"

namespace capsosr {

inline constexpr double kFitVarianceFloor = 1e-6;

enum class DetectorKind { kDistanceThreshold, kDensityFit };

// How density mode picks the class of an accepted sample: the Algorithm-1
// reading (max log-density) or the fixed-target reading (argmin capsule KL).
enum class DensityClassRule { kMaxLogDensity, kMinCapsuleKl };

// Per-sample open-set decision. `decision` is a 0-based class in [0, K) or
// K for unknown.
struct OpenSetPrediction {
  int64_t decision = 0;
  double knownness_score = 0.0;
  std::vector<double> distances;
  DetectorKind detector_used = DetectorKind::kDistanceThreshold;
};

struct Thresholds {
  double tau = 0.0;                    // knownness-score threshold (distance mode)
  std::vector<double> tau_per_class;   // per-class log-density thresholds (density mode)
  double tau_l2 = 0.0;                 // L2 fallback radius (density mode)
  double retention = 0.95;
  bool calibrated = false;
  bool density_calibrated = false;
};

// Diagonal Gaussian fitted per class over the flattened latent mean vectors
// of correctly classified calibration samples.
struct ClassGaussianFit {
  Tensor means;  // [K, D]
  Tensor vars;   // [K, D]
  std::vector<int64_t> counts;
  bool fitted = false;
};

// ---------------------------------------------------------------------------
// Scores and calibration
// ---------------------------------------------------------------------------

// Higher = more known: the negated minimum capsule-to-target distance.
inline double knownness_score(const std::vector<double>& distances) {
  if (distances.empty()) throw std::invalid_argument("knownness_score: empty distances");
  return -*std::min_element(distances.begin(), distances.end());
}

// tau = sorted_scores[floor((1 - retention) * n)]; samples with score >= tau
// are accepted, so at most floor((1-retention)*n) calibration samples are
// rejected.
inline double calibrate_threshold(std::vector<double> scores, double retention) {
  if (scores.empty()) throw std::invalid_argument("calibrate_threshold: empty scores");
  if (!(retention > 0.0) || retention > 1.0) {
    throw std::invalid_argument("calibrate_threshold: retention must be in (0, 1]");
  }
  std::sort(scores.begin(), scores.end());
  int64_t n = static_cast<int64_t>(scores.size());
  int64_t idx = static_cast<int64_t>(std::floor((1.0 - retention) * static_cast<double>(n)));
  idx = std::clamp<int64_t>(idx, 0, n - 1);
  return scores[static_cast<size_t>(idx)];
}

// ---------------------------------------------------------------------------
// Distance-threshold detector
// ---------------------------------------------------------------------------

inline OpenSetPrediction predict_open_set(const CapsuleDistribution& c, const TargetBank& bank,
                                          const Thresholds& thresholds) {
  if (!thresholds.calibrated) {
    throw std::logic_error("predict_open_set: thresholds are not calibrated");
  }
  int64_t K = bank.num_classes();
  OpenSetPrediction pred;
  pred.detector_used = DetectorKind::kDistanceThreshold;
  pred.distances.resize(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) {
    CapsuleDistribution t = bank.target(k);
    pred.distances[static_cast<size_t>(k)] = capsule_distance(c, t.mu, t.var);
  }
  pred.knownness_score = knownness_score(pred.distances);
  if (pred.knownness_score < thresholds.tau) {
    pred.decision = K;  // unknown
  } else {
    pred.decision = static_cast<int64_t>(
        std::min_element(pred.distances.begin(), pred.distances.end()) - pred.distances.begin());
  }
  return pred;
}

// ---------------------------------------------------------------------------
// Density detector (per-class Gaussian fit in latent space)
// ---------------------------------------------------------------------------

// latents: [N, D] flattened per-sample mean vectors; only samples with
// labels[i] == predictions[i] enter the fit of class labels[i].
inline ClassGaussianFit fit_class_gaussians(const Tensor& latents,
                                            const std::vector<int64_t>& labels,
                                            const std::vector<int64_t>& predictions,
                                            int64_t k_classes) {
  if (latents.ndim() != 2) throw std::invalid_argument("fit_class_gaussians: latents must be [N,D]");
  int64_t n = latents.dim(0), dim = latents.dim(1);
  if (static_cast<int64_t>(labels.size()) != n || static_cast<int64_t>(predictions.size()) != n) {
    throw std::invalid_argument("fit_class_gaussians: label/prediction count mismatch");
  }
  ClassGaussianFit fit;
  fit.means = Tensor({k_classes, dim});
  fit.vars = Tensor({k_classes, dim});
  fit.counts.assign(static_cast<size_t>(k_classes), 0);
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k_classes) {
      throw std::invalid_argument("fit_class_gaussians: label out of range");
    }
    if (labels[i] != predictions[i]) continue;
    int64_t c = labels[i];
    ++fit.counts[static_cast<size_t>(c)];
    for (int64_t j = 0; j < dim; ++j) fit.means[c * dim + j] += latents[i * dim + j];
  }
  for (int64_t c = 0; c < k_classes; ++c) {
    if (fit.counts[static_cast<size_t>(c)] < 2) {
      throw std::runtime_error("fit_class_gaussians: class " + std::to_string(c) +
                               " has fewer than 2 correctly classified samples");
    }
    for (int64_t j = 0; j < dim; ++j) fit.means[c * dim + j] /= static_cast<double>(fit.counts[static_cast<size_t>(c)]);
  }
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] != predictions[i]) continue;
    int64_t c = labels[i];
    for (int64_t j = 0; j < dim; ++j) {
      double d = latents[i * dim + j] - fit.means[c * dim + j];
      fit.vars[c * dim + j] += d * d;
    }
  }
  for (int64_t c = 0; c < k_classes; ++c) {
    double denom = static_cast<double>(fit.counts[static_cast<size_t>(c)] - 1);
    for (int64_t j = 0; j < dim; ++j) {
      fit.vars[c * dim + j] = std::max(fit.vars[c * dim + j] / denom, kFitVarianceFloor);
    }
  }
  fit.fitted = true;
  return fit;
}

// log N(z; u_c, diag m_c)
inline double class_log_density(const Tensor& latent, const ClassGaussianFit& fit, int64_t c) {
  int64_t dim = fit.means.dim(1);
  if (latent.numel() != dim) throw std::invalid_argument("class_log_density: dimension mismatch");
  double ld = 0.0;
  for (int64_t j = 0; j < dim; ++j) {
    double m = fit.vars[c * dim + j];
    double d = latent[j] - fit.means[c * dim + j];
    ld += -0.5 * std::log(2.0 * M_PI * m) - 0.5 * d * d / m;
  }
  return ld;
}

inline double nearest_centroid_distance(const Tensor& latent, const ClassGaussianFit& fit) {
  int64_t K = fit.means.dim(0), dim = fit.means.dim(1);
  double best = std::numeric_limits<double>::infinity();
  for (int64_t c = 0; c < K; ++c) {
    double s = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
      double d = latent[j] - fit.means[c * dim + j];
      s += d * d;
    }
    best = std::min(best, std::sqrt(s));
  }
  return best;
}

// Algorithm-1 test rule: unknown when every class log-density falls below its
// threshold or when the L2 fallback triggers; otherwise the class of maximum
// log-density (or, under kMinCapsuleKl, the caller-supplied argmin-KL class).
inline OpenSetPrediction density_predict(const Tensor& latent, const ClassGaussianFit& fit,
                                         const Thresholds& thresholds,
                                         DensityClassRule rule = DensityClassRule::kMaxLogDensity,
                                         int64_t min_kl_class = -1) {
  if (!fit.fitted || !thresholds.density_calibrated) {
    throw std::logic_error("density_predict: detector is not calibrated");
  }
  int64_t K = fit.means.dim(0);
  OpenSetPrediction pred;
  pred.detector_used = DetectorKind::kDensityFit;
  pred.distances.resize(static_cast<size_t>(K));
  double best_ld = -std::numeric_limits<double>::infinity();
  int64_t best_c = 0;
  bool any_above = false;
  for (int64_t c = 0; c < K; ++c) {
    double ld = class_log_density(latent, fit, c);
    pred.distances[static_cast<size_t>(c)] = -ld;  // store as distance-like values
    if (ld >= thresholds.tau_per_class[static_cast<size_t>(c)]) any_above = true;
    if (ld > best_ld) {
      best_ld = ld;
      best_c = c;
    }
  }
  pred.knownness_score = best_ld;
  double l2 = nearest_centroid_distance(latent, fit);
  if (!any_above || l2 > thresholds.tau_l2) {
    pred.decision = K;
  } else if (rule == DensityClassRule::kMinCapsuleKl && min_kl_class >= 0) {
    pred.decision = min_kl_class;
  } else {
    pred.decision = best_c;
  }
  return pred;
}

}  // namespace capsosr

#endif  // CAPSOSR_DETECTOR_HPP_
