#ifndef CAPSOSR_PROTOCOL_HPP_
#define CAPSOSR_PROTOCOL_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capsosr/random.hpp"
#include "capsosr/tensor.hpp"

namespace capsosr {

inline constexpr uint64_t kSplitStreamTag = 11;
inline constexpr uint64_t kNoiseStreamTag = 12;

// ---------------------------------------------------------------------------
// Openness: O = 1 - sqrt(K / M)
// ---------------------------------------------------------------------------

inline double openness(int64_t k_train, int64_t m_test) {
  if (k_train < 1 || k_train > m_test) {
    throw std::invalid_argument("openness: requires 1 <= K <= M");
  }
  return 1.0 - std::sqrt(static_cast<double>(k_train) / static_cast<double>(m_test));
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::string dataset;
  uint64_t seed = 0;
  std::vector<int64_t> known_classes;
  std::vector<int64_t> unknown_classes;
  double openness_value = 0.0;
};

inline std::vector<SplitSpec> make_splits(const std::string& dataset_id, int64_t n_splits,
                                          int64_t k_known, int64_t total_classes, uint64_t seed) {
  if (k_known < 1 || k_known >= total_classes) {
    throw std::invalid_argument("make_splits: need 1 <= K_known < total classes");
  }
  if (n_splits < 1) throw std::invalid_argument("make_splits: n_splits must be >= 1");
  Rng rng(mix_seed(seed, kSplitStreamTag));
  std::vector<SplitSpec> out;
  for (int64_t s = 0; s < n_splits; ++s) {
    std::vector<int64_t> classes(static_cast<size_t>(total_classes));
    std::iota(classes.begin(), classes.end(), 0);
    rng.shuffle(classes);
    SplitSpec spec;
    spec.dataset = dataset_id;
    spec.seed = seed;
    spec.known_classes.assign(classes.begin(), classes.begin() + k_known);
    spec.unknown_classes.assign(classes.begin() + k_known, classes.end());
    std::sort(spec.known_classes.begin(), spec.known_classes.end());
    std::sort(spec.unknown_classes.begin(), spec.unknown_classes.end());
    spec.openness_value = openness(k_known, total_classes);
    out.push_back(std::move(spec));
  }
  return out;
}

// One document per split set; key order is fixed so re-runs are byte-stable.
inline void save_splits(const std::vector<SplitSpec>& splits, const std::string& path) {
  if (splits.empty()) throw std::invalid_argument("save_splits: empty split list");
  nlohmann::ordered_json doc;
  doc["dataset"] = splits.front().dataset;
  doc["seed"] = splits.front().seed;
  doc["splits"] = nlohmann::ordered_json::array();
  for (const SplitSpec& s : splits) {
    nlohmann::ordered_json js;
    js["known"] = s.known_classes;
    js["unknown"] = s.unknown_classes;
    js["openness"] = s.openness_value;
    doc["splits"].push_back(std::move(js));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_splits: cannot open " + path);
  f << doc.dump(2) << "\n";
}

inline std::vector<SplitSpec> load_splits(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_splits: cannot open " + path);
  nlohmann::json doc = nlohmann::json::parse(f);
  std::vector<SplitSpec> out;
  for (const auto& js : doc.at("splits")) {
    SplitSpec s;
    s.dataset = doc.at("dataset").get<std::string>();
    s.seed = doc.at("seed").get<uint64_t>();
    s.known_classes = js.at("known").get<std::vector<int64_t>>();
    s.unknown_classes = js.at("unknown").get<std::vector<int64_t>>();
    s.openness_value = js.value("openness", 0.0);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("load_splits: no splits in " + path);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic open-set image sources
// ---------------------------------------------------------------------------

// n images with i.i.d. uniform [0,1) pixels from a seeded generator.
inline Tensor synth_noise_dataset(int64_t n, std::vector<int64_t> chw, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth_noise_dataset: n must be >= 1");
  if (chw.size() != 3) throw std::invalid_argument("synth_noise_dataset: shape must be [C,H,W]");
  Rng rng(mix_seed(seed, kNoiseStreamTag));
  return rng.uniform_tensor({n, chw[0], chw[1], chw[2]});
}

// clip(digit + noise, 0, 1), pixelwise
inline Tensor synth_mnist_noise(const Tensor& digits, const Tensor& noise) {
  if (!digits.same_shape(noise)) throw std::invalid_argument("synth_mnist_noise: shape mismatch");
  Tensor out(digits.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = std::clamp(digits[i] + noise[i], 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Rank-statistic (Mann-Whitney) AUROC with ties counted 1/2: the probability
// that a random known sample outscores a random unknown one.
inline double auroc(const std::vector<double>& known_scores,
                    const std::vector<double>& unknown_scores) {
  if (known_scores.empty() || unknown_scores.empty()) {
    throw std::invalid_argument("auroc: both score lists must be non-empty");
  }
  size_t nk = known_scores.size(), nu = unknown_scores.size();
  std::vector<std::pair<double, int>> all;
  all.reserve(nk + nu);
  for (double s : known_scores) all.emplace_back(s, 1);
  for (double s : unknown_scores) all.emplace_back(s, 0);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  // midranks over tie groups
  double rank_sum_known = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1 .. j
    for (size_t t = i; t < j; ++t) {
      if (all[t].second == 1) rank_sum_known += midrank;
    }
    i = j;
  }
  double u = rank_sum_known - static_cast<double>(nk) * (static_cast<double>(nk) + 1.0) / 2.0;
  return u / (static_cast<double>(nk) * static_cast<double>(nu));
}

struct MacroF1Result {
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<int64_t> degenerate_classes;  // no true and no predicted members
};

// Macro-averaged F1 over labels 0 .. n_classes-1. A class with P + R = 0
// contributes 0; classes absent from both y_true and y_pred are flagged.
inline MacroF1Result macro_f1(const std::vector<int64_t>& y_true,
                              const std::vector<int64_t>& y_pred, int64_t n_classes) {
  if (y_true.size() != y_pred.size()) throw std::invalid_argument("macro_f1: length mismatch");
  if (n_classes < 1) throw std::invalid_argument("macro_f1: n_classes must be >= 1");
  std::vector<int64_t> tp(static_cast<size_t>(n_classes)), fp(static_cast<size_t>(n_classes)),
      fn(static_cast<size_t>(n_classes));
  for (size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= n_classes || y_pred[i] < 0 || y_pred[i] >= n_classes) {
      throw std::invalid_argument("macro_f1: label outside 0..n_classes-1");
    }
    if (y_true[i] == y_pred[i]) {
      ++tp[static_cast<size_t>(y_true[i])];
    } else {
      ++fn[static_cast<size_t>(y_true[i])];
      ++fp[static_cast<size_t>(y_pred[i])];
    }
  }
  MacroF1Result res;
  res.per_class_f1.resize(static_cast<size_t>(n_classes), 0.0);
  double total = 0.0;
  for (int64_t c = 0; c < n_classes; ++c) {
    size_t ci = static_cast<size_t>(c);
    int64_t denom_p = tp[ci] + fp[ci], denom_r = tp[ci] + fn[ci];
    if (denom_p == 0 && denom_r == 0) res.degenerate_classes.push_back(c);
    double p = denom_p > 0 ? static_cast<double>(tp[ci]) / static_cast<double>(denom_p) : 0.0;
    double r = denom_r > 0 ? static_cast<double>(tp[ci]) / static_cast<double>(denom_r) : 0.0;
    double f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    res.per_class_f1[ci] = f1;
    total += f1;
  }
  res.macro_f1 = total / static_cast<double>(n_classes);
  return res;
}

struct MetricsReport {
  double auroc = std::nan("");
  double macro_f1 = 0.0;
  double closed_set_accuracy = 0.0;
  std::vector<double> per_class_f1;
  std::vector<int64_t> degenerate_classes;
  int64_t n_known = 0;
  int64_t n_unknown = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    if (std::isnan(auroc)) {
      j["auroc"] = nullptr;
    } else {
      j["auroc"] = auroc;
    }
    j["macro_f1"] = macro_f1;
    j["closed_set_accuracy"] = closed_set_accuracy;
    j["per_class_f1"] = per_class_f1;
    j["degenerate_classes"] = degenerate_classes;
    j["n_known"] = n_known;
    j["n_unknown"] = n_unknown;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    if (!j.at("auroc").is_null()) r.auroc = j.at("auroc").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.closed_set_accuracy = j.at("closed_set_accuracy").get<double>();
    r.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
    r.degenerate_classes = j.at("degenerate_classes").get<std::vector<int64_t>>();
    r.n_known = j.at("n_known").get<int64_t>();
    r.n_unknown = j.at("n_unknown").get<int64_t>();
    return r;
  }
};

}  // namespace capsosr

#endif  // CAPSOSR_PROTOCOL_HPP_
