#pragma once

// Benign/malignant classification of ROIs from Ki statistics: class-weighted
// L2 logistic regression, stratified folds, ROC curves and AUC.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "moco/errors.hpp"

namespace moco {

enum Label : int { kBenign = 0, kMalignant = 1 };

struct RoiRecord {
  std::string id;
  int label = kBenign;
  std::array<double, 3> features{};  // Ki mean, max, std

  void validate() const {
    if (label != kBenign && label != kMalignant) throw ConfigError("ROI " + id + " has a non-binary label");
    for (double f : features)
      if (!std::isfinite(f)) throw NumericError("ROI " + id + " has a non-finite feature");
  }
};

inline std::array<std::size_t, 2> class_counts(const std::vector<int>& labels) {
  std::array<std::size_t, 2> c{0, 0};
  for (int l : labels) {
    if (l != kBenign && l != kMalignant) throw ConfigError("labels must be 0 or 1");
    ++c[static_cast<std::size_t>(l)];
  }
  return c;
}

inline std::vector<int> labels_of(const std::vector<RoiRecord>& rs) {
  std::vector<int> l;
  for (const auto& r : rs) l.push_back(r.label);
  return l;
}

// Per-class sample weights giving both classes equal total weight, normalised
// so all weights sum to the record count.
inline std::array<double, 2> balanced_class_weights(const std::vector<int>& labels) {
  const auto c = class_counts(labels);
  if (c[0] == 0 || c[1] == 0) throw ConfigError("both classes must be present");
  const double n = static_cast<double>(labels.size());
  return {n / (2.0 * static_cast<double>(c[0])), n / (2.0 * static_cast<double>(c[1]))};
}

struct LogisticOptions {
  std::size_t max_iterations = 20000;
  double learning_rate = 1.0;
  double tolerance = 1e-6;  // on the gradient norm
  double l2 = 1.0;          // on standardised weights, not the intercept
};

struct LogisticModel {
  std::array<double, 3> weights{}, mean{}, scale{1.0, 1.0, 1.0};
  double bias = 0.0;
  std::size_t iterations = 0;
  double gradient_norm = 0.0;

  double decision(const std::array<double, 3>& x) const {
    double z = bias;
    for (std::size_t j = 0; j < 3; ++j) z += weights[j] * (x[j] - mean[j]) / scale[j];
    return z;
  }
  double probability(const std::array<double, 3>& x) const { return 1.0 / (1.0 + std::exp(-decision(x))); }
  int predict(const std::array<double, 3>& x) const { return decision(x) >= 0.0 ? kMalignant : kBenign; }
};

// Minimises (1/n) [ sum_i s_i nll_i + l2/2 |w|^2 ] by gradient descent on
// internally standardised features.
inline LogisticModel logistic_fit(const std::vector<RoiRecord>& records, const std::array<double, 2>& class_weights,
                                  const LogisticOptions& opt = {}) {
  const auto counts = class_counts(labels_of(records));
  if (counts[0] == 0 || counts[1] == 0) throw ConfigError("logistic_fit needs both classes");
  for (const auto& r : records) r.validate();
  if (!(class_weights[0] > 0.0) || !(class_weights[1] > 0.0)) throw ConfigError("class weights must be positive");
  const std::size_t n = records.size();
  const double nd = static_cast<double>(n);
  LogisticModel m;
  for (std::size_t j = 0; j < 3; ++j) {
    double mu = 0.0;
    for (const auto& r : records) mu += r.features[j];
    mu /= nd;
    double var = 0.0;
    for (const auto& r : records) var += (r.features[j] - mu) * (r.features[j] - mu);
    const double sd = std::sqrt(var / nd);
    m.mean[j] = mu;
    m.scale[j] = sd > 0.0 ? sd : 1.0;
  }
  std::vector<std::array<double, 3>> z(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) z[i][j] = (records[i].features[j] - m.mean[j]) / m.scale[j];

  for (m.iterations = 0; m.iterations < opt.max_iterations; ++m.iterations) {
    std::array<double, 4> g{0.0, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      double a = m.bias;
      for (std::size_t j = 0; j < 3; ++j) a += m.weights[j] * z[i][j];
      const double p = 1.0 / (1.0 + std::exp(-a));
      const double r = class_weights[static_cast<std::size_t>(records[i].label)] * (p - records[i].label);
      for (std::size_t j = 0; j < 3; ++j) g[j] += r * z[i][j];
      g[3] += r;
    }
    for (std::size_t j = 0; j < 3; ++j) g[j] = (g[j] + opt.l2 * m.weights[j]) / nd;
    g[3] /= nd;
    m.gradient_norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + g[3] * g[3]);
    if (m.gradient_norm <= opt.tolerance) break;
    for (std::size_t j = 0; j < 3; ++j) m.weights[j] -= opt.learning_rate * g[j];
    m.bias -= opt.learning_rate * g[3];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Folds

// Each class is shuffled and dealt round-robin; the dealing position carries
// over between classes so fold sizes also stay within one of each other.
inline std::vector<int> stratified_kfold(const std::vector<int>& labels, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold needs k >= 2");
  if (labels.size() < static_cast<std::size_t>(k)) throw ConfigError("fewer records than folds");
  class_counts(labels);
  std::mt19937_64 rng(seed);
  std::vector<int> fold(labels.size(), -1);
  std::size_t next = 0;
  for (int c : {kBenign, kMalignant}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) fold[i] = static_cast<int>(next++ % static_cast<std::size_t>(k));
  }
  return fold;
}

// ---------------------------------------------------------------------------
// ROC

struct RocCurve {
  std::vector<double> fpr, tpr;  // from (0,0) to (1,1), one point per distinct threshold
  std::vector<double> thresholds;
  double auc = 0.0;
};

// Thresholds at every distinct score, highest first; tied scores move both
// rates at once, so the trapezoid area equals the Mann-Whitney statistic with
// ties counted as one half.
inline RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: scores and labels differ in length");
  const auto c = class_counts(labels);
  if (c[0] == 0 || c[1] == 0) throw ConfigError("roc_auc needs both classes");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve r;
  r.fpr.push_back(0.0);
  r.tpr.push_back(0.0);
  r.thresholds.push_back(std::numeric_limits<double>::infinity());
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    if (!std::isfinite(s)) throw NumericError("roc_auc: non-finite score");
    for (; i < idx.size() && scores[idx[i]] == s; ++i) (labels[idx[i]] == kMalignant ? tp : fp) += 1.0;
    r.fpr.push_back(fp / static_cast<double>(c[0]));
    r.tpr.push_back(tp / static_cast<double>(c[1]));
    r.thresholds.push_back(s);
  }
  for (std::size_t i = 1; i < r.fpr.size(); ++i)
    r.auc += (r.fpr[i] - r.fpr[i - 1]) * 0.5 * (r.tpr[i] + r.tpr[i - 1]);
  return r;
}

// TPR of a curve at a given FPR: linear between the bracketing points, the
// highest TPR where the curve is vertical.
inline double tpr_at(const RocCurve& r, double f) {
  double best = 0.0;
  for (std::size_t i = 0; i < r.fpr.size(); ++i) {
    if (r.fpr[i] <= f) best = std::max(best, r.tpr[i]);
    if (i > 0 && r.fpr[i - 1] < f && f < r.fpr[i]) {
      const double a = (f - r.fpr[i - 1]) / (r.fpr[i] - r.fpr[i - 1]);
      best = std::max(best, r.tpr[i - 1] + a * (r.tpr[i] - r.tpr[i - 1]));
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct CrossValidation {
  std::vector<double> fold_auc;  // folds whose test set holds both classes
  double mean_auc = 0.0, std_auc = 0.0;
  std::vector<double> mean_fpr, mean_tpr;  // vertical average on a 101-point grid
};

inline CrossValidation cross_validate(const std::vector<RoiRecord>& records, const std::vector<int>& folds, int k,
                                      const LogisticOptions& opt = {}) {
  if (folds.size() != records.size()) throw DimensionError("one fold index per record expected");
  CrossValidation cv;
  constexpr std::size_t kGrid = 101;
  for (std::size_t i = 0; i < kGrid; ++i) cv.mean_fpr.push_back(static_cast<double>(i) / (kGrid - 1));
  cv.mean_tpr.assign(kGrid, 0.0);
  for (int f = 0; f < k; ++f) {
    std::vector<RoiRecord> train, test;
    for (std::size_t i = 0; i < records.size(); ++i) (folds[i] == f ? test : train).push_back(records[i]);
    const auto tc = class_counts(labels_of(test)), rc = class_counts(labels_of(train));
    if (tc[0] == 0 || tc[1] == 0 || rc[0] == 0 || rc[1] == 0) continue;
    const auto model = logistic_fit(train, balanced_class_weights(labels_of(train)), opt);
    std::vector<double> s;
    for (const auto& r : test) s.push_back(model.decision(r.features));
    const auto roc = roc_auc(s, labels_of(test));
    cv.fold_auc.push_back(roc.auc);
    for (std::size_t i = 0; i < kGrid; ++i) cv.mean_tpr[i] += tpr_at(roc, cv.mean_fpr[i]);
  }
  if (cv.fold_auc.empty()) throw ConfigError("no fold has both classes in its test and training sets");
  const double nf = static_cast<double>(cv.fold_auc.size());
  for (auto& t : cv.mean_tpr) t /= nf;
  cv.mean_tpr.front() = 0.0;
  cv.mean_tpr.back() = 1.0;
  cv.mean_auc = std::accumulate(cv.fold_auc.begin(), cv.fold_auc.end(), 0.0) / nf;
  double ss = 0.0;
  for (double a : cv.fold_auc) ss += (a - cv.mean_auc) * (a - cv.mean_auc);
  cv.std_auc = std::sqrt(ss / nf);
  return cv;
}

struct MethodAuc {
  std::string method;
  CrossValidation cv;
};

// Same folds for every method; ROI ids and labels must agree across methods.
inline std::vector<MethodAuc> evaluate_motion_methods(const std::map<std::string, std::vector<RoiRecord>>& methods,
                                                      int k, std::uint64_t seed, const LogisticOptions& opt = {}) {
  if (methods.empty()) throw ConfigError("no methods to evaluate");
  const auto& first = methods.begin()->second;
  for (const auto& [name, rs] : methods) {
    if (rs.size() != first.size()) throw ConfigError("method " + name + " has a different ROI count");
    for (std::size_t i = 0; i < rs.size(); ++i)
      if (rs[i].id != first[i].id || rs[i].label != first[i].label)
        throw ConfigError("method " + name + " disagrees on ROI " + first[i].id);
  }
  const auto folds = stratified_kfold(labels_of(first), k, seed);
  std::vector<MethodAuc> out;
  for (const auto& [name, rs] : methods) out.push_back({name, cross_validate(rs, folds, k, opt)});
  return out;
}

// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
inline double sign_test_p(std::size_t wins, std::size_t trials) {
  double p = 0.0;
  for (std::size_t i = wins; i <= trials; ++i) {
    double c = 1.0;
    for (std::size_t j = 0; j < i; ++j) c = c * static_cast<double>(trials - j) / static_cast<double>(j + 1);
    p += c * std::pow(0.5, static_cast<double>(trials));
  }
  return p;
}

}  // namespace moco
