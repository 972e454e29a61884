#pragma once

// Multinomial logistic probe trained by full-batch gradient descent with a
// fixed budget. Features are standardized by training statistics; at most
// kProbeMaxN rows are used (seeded subsample beyond that); argmax ties break
// toward the lowest class index, so predictions are fully deterministic.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mmvae/errors.hpp"
#include "mmvae/rng.hpp"

namespace mmvae {

inline constexpr int kProbeSteps = 2000;
inline constexpr double kProbeLr = 0.1;
inline constexpr int kProbeMaxN = 10000;
inline constexpr double kProbeStdFloor = 1e-8;

struct LinearClassifier {
  int classes = 0;
  int dim = 0;
  std::vector<double> weight;      // (classes, dim) row-major
  std::vector<double> bias;        // (classes)
  std::vector<double> feat_mean;   // training standardization
  std::vector<double> feat_scale;  // stddev floored at kProbeStdFloor
  int steps = 0;
  double lr = 0.0;

  std::vector<double> logits(std::span<const double> x) const {
    require(static_cast<int>(x.size()) == dim, "classifier: feature width mismatch");
    std::vector<double> out(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
      double acc = bias[c];
      const double* w = weight.data() + static_cast<std::size_t>(c) * dim;
      for (int j = 0; j < dim; ++j) acc += w[j] * (x[j] - feat_mean[j]) / feat_scale[j];
      out[c] = acc;
    }
    return out;
  }

  int predict(std::span<const double> x) const {
    std::vector<double> l = logits(x);
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (l[c] > l[best]) best = c;
    return best;
  }
};

// features: flat (n, dim) row-major; labels: n entries in [0, classes).
inline LinearClassifier fit_linear_classifier(std::span<const double> features,
                                              std::span<const std::uint16_t> labels, int dim,
                                              int classes, std::uint64_t seed,
                                              int steps = kProbeSteps, double lr = kProbeLr,
                                              int max_n = kProbeMaxN) {
  const int n_all = static_cast<int>(labels.size());
  require(dim > 0 && classes > 0, "classifier: dim and class count must be positive");
  require(features.size() == static_cast<std::size_t>(n_all) * static_cast<std::size_t>(dim),
          "classifier: feature block is not n x dim");
  require(steps > 0 && lr > 0.0 && max_n > 0, "classifier: invalid training budget");

  // Seeded subsample beyond the budget; otherwise keep the given order.
  std::vector<std::size_t> rows(static_cast<std::size_t>(n_all));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  if (n_all > max_n) {
    RngStream rng = RngStream(seed).split("probe_subsample");
    std::vector<std::size_t> p = rng.permutation(static_cast<std::size_t>(n_all));
    rows.assign(p.begin(), p.begin() + max_n);
  }
  const int n = static_cast<int>(rows.size());

  std::vector<int> present(static_cast<std::size_t>(classes), 0);
  for (std::size_t i : rows) {
    require(labels[i] < classes, "classifier: label outside [0, classes) at row " +
                                     std::to_string(i));
    present[labels[i]] = 1;
  }
  int distinct = 0;
  for (int c : present) distinct += c;
  if (distinct < 2)
    throw ConfigError("classifier: training labels contain a single class; probe refused");

  LinearClassifier clf;
  clf.classes = classes;
  clf.dim = dim;
  clf.weight.assign(static_cast<std::size_t>(classes) * dim, 0.0);
  clf.bias.assign(static_cast<std::size_t>(classes), 0.0);
  clf.steps = steps;
  clf.lr = lr;

  clf.feat_mean.assign(static_cast<std::size_t>(dim), 0.0);
  clf.feat_scale.assign(static_cast<std::size_t>(dim), 0.0);
  for (std::size_t i : rows) {
    const double* x = features.data() + i * static_cast<std::size_t>(dim);
    for (int j = 0; j < dim; ++j) clf.feat_mean[j] += x[j];
  }
  for (int j = 0; j < dim; ++j) clf.feat_mean[j] /= n;
  for (std::size_t i : rows) {
    const double* x = features.data() + i * static_cast<std::size_t>(dim);
    for (int j = 0; j < dim; ++j) {
      const double d = x[j] - clf.feat_mean[j];
      clf.feat_scale[j] += d * d;
    }
  }
  for (int j = 0; j < dim; ++j)
    clf.feat_scale[j] = std::max(std::sqrt(clf.feat_scale[j] / n), kProbeStdFloor);

  // Standardize once up front.
  std::vector<double> z(static_cast<std::size_t>(n) * dim);
  for (int i = 0; i < n; ++i) {
    const double* x = features.data() + rows[i] * static_cast<std::size_t>(dim);
    for (int j = 0; j < dim; ++j)
      z[static_cast<std::size_t>(i) * dim + j] = (x[j] - clf.feat_mean[j]) / clf.feat_scale[j];
  }

  std::vector<double> logits(static_cast<std::size_t>(classes));
  std::vector<double> gw(clf.weight.size());
  std::vector<double> gb(clf.bias.size());
  for (int step = 0; step < steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* x = z.data() + static_cast<std::size_t>(i) * dim;
      double max_logit = -1e300;
      for (int c = 0; c < classes; ++c) {
        double acc = clf.bias[c];
        const double* w = clf.weight.data() + static_cast<std::size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) acc += w[j] * x[j];
        logits[c] = acc;
        max_logit = std::max(max_logit, acc);
      }
      double denom = 0.0;
      for (int c = 0; c < classes; ++c) {
        logits[c] = std::exp(logits[c] - max_logit);
        denom += logits[c];
      }
      const int y = labels[rows[i]];
      for (int c = 0; c < classes; ++c) {
        const double p = logits[c] / denom;
        const double g = p - (c == y ? 1.0 : 0.0);
        gb[c] += g;
        double* gwc = gw.data() + static_cast<std::size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) gwc[j] += g * x[j];
      }
    }
    const double scale = lr / n;
    for (std::size_t k = 0; k < clf.weight.size(); ++k) clf.weight[k] -= scale * gw[k];
    for (std::size_t k = 0; k < clf.bias.size(); ++k) clf.bias[k] -= scale * gb[k];
  }
  return clf;
}

inline double classifier_accuracy(const LinearClassifier& clf, std::span<const double> features,
                                  std::span<const std::uint16_t> labels) {
  const int n = static_cast<int>(labels.size());
  require(n > 0, "classifier: empty evaluation set");
  require(features.size() == static_cast<std::size_t>(n) * static_cast<std::size_t>(clf.dim),
          "classifier: feature block is not n x dim");
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    std::span<const double> x(features.data() + static_cast<std::size_t>(i) * clf.dim,
                              static_cast<std::size_t>(clf.dim));
    if (clf.predict(x) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / n;
}

}  // namespace mmvae
