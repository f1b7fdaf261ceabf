#pragma once

// Contrastive and regularization objectives over multi-view embeddings, each
// returning its value together with analytic gradients.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "qr/error.hpp"
#include "qr/linalg.hpp"

namespace qr {

struct ContrastiveGrads {
  double loss = 0.0;
  Vector d_query;
  Vector d_positive;
  std::vector<Vector> d_negatives;
};

// Gradients of a loss over n views scored against one positive key and a set
// of negative keys. Keys get zero gradients when the loss does not use them.
struct MultiViewGrads {
  double loss = 0.0;
  std::vector<Vector> d_views;
  Vector d_positive;
  std::vector<Vector> d_negatives;

  static MultiViewGrads zeros(std::size_t views, std::size_t negatives, std::size_t dim) {
    return {0.0, std::vector<Vector>(views, Vector(dim, 0.0)), Vector(dim, 0.0),
            std::vector<Vector>(negatives, Vector(dim, 0.0))};
  }

  // this += scale * other
  void accumulate(const MultiViewGrads& other, double scale) {
    loss += scale * other.loss;
    for (std::size_t i = 0; i < d_views.size(); ++i) axpy(scale, other.d_views[i], d_views[i]);
    axpy(scale, other.d_positive, d_positive);
    for (std::size_t j = 0; j < d_negatives.size(); ++j) axpy(scale, other.d_negatives[j], d_negatives[j]);
  }
};

struct TotalLoss {
  double total = 0.0;
  double local = 0.0;
  double global = 0.0;
  MultiViewGrads grads;
};

namespace detail {

// Cross-entropy of softmax(scores) against index 0. Returns the loss and
// writes dL/dscores = softmax - onehot(0).
inline double softmax_xent_first(std::span<const double> scores, Vector& d_scores) {
  const double m = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  d_scores.assign(scores.size(), 0.0);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    d_scores[k] = std::exp(scores[k] - m);
    z += d_scores[k];
  }
  for (auto& p : d_scores) p /= z;
  d_scores[0] -= 1.0;
  return std::log(z) - (scores[0] - m);
}

inline void check_keys(std::size_t dim, std::span<const double> positive, std::span<const Vector> negatives,
                       double temperature, const char* op) {
  if (negatives.empty()) throw DataError(std::string(op) + ": at least one negative is required");
  if (positive.size() != dim) throw DataError(std::string(op) + ": positive key dimension mismatch");
  for (const auto& n : negatives) {
    if (n.size() != dim) throw DataError(std::string(op) + ": negative key dimension mismatch");
  }
  if (!(temperature > 0.0)) throw ConfigError(std::string(op) + ": temperature must be positive");
}

inline void check_views(std::span<const Vector> views, const char* op) {
  if (views.empty()) throw DataError(std::string(op) + ": no views");
  for (const auto& v : views) {
    if (v.size() != views.front().size()) throw DataError(std::string(op) + ": views differ in dimension");
  }
}

}  // namespace detail

// InfoNCE of one query against a positive and in-batch negatives, scored by
// inner product / temperature.
inline ContrastiveGrads mvc_loss(std::span<const double> query, std::span<const double> positive,
                                 std::span<const Vector> negatives, double temperature = 1.0) {
  detail::check_keys(query.size(), positive, negatives, temperature, "mvc_loss");
  Vector scores(negatives.size() + 1);
  scores[0] = dot(query, positive) / temperature;
  for (std::size_t j = 0; j < negatives.size(); ++j) scores[j + 1] = dot(query, negatives[j]) / temperature;

  Vector g;
  ContrastiveGrads out;
  out.loss = detail::softmax_xent_first(scores, g);
  out.d_query = scaled(positive, g[0] / temperature);
  for (std::size_t j = 0; j < negatives.size(); ++j) axpy(g[j + 1] / temperature, negatives[j], out.d_query);
  out.d_positive = scaled(query, g[0] / temperature);
  for (std::size_t j = 0; j < negatives.size(); ++j) out.d_negatives.push_back(scaled(query, g[j + 1] / temperature));
  return out;
}

// Mean pairwise cosine similarity among views. Needs n >= 2 and no zero view.
inline MultiViewGrads mvr_loss(std::span<const Vector> views) {
  detail::check_views(views, "mvr_loss");
  const std::size_t n = views.size();
  if (n < 2) throw DataError("mvr_loss: needs at least two views");
  const std::size_t d = views.front().size();

  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = norm(views[i]);
    if (!(norms[i] > 0.0)) throw DataError("mvr_loss: zero-norm view");
  }
  const double scale = 2.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
  MultiViewGrads out = MultiViewGrads::zeros(n, 0, d);
  out.d_positive.clear();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double inv = 1.0 / (norms[i] * norms[j]);
      const double cos = dot(views[i], views[j]) * inv;
      out.loss += scale * cos;
      // d cos / d a = b / (|a||b|) - cos * a / |a|^2
      axpy(scale * inv, views[j], out.d_views[i]);
      axpy(-scale * cos / (norms[i] * norms[i]), views[i], out.d_views[i]);
      axpy(scale * inv, views[i], out.d_views[j]);
      axpy(-scale * cos / (norms[j] * norms[j]), views[j], out.d_views[j]);
    }
  }
  return out;
}

// softmax(1 - acc): views with lower accuracy receive larger weight.
inline Vector dynamic_weights(std::span<const double> accuracies) {
  if (accuracies.empty()) throw DataError("dynamic_weights: no accuracies");
  Vector logits(accuracies.size());
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    const double a = accuracies[i];
    if (!(a >= 0.0 && a <= 1.0)) throw DataError("dynamic_weights: accuracy outside [0, 1]");
    logits[i] = 1.0 - a;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - m);
    z += l;
  }
  for (auto& l : logits) l /= z;
  return logits;
}

// sum_i w_i * MVC(view_i) + lambda * MVR(views). With lambda == 0 the
// regularizer is skipped, so a single view is allowed.
inline MultiViewGrads local_loss(std::span<const Vector> views, std::span<const double> positive,
                                 std::span<const Vector> negatives, std::span<const double> weights, double lambda,
                                 double temperature = 1.0) {
  detail::check_views(views, "local_loss");
  const std::size_t n = views.size();
  const std::size_t d = views.front().size();
  detail::check_keys(d, positive, negatives, temperature, "local_loss");
  if (weights.size() != n) throw DataError("local_loss: weight count differs from view count");
  if (!all_finite(weights) || std::any_of(weights.begin(), weights.end(), [](double w) { return w < 0.0; })) {
    throw DataError("local_loss: weights must be finite and non-negative");
  }
  if (!(lambda >= 0.0)) throw ConfigError("local_loss: lambda must be non-negative");

  MultiViewGrads out = MultiViewGrads::zeros(n, negatives.size(), d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto mvc = mvc_loss(views[i], positive, negatives, temperature);
    out.loss += weights[i] * mvc.loss;
    axpy(weights[i], mvc.d_query, out.d_views[i]);
    axpy(weights[i], mvc.d_positive, out.d_positive);
    for (std::size_t j = 0; j < negatives.size(); ++j) axpy(weights[i], mvc.d_negatives[j], out.d_negatives[j]);
  }
  if (lambda > 0.0) {
    const auto mvr = mvr_loss(views);
    out.loss += lambda * mvr.loss;
    for (std::size_t i = 0; i < n; ++i) axpy(lambda, mvr.d_views[i], out.d_views[i]);
  }
  return out;
}

// InfoNCE on the mean inner product of all views with each key.
inline MultiViewGrads global_loss(std::span<const Vector> views, std::span<const double> positive,
                                  std::span<const Vector> negatives, double temperature = 1.0) {
  detail::check_views(views, "global_loss");
  const std::size_t n = views.size();
  const std::size_t d = views.front().size();
  detail::check_keys(d, positive, negatives, temperature, "global_loss");

  Vector mean_view(d, 0.0);
  for (const auto& v : views) axpy(1.0 / static_cast<double>(n), v, mean_view);

  Vector scores(negatives.size() + 1);
  scores[0] = dot(mean_view, positive) / temperature;
  for (std::size_t j = 0; j < negatives.size(); ++j) scores[j + 1] = dot(mean_view, negatives[j]) / temperature;

  Vector g;
  MultiViewGrads out = MultiViewGrads::zeros(n, negatives.size(), d);
  out.loss = detail::softmax_xent_first(scores, g);

  Vector d_mean = scaled(positive, g[0] / temperature);
  for (std::size_t j = 0; j < negatives.size(); ++j) axpy(g[j + 1] / temperature, negatives[j], d_mean);
  for (std::size_t i = 0; i < n; ++i) out.d_views[i] = scaled(d_mean, 1.0 / static_cast<double>(n));
  out.d_positive = scaled(mean_view, g[0] / temperature);
  for (std::size_t j = 0; j < negatives.size(); ++j) out.d_negatives[j] = scaled(mean_view, g[j + 1] / temperature);
  return out;
}

inline TotalLoss total_loss(std::span<const Vector> views, std::span<const double> positive,
                            std::span<const Vector> negatives, std::span<const double> weights, double lambda,
                            double temperature = 1.0) {
  auto local = local_loss(views, positive, negatives, weights, lambda, temperature);
  const auto global = global_loss(views, positive, negatives, temperature);
  TotalLoss out;
  out.local = local.loss;
  out.global = global.loss;
  out.grads = std::move(local);
  out.grads.accumulate(global, 1.0);
  out.total = out.grads.loss;
  return out;
}

}  // namespace qr
