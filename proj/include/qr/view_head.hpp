#pragma once

// Multi-view projection head: n affine views over a frozen base embedding,
// trained with the local + global contrastive objective.

#include <cstdint>
#include <numeric>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "qr/corpus_io.hpp"
#include "qr/error.hpp"
#include "qr/linalg.hpp"
#include "qr/losses.hpp"
#include "qr/types.hpp"

namespace qr {

inline constexpr std::size_t kDefaultViewCount = 6;

struct ViewHeadParams {
  std::size_t dim = 0;
  std::vector<Vector> weights;  // per view, dim x dim row-major
  std::vector<Vector> biases;   // per view, dim
  std::uint64_t seed = 0;

  std::size_t views() const { return weights.size(); }

  static ViewHeadParams identity(std::size_t views, std::size_t dim) {
    ViewHeadParams p;
    p.dim = dim;
    for (std::size_t v = 0; v < views; ++v) {
      Vector w(dim * dim, 0.0);
      for (std::size_t r = 0; r < dim; ++r) w[r * dim + r] = 1.0;
      p.weights.push_back(std::move(w));
      p.biases.emplace_back(dim, 0.0);
    }
    return p;
  }

  // Identity plus Gaussian noise, drawn from an independent stream per view
  // so that each view starts from a distinct position.
  static ViewHeadParams initialize(std::size_t views, std::size_t dim, std::uint64_t seed, double sigma = 0.05) {
    if (views == 0 || dim == 0) throw ConfigError("view head needs at least one view and a positive dimension");
    auto p = identity(views, dim);
    p.seed = seed;
    for (std::size_t v = 0; v < views; ++v) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(v), std::uint32_t{0x51ed}};
      std::mt19937_64 rng(seq);
      std::normal_distribution<double> noise(0.0, sigma);
      for (auto& w : p.weights[v]) w += noise(rng);
    }
    return p;
  }

  void validate() const {
    if (weights.empty()) throw DataError("view head has no views");
    if (biases.size() != weights.size()) throw DataError("view head: bias count mismatch");
    for (std::size_t v = 0; v < weights.size(); ++v) {
      if (weights[v].size() != dim * dim || biases[v].size() != dim) throw DataError("view head: tensor shape mismatch");
      if (!all_finite(weights[v]) || !all_finite(biases[v])) throw NumericError("view head: non-finite parameter");
    }
  }

  bool operator==(const ViewHeadParams&) const = default;
};

namespace detail {

inline Vector affine(const Vector& w, const Vector& b, std::span<const double> x) {
  const std::size_t d = b.size();
  Vector u = b;
  for (std::size_t r = 0; r < d; ++r) {
    double s = 0.0;
    const double* row = w.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) s += row[c] * x[c];
    u[r] += s;
  }
  return u;
}

}  // namespace detail

// Pre-normalization outputs u_i = W_i x + b_i.
inline std::vector<Vector> raw_views(std::span<const double> base, const ViewHeadParams& params) {
  if (base.size() != params.dim) throw DataError("project_views: base dimension does not match view head");
  std::vector<Vector> out;
  out.reserve(params.views());
  for (std::size_t v = 0; v < params.views(); ++v) out.push_back(detail::affine(params.weights[v], params.biases[v], base));
  return out;
}

// n unit-norm view embeddings of one base embedding.
inline MultiViewEmbedding project_views(std::span<const double> base, const ViewHeadParams& params,
                                        std::string item_id = {}) {
  MultiViewEmbedding out{std::move(item_id), {}};
  for (auto& u : raw_views(base, params)) {
    const double len = norm(u);
    if (!(len > 0.0) || !std::isfinite(len)) throw NumericError("project_views: view norm is zero or not finite");
    out.views.push_back(l2_normalize(u));
  }
  return out;
}

// Mean over views of the inner product with each label; descending order,
// ties by ascending label index.
inline std::vector<Ranked> rank_labels_multiview(std::span<const Vector> views, const LabelSpace& labels) {
  if (labels.size() == 0) throw DataError("rank_labels_multiview: empty label space");
  if (views.empty()) throw DataError("rank_labels_multiview: no views");
  Vector scores(labels.size(), 0.0);
  for (std::size_t l = 0; l < labels.size(); ++l) {
    const auto e = labels.embedding(l);
    if (e.size() != views.front().size()) throw DataError("rank_labels_multiview: dimension mismatch");
    double s = 0.0;
    for (const auto& v : views) s += dot(v, e);
    scores[l] = s / static_cast<double>(views.size());
  }
  return rank_scores(scores);
}

struct ViewExample {
  EmbVec base;
  std::size_t label = 0;  // index into the label space
};

struct ViewTrainConfig {
  std::size_t views = kDefaultViewCount;
  double lambda = 0.1;
  double learning_rate = 1e-6;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double temperature = 1.0;
  double init_sigma = 0.05;
  std::uint64_t seed = 0;
};

struct ViewEpochLog {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double local_loss = 0.0;
  double global_loss = 0.0;
  Vector view_weights;   // weights used during this epoch
  Vector view_accuracy;  // per-view Rank@1 on the training split after the epoch
  double mean_pairwise_cosine = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"total_loss", total_loss},
            {"local_loss", local_loss},
            {"global_loss", global_loss},
            {"view_weights", view_weights},
            {"view_accuracy", view_accuracy},
            {"mean_pairwise_cosine", mean_pairwise_cosine}};
  }
};

struct ViewTrainResult {
  ViewHeadParams params;
  std::vector<ViewEpochLog> log;
};

// Batch objective and its gradient with respect to the head parameters.
struct ViewObjective {
  double total = 0.0;
  double local = 0.0;
  double global = 0.0;
  std::size_t contributing = 0;  // items that had at least one in-batch negative
  ViewHeadParams gradient;
};

// Negatives of an item are the distinct labels of the other batch items,
// excluding its own label, in order of first appearance.
inline std::vector<std::size_t> in_batch_negatives(std::span<const std::size_t> batch_labels, std::size_t self) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < batch_labels.size(); ++b) {
    const auto l = batch_labels[b];
    if (b == self || l == batch_labels[self]) continue;
    if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  }
  return out;
}

inline Vector label_vector(const LabelSpace& labels, std::size_t index) {
  if (index >= labels.size()) throw DataError("label index out of range");
  return to_vector(labels.embedding(index));
}

// Mean L_total over the batch items that have negatives, with its gradient
// chained through view normalization into every W_i and b_i.
inline ViewObjective view_head_objective(const ViewHeadParams& params, std::span<const ViewExample> batch,
                                         const LabelSpace& labels, std::span<const double> view_weights, double lambda,
                                         double temperature = 1.0) {
  const std::size_t n = params.views();
  const std::size_t d = params.dim;
  ViewObjective obj;
  obj.gradient = params;
  for (auto& w : obj.gradient.weights) std::fill(w.begin(), w.end(), 0.0);
  for (auto& b : obj.gradient.biases) std::fill(b.begin(), b.end(), 0.0);

  std::vector<std::size_t> batch_labels;
  for (const auto& ex : batch) batch_labels.push_back(ex.label);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto neg_idx = in_batch_negatives(batch_labels, b);
    if (neg_idx.empty()) continue;
    const auto& x = batch[b].base;
    const auto raw = raw_views(x, params);
    std::vector<Vector> views;
    std::vector<double> norms;
    for (const auto& u : raw) {
      norms.push_back(norm(u));
      if (!(norms.back() > 0.0) || !std::isfinite(norms.back())) {
        throw NumericError("view norm became zero or non-finite during training");
      }
      views.push_back(scaled(u, 1.0 / norms.back()));
    }
    std::vector<Vector> negatives;
    for (auto l : neg_idx) negatives.push_back(label_vector(labels, l));
    const auto positive = label_vector(labels, batch[b].label);

    const auto tl = total_loss(views, positive, negatives, view_weights, lambda, temperature);
    obj.total += tl.total;
    obj.local += tl.local;
    obj.global += tl.global;
    ++obj.contributing;

    for (std::size_t v = 0; v < n; ++v) {
      // d/du of u/|u|: (dq - q (q . dq)) / |u|
      const auto& q = views[v];
      const auto& dq = tl.grads.d_views[v];
      const double proj = dot(q, dq);
      Vector du(d);
      for (std::size_t r = 0; r < d; ++r) du[r] = (dq[r] - q[r] * proj) / norms[v];
      auto& gw = obj.gradient.weights[v];
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < d; ++c) gw[r * d + c] += du[r] * x[c];
      }
      axpy(1.0, du, obj.gradient.biases[v]);
    }
  }
  if (obj.contributing > 0) {
    const double inv = 1.0 / static_cast<double>(obj.contributing);
    obj.total *= inv;
    obj.local *= inv;
    obj.global *= inv;
    for (auto& w : obj.gradient.weights) w = scaled(w, inv);
    for (auto& b : obj.gradient.biases) b = scaled(b, inv);
  }
  return obj;
}

// Fraction of examples whose ground-truth label is ranked first by each view
// on its own.
inline Vector per_view_accuracy(const ViewHeadParams& params, std::span<const ViewExample> examples,
                                const LabelSpace& labels) {
  Vector hits(params.views(), 0.0);
  if (examples.empty()) return hits;
  for (const auto& ex : examples) {
    const auto mv = project_views(ex.base, params);
    for (std::size_t v = 0; v < mv.count(); ++v) {
      const auto ranked = rank_labels_multiview(std::span<const Vector>(&mv.views[v], 1), labels);
      if (ranked.front().index == ex.label) hits[v] += 1.0;
    }
  }
  for (auto& h : hits) h /= static_cast<double>(examples.size());
  return hits;
}

// Mean over examples of the mean pairwise cosine among views (1 for n = 1).
inline double mean_pairwise_cosine(const ViewHeadParams& params, std::span<const ViewExample> examples) {
  if (examples.empty() || params.views() < 2) return 1.0;
  double sum = 0.0;
  for (const auto& ex : examples) sum += mvr_loss(project_views(ex.base, params).views).loss;
  return sum / static_cast<double>(examples.size());
}

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
}

}  // namespace detail

// Mini-batch SGD on L_total. Per-view accuracy from each epoch sets the
// dynamic weights of the next; the first epoch uses uniform weights.
inline ViewTrainResult train_view_head(std::span<const ViewExample> examples, const LabelSpace& labels,
                                       const ViewTrainConfig& cfg, std::optional<ViewHeadParams> initial = {}) {
  if (examples.empty()) throw DataError("train_view_head: empty dataset");
  if (cfg.batch_size < 2) throw ConfigError("train_view_head: batch size must be at least 2 for in-batch negatives");
  if (!(cfg.lambda >= 0.0)) throw ConfigError("train_view_head: lambda must be non-negative");
  if (cfg.lambda > 0.0 && cfg.views < 2) throw ConfigError("train_view_head: regularizer needs at least two views");
  const std::size_t d = examples.front().base.size();
  if (d != labels.dim()) throw DataError("train_view_head: image and label dimensions differ");

  ViewTrainResult result;
  result.params = initial ? std::move(*initial) : ViewHeadParams::initialize(cfg.views, d, cfg.seed, cfg.init_sigma);
  result.params.validate();
  if (result.params.dim != d) throw DataError("train_view_head: initial parameters have the wrong dimension");
  auto& params = result.params;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vector weights(params.views(), 1.0 / static_cast<double>(params.views()));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_indices(order, rng);
    ViewEpochLog log;
    log.epoch = epoch + 1;
    log.view_weights = weights;
    std::size_t contributing = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<ViewExample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        batch.push_back(examples[order[k]]);
      }
      const auto obj = view_head_objective(params, batch, labels, weights, cfg.lambda, cfg.temperature);
      if (obj.contributing == 0) continue;
      if (!std::isfinite(obj.total)) throw NumericError("train_view_head: non-finite loss");
      const double c = static_cast<double>(obj.contributing);
      log.total_loss += obj.total * c;
      log.local_loss += obj.local * c;
      log.global_loss += obj.global * c;
      contributing += obj.contributing;
      for (std::size_t v = 0; v < params.views(); ++v) {
        axpy(-cfg.learning_rate, obj.gradient.weights[v], params.weights[v]);
        axpy(-cfg.learning_rate, obj.gradient.biases[v], params.biases[v]);
      }
      params.validate();
    }
    if (contributing > 0) {
      log.total_loss /= static_cast<double>(contributing);
      log.local_loss /= static_cast<double>(contributing);
      log.global_loss /= static_cast<double>(contributing);
    }
    log.view_accuracy = per_view_accuracy(params, examples, labels);
    log.mean_pairwise_cosine = mean_pairwise_cosine(params, examples);
    weights = dynamic_weights(log.view_accuracy);
    result.log.push_back(std::move(log));
  }
  return result;
}

inline ParamTensors to_tensors(const ViewHeadParams& p) {
  ParamTensors t;
  for (std::size_t v = 0; v < p.views(); ++v) {
    t["view" + std::to_string(v) + ".weight"] = p.weights[v];
    t["view" + std::to_string(v) + ".bias"] = p.biases[v];
  }
  return t;
}

inline void save_view_head(const ViewHeadParams& p, const std::filesystem::path& path) {
  p.validate();
  write_params(to_tensors(p), p.dim, path, {{"model", "view_head"}, {"views", p.views()}, {"seed", p.seed}});
}

inline ViewHeadParams load_view_head(const std::filesystem::path& path) {
  nlohmann::json meta;
  auto t = read_params(path, &meta);
  if (meta.value("model", "") != "view_head") throw DataError(path.string() + ": not a view head parameter file");
  ViewHeadParams p;
  const auto views = meta.at("views").get<std::size_t>();
  p.seed = meta.value("seed", std::uint64_t{0});
  for (std::size_t v = 0; v < views; ++v) {
    auto w = t.find("view" + std::to_string(v) + ".weight");
    auto b = t.find("view" + std::to_string(v) + ".bias");
    if (w == t.end() || b == t.end()) throw DataError(path.string() + ": missing tensors for view " + std::to_string(v));
    p.weights.push_back(w->second);
    p.biases.push_back(b->second);
  }
  p.dim = p.biases.empty() ? 0 : p.biases.front().size();
  p.validate();
  return p;
}

}  // namespace qr
