#pragma once

// Relevance scoring: a two-layer MLP mapping an embedding to a weight in
// (0, 1), weighted fusion of views with their retrieved knowledge, and
// training of the scorer with the encoders frozen.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
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

inline std::size_t default_hidden_width(std::size_t dim) { return std::max<std::size_t>(dim / 2, 8); }

// sigmoid(w2 . relu(W1 x + b1) + b2)
struct ScorerParams {
  std::size_t dim = 0;
  std::size_t hidden = 0;
  Vector w1;  // hidden x dim, row-major
  Vector b1;  // hidden
  Vector w2;  // hidden
  double b2 = 0.0;

  static ScorerParams zeros(std::size_t dim, std::size_t hidden) {
    if (dim == 0 || hidden == 0) throw ConfigError("scorer needs a positive dimension and hidden width");
    return {dim, hidden, Vector(dim * hidden, 0.0), Vector(hidden, 0.0), Vector(hidden, 0.0), 0.0};
  }

  static ScorerParams initialize(std::size_t dim, std::size_t hidden, std::uint64_t seed) {
    auto p = zeros(dim, hidden);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> first(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    std::normal_distribution<double> second(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
    for (auto& w : p.w1) w = first(rng);
    for (auto& w : p.w2) w = second(rng);
    return p;
  }

  void validate() const {
    if (hidden == 0 || w1.size() != dim * hidden || b1.size() != hidden || w2.size() != hidden) {
      throw DataError("scorer: tensor shape mismatch");
    }
    if (!all_finite(w1) || !all_finite(b1) || !all_finite(w2) || !std::isfinite(b2)) {
      throw NumericError("scorer: non-finite parameter");
    }
  }

  // this += scale * other
  void add_scaled(const ScorerParams& other, double scale) {
    axpy(scale, other.w1, w1);
    axpy(scale, other.b1, b1);
    axpy(scale, other.w2, w2);
    b2 += scale * other.b2;
  }

  bool operator==(const ScorerParams&) const = default;
};

namespace detail {

struct ScorerForward {
  Vector pre;     // W1 x + b1
  Vector hidden;  // relu(pre)
  double weight = 0.0;
};

inline ScorerForward scorer_forward(std::span<const double> x, const ScorerParams& p) {
  if (x.size() != p.dim) throw DataError("score_embedding: input dimension does not match scorer");
  ScorerForward f;
  f.pre = p.b1;
  for (std::size_t h = 0; h < p.hidden; ++h) {
    const double* row = p.w1.data() + h * p.dim;
    double s = 0.0;
    for (std::size_t c = 0; c < p.dim; ++c) s += row[c] * x[c];
    f.pre[h] += s;
  }
  f.hidden.resize(p.hidden);
  double out = p.b2;
  for (std::size_t h = 0; h < p.hidden; ++h) {
    f.hidden[h] = f.pre[h] > 0.0 ? f.pre[h] : 0.0;
    out += p.w2[h] * f.hidden[h];
  }
  f.weight = 1.0 / (1.0 + std::exp(-out));
  return f;
}

// Accumulates upstream * d(weight)/d(params) into grad.
inline void scorer_backward(std::span<const double> x, const ScorerParams& p, const ScorerForward& f,
                            double upstream, ScorerParams& grad) {
  const double d_out = upstream * f.weight * (1.0 - f.weight);
  grad.b2 += d_out;
  for (std::size_t h = 0; h < p.hidden; ++h) {
    grad.w2[h] += d_out * f.hidden[h];
    if (f.pre[h] <= 0.0) continue;
    const double d_pre = d_out * p.w2[h];
    grad.b1[h] += d_pre;
    double* row = grad.w1.data() + h * p.dim;
    for (std::size_t c = 0; c < p.dim; ++c) row[c] += d_pre * x[c];
  }
}

}  // namespace detail

inline double score_embedding(std::span<const double> x, const ScorerParams& params) {
  return detail::scorer_forward(x, params).weight;
}

// One network shared by both modalities unless `knowledge` is set.
struct ScorerModel {
  ScorerParams vision;
  std::optional<ScorerParams> knowledge;

  bool shared() const { return !knowledge.has_value(); }
  const ScorerParams& for_vision() const { return vision; }
  const ScorerParams& for_knowledge() const { return knowledge ? *knowledge : vision; }
  ScorerParams& for_knowledge() { return knowledge ? *knowledge : vision; }

  static ScorerModel initialize(std::size_t dim, std::size_t hidden, std::uint64_t seed, bool shared = true) {
    ScorerModel m{ScorerParams::initialize(dim, hidden, seed), std::nullopt};
    if (!shared) m.knowledge = ScorerParams::initialize(dim, hidden, seed + 1);
    return m;
  }

  ScorerModel zeros_like() const {
    ScorerModel g{ScorerParams::zeros(vision.dim, vision.hidden), std::nullopt};
    if (knowledge) g.knowledge = ScorerParams::zeros(knowledge->dim, knowledge->hidden);
    return g;
  }

  void add_scaled(const ScorerModel& other, double scale) {
    vision.add_scaled(other.vision, scale);
    if (knowledge) knowledge->add_scaled(*other.knowledge, scale);
  }

  void validate() const {
    vision.validate();
    if (knowledge) {
      knowledge->validate();
      if (knowledge->dim != vision.dim) throw DataError("scorer: modality networks differ in dimension");
    }
  }

  bool operator==(const ScorerModel&) const = default;
};

// F = sum_i (W_i^owk * owk_i + W_i^v * view_i). The per-view terms are kept
// so the sum can be checked against its parts.
class FusedFeature {
 public:
  FusedFeature(std::span<const Vector> views, std::span<const Vector> owk, Vector view_weights, Vector owk_weights)
      : view_weights_(std::move(view_weights)), owk_weights_(std::move(owk_weights)) {
    if (views.empty() || views.size() != owk.size()) throw DataError("fuse: need one knowledge embedding per view");
    if (view_weights_.size() != views.size() || owk_weights_.size() != owk.size()) {
      throw DataError("fuse: weight count mismatch");
    }
    const std::size_t d = views.front().size();
    vector_.assign(d, 0.0);
    for (std::size_t i = 0; i < views.size(); ++i) {
      if (views[i].size() != d || owk[i].size() != d) throw DataError("fuse: dimension mismatch");
      Vector term(d, 0.0);
      axpy(owk_weights_[i], owk[i], term);
      axpy(view_weights_[i], views[i], term);
      axpy(1.0, term, vector_);
      components_.push_back(std::move(term));
    }
  }

  const Vector& vector() const { return vector_; }
  const Vector& view_weights() const { return view_weights_; }
  const Vector& owk_weights() const { return owk_weights_; }
  // W_i^owk * owk_i + W_i^v * view_i for each view i.
  const std::vector<Vector>& components() const { return components_; }
  std::size_t dim() const { return vector_.size(); }

 private:
  Vector vector_;
  Vector view_weights_;
  Vector owk_weights_;
  std::vector<Vector> components_;
};

inline FusedFeature fuse(std::span<const Vector> views, std::span<const Vector> owk, const ScorerModel& model) {
  if (views.size() != owk.size()) throw DataError("fuse: need one knowledge embedding per view");
  Vector wv, wo;
  for (const auto& v : views) wv.push_back(score_embedding(v, model.for_vision()));
  for (const auto& o : owk) wo.push_back(score_embedding(o, model.for_knowledge()));
  return FusedFeature(views, owk, std::move(wv), std::move(wo));
}

// Inner-product ranking of the fused feature against every label.
inline std::vector<Ranked> rank_labels_fused(const FusedFeature& fused, const LabelSpace& labels,
                                             bool normalize = false) {
  if (labels.size() == 0) throw DataError("rank_labels_fused: empty label space");
  if (fused.dim() != labels.dim()) throw DataError("rank_labels_fused: dimension mismatch");
  const Vector q = normalize ? l2_normalize(fused.vector()) : fused.vector();
  Vector scores(labels.size());
  for (std::size_t l = 0; l < labels.size(); ++l) scores[l] = dot(q, labels.embedding(l));
  return rank_scores(scores);
}

struct ScorerLossOptions {
  Vector view_weights;  // empty: uniform
  double lambda = 0.1;
  double temperature = 1.0;
  bool unit_components = true;  // L2-normalize each q_i before the loss
};

struct ScorerLoss {
  double loss = 0.0;
  ScorerModel gradient;  // only the scorer receives gradients; embeddings are frozen inputs
};

// The view-head objective (local + global) applied to the fused per-view
// features q_i = W_i^owk owk_i + W_i^v view_i, differentiated into the scorer.
inline ScorerLoss scorer_loss(std::span<const Vector> views, std::span<const Vector> owk,
                              std::span<const double> positive, std::span<const Vector> negatives,
                              const ScorerModel& model, const ScorerLossOptions& opts = {}) {
  if (negatives.empty()) throw DataError("scorer_loss: at least one negative is required");
  if (views.size() != owk.size() || views.empty()) throw DataError("scorer_loss: need one knowledge embedding per view");
  const std::size_t n = views.size();

  std::vector<detail::ScorerForward> fv, fo;
  Vector wv, wo;
  for (std::size_t i = 0; i < n; ++i) {
    fv.push_back(detail::scorer_forward(views[i], model.for_vision()));
    fo.push_back(detail::scorer_forward(owk[i], model.for_knowledge()));
    wv.push_back(fv.back().weight);
    wo.push_back(fo.back().weight);
  }
  const FusedFeature fused(views, owk, wv, wo);
  std::vector<Vector> q = fused.components();
  Vector lengths(n, 1.0);
  if (opts.unit_components) {
    for (std::size_t i = 0; i < n; ++i) {
      lengths[i] = norm(q[i]);
      if (!(lengths[i] > 0.0)) throw NumericError("scorer_loss: fused component has zero norm");
      q[i] = scaled(q[i], 1.0 / lengths[i]);
    }
  }
  const Vector uniform(n, 1.0 / static_cast<double>(n));
  const auto& w = opts.view_weights.empty() ? uniform : opts.view_weights;
  const double lambda = n >= 2 ? opts.lambda : 0.0;
  const auto tl = total_loss(q, positive, negatives, w, lambda, opts.temperature);

  ScorerLoss out{tl.total, model.zeros_like()};
  for (std::size_t i = 0; i < n; ++i) {
    Vector dc = tl.grads.d_views[i];
    if (opts.unit_components) {
      const double proj = dot(q[i], dc);
      for (std::size_t k = 0; k < dc.size(); ++k) dc[k] = (dc[k] - q[i][k] * proj) / lengths[i];
    }
    detail::scorer_backward(views[i], model.for_vision(), fv[i], dot(dc, views[i]), out.gradient.vision);
    detail::scorer_backward(owk[i], model.for_knowledge(), fo[i], dot(dc, owk[i]), out.gradient.for_knowledge());
  }
  return out;
}

struct ScorerExample {
  std::string item_id;
  std::vector<Vector> views;  // frozen view-head outputs
  std::vector<Vector> owk;    // retrieved knowledge embedding per view
  std::size_t label = 0;
};

struct ScorerTrainConfig {
  std::size_t hidden = 0;  // 0: default_hidden_width(dim)
  bool shared = true;
  double learning_rate = 0.5;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double lambda = 0.1;
  double temperature = 1.0;
  bool normalize_fused = false;
  bool unit_components = true;
  std::uint64_t seed = 0;
};

struct ScorerEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double fused_rank1 = 0.0;  // percent, training split
  double mean_view_weight = 0.0;
  double mean_owk_weight = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"loss", loss},
            {"fused_rank1", fused_rank1},
            {"mean_view_weight", mean_view_weight},
            {"mean_owk_weight", mean_owk_weight}};
  }
};

struct ScorerTrainResult {
  ScorerModel model;
  std::vector<ScorerEpochLog> log;
};

// Mean scorer loss over batch items with at least one in-batch negative.
struct ScorerObjective {
  double loss = 0.0;
  std::size_t contributing = 0;
  ScorerModel gradient;
};

inline ScorerObjective scorer_batch_objective(const ScorerModel& model, std::span<const ScorerExample> batch,
                                              const LabelSpace& labels, const ScorerLossOptions& opts) {
  ScorerObjective obj{0.0, 0, model.zeros_like()};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<Vector> negatives;
    std::vector<std::size_t> seen;
    for (std::size_t o = 0; o < batch.size(); ++o) {
      const auto l = batch[o].label;
      if (o == b || l == batch[b].label || std::find(seen.begin(), seen.end(), l) != seen.end()) continue;
      seen.push_back(l);
      negatives.push_back(to_vector(labels.embedding(l)));
    }
    if (negatives.empty()) continue;
    const auto positive = to_vector(labels.embedding(batch[b].label));
    const auto sl = scorer_loss(batch[b].views, batch[b].owk, positive, negatives, model, opts);
    obj.loss += sl.loss;
    obj.gradient.add_scaled(sl.gradient, 1.0);
    ++obj.contributing;
  }
  if (obj.contributing > 0) {
    const double inv = 1.0 / static_cast<double>(obj.contributing);
    obj.loss *= inv;
    auto scaled_grad = model.zeros_like();
    scaled_grad.add_scaled(obj.gradient, inv);
    obj.gradient = std::move(scaled_grad);
  }
  return obj;
}

inline ScorerTrainResult train_scorer(std::span<const ScorerExample> examples, const LabelSpace& labels,
                                      const ScorerTrainConfig& cfg, std::optional<ScorerModel> initial = {}) {
  if (examples.empty()) throw DataError("train_scorer: empty dataset");
  if (cfg.batch_size < 2) throw ConfigError("train_scorer: batch size must be at least 2 for in-batch negatives");
  const std::size_t d = labels.dim();
  ScorerTrainResult result;
  result.model = initial ? std::move(*initial)
                         : ScorerModel::initialize(d, cfg.hidden ? cfg.hidden : default_hidden_width(d), cfg.seed,
                                                   cfg.shared);
  result.model.validate();
  if (result.model.vision.dim != d) throw DataError("train_scorer: scorer dimension does not match labels");

  const ScorerLossOptions opts{{}, cfg.lambda, cfg.temperature, cfg.unit_components};
  std::mt19937_64 rng(cfg.seed ^ 0x5c0e5c0e5c0e5c0eULL);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    ScorerEpochLog log;
    log.epoch = epoch + 1;
    std::size_t contributing = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<ScorerExample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        batch.push_back(examples[order[k]]);
      }
      const auto obj = scorer_batch_objective(result.model, batch, labels, opts);
      if (obj.contributing == 0) continue;
      if (!std::isfinite(obj.loss)) throw NumericError("train_scorer: non-finite loss");
      log.loss += obj.loss * static_cast<double>(obj.contributing);
      contributing += obj.contributing;
      result.model.add_scaled(obj.gradient, -cfg.learning_rate);
      result.model.validate();
    }
    if (contributing > 0) log.loss /= static_cast<double>(contributing);

    std::size_t hits = 0;
    double wv = 0.0, wo = 0.0;
    for (const auto& ex : examples) {
      const auto fused = fuse(ex.views, ex.owk, result.model);
      if (rank_labels_fused(fused, labels, cfg.normalize_fused).front().index == ex.label) ++hits;
      for (double w : fused.view_weights()) wv += w;
      for (double w : fused.owk_weights()) wo += w;
    }
    const double weight_count = static_cast<double>(examples.size() * examples.front().views.size());
    log.fused_rank1 = 100.0 * static_cast<double>(hits) / static_cast<double>(examples.size());
    log.mean_view_weight = wv / weight_count;
    log.mean_owk_weight = wo / weight_count;
    result.log.push_back(log);
  }
  return result;
}

namespace detail {

inline void put_scorer_tensors(ParamTensors& t, const std::string& prefix, const ScorerParams& p) {
  t[prefix + ".w1"] = p.w1;
  t[prefix + ".b1"] = p.b1;
  t[prefix + ".w2"] = p.w2;
  t[prefix + ".b2"] = Vector{p.b2};
}

inline ScorerParams get_scorer_tensors(const ParamTensors& t, const std::string& prefix, std::size_t dim,
                                       std::size_t hidden) {
  auto p = ScorerParams::zeros(dim, hidden);
  auto fetch = [&](const std::string& name) -> const Vector& {
    auto it = t.find(prefix + "." + name);
    if (it == t.end()) throw DataError("scorer file lacks tensor " + prefix + "." + name);
    return it->second;
  };
  p.w1 = fetch("w1");
  p.b1 = fetch("b1");
  p.w2 = fetch("w2");
  const auto& b2 = fetch("b2");
  if (b2.size() != 1) throw DataError("scorer file: b2 must be a scalar");
  p.b2 = b2.front();
  p.validate();
  return p;
}

}  // namespace detail

inline void save_scorer(const ScorerModel& m, const std::filesystem::path& path) {
  m.validate();
  ParamTensors t;
  detail::put_scorer_tensors(t, "vision", m.vision);
  if (m.knowledge) detail::put_scorer_tensors(t, "knowledge", *m.knowledge);
  write_params(t, m.vision.dim, path,
               {{"model", "relevance_scorer"}, {"hidden", m.vision.hidden}, {"shared", m.shared()}});
}

inline ScorerModel load_scorer(const std::filesystem::path& path) {
  nlohmann::json meta;
  const auto t = read_params(path, &meta);
  if (meta.value("model", "") != "relevance_scorer") throw DataError(path.string() + ": not a scorer parameter file");
  const auto hidden = meta.at("hidden").get<std::size_t>();
  const auto b1 = t.find("vision.b1");
  const auto w1 = t.find("vision.w1");
  if (b1 == t.end() || w1 == t.end() || hidden == 0) throw DataError(path.string() + ": malformed scorer file");
  const std::size_t dim = w1->second.size() / hidden;
  ScorerModel m{detail::get_scorer_tensors(t, "vision", dim, hidden), std::nullopt};
  if (!meta.value("shared", true)) m.knowledge = detail::get_scorer_tensors(t, "knowledge", dim, hidden);
  return m;
}

}  // namespace qr
