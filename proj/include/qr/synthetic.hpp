#pragma once

// Desk-scale synthetic corpora with a controllable amount of label signal
// planted in the image embeddings and in the knowledge entries.
//
//   label_l     = unit(0.35 continent + 0.5 country + 0.8 city)
//   image_j     = unit(gap g_img + view_signal label(y_j) + scene_weight s_j + noise e)
//   knowledge   = unit(gap g_txt + owk_signal label(y_j) + scene_weight s_j + noise e)
//
// s_j is a per-item scene direction shared between an image and its
// `owk_per_item` knowledge entries, so retrieval can find them whatever the
// label signal. The remaining entries are distractors built the same way
// around random scenes and random labels. The planted label and scene of
// every row are recorded in its sidecar record.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "qr/corpus_io.hpp"
#include "qr/error.hpp"
#include "qr/linalg.hpp"

namespace qr {

struct SyntheticSpec {
  std::size_t items = 200;
  std::size_t labels = 12;
  std::size_t countries = 4;
  std::size_t continents = 2;
  std::size_t dimension = 32;
  std::size_t owk_size = 1000;
  std::size_t owk_per_item = 3;
  double view_signal = 1.0;
  double owk_signal = 0.0;
  double scene_weight = 1.0;
  double noise = 0.5;
  double modality_gap = 0.5;
  double test_fraction = 0.3;

  void validate() const {
    if (items == 0 || labels == 0 || countries == 0 || continents == 0 || owk_size == 0) {
      throw ConfigError("synthetic spec: all counts must be positive");
    }
    if (dimension < 4) throw ConfigError("synthetic spec: dimension must be at least 4");
    if (countries > labels || continents > countries) {
      throw ConfigError("synthetic spec: need labels >= countries >= continents");
    }
    if (owk_size < items * owk_per_item) throw ConfigError("synthetic spec: owk_size smaller than items * owk_per_item");
    for (double w : {view_signal, owk_signal, scene_weight, noise, modality_gap}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("synthetic spec: weights must be finite and non-negative");
    }
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("synthetic spec: test_fraction must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"items", items},           {"labels", labels},       {"countries", countries},
            {"continents", continents}, {"dimension", dimension}, {"owk_size", owk_size},
            {"owk_per_item", owk_per_item}, {"view_signal", view_signal}, {"owk_signal", owk_signal},
            {"scene_weight", scene_weight}, {"noise", noise}, {"modality_gap", modality_gap},
            {"test_fraction", test_fraction}};
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    s.items = j.value("items", s.items);
    s.labels = j.value("labels", s.labels);
    s.countries = j.value("countries", s.countries);
    s.continents = j.value("continents", s.continents);
    s.dimension = j.value("dimension", s.dimension);
    s.owk_size = j.value("owk_size", s.owk_size);
    s.owk_per_item = j.value("owk_per_item", s.owk_per_item);
    s.view_signal = j.value("view_signal", s.view_signal);
    s.owk_signal = j.value("owk_signal", s.owk_signal);
    s.scene_weight = j.value("scene_weight", s.scene_weight);
    s.noise = j.value("noise", s.noise);
    s.modality_gap = j.value("modality_gap", s.modality_gap);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    return s;
  }
};

struct SyntheticData {
  EmbeddingTable images;
  EmbeddingTable labels;
  EmbeddingTable owk;
};

namespace detail {

inline std::string padded(const std::string& prefix, std::size_t i, int width = 4) {
  std::string digits = std::to_string(i);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  return prefix + digits;
}

class SyntheticSampler {
 public:
  SyntheticSampler(std::size_t dim, std::uint64_t seed) : dim_(dim), rng_(seed) {}

  Vector unit() {
    Vector v(dim_);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& x : v) x = g(rng_);
    return l2_normalize(v);
  }

  // Isotropic Gaussian with E|e|^2 = 1.
  Vector noise() {
    Vector v(dim_);
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
    for (auto& x : v) x = g(rng_);
    return v;
  }

  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

 private:
  std::size_t dim_;
  std::mt19937_64 rng_;
};

inline Vector mix(std::initializer_list<std::pair<double, const Vector*>> terms, std::size_t dim) {
  Vector out(dim, 0.0);
  for (const auto& [w, v] : terms) {
    if (w != 0.0) axpy(w, *v, out);
  }
  if (!(norm(out) > 0.0)) out[0] = 1.0;
  return l2_normalize(out);
}

}  // namespace detail

inline SyntheticData generate_synthetic_data(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t d = spec.dimension;
  detail::SyntheticSampler rng(d, seed);

  const Vector gap_image = rng.unit();
  const Vector gap_text = rng.unit();
  std::vector<Vector> continents, countries, cities;
  for (std::size_t i = 0; i < spec.continents; ++i) continents.push_back(rng.unit());
  for (std::size_t i = 0; i < spec.countries; ++i) countries.push_back(rng.unit());
  for (std::size_t i = 0; i < spec.labels; ++i) cities.push_back(rng.unit());

  SyntheticData out;
  out.labels.vectors.set_cols(d);
  out.images.vectors.set_cols(d);
  out.owk.vectors.set_cols(d);

  std::vector<Vector> label_vecs;
  std::vector<std::string> label_texts;
  for (std::size_t l = 0; l < spec.labels; ++l) {
    const std::size_t country = l % spec.countries;
    const std::size_t continent = country % spec.continents;
    label_vecs.push_back(detail::mix({{0.35, &continents[continent]}, {0.5, &countries[country]}, {0.8, &cities[l]}}, d));
    label_texts.push_back(detail::padded("city", l, 3) + ", " + detail::padded("country", country, 2) + ", " +
                          detail::padded("continent", continent, 1));
    out.labels.vectors.append_row(label_vecs.back());
    out.labels.records.push_back({.id = detail::padded("label-", l), .kind = RecordKind::label, .label_text = label_texts.back()});
  }

  const std::size_t test_count = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(spec.items)));
  const std::size_t train_count = spec.items - test_count;
  std::vector<Vector> scenes;
  std::vector<std::size_t> item_labels;
  for (std::size_t j = 0; j < spec.items; ++j) {
    const std::size_t y = rng.index(spec.labels);
    scenes.push_back(rng.unit());
    item_labels.push_back(y);
    const Vector e = rng.noise();
    out.images.vectors.append_row(detail::mix({{spec.modality_gap, &gap_image},
                                               {spec.view_signal, &label_vecs[y]},
                                               {spec.scene_weight, &scenes[j]},
                                               {spec.noise, &e}},
                                              d));
    SidecarRecord r{.id = detail::padded("item-", j), .kind = RecordKind::image_view, .label_text = label_texts[y],
                    .split = j < train_count ? "train" : "test"};
    r.extra = {{"planted_label", label_texts[y]}, {"scene", detail::padded("item-", j)}};
    out.images.records.push_back(std::move(r));
  }

  auto add_entry = [&](std::size_t label, const Vector& scene, const std::string& scene_tag, const std::string& ref) {
    const Vector e = rng.noise();
    out.owk.vectors.append_row(detail::mix({{spec.modality_gap, &gap_text},
                                            {spec.owk_signal, &label_vecs[label]},
                                            {spec.scene_weight, &scene},
                                            {spec.noise, &e}},
                                           d));
    const std::size_t k = out.owk.records.size();
    SidecarRecord r{.id = detail::padded("owk-", k, 6), .kind = RecordKind::owk, .text_ref = ref};
    r.extra = {{"planted_label", spec.owk_signal > 0.0 ? label_texts[label] : ""}, {"scene", scene_tag}};
    out.owk.records.push_back(std::move(r));
  };
  for (std::size_t j = 0; j < spec.items; ++j) {
    for (std::size_t m = 0; m < spec.owk_per_item; ++m) {
      add_entry(item_labels[j], scenes[j], detail::padded("item-", j), "synthetic:" + detail::padded("item-", j) + "#" + std::to_string(m));
    }
  }
  while (out.owk.records.size() < spec.owk_size) {
    const Vector scene = rng.unit();
    add_entry(rng.index(spec.labels), scene, "random", "synthetic:distractor");
  }
  return out;
}

// Writes images.qemb, labels.qemb and owk.qemb (with sidecars) plus
// synth.json describing the spec and seed.
inline void generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& dir) {
  const auto data = generate_synthetic_data(spec, seed);
  std::filesystem::create_directories(dir);
  write_table(data.images, dir / "images.qemb");
  write_table(data.labels, dir / "labels.qemb");
  write_table(data.owk, dir / "owk.qemb");
  nlohmann::json manifest = {{"seed", seed}, {"spec", spec.to_json()}};
  detail::write_atomically(dir / "synth.json", manifest.dump(2) + "\n");
}

}  // namespace qr
