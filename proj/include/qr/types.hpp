#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "qr/error.hpp"
#include "qr/hierarchy.hpp"
#include "qr/linalg.hpp"

namespace qr {

// A single embedding. Values are held in double; files store float32.
using EmbVec = Vector;

inline constexpr double kUnitNormTolerance = 1e-6;

inline void validate_embedding(std::span<const double> v, bool unit_norm = false) {
  if (v.empty()) throw DataError("embedding has dimension 0");
  if (!all_finite(v)) throw DataError("embedding has non-finite components");
  if (unit_norm && std::abs(norm(v) - 1.0) > kUnitNormTolerance) throw DataError("embedding is not unit norm");
}

// The n view embeddings produced for one image; index i is the view identity.
struct MultiViewEmbedding {
  std::string item_id;
  std::vector<EmbVec> views;

  std::size_t count() const { return views.size(); }
  std::size_t dim() const { return views.empty() ? 0 : views.front().size(); }

  void validate() const {
    if (views.empty()) throw DataError("multi-view embedding '" + item_id + "' has no views");
    for (const auto& v : views) {
      if (v.size() != dim()) throw DataError("multi-view embedding '" + item_id + "' mixes dimensions");
      validate_embedding(v);
    }
  }
};

namespace detail {

inline void require_unique(const std::vector<std::string>& keys, const char* what) {
  std::unordered_set<std::string> seen;
  for (const auto& k : keys) {
    if (!seen.insert(k).second) throw DataError(std::string("duplicate ") + what + ": '" + k + "'");
  }
}

inline void require_finite_rows(const FloatMatrix& m) {
  if (!all_finite(m.data())) throw DataError("non-finite embedding value");
}

}  // namespace detail

// Open-world knowledge store: one embedding per knowledge text.
struct KnowledgeCorpus {
  std::vector<std::string> ids;
  std::vector<std::string> text_refs;
  FloatMatrix embeddings;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return embeddings.cols(); }
  std::span<const float> embedding(std::size_t i) const { return embeddings.row(i); }

  void validate() const {
    if (embeddings.rows() != ids.size() || text_refs.size() != ids.size()) {
      throw DataError("knowledge corpus: entry count mismatch");
    }
    detail::require_unique(ids, "knowledge entry id");
    detail::require_finite_rows(embeddings);
  }
};

// Candidate locations or times that a fused feature is ranked against.
struct LabelSpace {
  std::vector<std::string> ids;
  std::vector<std::string> texts;
  std::vector<HierarchicalLabel> hierarchies;
  FloatMatrix embeddings;

  std::size_t size() const { return texts.size(); }
  std::size_t dim() const { return embeddings.cols(); }
  std::span<const float> embedding(std::size_t i) const { return embeddings.row(i); }

  std::optional<std::size_t> index_of(const std::string& text) const {
    auto it = std::find(texts.begin(), texts.end(), text);
    if (it == texts.end()) return std::nullopt;
    return static_cast<std::size_t>(it - texts.begin());
  }

  void validate() const {
    if (embeddings.rows() != texts.size() || ids.size() != texts.size() || hierarchies.size() != texts.size()) {
      throw DataError("label space: entry count mismatch");
    }
    detail::require_unique(texts, "label text");
    detail::require_unique(ids, "label id");
    detail::require_finite_rows(embeddings);
  }
};

// Frozen base image embeddings with their ground-truth label and split.
struct ImageSet {
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  std::vector<std::string> splits;
  FloatMatrix embeddings;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return embeddings.cols(); }
  std::span<const float> embedding(std::size_t i) const { return embeddings.row(i); }

  void validate() const {
    if (embeddings.rows() != ids.size() || labels.size() != ids.size() || splits.size() != ids.size()) {
      throw DataError("image set: entry count mismatch");
    }
    detail::require_unique(ids, "image id");
    detail::require_finite_rows(embeddings);
  }
};

}  // namespace qr
