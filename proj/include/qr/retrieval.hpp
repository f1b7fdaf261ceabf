#pragma once

// Exhaustive inner-product search over a knowledge corpus, per-view knowledge
// retrieval in three modes, and the duplication statistic over its results.

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "qr/error.hpp"
#include "qr/linalg.hpp"
#include "qr/types.hpp"

namespace qr {

inline std::optional<std::size_t> env_thread_cap() {
  const char* env = std::getenv("QR_THREADS");
  if (!env) return std::nullopt;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || v <= 0) return std::nullopt;
  return static_cast<std::size_t>(v);
}

// Worker count: QR_THREADS when set and positive, otherwise the hardware
// concurrency (at least 1).
inline std::size_t default_threads() {
  if (auto cap = env_thread_cap()) return *cap;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// 0 means "default"; an explicit request is still capped by QR_THREADS.
inline std::size_t resolve_threads(std::size_t requested) {
  if (requested == 0) return default_threads();
  if (auto cap = env_thread_cap()) return std::min(requested, *cap);
  return requested;
}

namespace detail {

// Bounded selection of the best k candidates under ranks_before.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { heap_.reserve(k + 1); }

  void push(Ranked r) {
    // heap_ is a max-heap on "ranks later", so front() is the current worst.
    if (heap_.size() < k_) {
      heap_.push_back(r);
      std::push_heap(heap_.begin(), heap_.end(), ranks_before);
    } else if (ranks_before(r, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), ranks_before);
      heap_.back() = r;
      std::push_heap(heap_.begin(), heap_.end(), ranks_before);
    }
  }

  std::vector<Ranked> take_sorted() {
    std::sort(heap_.begin(), heap_.end(), ranks_before);
    return std::move(heap_);
  }

 private:
  std::size_t k_;
  std::vector<Ranked> heap_;
};

}  // namespace detail

// Exact top-k of `score(i)` over i in [0, count). The range is split into
// contiguous partitions scanned in parallel; partition results are merged in
// partition order. Because ranks_before is a strict total order the output
// does not depend on the number of threads.
template <class ScoreFn>
std::vector<Ranked> topk_scan(std::size_t count, std::size_t k, std::size_t threads, ScoreFn&& score) {
  if (k == 0) throw DataError("top-k search: k must be at least 1");
  if (k > count) throw DataError("top-k search: k exceeds corpus size");
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, count));

  std::vector<std::vector<Ranked>> partial(threads);
  auto scan = [&](std::size_t part) {
    const std::size_t begin = count * part / threads;
    const std::size_t end = count * (part + 1) / threads;
    detail::TopK top(k);
    for (std::size_t i = begin; i < end; ++i) top.push({i, score(i)});
    partial[part] = top.take_sorted();
  };
  if (threads == 1) {
    scan(0);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(scan, t);
  }

  detail::TopK merged(k);
  for (const auto& p : partial) {
    for (const auto& r : p) merged.push(r);
  }
  return merged.take_sorted();
}

inline std::vector<Ranked> search_topk(std::span<const double> query, const KnowledgeCorpus& corpus, std::size_t k,
                                       std::size_t threads = 0) {
  if (corpus.size() == 0) throw DataError("search_topk: empty corpus");
  if (query.size() != corpus.dim()) throw DataError("search_topk: query dimension does not match corpus");
  return topk_scan(corpus.size(), k, resolve_threads(threads),
                   [&](std::size_t i) { return dot(query, corpus.embedding(i)); });
}

enum class SearchMode { proposed, uniform, distinct };

inline const char* to_string(SearchMode m) {
  switch (m) {
    case SearchMode::proposed: return "proposed";
    case SearchMode::uniform: return "uniform";
    case SearchMode::distinct: return "distinct";
  }
  return "?";
}

inline SearchMode parse_search_mode(const std::string& s) {
  if (s == "proposed") return SearchMode::proposed;
  if (s == "uniform") return SearchMode::uniform;
  if (s == "distinct") return SearchMode::distinct;
  throw ConfigError("unknown search mode '" + s + "' (expected proposed, uniform or distinct)");
}

struct RetrievedEntry {
  std::size_t view_index = 0;
  std::size_t entry_index = 0;
  std::string entry_id;
  double score = 0.0;  // inner product of this view with the entry
  std::size_t rank = 0;  // 1-based position of the entry in this view's own ordering
};

struct RetrievalResult {
  std::string item_id;
  SearchMode mode = SearchMode::proposed;
  std::vector<RetrievedEntry> entries;  // one per view, in view order

  std::size_t distinct_entries() const {
    std::set<std::size_t> ids;
    for (const auto& e : entries) ids.insert(e.entry_index);
    return ids.size();
  }
};

namespace detail {

// 1-based rank of `entry` in the ordering of the corpus by `query`.
inline std::size_t rank_of(std::span<const double> query, const KnowledgeCorpus& corpus, std::size_t entry) {
  const Ranked target{entry, dot(query, corpus.embedding(entry))};
  std::size_t better = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (i != entry && ranks_before({i, dot(query, corpus.embedding(i))}, target)) ++better;
  }
  return better + 1;
}

}  // namespace detail

// proposed: independent top-1 per view.
// uniform:  the entry with the highest mean score over views, for every view.
// distinct: views in index order each take their best entry not already taken.
inline RetrievalResult search_owk_per_view(const MultiViewEmbedding& views, const KnowledgeCorpus& corpus,
                                           SearchMode mode, std::size_t threads = 0) {
  views.validate();
  if (corpus.size() == 0) throw DataError("search_owk_per_view: empty corpus");
  if (views.dim() != corpus.dim()) throw DataError("search_owk_per_view: view dimension does not match corpus");
  const std::size_t n = views.count();
  threads = resolve_threads(threads);

  RetrievalResult out{views.item_id, mode, {}};
  auto make = [&](std::size_t v, std::size_t entry, std::size_t rank) {
    return RetrievedEntry{v, entry, corpus.ids[entry], dot(views.views[v], corpus.embedding(entry)), rank};
  };

  switch (mode) {
    case SearchMode::proposed:
      for (std::size_t v = 0; v < n; ++v) {
        const auto top = search_topk(views.views[v], corpus, 1, threads);
        out.entries.push_back(make(v, top.front().index, 1));
      }
      break;
    case SearchMode::uniform: {
      const auto top = topk_scan(corpus.size(), 1, threads, [&](std::size_t i) {
        double s = 0.0;
        for (const auto& q : views.views) s += dot(q, corpus.embedding(i));
        return s / static_cast<double>(n);
      });
      const std::size_t entry = top.front().index;
      for (std::size_t v = 0; v < n; ++v) out.entries.push_back(make(v, entry, detail::rank_of(views.views[v], corpus, entry)));
      break;
    }
    case SearchMode::distinct: {
      if (corpus.size() < n) throw DataError("distinct search needs at least as many corpus entries as views");
      std::set<std::size_t> taken;
      for (std::size_t v = 0; v < n; ++v) {
        const auto top = search_topk(views.views[v], corpus, v + 1, threads);
        for (std::size_t r = 0; r < top.size(); ++r) {
          if (taken.insert(top[r].index).second) {
            out.entries.push_back(make(v, top[r].index, r + 1));
            break;
          }
        }
      }
      break;
    }
  }
  return out;
}

// Per item: 1 - (distinct - 1) / (n - 1); reported as the mean over items in
// percent. Uniform results give 100, distinct results give 0.
inline double duplication_rate(std::span<const RetrievalResult> results) {
  if (results.empty()) throw DataError("duplication_rate: no results");
  double sum = 0.0;
  for (const auto& r : results) {
    const std::size_t n = r.entries.size();
    if (n < 2) throw DataError("duplication_rate: needs at least two retrievals per item");
    sum += 1.0 - static_cast<double>(r.distinct_entries() - 1) / static_cast<double>(n - 1);
  }
  return 100.0 * sum / static_cast<double>(results.size());
}

}  // namespace qr
