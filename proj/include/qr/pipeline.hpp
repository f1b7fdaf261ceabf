#pragma once

// The five pipeline stages over an output directory:
//
//   ingest        validated, normalized copies of the three input corpora
//   train-views   view head parameters and per-epoch log
//   search        per-view knowledge retrieval for every image
//   train-scorer  relevance scorer parameters and per-epoch log
//   evaluate      fused, vision-only and knowledge-only metrics
//
// Each stage directory holds stage.json with a content key over the stage's
// configuration subset and the digests of its input files. A stage whose key
// matches and whose outputs exist is skipped unless forced.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "qr/config.hpp"
#include "qr/corpus_io.hpp"
#include "qr/error.hpp"
#include "qr/metrics.hpp"
#include "qr/report.hpp"
#include "qr/retrieval.hpp"
#include "qr/scorer.hpp"
#include "qr/view_head.hpp"

namespace qr {

inline constexpr std::array<const char*, 5> kStages = {"ingest", "train-views", "search", "train-scorer", "evaluate"};

namespace detail {

inline std::string hex(const unsigned char* p, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    out += digits[p[i] >> 4];
    out += digits[p[i] & 15];
  }
  return out;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("sha256 initialization failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  void update(std::string_view s) { update(s.data(), s.size()); }

  std::string hex_digest() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    return hex(md, len);
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex_digest();
}

inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing input " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex_digest();
}

// Digest of a file plus its sidecar when it has one.
inline std::string artifact_digest(const std::filesystem::path& path) {
  std::string d = file_digest(path);
  if (path.extension() == ".qemb") d += ":" + file_digest(sidecar_path(path));
  return d;
}

inline std::string jsonl(const std::vector<nlohmann::json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

// Re-raises `e` with the stage name prefixed, preserving its category.
[[noreturn]] inline void rethrow_tagged(const std::string& stage) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError("[" + stage + "] " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("[" + stage + "] " + e.what());
  } catch (const DataError& e) {
    throw DataError("[" + stage + "] " + e.what());
  } catch (const Error& e) {
    throw DataError("[" + stage + "] " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("[" + stage + "] malformed JSON: " + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    throw DataError("[" + stage + "] " + e.what());
  }
}

}  // namespace detail

struct StageResult {
  std::string stage;
  bool skipped = false;
  std::string key;
};

// Stage inputs shared by the later stages, loaded from ingest outputs.
struct PipelineData {
  ImageSet images;
  LabelSpace labels;
  KnowledgeCorpus owk;
  std::vector<std::size_t> train;  // image indices with a known label and split != "test"
  std::vector<std::size_t> eval;   // split == "test", or every image when there is none
  std::vector<std::optional<std::size_t>> label_index;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, bool force = false, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), force_(force), log_(log) {}

  const RunConfig& config() const { return cfg_; }
  std::filesystem::path dir(const std::string& stage) const { return cfg_.output / stage; }

  StageResult run_stage(const std::string& stage) {
    if (stage == "ingest") return ingest();
    if (stage == "train-views") return train_views();
    if (stage == "search") return search();
    if (stage == "train-scorer") return train_scorer_stage();
    if (stage == "evaluate") return evaluate();
    throw ConfigError("unknown stage '" + stage + "'");
  }

  std::vector<StageResult> run_all() {
    std::vector<StageResult> out;
    for (const char* s : kStages) out.push_back(run_stage(s));
    return out;
  }

  nlohmann::json report() const {
    std::ifstream in(dir("evaluate") / "report.json");
    if (!in) throw DataError("no report in " + dir("evaluate").string());
    return nlohmann::json::parse(in);
  }

 private:
  using Writer = std::function<void(const std::filesystem::path&)>;

  void say(const std::string& msg) const {
    if (log_) *log_ << msg << '\n';
  }

  std::filesystem::path ingest_file(const char* name) const { return dir("ingest") / name; }

  // Runs `body` unless the stage key is unchanged and every output exists.
  StageResult guarded(const std::string& stage, const nlohmann::json& config_subset,
                      const std::vector<std::filesystem::path>& inputs, const std::vector<std::string>& outputs,
                      const Writer& body) {
    try {
      nlohmann::json key_doc = {{"stage", stage}, {"config", config_subset}, {"inputs", nlohmann::json::array()}};
      for (const auto& in : inputs) key_doc["inputs"].push_back(detail::artifact_digest(in));
      const std::string key = detail::sha256(key_doc.dump());
      const auto stage_dir = dir(stage);
      const auto marker = stage_dir / "stage.json";

      if (!force_ && std::filesystem::exists(marker)) {
        std::ifstream m(marker);
        const auto prev = nlohmann::json::parse(m, nullptr, false);
        bool complete = !prev.is_discarded() && prev.value("key", "") == key;
        for (const auto& o : outputs) complete = complete && std::filesystem::exists(stage_dir / o);
        if (complete) {
          say(stage + ": up to date");
          return {stage, true, key};
        }
      }
      std::filesystem::create_directories(stage_dir);
      std::filesystem::remove(marker);
      body(stage_dir);
      nlohmann::json marker_doc = {{"stage", stage}, {"key", key}, {"config", config_subset}, {"outputs", outputs}};
      detail::write_atomically(marker, marker_doc.dump(2) + "\n");
      say(stage + ": done");
      return {stage, false, key};
    } catch (...) {
      detail::rethrow_tagged(stage);
    }
  }

  PipelineData load_data() const {
    const LoadOptions raw{.normalize = false};
    PipelineData d{load_images(ingest_file("images.qemb"), raw), load_labels(ingest_file("labels.qemb"), raw),
                   load_knowledge(ingest_file("owk.qemb"), raw), {}, {}, {}};
    if (d.images.dim() != d.labels.dim() || d.owk.dim() != d.labels.dim()) {
      throw DataError("image, label and knowledge dimensions differ");
    }
    bool any_test = false;
    for (const auto& s : d.images.splits) any_test = any_test || s == "test";
    for (std::size_t i = 0; i < d.images.size(); ++i) {
      d.label_index.push_back(d.labels.index_of(d.images.labels[i]));
      const bool is_test = d.images.splits[i] == "test";
      if (!is_test && d.label_index.back()) d.train.push_back(i);
      if (is_test || !any_test) d.eval.push_back(i);
    }
    return d;
  }

  std::vector<MultiViewEmbedding> all_views(const PipelineData& d, const ViewHeadParams& head) const {
    std::vector<MultiViewEmbedding> out;
    out.reserve(d.images.size());
    for (std::size_t i = 0; i < d.images.size(); ++i) {
      out.push_back(project_views(to_vector(d.images.embedding(i)), head, d.images.ids[i]));
    }
    return out;
  }

  // Retrieved knowledge embedding per view, keyed by item id.
  std::unordered_map<std::string, std::vector<Vector>> load_retrieval(const PipelineData& d) const {
    std::unordered_map<std::string, std::size_t> entry_index;
    for (std::size_t i = 0; i < d.owk.size(); ++i) entry_index.emplace(d.owk.ids[i], i);
    std::unordered_map<std::string, std::vector<Vector>> out;
    for (const auto& row : read_jsonl(dir("search") / "retrieval.jsonl")) {
      auto it = entry_index.find(row.at("entry_id").get<std::string>());
      if (it == entry_index.end()) throw DataError("retrieval refers to unknown entry " + row.at("entry_id").dump());
      auto& v = out[row.at("item_id").get<std::string>()];
      if (row.at("view_index").get<std::size_t>() != v.size()) throw DataError("retrieval rows out of view order");
      v.push_back(to_vector(d.owk.embedding(it->second)));
    }
    return out;
  }

  StageResult ingest() {
    for (const auto& [name, p] : {std::pair{"paths.images", cfg_.images}, std::pair{"paths.labels", cfg_.labels},
                                  std::pair{"paths.owk", cfg_.owk}}) {
      if (p.empty()) throw ConfigError(std::string("[ingest] config key '") + name + "' is required");
    }
    const nlohmann::json subset = {{"normalize", cfg_.normalize}};
    return guarded("ingest", subset, {cfg_.images, cfg_.labels, cfg_.owk}, {"images.qemb", "labels.qemb", "owk.qemb"},
                   [&](const std::filesystem::path& out) {
                     const LoadOptions opts{.normalize = cfg_.normalize};
                     auto copy = [&](const std::filesystem::path& src, const char* name, auto convert) {
                       auto table = read_table(src);
                       auto corpus = convert(table, opts);
                       table.vectors = corpus.embeddings;
                       write_table(table, out / name);
                       say(std::string("ingest: ") + name + " " + std::to_string(table.count()) + " x " +
                           std::to_string(table.dim()));
                     };
                     copy(cfg_.images, "images.qemb", [](auto t, auto o) { return to_image_set(std::move(t), o); });
                     copy(cfg_.labels, "labels.qemb", [](auto t, auto o) { return to_label_space(std::move(t), o); });
                     copy(cfg_.owk, "owk.qemb", [](auto t, auto o) { return to_knowledge_corpus(std::move(t), o); });
                   });
  }

  StageResult train_views() {
    const nlohmann::json subset = {{"seed", cfg_.seed}, {"views", cfg_.raw.at("views")}};
    return guarded("train-views", subset, {ingest_file("images.qemb"), ingest_file("labels.qemb")},
                   {"view_head.qemb", "train_log.jsonl"}, [&](const std::filesystem::path& out) {
                     const auto d = load_data();
                     if (d.train.empty()) throw DataError("no training images with a label in the label space");
                     std::vector<ViewExample> examples;
                     for (auto i : d.train) examples.push_back({to_vector(d.images.embedding(i)), *d.label_index[i]});
                     const auto result = train_view_head(examples, d.labels, cfg_.views);
                     std::vector<nlohmann::json> log;
                     for (const auto& e : result.log) log.push_back(e.to_json());
                     save_view_head(result.params, out / "view_head.qemb");
                     detail::write_atomically(out / "train_log.jsonl", detail::jsonl(log));
                   });
  }

  StageResult search() {
    const nlohmann::json subset = {{"mode", to_string(cfg_.search_mode)}};
    return guarded("search", subset,
                   {ingest_file("images.qemb"), ingest_file("labels.qemb"), ingest_file("owk.qemb"),
                    dir("train-views") / "view_head.qemb"},
                   {"retrieval.jsonl", "summary.json"}, [&](const std::filesystem::path& out) {
                     const auto d = load_data();
                     const auto head = load_view_head(dir("train-views") / "view_head.qemb");
                     std::vector<nlohmann::json> rows;
                     std::vector<RetrievalResult> results;
                     for (const auto& mv : all_views(d, head)) {
                       auto r = search_owk_per_view(mv, d.owk, cfg_.search_mode, cfg_.threads);
                       for (const auto& e : r.entries) {
                         rows.push_back({{"item_id", r.item_id},
                                         {"view_index", e.view_index},
                                         {"entry_id", e.entry_id},
                                         {"score", e.score},
                                         {"mode", to_string(r.mode)},
                                         {"rank", e.rank}});
                       }
                       results.push_back(std::move(r));
                     }
                     const nlohmann::json summary = {{"mode", to_string(cfg_.search_mode)},
                                                     {"items", results.size()},
                                                     {"duplication_rate", duplication_rate(results)}};
                     detail::write_atomically(out / "retrieval.jsonl", detail::jsonl(rows));
                     detail::write_atomically(out / "summary.json", summary.dump(2) + "\n");
                   });
  }

  std::vector<ScorerExample> scorer_examples(const PipelineData& d, const std::vector<std::size_t>& items,
                                             const std::vector<MultiViewEmbedding>& views,
                                             std::unordered_map<std::string, std::vector<Vector>>& retrieved) const {
    std::vector<ScorerExample> out;
    for (auto i : items) {
      auto it = retrieved.find(d.images.ids[i]);
      if (it == retrieved.end()) throw DataError("no retrieval results for " + d.images.ids[i]);
      out.push_back({d.images.ids[i], views[i].views, it->second, d.label_index[i].value_or(0)});
    }
    return out;
  }

  StageResult train_scorer_stage() {
    const nlohmann::json subset = {{"seed", cfg_.seed}, {"scorer", cfg_.raw.at("scorer")}};
    return guarded("train-scorer", subset,
                   {ingest_file("images.qemb"), ingest_file("labels.qemb"), ingest_file("owk.qemb"),
                    dir("train-views") / "view_head.qemb", dir("search") / "retrieval.jsonl"},
                   {"scorer.qemb", "train_log.jsonl"}, [&](const std::filesystem::path& out) {
                     const auto d = load_data();
                     if (d.train.empty()) throw DataError("no training images with a label in the label space");
                     const auto views = all_views(d, load_view_head(dir("train-views") / "view_head.qemb"));
                     auto retrieved = load_retrieval(d);
                     const auto examples = scorer_examples(d, d.train, views, retrieved);
                     const auto result = train_scorer(examples, d.labels, cfg_.scorer);
                     std::vector<nlohmann::json> log;
                     for (const auto& e : result.log) log.push_back(e.to_json());
                     save_scorer(result.model, out / "scorer.qemb");
                     detail::write_atomically(out / "train_log.jsonl", detail::jsonl(log));
                   });
  }

  StageResult evaluate() {
    const nlohmann::json subset = {{"normalize_fused", cfg_.scorer.normalize_fused}};
    return guarded(
        "evaluate", subset,
        {ingest_file("images.qemb"), ingest_file("labels.qemb"), ingest_file("owk.qemb"),
         dir("train-views") / "view_head.qemb", dir("train-views") / "train_log.jsonl", dir("search") / "retrieval.jsonl",
         dir("search") / "summary.json", dir("train-scorer") / "scorer.qemb", dir("train-scorer") / "train_log.jsonl"},
        {"report.json", "report.csv", "fusion.jsonl"}, [&](const std::filesystem::path& out) {
          const auto d = load_data();
          if (d.eval.empty()) throw DataError("no images to evaluate");
          const auto views = all_views(d, load_view_head(dir("train-views") / "view_head.qemb"));
          auto retrieved = load_retrieval(d);
          const auto model = load_scorer(dir("train-scorer") / "scorer.qemb");
          const auto examples = scorer_examples(d, d.eval, views, retrieved);

          auto texts = [&](const std::vector<Ranked>& ranked, std::size_t limit) {
            std::vector<std::string> t;
            for (std::size_t r = 0; r < std::min(limit, ranked.size()); ++r) t.push_back(d.labels.texts[ranked[r].index]);
            return t;
          };
          std::vector<ItemPrediction> fused_preds, vision_preds, owk_preds;
          std::vector<GroundTruth> gts;
          std::vector<RetrievalResult> eval_retrievals;
          std::vector<nlohmann::json> fusion_rows;
          for (std::size_t k = 0; k < examples.size(); ++k) {
            const auto& ex = examples[k];
            const auto fused = fuse(ex.views, ex.owk, model);
            const auto fused_rank = rank_labels_fused(fused, d.labels, cfg_.scorer.normalize_fused);
            fused_preds.push_back({ex.item_id, texts(fused_rank, d.labels.size())});
            vision_preds.push_back({ex.item_id, texts(rank_labels_multiview(ex.views, d.labels), d.labels.size())});
            owk_preds.push_back({ex.item_id, texts(rank_labels_multiview(ex.owk, d.labels), d.labels.size())});
            gts.push_back({ex.item_id, d.images.labels[d.eval[k]]});
            fusion_rows.push_back({{"item_id", ex.item_id},
                                   {"weights_v", fused.view_weights()},
                                   {"weights_owk", fused.owk_weights()},
                                   {"top5_labels", texts(fused_rank, 5)}});
          }
          const auto candidates = d.labels.texts;
          const auto fused_report = evaluate_run(fused_preds, gts, &candidates);
          const auto vision_report = evaluate_run(vision_preds, gts, &candidates);
          const auto owk_report = evaluate_run(owk_preds, gts, &candidates);

          // Duplication over the evaluated items, from the stored retrieval rows.
          std::unordered_map<std::string, RetrievalResult> by_item;
          for (const auto& row : read_jsonl(dir("search") / "retrieval.jsonl")) {
            auto& r = by_item[row.at("item_id").get<std::string>()];
            r.item_id = row.at("item_id").get<std::string>();
            r.mode = parse_search_mode(row.at("mode").get<std::string>());
            r.entries.push_back({row.at("view_index").get<std::size_t>(), 0, row.at("entry_id").get<std::string>(),
                                 row.at("score").get<double>(), row.at("rank").get<std::size_t>()});
          }
          std::unordered_map<std::string, std::size_t> entry_index;
          for (std::size_t i = 0; i < d.owk.size(); ++i) entry_index.emplace(d.owk.ids[i], i);
          for (auto i : d.eval) {
            auto r = by_item.at(d.images.ids[i]);
            for (auto& e : r.entries) e.entry_index = entry_index.at(e.entry_id);
            eval_retrievals.push_back(std::move(r));
          }

          const auto view_log = read_jsonl(dir("train-views") / "train_log.jsonl");
          const auto scorer_log = read_jsonl(dir("train-scorer") / "train_log.jsonl");
          nlohmann::json report = {
              {"f1_definition", kF1Definition},
              {"eval_split", d.eval.size() == d.images.size() ? "all" : "test"},
              {"items", d.eval.size()},
              {"train_items", d.train.size()},
              {"search_mode", to_string(cfg_.search_mode)},
              {"duplication_rate", duplication_rate(eval_retrievals)},
              {"fused", fused_report.to_json(true)},
              {"vision_only", vision_report.to_json(false)},
              {"owk_only", owk_report.to_json(false)},
              {"view_training", view_log.empty() ? nlohmann::json() : view_log.back()},
              {"scorer_training", scorer_log.empty() ? nlohmann::json() : scorer_log.back()},
          };
          std::string csv = EvalReport::csv_header() + "\n";
          csv += fused_report.csv_row("fused") + "\n";
          csv += vision_report.csv_row("vision_only") + "\n";
          csv += owk_report.csv_row("owk_only") + "\n";
          detail::write_atomically(out / "fusion.jsonl", detail::jsonl(fusion_rows));
          detail::write_atomically(out / "report.csv", csv);
          detail::write_atomically(out / "report.json", report.dump(2) + "\n");
        });
  }

  RunConfig cfg_;
  bool force_;
  std::ostream* log_;
};

inline nlohmann::json run_pipeline(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr) {
  Pipeline p(cfg, force, log);
  p.run_all();
  return p.report();
}

}  // namespace qr
