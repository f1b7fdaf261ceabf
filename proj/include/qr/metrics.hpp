#pragma once

// Accuracy (Rank@1), Rank@5, Example-F1 and macro F1 over ranked label
// predictions.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "qr/error.hpp"
#include "qr/hierarchy.hpp"

namespace qr {

// Ranked label texts for one item, best first.
struct ItemPrediction {
  std::string item_id;
  std::vector<std::string> ranked;
};

struct GroundTruth {
  std::string item_id;
  std::string label;
};

struct RankMetrics {
  double accuracy = 0.0;  // percent
  double rank5 = 0.0;     // percent
  std::vector<std::string> missing_gt;  // items whose gt is not a candidate label
};

namespace detail {

// Order-independent mean: values are sorted before summation.
inline double stable_mean(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

inline std::size_t position_of(const std::vector<std::string>& ranked, const std::string& label) {
  auto it = std::find(ranked.begin(), ranked.end(), label);
  return it == ranked.end() ? 0 : static_cast<std::size_t>(it - ranked.begin()) + 1;
}

}  // namespace detail

// Exact full-label match at rank 1 and within the top 5. When `candidates`
// is given, items whose ground truth is not among them are reported and
// counted as misses.
inline RankMetrics rank_metrics(std::span<const ItemPrediction> predictions, std::span<const std::string> gts,
                                const std::vector<std::string>* candidates = nullptr) {
  if (predictions.size() != gts.size()) throw DataError("rank_metrics: prediction and ground-truth counts differ");
  if (predictions.empty()) throw DataError("rank_metrics: no predictions");
  std::set<std::string> candidate_set;
  if (candidates) candidate_set.insert(candidates->begin(), candidates->end());
  RankMetrics m;
  std::size_t top1 = 0, top5 = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].ranked.empty()) throw DataError("rank_metrics: empty ranking for '" + predictions[i].item_id + "'");
    if (candidates && !candidate_set.count(gts[i])) {
      m.missing_gt.push_back(predictions[i].item_id);
      continue;
    }
    const auto pos = detail::position_of(predictions[i].ranked, gts[i]);
    if (pos == 1) ++top1;
    if (pos >= 1 && pos <= 5) ++top5;
  }
  const double n = static_cast<double>(predictions.size());
  m.accuracy = 100.0 * static_cast<double>(top1) / n;
  m.rank5 = 100.0 * static_cast<double>(top5) / n;
  return m;
}

// Per-class F1 over full-label classes, averaged without weighting over the
// classes that occur in the ground truth. Percent.
inline double macro_f1(std::span<const std::string> predictions, std::span<const std::string> gts,
                       const std::vector<std::string>* label_space = nullptr) {
  if (predictions.empty()) throw DataError("macro_f1: empty input");
  if (predictions.size() != gts.size()) throw DataError("macro_f1: prediction and ground-truth counts differ");
  if (label_space) {
    const std::set<std::string> space(label_space->begin(), label_space->end());
    for (const auto& g : gts) {
      if (!space.count(g)) throw DataError("macro_f1: ground truth '" + g + "' is not in the label space");
    }
  }
  struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0;
  };
  std::map<std::string, Counts> classes;
  for (const auto& g : gts) classes[g];
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (predictions[i] == gts[i]) {
      ++classes[gts[i]].tp;
    } else {
      ++classes[gts[i]].fn;
      auto it = classes.find(predictions[i]);
      if (it != classes.end()) ++it->second.fp;
    }
  }
  std::vector<double> f1s;
  for (const auto& [label, c] : classes) {
    const double denom = static_cast<double>(2 * c.tp + c.fp + c.fn);
    f1s.push_back(denom > 0.0 ? 2.0 * static_cast<double>(c.tp) / denom : 0.0);
  }
  return 100.0 * detail::stable_mean(std::move(f1s));
}

struct ItemRecord {
  std::string item_id;
  std::string gt;
  std::string top1;      // empty when the item had no prediction
  std::size_t gt_rank = 0;  // 1-based; 0 when absent from the ranking
  double example_f1 = 0.0;  // [0, 1]
};

inline constexpr const char* kF1Definition = "macro F1 over full-label classes present in the ground truth";

struct EvalReport {
  double accuracy = 0.0;
  double rank5 = 0.0;
  double example_f1 = 0.0;
  double macro_f1 = 0.0;
  std::size_t items = 0;
  std::vector<std::string> coverage_gaps;  // dataset items without a prediction
  std::vector<std::string> missing_gt;     // items whose gt is not a candidate
  std::vector<ItemRecord> records;

  nlohmann::json to_json(bool with_records = true) const {
    nlohmann::json j = {{"f1_definition", kF1Definition},
                        {"accuracy", accuracy},
                        {"rank5", rank5},
                        {"example_f1", example_f1},
                        {"macro_f1", macro_f1},
                        {"items", items},
                        {"coverage_gaps", coverage_gaps},
                        {"missing_gt", missing_gt}};
    if (with_records) {
      auto& arr = j["records"] = nlohmann::json::array();
      for (const auto& r : records) {
        arr.push_back({{"item_id", r.item_id}, {"gt", r.gt}, {"top1", r.top1}, {"gt_rank", r.gt_rank},
                       {"example_f1", r.example_f1}});
      }
    }
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.rank5 = j.at("rank5").get<double>();
    r.example_f1 = j.at("example_f1").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.items = j.at("items").get<std::size_t>();
    r.coverage_gaps = j.value("coverage_gaps", std::vector<std::string>{});
    r.missing_gt = j.value("missing_gt", std::vector<std::string>{});
    for (const auto& rec : j.value("records", nlohmann::json::array())) {
      r.records.push_back({rec.at("item_id"), rec.at("gt"), rec.at("top1"), rec.at("gt_rank"), rec.at("example_f1")});
    }
    return r;
  }

  static std::string csv_header() { return "run,accuracy,rank5,example_f1,macro_f1,items"; }

  std::string csv_row(const std::string& run) const {
    std::ostringstream os;
    os.precision(17);
    os << run << ',' << accuracy << ',' << rank5 << ',' << example_f1 << ',' << macro_f1 << ',' << items;
    return os.str();
  }
};

// Aggregates all metrics over the dataset. Example-F1 uses the rank-1
// prediction. Dataset items without a prediction are listed as coverage gaps
// and score zero on every metric.
inline EvalReport evaluate_run(std::span<const ItemPrediction> predictions, std::span<const GroundTruth> dataset,
                               const std::vector<std::string>* candidates = nullptr) {
  if (dataset.empty()) throw DataError("evaluate_run: empty dataset");
  std::unordered_map<std::string, const ItemPrediction*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.item_id, &p).second) throw DataError("evaluate_run: duplicate prediction for '" + p.item_id + "'");
  }
  std::set<std::string> candidate_set;
  if (candidates) candidate_set.insert(candidates->begin(), candidates->end());

  EvalReport report;
  report.items = dataset.size();
  std::size_t top1 = 0, top5 = 0;
  std::vector<double> f1s;
  std::vector<std::string> preds, gts;
  for (const auto& item : dataset) {
    ItemRecord rec{item.item_id, item.label, "", 0, 0.0};
    auto it = by_id.find(item.item_id);
    if (it == by_id.end() || it->second->ranked.empty()) {
      report.coverage_gaps.push_back(item.item_id);
    } else {
      const auto& ranked = it->second->ranked;
      rec.top1 = ranked.front();
      if (candidates && !candidate_set.count(item.label)) {
        report.missing_gt.push_back(item.item_id);
      } else {
        rec.gt_rank = detail::position_of(ranked, item.label);
      }
      rec.example_f1 = example_f1(parse_hierarchy(item.label), parse_hierarchy(rec.top1));
    }
    if (rec.gt_rank == 1) ++top1;
    if (rec.gt_rank >= 1 && rec.gt_rank <= 5) ++top5;
    f1s.push_back(rec.example_f1);
    preds.push_back(rec.top1);
    gts.push_back(item.label);
    report.records.push_back(std::move(rec));
  }
  const double n = static_cast<double>(dataset.size());
  report.accuracy = 100.0 * static_cast<double>(top1) / n;
  report.rank5 = 100.0 * static_cast<double>(top5) / n;
  report.example_f1 = 100.0 * detail::stable_mean(std::move(f1s));
  report.macro_f1 = macro_f1(preds, gts);
  return report;
}

}  // namespace qr
