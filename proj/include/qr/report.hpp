#pragma once

// Comparison tables over finished runs: a Markdown table with a relative
// improvement footer, and a CSV of per-epoch view-head training curves.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qr/corpus_io.hpp"
#include "qr/error.hpp"
#include "qr/metrics.hpp"

namespace qr {

struct ReportRun {
  std::string name;
  EvalReport report;
  std::vector<nlohmann::json> curve;  // one view-training log entry per epoch
};

namespace detail {

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::array<double, 4> metric_row(const EvalReport& r) {
  return {r.accuracy, r.rank5, r.example_f1, r.macro_f1};
}

}  // namespace detail

// Relative improvement of the last run over the best earlier run, per
// metric, in percent. Undefined (nullopt) when the earlier best is zero.
inline std::array<std::optional<double>, 4> relative_improvements(const std::vector<EvalReport>& reports) {
  if (reports.size() < 2) throw DataError("relative improvement needs at least two reports");
  std::array<std::optional<double>, 4> out;
  const auto last = detail::metric_row(reports.back());
  for (std::size_t m = 0; m < 4; ++m) {
    double best = 0.0;
    for (std::size_t r = 0; r + 1 < reports.size(); ++r) best = std::max(best, detail::metric_row(reports[r])[m]);
    if (best > 0.0) out[m] = (last[m] - best) / best * 100.0;
  }
  return out;
}

inline std::string markdown_table(const std::vector<ReportRun>& runs) {
  if (runs.empty()) throw DataError("emit_report: no reports");
  std::ostringstream md;
  md << "| Run | Accuracy (Rank@1) | Rank@5 | Example-F1 | F1-Score |\n";
  md << "|---|---|---|---|---|\n";
  for (const auto& run : runs) {
    md << "| " << run.name;
    for (double v : detail::metric_row(run.report)) md << " | " << detail::fixed2(v) << "%";
    md << " |\n";
  }
  if (runs.size() >= 2) {
    std::vector<EvalReport> reports;
    for (const auto& r : runs) reports.push_back(r.report);
    const auto rel = relative_improvements(reports);
    double sum = 0.0;
    std::size_t defined = 0;
    for (const auto& v : rel) {
      if (v) {
        sum += *v;
        ++defined;
      }
    }
    md << "| Relative Improvements (AVG: " << (defined ? detail::fixed2(sum / static_cast<double>(defined)) + "%" : "n/a")
       << ")";
    for (const auto& v : rel) md << " | " << (v ? (*v >= 0.0 ? "+" : "") + detail::fixed2(*v) + "%" : "n/a");
    md << " |\n";
  }
  md << "\nF1-Score: " << kF1Definition << ".\n";
  return md.str();
}

inline std::string curves_csv(const std::vector<ReportRun>& runs) {
  std::ostringstream csv;
  csv.precision(17);
  csv << "run,epoch,total_loss,local_loss,global_loss,mean_pairwise_cosine,mean_view_accuracy\n";
  for (const auto& run : runs) {
    for (const auto& e : run.curve) {
      double acc = 0.0;
      const auto& per_view = e.at("view_accuracy");
      for (const auto& a : per_view) acc += a.get<double>();
      if (!per_view.empty()) acc /= static_cast<double>(per_view.size());
      csv << run.name << ',' << e.at("epoch").get<std::size_t>() << ',' << e.at("total_loss").get<double>() << ','
          << e.at("local_loss").get<double>() << ',' << e.at("global_loss").get<double>() << ','
          << e.at("mean_pairwise_cosine").get<double>() << ',' << acc << '\n';
    }
  }
  return csv.str();
}

// Writes report.md and curves.csv into `dir`.
inline void emit_report(const std::vector<ReportRun>& runs, const std::filesystem::path& dir) {
  if (runs.empty()) throw DataError("emit_report: no reports");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create report directory " + dir.string() + ": " + ec.message());
  detail::write_atomically(dir / "report.md", markdown_table(runs));
  detail::write_atomically(dir / "curves.csv", curves_csv(runs));
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError(path.string() + ": malformed line " + std::to_string(out.size() + 1));
    out.push_back(std::move(j));
  }
  return out;
}

// A finished pipeline output directory as a report row; the fused metrics
// are used.
inline ReportRun load_report_run(const std::filesystem::path& run_dir, std::string name = {}) {
  std::ifstream in(run_dir / "evaluate" / "report.json");
  if (!in) throw DataError(run_dir.string() + ": no evaluate/report.json");
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(run_dir.string() + ": malformed report.json");
  if (name.empty()) name = run_dir.filename().empty() ? run_dir.parent_path().filename().string() : run_dir.filename().string();
  return {std::move(name), EvalReport::from_json(j.at("fused")), read_jsonl(run_dir / "train-views" / "train_log.jsonl")};
}

}  // namespace qr
