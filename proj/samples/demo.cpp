// Generates a small synthetic corpus, runs the whole pipeline on it twice
// (knowledge search on and off) and prints the comparison table.
//
//   qr_demo [work_dir]

#include <filesystem>
#include <iostream>

#include "qr/config.hpp"
#include "qr/pipeline.hpp"
#include "qr/report.hpp"
#include "qr/synthetic.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "qr-demo";
  try {
    nlohmann::json patch = {
        {"seed", 7},
        {"paths", {{"images", (work / "data/images.qemb").string()},
                   {"labels", (work / "data/labels.qemb").string()},
                   {"owk", (work / "data/owk.qemb").string()}}},
        {"views", {{"learning_rate", 0.05}, {"epochs", 5}, {"batch_size", 16}}},
        {"scorer", {{"learning_rate", 0.5}, {"epochs", 10}, {"batch_size", 16}}},
        {"synth", {{"items", 120}, {"owk_size", 600}, {"view_signal", 0.3}, {"owk_signal", 1.5}}},
    };
    auto cfg = qr::RunConfig::build(patch);
    qr::generate_synthetic(cfg.synth, cfg.seed, work / "data");

    std::vector<qr::ReportRun> runs;
    for (const char* mode : {"uniform", "proposed"}) {
      auto run_cfg = qr::RunConfig::build(patch, {{"search.mode", mode}, {"paths.output", (work / mode).string()}});
      const auto report = qr::run_pipeline(run_cfg, false, &std::cerr);
      std::cout << mode << ": duplication " << report.at("duplication_rate").get<double>() << "%\n";
      runs.push_back(qr::load_report_run(work / mode));
    }
    qr::emit_report(runs, work / "report");
    std::cout << qr::markdown_table(runs);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  return 0;
}
