// qr: command-line driver for the pipeline stages, synthetic data and reports.
//
//   qr synth --config run.json --out data/
//   qr pipeline --config run.json [--force] [--views.lambda 0.2 ...]
//   qr ingest | train-views | search | train-scorer | evaluate --config run.json
//   qr report --out cmp/ runA/ runB/
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qr/config.hpp"
#include "qr/pipeline.hpp"
#include "qr/report.hpp"
#include "qr/synthetic.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;
constexpr int kNumericExit = 4;

struct Common {
  std::string config;
  bool force = false;
  bool quiet = false;
};

qr::RunConfig load_config(const Common& c, const CLI::App& sub, bool require_seed = true) {
  return qr::RunConfig::load(c.config, qr::parse_overrides(sub.remaining()), require_seed);
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-view retrieval and relevance-weighted fusion over embedding corpora"};
  app.require_subcommand(1);
  Common common;

  auto add_stage = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config,-c", common.config, "JSON run configuration");
    sub->add_flag("--force", common.force, "rerun even when the stage is up to date");
    sub->add_flag("--quiet,-q", common.quiet, "suppress progress output");
    sub->allow_extras();
    return sub;
  };

  std::vector<CLI::App*> stages;
  for (const char* s : qr::kStages) stages.push_back(add_stage(s, std::string("run the ") + s + " stage"));
  auto* pipeline = add_stage("pipeline", "run every stage in order");

  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  synth->add_option("--config,-c", common.config, "JSON run configuration");
  synth->add_option("--out,-o", synth_out, "output directory")->required();
  synth->add_flag("--quiet,-q", common.quiet, "suppress progress output");
  synth->allow_extras();

  std::string report_out;
  std::vector<std::string> report_runs;
  auto* report = app.add_subcommand("report", "compare finished runs");
  report->add_option("--out,-o", report_out, "output directory")->required();
  report->add_option("runs", report_runs, "pipeline output directories, baseline first")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  std::ostream* log = common.quiet ? nullptr : &std::cerr;

  if (synth->parsed()) {
    const auto cfg = load_config(common, *synth);
    qr::generate_synthetic(cfg.synth, cfg.seed, synth_out);
    if (log) *log << "synth: wrote " << synth_out << '\n';
    return 0;
  }
  if (report->parsed()) {
    std::vector<qr::ReportRun> runs;
    for (const auto& r : report_runs) runs.push_back(qr::load_report_run(r));
    qr::emit_report(runs, report_out);
    std::cout << qr::markdown_table(runs);
    return 0;
  }
  if (pipeline->parsed()) {
    const auto cfg = load_config(common, *pipeline);
    const auto result = qr::run_pipeline(cfg, common.force, log);
    std::cout << "fused Rank@1 " << result.at("fused").at("accuracy").get<double>() << "%, vision-only Rank@1 "
              << result.at("vision_only").at("accuracy").get<double>() << "%, duplication "
              << result.at("duplication_rate").get<double>() << "%\n"
              << "report: " << (cfg.output / "evaluate" / "report.json").string() << '\n';
    return 0;
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i]->parsed()) {
      qr::Pipeline p(load_config(common, *stages[i]), common.force, log);
      p.run_stage(qr::kStages[i]);
      return 0;
    }
  }
  return kConfigExit;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const qr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const qr::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericExit;
  } catch (const qr::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataExit;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataExit;
  }
}
