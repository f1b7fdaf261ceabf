#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iterator>

#include "qr/config.hpp"
#include "qr/pipeline.hpp"
#include "qr/report.hpp"
#include "qr/synthetic.hpp"
#include "test_util.hpp"

namespace qr {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json tiny_patch(const fs::path& data, const fs::path& out) {
  return {
      {"seed", 7},
      {"paths",
       {{"images", (data / "images.qemb").string()},
        {"labels", (data / "labels.qemb").string()},
        {"owk", (data / "owk.qemb").string()},
        {"output", out.string()}}},
      {"views", {{"learning_rate", 0.05}, {"epochs", 5}, {"batch_size", 16}}},
      {"scorer", {{"learning_rate", 0.5}, {"epochs", 10}, {"batch_size", 16}}},
      {"synth", {{"items", 20}, {"owk_size", 200}, {"dimension", 16}, {"view_signal", 0.0}, {"owk_signal", 1.5}}},
  };
}

class TinyRun : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto cfg = RunConfig::build(tiny_patch(dir_ / "data", dir_ / "run"));
    generate_synthetic(cfg.synth, cfg.seed, dir_ / "data");
  }
  RunConfig config(const std::string& out, std::vector<std::pair<std::string, std::string>> overrides = {}) const {
    return RunConfig::build(tiny_patch(dir_ / "data", dir_ / out), overrides);
  }
  TempDir dir_{"pipeline"};
};

int run_cli(const std::string& args) {
  const int status = std::system((std::string(QR_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Config, DefaultsAndMerge) {
  const auto c = RunConfig::build({{"seed", 3}, {"views", {{"lambda", 0.25}}}});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.views.views, 6u);
  EXPECT_DOUBLE_EQ(c.views.lambda, 0.25);
  EXPECT_EQ(c.views.seed, 3u);
  EXPECT_EQ(c.scorer.seed, 4u);
  EXPECT_EQ(c.search_mode, SearchMode::proposed);
  EXPECT_EQ(c.raw.at("views").at("lambda"), 0.25);
}

TEST(Config, Overrides) {
  const auto c = RunConfig::build({{"seed", 1}}, {{"views.count", "4"}, {"search.mode", "distinct"}, {"paths.output", "123"}});
  EXPECT_EQ(c.views.views, 4u);
  EXPECT_EQ(c.search_mode, SearchMode::distinct);
  EXPECT_EQ(c.output, fs::path("123"));
  const auto parsed = parse_overrides({"--views.lambda=0.5", "--scorer.epochs", "3"});
  ASSERT_EQ(parsed.size(), 2u);
  EXPECT_EQ(parsed[0], (std::pair<std::string, std::string>("views.lambda", "0.5")));
  EXPECT_EQ(parsed[1], (std::pair<std::string, std::string>("scorer.epochs", "3")));
  EXPECT_THROW(parse_overrides({"--views.lambda"}), ConfigError);
  EXPECT_THROW(parse_overrides({"stray"}), ConfigError);
}

TEST(Config, Rejections) {
  EXPECT_THROW(RunConfig::build(), ConfigError);
  EXPECT_NO_THROW(RunConfig::build(nlohmann::json::object(), {}, false));
  EXPECT_THROW(RunConfig::build({{"seed", 1}, {"bogus", 1}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}}, {{"views.bogus", "1"}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}, {"views", {{"epochs", "ten"}}}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", -1}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}}, {{"views.count", "1"}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}}, {{"views.lambda", "-0.1"}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}}, {{"scorer.batch_size", "1"}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}}, {{"views.learning_rate", "0"}}), ConfigError);
  EXPECT_THROW(RunConfig::build({{"seed", 1}}, {{"search.mode", "random"}}), ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/run.json"), ConfigError);
}

TEST_F(TinyRun, EndToEndProducesLoadableArtifacts) {
  const auto start = std::chrono::steady_clock::now();
  const auto report = run_pipeline(config("run"));
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::seconds(60));

  const auto out = dir_ / "run";
  EXPECT_EQ(load_images(out / "ingest" / "images.qemb").size(), 20u);
  EXPECT_EQ(load_labels(out / "ingest" / "labels.qemb").size(), SyntheticSpec{}.labels);
  EXPECT_EQ(load_knowledge(out / "ingest" / "owk.qemb").size(), 200u);
  EXPECT_EQ(load_view_head(out / "train-views" / "view_head.qemb").views(), 6u);
  EXPECT_NO_THROW(load_scorer(out / "train-scorer" / "scorer.qemb"));
  EXPECT_EQ(read_jsonl(out / "train-views" / "train_log.jsonl").size(), 5u);
  EXPECT_EQ(read_jsonl(out / "train-scorer" / "train_log.jsonl").size(), 10u);
  EXPECT_EQ(read_jsonl(out / "search" / "retrieval.jsonl").size(), 20u * 6u);
  EXPECT_EQ(read_jsonl(out / "evaluate" / "fusion.jsonl").size(), report.at("items").get<std::size_t>());

  for (const char* key : {"fused", "vision_only", "owk_only"}) {
    const auto r = EvalReport::from_json(report.at(key));
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, r.rank5);
    EXPECT_LE(r.rank5, 100.0);
  }
  EXPECT_EQ(report.at("f1_definition"), kF1Definition);
  EXPECT_EQ(report.at("items"), 6);
}

TEST_F(TinyRun, RerunSkipsAndIsDeterministic) {
  run_pipeline(config("a"));
  const auto first = slurp(dir_ / "a" / "evaluate" / "report.json");

  Pipeline again(config("a"));
  for (const auto& r : again.run_all()) EXPECT_TRUE(r.skipped) << r.stage;

  Pipeline rescored(config("a", {{"scorer.epochs", "3"}}));
  const auto stages = rescored.run_all();
  EXPECT_TRUE(stages[0].skipped && stages[1].skipped && stages[2].skipped);
  EXPECT_FALSE(stages[3].skipped || stages[4].skipped);

  Pipeline forced(config("a"), true);
  for (const auto& r : forced.run_all()) EXPECT_FALSE(r.skipped) << r.stage;
  EXPECT_EQ(slurp(dir_ / "a" / "evaluate" / "report.json"), first);

  run_pipeline(config("b"));
  EXPECT_EQ(slurp(dir_ / "b" / "evaluate" / "report.json"), first);
  EXPECT_EQ(slurp(dir_ / "b" / "search" / "retrieval.jsonl"), slurp(dir_ / "a" / "search" / "retrieval.jsonl"));
}

TEST_F(TinyRun, SearchModesSetDuplication) {
  EXPECT_DOUBLE_EQ(run_pipeline(config("u", {{"search.mode", "uniform"}})).at("duplication_rate").get<double>(), 100.0);
  EXPECT_DOUBLE_EQ(run_pipeline(config("d", {{"search.mode", "distinct"}})).at("duplication_rate").get<double>(), 0.0);
  for (const auto& row : read_jsonl(dir_ / "u" / "search" / "retrieval.jsonl")) EXPECT_EQ(row.at("mode"), "uniform");
}

TEST_F(TinyRun, FailedStageIsTaggedAndLeavesNoReport) {
  std::ofstream(dir_ / "data" / "labels.qemb", std::ios::binary | std::ios::trunc) << "not a corpus";
  try {
    run_pipeline(config("broken"));
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("[ingest] ", 0), 0u) << e.what();
  }
  EXPECT_FALSE(fs::exists(dir_ / "broken" / "evaluate" / "report.json"));
  EXPECT_FALSE(fs::exists(dir_ / "broken" / "ingest" / "stage.json"));
}

TEST_F(TinyRun, DivergentTrainingIsANumericError) {
  try {
    run_pipeline(config("nan", {{"views.learning_rate", "1e300"}}));
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("[train-views] ", 0), 0u) << e.what();
  }
  EXPECT_FALSE(fs::exists(dir_ / "nan" / "evaluate" / "report.json"));
}

TEST_F(TinyRun, CliExitCodes) {
  const auto cfg_file = dir_ / "run.json";
  std::ofstream(cfg_file) << tiny_patch(dir_ / "data", dir_ / "cli").dump();
  const std::string c = " --config " + cfg_file.string() + " -q";
  EXPECT_EQ(run_cli("pipeline" + c), 0);
  EXPECT_TRUE(fs::exists(dir_ / "cli" / "evaluate" / "report.json"));
  EXPECT_EQ(run_cli("evaluate" + c), 0);
  EXPECT_EQ(run_cli("pipeline" + c + " --views.bogus 1"), 2);
  EXPECT_EQ(run_cli("pipeline -q"), 2);
  EXPECT_EQ(run_cli("nonsense"), 2);
  EXPECT_EQ(run_cli("pipeline" + c + " --paths.output=" + (dir_ / "cli-nan").string() + " --views.learning_rate=1e300"), 4);
  std::ofstream(dir_ / "data" / "owk.qemb", std::ios::binary | std::ios::trunc) << "garbage";
  EXPECT_EQ(run_cli("pipeline" + c + " --paths.output=" + (dir_ / "cli-bad").string()), 3);
  EXPECT_EQ(run_cli("synth" + c + " --out " + (dir_ / "synth").string()), 0);
  EXPECT_TRUE(fs::exists(dir_ / "synth" / "owk.qemb"));
  EXPECT_EQ(run_cli("report --out " + (dir_ / "cmp").string() + " " + (dir_ / "cli").string()), 0);
  EXPECT_EQ(run_cli("report --out " + (dir_ / "cmp").string() + " " + (dir_ / "missing").string()), 3);
}

EvalReport metrics_row(double a, double r5, double ef1, double f1) {
  EvalReport r;
  r.accuracy = a;
  r.rank5 = r5;
  r.example_f1 = ef1;
  r.macro_f1 = f1;
  return r;
}

TEST(Report, RelativeImprovementRow) {
  const std::vector<ReportRun> runs{
      {"base", metrics_row(9.80, 29.48, 45.84, 9.45), {}},
      {"seg", metrics_row(16.46, 37.48, 50.52, 14.63), {}},
      {"ours", metrics_row(19.51, 38.48, 51.25, 17.65), {}},
  };
  const auto md = markdown_table(runs);
  EXPECT_NE(md.find("| ours | 19.51% | 38.48% | 51.25% | 17.65% |"), std::string::npos) << md;
  EXPECT_NE(md.find("| Relative Improvements (AVG: 10.82%) | +18.53% | +2.67% | +1.44% | +20.64% |"), std::string::npos)
      << md;
  EXPECT_NE(md.find("F1-Score: " + std::string(kF1Definition)), std::string::npos);

  const auto worse = markdown_table({runs[2], runs[0]});
  EXPECT_NE(worse.find("| -49.77% |"), std::string::npos) << worse;

  const auto single = markdown_table({runs[0]});
  EXPECT_EQ(single.find("Relative Improvements"), std::string::npos);

  const auto undefined = relative_improvements({metrics_row(0, 10, 10, 10), metrics_row(5, 20, 10, 10)});
  EXPECT_FALSE(undefined[0].has_value());
  EXPECT_DOUBLE_EQ(*undefined[1], 100.0);
  EXPECT_DOUBLE_EQ(*undefined[2], 0.0);
  EXPECT_THROW(relative_improvements({metrics_row(1, 1, 1, 1)}), DataError);
  EXPECT_THROW(markdown_table({}), DataError);
}

TEST_F(TinyRun, ReportFromRunDirectories) {
  run_pipeline(config("u", {{"search.mode", "uniform"}}));
  run_pipeline(config("p"));
  const std::vector<ReportRun> runs{load_report_run(dir_ / "u"), load_report_run(dir_ / "p")};
  EXPECT_EQ(runs[0].name, "u");
  emit_report(runs, dir_ / "cmp");
  const auto csv = slurp(dir_ / "cmp" / "curves.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 5 * 2);
  EXPECT_EQ(csv.rfind("run,epoch,total_loss,local_loss,global_loss,mean_pairwise_cosine,mean_view_accuracy\n", 0), 0u);
  const auto md = slurp(dir_ / "cmp" / "report.md");
  EXPECT_NE(md.find("| u | "), std::string::npos);
  EXPECT_NE(md.find("Relative Improvements"), std::string::npos);

  std::ofstream(dir_ / "blocker") << "x";
  EXPECT_THROW(emit_report(runs, dir_ / "blocker" / "sub"), DataError);
}

}  // namespace
}  // namespace qr
