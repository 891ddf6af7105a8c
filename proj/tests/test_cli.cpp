#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

#include "cli_support.hpp"
#include "gaitcast/ingest.hpp"
#include "gaitcast/tensor_io.hpp"
#include "test_support.hpp"

using namespace gaitcast;
using gaitcast::testing::run_cli;
using gaitcast::testing::same_tree;
using gaitcast::testing::slurp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough for seconds-scale runs.
const char* kSmallConfig = R"({
  "forecast": {"horizon": 128, "context_len": 256, "lags": [1, 2, 3, 4, 5, 6, 7, 8],
               "d_model": 16, "num_heads": 2, "num_layers": 1, "max_epochs": 1,
               "slices_per_epoch": 8, "val_slices": 4, "num_samples": 20,
               "targets": ["angleL_kneeFlex", "torqueR_hipFlex"], "origins": 2}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = gaitcast::testing::scratch_dir(std::string("cli_") + info->name());
    std::ofstream(dir_ / "small.json") << kSmallConfig;
  }

  gaitcast::testing::CliResult cli(const std::string& args) { return run_cli(args, dir_); }

  std::string p(const std::string& rel) const { return "'" + (dir_ / rel).string() + "'"; }

  /// synth (3 cycles) + pipeline into <dir>/rec and <dir>/pipe.
  void make_dataset() {
    ASSERT_EQ(cli("synth --cycles 3 --seed 1 --out " + p("rec")).code, 0);
    ASSERT_EQ(cli("pipeline --record " + p("rec/record.csv") + " --out " + p("pipe")).code, 0);
  }

  fs::path dir_;
};

json load(const fs::path& f) { return json::parse(slurp(f)); }

}  // namespace

TEST_F(Cli, SynthIsDeterministicAndReparses) {
  ASSERT_EQ(cli("synth --cycles 2 --seed 1 --out " + p("a")).code, 0);
  ASSERT_EQ(cli("synth --cycles 2 --seed 1 --out " + p("b")).code, 0);
  EXPECT_TRUE(same_tree(dir_ / "a", dir_ / "b"));
  EXPECT_EQ(parse_record(dir_ / "a" / "record.csv"), synth_gait(1, 2));
}

TEST_F(Cli, SynthZeroCyclesIsUsageError) {
  const auto r = cli("synth --cycles 0 --out " + p("a"));
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(dir_ / "a"));
}

TEST_F(Cli, HelpListsSubcommandsAndLogVariable) {
  const auto out = dir_ / "help.txt";
  ASSERT_EQ(std::system((std::string("'") + GAITCAST_CLI_PATH + "' --help > '" + out.string() + "'").c_str()), 0);
  const auto text = slurp(out);
  for (const char* word : {"synth", "pipeline", "gpr", "xlstm", "forecast", "eval", "--config", "--seed",
                           "--threads", "GAITCAST_LOG"}) {
    EXPECT_NE(text.find(word), std::string::npos) << word;
  }
}

TEST_F(Cli, PipelineShapesForThousandSampleRecord) {
  auto r = synth_gait(4, 2);
  r.semg = r.semg.topRows(1000).eval();
  r.angles = r.angles.topRows(1000).eval();
  r.torques = r.torques.topRows(1000).eval();
  write_record(r, dir_ / "short.csv");
  ASSERT_EQ(cli("pipeline --record " + p("short.csv") + " --out " + p("pipe")).code, 0);
  const auto f = load_tensor3(dir_ / "pipe" / "features.bin");
  const auto t = load_tensor3(dir_ / "pipe" / "targets.bin");
  EXPECT_EQ((std::array{f.d0, f.d1, f.d2}), (std::array<std::size_t, 3>{19, 9, 6}));
  EXPECT_EQ((std::array{t.d0, t.d1, t.d2}), (std::array<std::size_t, 3>{19, 8, 2}));
  const auto prov = load(dir_ / "pipe" / "provenance.json");
  EXPECT_EQ(prov["config"]["window"]["window_len"], 100);
  EXPECT_EQ(prov["config"]["window"]["overlap"], 50);
  EXPECT_EQ(prov["command"], "pipeline");
}

TEST_F(Cli, PipelineRerunIsByteIdentical) {
  make_dataset();
  ASSERT_EQ(cli("pipeline --record " + p("rec/record.csv") + " --out " + p("pipe2")).code, 0);
  std::string diff;
  EXPECT_TRUE(same_tree(dir_ / "pipe", dir_ / "pipe2", &diff)) << diff;
}

TEST_F(Cli, PipelineThreadCountDoesNotChangeOutputs) {
  make_dataset();
  ASSERT_EQ(cli("--threads 4 pipeline --record " + p("rec/record.csv") + " --out " + p("pipe4")).code, 0);
  std::string diff;
  // provenance.json records the thread count itself.
  EXPECT_TRUE(same_tree(dir_ / "pipe", dir_ / "pipe4", &diff, "provenance.json")) << diff;
}

TEST_F(Cli, CorpusScopeFitsOneScalerOverRecords) {
  ASSERT_EQ(cli("synth --cycles 2 --seed 1 --out " + p("a")).code, 0);
  ASSERT_EQ(cli("synth --cycles 2 --seed 2 --gait UPS --out " + p("b")).code, 0);
  std::ofstream(dir_ / "corpus.json") << R"({"window": {"scaler_scope": "corpus"}})";
  ASSERT_EQ(cli("--config " + p("corpus.json") + " pipeline --record " + p("a/record.csv") + " --record " +
                p("b/record.csv") + " --out " + p("pipe"))
                .code,
            0);
  const auto sc = load(dir_ / "pipe" / "scalers.json");
  EXPECT_EQ(sc["targets"].size(), 1u);
  const auto t = load_tensor3(dir_ / "pipe" / "targets.bin");
  // Pooled z-scores: every column has mean 0 over both records together.
  for (std::size_t c = 0; c < t.row_size(); ++c) {
    double m = 0.0;
    for (std::size_t w = 0; w < t.d0; ++w) m += t.row(w)[c];
    EXPECT_NEAR(m / static_cast<double>(t.d0), 0.0, 1e-10);
  }
}

TEST_F(Cli, StageFailureIsNamedOnStderr) {
  std::ofstream(dir_ / "slow.json") << R"({"synth": {"sample_rate_hz": 800}})";
  ASSERT_EQ(cli("--config " + p("slow.json") + " synth --cycles 2 --out " + p("rec")).code, 0);
  // 450 Hz band edge is above the 400 Hz Nyquist rate of this record.
  const auto r = cli("pipeline --record " + p("rec/record.csv") + " --out " + p("pipe"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stage 'preprocess'"), std::string::npos) << r.err;
}

TEST_F(Cli, ConfigErrorsAreRejectedBeforeWork) {
  std::ofstream(dir_ / "bad.json") << R"({"window": {"overlap": 100}})";
  auto r = cli("--config " + p("bad.json") + " synth --out " + p("rec"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stage 'config'"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "rec"));

  std::ofstream(dir_ / "typo.json") << R"({"windw": {}})";
  r = cli("--config " + p("typo.json") + " synth --out " + p("rec"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("windw"), std::string::npos) << r.err;
}

TEST_F(Cli, GprWritesFiniteMetricsForSixteenOutputs) {
  make_dataset();
  ASSERT_EQ(cli("gpr --data " + p("pipe") + " --out " + p("gpr")).code, 0);
  const auto m = load(dir_ / "gpr" / "metrics.json");
  ASSERT_EQ(m["outputs"].size(), 16u);
  for (const auto& [name, o] : m["outputs"].items()) {
    for (const char* split : {"train", "test"}) {
      const double mae = o[split]["mae"], rmse = o[split]["rmse"];
      EXPECT_TRUE(std::isfinite(mae) && std::isfinite(rmse)) << name;
      EXPECT_GE(rmse, mae) << name;
    }
  }
  EXPECT_TRUE(fs::exists(dir_ / "gpr" / "models" / "angleL_kneeFlex.json"));

  // eval recomputes the same numbers from predictions.csv.
  ASSERT_EQ(cli("eval --run " + p("gpr")).code, 0);
  const auto e = load(dir_ / "gpr" / "eval.json");
  for (const auto& [name, o] : m["outputs"].items()) {
    for (const char* split : {"train", "test"}) {
      EXPECT_DOUBLE_EQ(e["outputs"][name][split]["mae"].get<double>(), o[split]["mae"].get<double>());
      EXPECT_DOUBLE_EQ(e["outputs"][name][split]["rmse"].get<double>(), o[split]["rmse"].get<double>());
    }
  }
}

TEST_F(Cli, XlstmWritesTwentyRowLossCurve) {
  make_dataset();
  ASSERT_EQ(cli("xlstm --data " + p("pipe") + " --out " + p("xl")).code, 0);
  std::istringstream loss(slurp(dir_ / "xl" / "loss.csv"));
  std::string line;
  std::getline(loss, line);
  EXPECT_EQ(line, "step,rmse");
  int rows = 0;
  while (std::getline(loss, line)) ++rows;
  EXPECT_EQ(rows, 20);
  const auto m = load(dir_ / "xl" / "metrics.json");
  EXPECT_LT(m["final_rmse"].get<double>(), m["initial_rmse"].get<double>());
  EXPECT_TRUE(fs::exists(dir_ / "xl" / "checkpoint" / "manifest.json"));
}

TEST_F(Cli, CrossDatasetEvaluation) {
  make_dataset();
  ASSERT_EQ(cli("synth --cycles 2 --seed 2 --gait UPS --out " + p("ups")).code, 0);
  ASSERT_EQ(cli("pipeline --record " + p("ups/record.csv") + " --out " + p("ups_pipe")).code, 0);
  ASSERT_EQ(cli("xlstm --data " + p("pipe") + " --test-data " + p("ups_pipe") + " --out " + p("xl")).code, 0);
  const auto m = load(dir_ / "xl" / "metrics.json");
  EXPECT_EQ(m["train_rows"], load_tensor3(dir_ / "pipe" / "features.bin").d0);
  EXPECT_TRUE(m["outputs"]["angleL_kneeFlex"].contains("test"));
}

TEST_F(Cli, ForecastWritesQuantileRowsPerTarget) {
  make_dataset();
  ASSERT_EQ(cli("--config " + p("small.json") + " forecast --record " + p("rec/record.csv") + " --out " + p("fc")).code,
            0);
  std::istringstream q(slurp(dir_ / "fc" / "quantiles.csv"));
  std::string line;
  std::getline(q, line);
  EXPECT_EQ(line, "target,step,q05,q25,q50,q75,q95,truth");
  std::map<std::string, int> rows;
  while (std::getline(q, line)) ++rows[line.substr(0, line.find(','))];
  EXPECT_EQ(rows, (std::map<std::string, int>{{"angleL_kneeFlex", 128}, {"torqueR_hipFlex", 128}}));

  const auto m = load(dir_ / "fc" / "metrics.json");
  EXPECT_TRUE(std::isfinite(m["crps"]["mean"].get<double>()));
  for (const char* k : {"min", "q1", "median", "q3", "max"}) EXPECT_TRUE(m["crps"]["box"].contains(k));

  ASSERT_EQ(cli("eval --run " + p("fc")).code, 0);
  EXPECT_DOUBLE_EQ(load(dir_ / "fc" / "eval.json")["crps"]["mean"].get<double>(), m["crps"]["mean"].get<double>());
}

TEST_F(Cli, ForecastIndependentOfThreads) {
  make_dataset();
  const std::string base = "--config " + p("small.json") + " forecast --record " + p("rec/record.csv");
  ASSERT_EQ(cli(base + " --out " + p("fc1")).code, 0);
  ASSERT_EQ(cli("--threads 3 " + base + " --out " + p("fc3")).code, 0);
  std::string diff;
  EXPECT_TRUE(same_tree(dir_ / "fc1", dir_ / "fc3", &diff, "provenance.json")) << diff;
}

TEST_F(Cli, ForecastWithPretraining) {
  make_dataset();
  ASSERT_EQ(cli("synth --cycles 3 --seed 9 --out " + p("pre")).code, 0);
  ASSERT_EQ(cli("--config " + p("small.json") + " forecast --record " + p("rec/record.csv") + " --pretrain " +
                p("pre/record.csv") + " --out " + p("fc"))
                .code,
            0);
  const auto m = load(dir_ / "fc" / "metrics.json");
  EXPECT_TRUE(m["training"].contains("pretrain"));
  EXPECT_TRUE(m["training"].contains("fine_tune"));
}

TEST_F(Cli, ReplayReproducesEveryOutput) {
  make_dataset();
  ASSERT_EQ(cli("xlstm --data " + p("pipe") + " --out " + p("xl")).code, 0);
  ASSERT_EQ(cli("--config " + p("small.json") + " forecast --record " + p("rec/record.csv") + " --out " + p("fc")).code,
            0);
  for (const std::string run : {"rec", "pipe", "xl", "fc"}) {
    ASSERT_EQ(cli("replay --provenance " + p(run + "/provenance.json") + " --out " + p(run + "_replay")).code, 0) << run;
    std::string diff;
    EXPECT_TRUE(same_tree(dir_ / run, dir_ / (run + "_replay"), &diff)) << run << ": " << diff;
  }
}

TEST_F(Cli, ReplayRefusesChangedInputs) {
  make_dataset();
  std::ofstream(dir_ / "rec" / "record.csv", std::ios::app) << "\n";
  const auto r = cli("replay --provenance " + p("pipe/provenance.json") + " --out " + p("again"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stage 'replay'"), std::string::npos) << r.err;
}

TEST_F(Cli, EvalRejectsPipelineDirectory) {
  make_dataset();
  const auto r = cli("eval --run " + p("pipe"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stage 'eval'"), std::string::npos) << r.err;
}
