// gaitcast: command-line front end. See README.md for the subcommands and
// the files each one writes.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>

#include "gaitcast/config.hpp"
#include "gaitcast/runs.hpp"

namespace {

using namespace gaitcast;
namespace fs = std::filesystem;

void setup_logging() {
  auto logger = spdlog::stderr_logger_mt("gaitcast");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("GAITCAST_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"gaitcast: sEMG gait pipeline, regressors and probabilistic forecaster"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer("Environment: GAITCAST_LOG=trace|debug|info|warn|error|off sets the log level (default warn).\n"
             "Exit status: 0 on success, 1 when a stage fails (named on stderr), 2 on usage errors.");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for every stochastic stage (overrides the config)");
  app.add_option("--threads", threads, "Worker thread cap (overrides the config)")->check(CLI::PositiveNumber);

  std::string out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic gait record: <out>/record.csv + record.json");
  std::optional<int> cycles;
  std::optional<std::string> gait;
  synth->add_option("--cycles", cycles, "Gait cycles to synthesise")->check(CLI::PositiveNumber);
  synth->add_option("--gait", gait, "Gait label")->check(CLI::IsMember({"DNS", "UPS"}));
  synth->add_option("--out", out, "Output directory")->required();

  auto* pipeline = app.add_subcommand("pipeline", "Preprocess, featurise and standardise records into tensors");
  std::vector<std::string> records;
  pipeline->add_option("--record", records, "Record CSV (repeatable)")->required()->check(CLI::ExistingFile);
  pipeline->add_option("--out", out, "Output directory")->required();

  std::string data, test_data;
  auto* gpr = app.add_subcommand("gpr", "Fit one GPR per joint output on a pipeline directory");
  gpr->add_option("--data", data, "Pipeline output directory")->required()->check(CLI::ExistingDirectory);
  gpr->add_option("--test-data", test_data, "Evaluate on this pipeline directory instead of a held-out split")
      ->check(CLI::ExistingDirectory);
  gpr->add_option("--out", out, "Output directory")->required();

  auto* xlstm = app.add_subcommand("xlstm", "Train the xLSTM regressor on a pipeline directory");
  xlstm->add_option("--data", data, "Pipeline output directory")->required()->check(CLI::ExistingDirectory);
  xlstm->add_option("--test-data", test_data, "Evaluate on this pipeline directory instead of a held-out split")
      ->check(CLI::ExistingDirectory);
  xlstm->add_option("--out", out, "Output directory")->required();

  std::string record, pretrain;
  auto* forecast = app.add_subcommand("forecast", "Train the lag forecaster and score held-out forecasts by CRPS");
  forecast->add_option("--record", record, "Record CSV with the target series")->required()->check(CLI::ExistingFile);
  forecast->add_option("--pretrain", pretrain, "Record to pretrain on before fine-tuning on --record")
      ->check(CLI::ExistingFile);
  forecast->add_option("--out", out, "Output directory")->required();

  std::string run_dir;
  auto* eval = app.add_subcommand("eval", "Recompute metrics from a gpr/xlstm/forecast run directory");
  eval->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "Write the result JSON here (default <run>/eval.json)");

  std::string provenance;
  auto* replay = app.add_subcommand("replay", "Re-run a command from its provenance.json");
  replay->add_option("--provenance", provenance, "provenance.json of an earlier run")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (replay->parsed()) {
      const auto cmd = runs::replay(provenance, out);
      spdlog::info("replayed '{}' into {}", cmd, out);
      return 0;
    }

    const auto cfg = runs::stage("config", [&] {
      RunConfig c;
      if (!config_path.empty()) c = load_config(config_path);
      nlohmann::json overrides = nlohmann::json::object();
      if (seed) overrides["seed"] = *seed;
      if (threads) overrides["threads"] = *threads;
      if (cycles) overrides["synth"]["cycles"] = *cycles;
      if (gait) overrides["synth"]["gait"] = *gait;
      c = merge_config(c, overrides);
      c.validate();
      return c;
    });
    spdlog::debug("config: {}", to_json(cfg).dump());

    if (synth->parsed()) {
      runs::run_synth(cfg, out);
    } else if (pipeline->parsed()) {
      std::vector<fs::path> paths(records.begin(), records.end());
      runs::run_pipeline(cfg, paths, out);
    } else if (gpr->parsed()) {
      runs::run_gpr(cfg, data, test_data, out);
    } else if (xlstm->parsed()) {
      runs::run_xlstm(cfg, data, test_data, out);
    } else if (forecast->parsed()) {
      runs::run_forecast(cfg, record, pretrain, out);
    } else if (eval->parsed()) {
      const fs::path target = out.empty() ? fs::path(run_dir) / "eval.json" : fs::path(out);
      runs::run_eval(run_dir, target);
    }
    spdlog::info("done: {}", out);
    return 0;
  } catch (const StageError& e) {
    std::cerr << "gaitcast: stage '" << e.stage() << "' failed: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "gaitcast: stage 'unknown' failed: " << e.what() << '\n';
    return 1;
  }
}
