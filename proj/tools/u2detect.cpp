// u2detect: scenario generation, network induction, coefficient mining,
// calibration, detection and reporting.
//
// Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or validation failure.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("u2detect");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("U2DETECT_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only honour it when asked for.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
    else spdlog::warn("U2DETECT_LOG='{}' is not a log level; using warn", env);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  u2d::ScopedFlushDenormals ftz;

  CLI::App app{"u2detect: unknown-unknown detection via conformance of mined model coefficients"};
  app.require_subcommand(1);

  u2d::cli::CommonOptions common;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub, bool manifest_required) {
    auto* m = sub->add_option("--manifest", common.manifest, "run manifest (JSON)");
    if (manifest_required) m->required();
    sub->add_option("--seed", seed, "global seed, overrides the manifest");
    sub->add_option("--jobs", common.jobs, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", common.out, "output directory, overrides the manifest");
  };

  auto* simulate = app.add_subcommand("simulate", "generate logged and ground-truth traces for each scenario");
  add_common(simulate, true);

  std::string template_ref;
  double tau = 1.0;
  auto* induce = app.add_subcommand("induce", "print the induced network and write its DOT graph");
  add_common(induce, false);
  induce->add_option("--template", template_ref, "template JSON path or builtin:bergman");
  induce->add_option("--tau", tau, "sampling period in model time units")->check(CLI::PositiveNumber);

  auto* mine = app.add_subcommand("mine", "mine coefficients from every simulated trace");
  add_common(mine, true);

  std::string residues_file;
  std::optional<double> alpha;
  auto* calibrate = app.add_subcommand("calibrate", "build the conformal acceptance interval");
  add_common(calibrate, false);
  calibrate->add_option("--residues-file", residues_file, "JSON with rho_m and residues (skips the manifest)");
  calibrate->add_option("--alpha", alpha, "miscoverage level")->check(CLI::Range(0.0, 1.0));

  bool use_mined = false;
  auto* detect = app.add_subcommand("detect", "mine each detect scenario and judge it against the calibration");
  add_common(detect, true);
  detect->add_flag("--use-mined", use_mined, "reuse results from a previous mine run instead of mining again");

  auto* report = app.add_subcommand("report", "write a markdown report and plot CSVs for a run directory");
  add_common(report, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (auto* sub : {simulate, induce, mine, calibrate, detect, report})
    if (sub->parsed() && sub->count("--seed")) common.seed = seed;

  try {
    if (simulate->parsed()) return u2d::cli::cmd_simulate(common);
    if (induce->parsed()) return u2d::cli::cmd_induce(common, template_ref, tau);
    if (mine->parsed()) return u2d::cli::cmd_mine(common);
    if (calibrate->parsed()) {
      if (residues_file.empty() && common.manifest.empty())
        throw u2d::ValidationError("calibrate needs --manifest or --residues-file");
      return u2d::cli::cmd_calibrate(common, residues_file, alpha);
    }
    if (detect->parsed()) return u2d::cli::cmd_detect(common, use_mined);
    if (report->parsed()) return u2d::cli::cmd_report(common);
  } catch (const u2d::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const u2d::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const u2d::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const u2d::InsufficientDataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const u2d::ScenarioError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const u2d::TrainingDivergedError& e) {
    std::cerr << "error: " << e.what() << " (epoch " << e.epoch() << ")\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
