// Command-line front end: simulate | detect | localize | accuracy-map |
// decompose | report. Exit codes: 0 success, 2 configuration error, 3 I/O
// error, 4 numerical failure.

#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "qpskit/cli.hpp"

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const qpskit::ConfigInvalid*>(&e)) return qpskit::cli::kExitConfig;
  if (dynamic_cast<const qpskit::IoError*>(&e)) return qpskit::cli::kExitIo;
  return qpskit::cli::kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace qpskit;

  CLI::App app{"Correlated charge-jump spectroscopy toolkit"};
  app.require_subcommand(1);

  cli::GlobalOptions global;
  app.add_flag("--quiet", global.quiet, "Suppress progress messages");
  app.add_flag("--json", global.json_logs, "Emit log lines as JSON objects");

  std::string config_path, out_dir = ".";
  std::string samples_path = "samples.csv", clusters_path = "clusters.json";
  std::string report_dir = ".";
  std::optional<std::uint64_t> seed_override;
  std::optional<int> epochs_override;
  std::optional<std::string> sensor_traces_path;

  auto* simulate = app.add_subcommand("simulate", "Generate a telegraph-noise run");
  simulate->add_option("--config", config_path, "Pipeline config JSON")->required();
  simulate->add_option("--out", out_dir, "Output directory");
  simulate->add_option("--seed", seed_override, "Override the config seed");
  simulate->add_option("--epochs", epochs_override, "Override the epoch count");

  auto* detect = app.add_subcommand("detect", "Find and cluster correlated jumps");
  detect->add_option("--config", config_path, "Pipeline config JSON")->required();
  detect->add_option("--samples", samples_path, "Input spectra CSV")->required();
  detect->add_option("--out", out_dir, "Output directory");

  auto* localize = app.add_subcommand("localize", "Fit defect positions from clusters");
  localize->add_option("--config", config_path, "Pipeline config JSON")->required();
  localize->add_option("--clusters", clusters_path, "Detection artifact JSON")->required();
  localize->add_option("--out", out_dir, "Output directory");

  auto* accuracy = app.add_subcommand("accuracy-map", "Map expected localization FWHM");
  accuracy->add_option("--config", config_path, "Pipeline config JSON")->required();
  accuracy->add_option("--out", out_dir, "Output directory");

  auto* decompose = app.add_subcommand("decompose", "Decompose spectral diffusion");
  decompose->add_option("--config", config_path, "Pipeline config JSON")->required();
  decompose->add_option("--samples", samples_path, "Input spectra CSV")->required();
  decompose->add_option("--clusters", clusters_path, "Detection artifact JSON")->required();
  decompose->add_option("--sensor-traces", sensor_traces_path,
                        "Sensor ionization traces JSON (optional)");
  decompose->add_option("--out", out_dir, "Output directory");

  auto* report = app.add_subcommand("report", "Summarize a results directory");
  report->add_option("--dir", report_dir, "Directory holding pipeline artifacts");
  report->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, returns 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the error message
    return cli::kExitConfig;
  }

  try {
    if (simulate->parsed())
      return cli::run_simulate(global, config_path, out_dir, seed_override, epochs_override);
    if (detect->parsed()) return cli::run_detect(global, config_path, samples_path, out_dir);
    if (localize->parsed())
      return cli::run_localize(global, config_path, clusters_path, out_dir);
    if (accuracy->parsed()) return cli::run_accuracy_map(global, config_path, out_dir);
    if (decompose->parsed())
      return cli::run_decompose(global, config_path, samples_path, clusters_path,
                                sensor_traces_path, out_dir);
    if (report->parsed()) return cli::run_report(global, report_dir, out_dir);
  } catch (const std::exception& e) {
    cli::log_error(global, e.what());
    return exit_code_for(e);
  }
  return cli::kExitConfig;
}
