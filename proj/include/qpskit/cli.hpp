#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qpskit/config.hpp"
#include "qpskit/decompose.hpp"
#include "qpskit/errors.hpp"
#include "qpskit/events.hpp"
#include "qpskit/io.hpp"
#include "qpskit/qps.hpp"
#include "qpskit/telegraph.hpp"

namespace qpskit::cli {

// Process exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;   // bad configuration or command line
inline constexpr int kExitIo = 3;       // unreadable/unwritable artifact
inline constexpr int kExitNumeric = 4;  // numerical failure

struct GlobalOptions {
  bool quiet = false;
  bool json_logs = false;
};

inline void log_info(const GlobalOptions& opts, const std::string& message) {
  if (opts.quiet) return;
  if (opts.json_logs)
    std::cerr << io::json{{"level", "info"}, {"message", message}}.dump() << '\n';
  else
    std::cerr << "[qpskit] " << message << '\n';
}

inline void log_error(const GlobalOptions& opts, const std::string& message) {
  if (opts.json_logs)
    std::cerr << io::json{{"level", "error"}, {"message", message}}.dump() << '\n';
  else
    std::cerr << "[qpskit] error: " << message << '\n';
}

// Canonical fingerprint of a config file: hash of the parsed document's
// sorted-key dump, so formatting differences do not change the hash.
inline std::string config_fingerprint(const io::json& parsed) {
  return io::hash_hex(io::fnv1a64(parsed.dump()));
}

struct LoadedConfig {
  io::PipelineConfig config;
  std::string hash;
};

inline LoadedConfig load_config(const std::string& path) {
  const io::json parsed = io::read_json_file(path);
  return {io::parse_pipeline_config(parsed), config_fingerprint(parsed)};
}

// simulate: generate a run and write samples.csv, truth.json, manifest.json.
inline int run_simulate(const GlobalOptions& opts, const std::string& config_path,
                        const std::string& out_dir, std::optional<std::uint64_t> seed_override,
                        std::optional<int> epochs_override) {
  LoadedConfig loaded = load_config(config_path);
  if (seed_override) loaded.config.seed = *seed_override;
  if (epochs_override) loaded.config.epochs = *epochs_override;
  const sim::SimConfig sim_config = loaded.config.make_sim_config();
  const sim::SimRun run = sim::run_simulation(sim_config);
  const std::filesystem::path dir(out_dir);
  io::write_text_atomic(dir / "samples.csv", io::samples_to_csv(run.samples));
  io::write_text_atomic(dir / "truth.json", io::truth_json(run, loaded.hash).dump(2) + "\n");
  io::write_text_atomic(
      dir / "manifest.json",
      io::manifest_json("simulate", loaded.hash, loaded.config.seed,
                        io::json::array({"samples.csv", "truth.json"}))
              .dump(2) +
          "\n");
  log_info(opts, "simulated " + std::to_string(run.samples.size()) + " epochs, " +
                     std::to_string(run.defects.size()) + " defects, " +
                     std::to_string(run.sensors.size()) + " sensors -> " + out_dir);
  return kExitOk;
}

// detect: difference the spectra, find jumps, fold, cluster, assign.
inline io::DetectionArtifact detect_pipeline(const io::PipelineConfig& config,
                                             const std::vector<sim::SpectralSample>& samples) {
  const auto candidates = events::differentiate(samples);
  const auto jumps = events::detect_jumps(candidates, config.noise, config.detector);
  events::FoldPivot pivot;
  if (config.fold_mode == "fixed")
    pivot = config.detector.fold_pivot;
  else if (config.fold_mode == "auto")
    pivot = events::choose_fold_pivot(jumps);
  // "per_event": pivot stays empty.
  const auto folded = events::fold_all(jumps, pivot);
  const auto clustering = events::cluster_events(folded, config.noise, config.detector);
  io::DetectionArtifact det;
  det.sensor_count = static_cast<int>(config.sensors.size());
  det.sigma_f_mhz = config.noise.sigma_f_mhz;
  det.pivot_order = pivot.sensor_order;
  det.jumps = folded;
  det.clusters = clustering.clusters;
  det.unassociated = clustering.unassociated;
  det.assignments =
      events::assign_events_to_clusters(folded, clustering.clusters, config.noise, config.detector);
  return det;
}

inline int run_detect(const GlobalOptions& opts, const std::string& config_path,
                      const std::string& samples_path, const std::string& out_dir) {
  const LoadedConfig loaded = load_config(config_path);
  const auto samples =
      io::samples_from_csv(io::read_text(samples_path), loaded.config.sensors.size());
  const io::DetectionArtifact det = detect_pipeline(loaded.config, samples);
  const std::filesystem::path dir(out_dir);
  io::json events_only = io::json::array();
  for (const auto& ev : det.jumps) events_only.push_back(io::event_json(ev));
  io::write_text_atomic(dir / "events.json",
                        io::json{{"config_hash", loaded.hash}, {"jumps", events_only}}.dump(2) + "\n");
  io::write_text_atomic(dir / "clusters.json",
                        io::detection_to_json(det, loaded.hash).dump(2) + "\n");
  log_info(opts, "detected " + std::to_string(det.jumps.size()) + " jumps in " +
                     std::to_string(samples.size()) + " epochs -> " +
                     std::to_string(det.clusters.size()) + " clusters, " +
                     std::to_string(det.unassociated.size()) + " unassociated");
  return kExitOk;
}

// One cluster's localization verdict: the fit (when one was attempted) and
// either acceptance or the first gate it failed.
struct ClusterAssessment {
  qps::LocalizationResult fit;
  bool accepted = false;
  std::string reason;  // empty when accepted
};

// Applies the resolved-defect gates to one cluster, in order: enough repeats;
// components from at least two sensors; member signs alternate the way a
// two-state source must; member scatter consistent with one fixed signature;
// the position fit converges, is a good fit, and pins the position with a
// bounded error-ellipsoid aspect (otherwise the quoted sigma_3d would
// understate the soft-axis error).
inline ClusterAssessment assess_cluster(const events::DefectCluster& cluster,
                                        const std::vector<events::DiffEvent>& jumps,
                                        const io::PipelineConfig& config,
                                        const sim::NoiseModel& noise) {
  ClusterAssessment out;
  int sensors_with_data = 0;
  for (size_t c = 0; c + 1 < cluster.component_count.size(); c += 2)
    if (cluster.component_count[c] > 0) ++sensors_with_data;

  if (cluster.size() < config.detector.min_repeats) {
    out.reason = "too_few_repeats";
    return out;
  }
  if (2 * sensors_with_data < 4 || sensors_with_data < 2) {
    out.reason = "insufficient_components";
    return out;
  }
  int pairs = 0;
  const double alternation = events::sign_alternation(cluster, jumps, &pairs);
  if (pairs < config.detector.min_alternation_pairs ||
      alternation < config.detector.min_alternation) {
    out.reason = "not_repetitive";
    return out;
  }
  double scatter_sq = 0.0;
  int scatter_n = 0;
  for (size_t c = 0; c < cluster.component_count.size(); ++c)
    if (cluster.component_count[c] >= 2 && c < static_cast<size_t>(cluster.vector_std.size())) {
      scatter_sq += cluster.vector_std[static_cast<int>(c)] *
                    cluster.vector_std[static_cast<int>(c)];
      ++scatter_n;
    }
  const double scatter_limit =
      config.detector.cluster_radius_sigma * events::diff_component_sigma(noise);
  if (scatter_n == 0 || std::sqrt(scatter_sq / scatter_n) > scatter_limit) {
    out.reason = "overdispersed";
    return out;
  }
  try {
    const qps::FitTarget target = qps::make_fit_target(cluster, noise);
    out.fit = qps::localize(target, config.sensors, config.solver, config.constants);
  } catch (const NoConvergence&) {
    out.fit.converged = false;
    out.reason = "no_convergence";
    return out;
  }
  if (!out.fit.converged) {
    out.reason = "no_convergence";
    return out;
  }
  if (out.fit.p_value < config.solver.significance) {
    out.reason = "low_p_value";
    return out;
  }
  if (out.fit.sigma_principal[2] > config.solver.aspect_limit * out.fit.sigma_3d) {
    out.reason = "ill_conditioned";
    return out;
  }
  out.accepted = true;
  return out;
}

// localize: position-fit every cluster that satisfies the association
// criteria; report the rest with the reason they were rejected.
inline int run_localize(const GlobalOptions& opts, const std::string& config_path,
                        const std::string& clusters_path, const std::string& out_dir) {
  const LoadedConfig loaded = load_config(config_path);
  const io::DetectionArtifact det =
      io::detection_from_json(io::read_json_file(clusters_path));
  sim::NoiseModel noise = loaded.config.noise;
  noise.sigma_f_mhz = det.sigma_f_mhz;  // the artifact is authoritative for its own data

  io::json out_list = io::json::array();
  int accepted_count = 0;
  for (const auto& cluster : det.clusters) {
    const ClusterAssessment verdict = assess_cluster(cluster, det.jumps, loaded.config, noise);
    if (verdict.accepted) ++accepted_count;
    if (verdict.reason == "no_convergence")
      log_error(opts, "cluster " + std::to_string(cluster.id) + ": no convergence");
    out_list.push_back(io::localization_json(cluster.id, cluster.size(), verdict.fit,
                                             verdict.accepted, verdict.reason));
  }
  const std::filesystem::path dir(out_dir);
  io::write_text_atomic(dir / "defects.json",
                        io::json{{"config_hash", loaded.hash},
                                 {"significance", loaded.config.solver.significance},
                                 {"defects", out_list}}
                                .dump(2) +
                            "\n");
  log_info(opts, "localized " + std::to_string(accepted_count) + " of " +
                     std::to_string(det.clusters.size()) + " clusters -> " + out_dir);
  return kExitOk;
}

// accuracy-map: expected-FWHM voxel map plus isoregion volumes.
inline int run_accuracy_map(const GlobalOptions& opts, const std::string& config_path,
                            const std::string& out_dir) {
  const LoadedConfig loaded = load_config(config_path);
  const qps::AccuracyMap map =
      qps::accuracy_map(loaded.config.sensors, loaded.config.map_sigma_mhz, loaded.config.grid,
                        loaded.config.constants);
  std::vector<qps::IsoRegion> regions;
  for (double threshold : loaded.config.map_thresholds_nm)
    regions.push_back(qps::isoregion_volume(map, threshold));
  const std::filesystem::path dir(out_dir);
  io::write_text_atomic(dir / "fwhm_grid.csv", io::accuracy_map_to_csv(map));
  io::write_text_atomic(dir / "isoregions.json",
                        io::isoregions_json(regions, map.grid, loaded.hash).dump(2) + "\n");
  log_info(opts, "mapped " + std::to_string(map.grid.voxel_count()) + " voxels -> " + out_dir);
  return kExitOk;
}

// decompose: split the spectra into resolved telegraph steps, a common-mode
// background, and corrected spectra.
inline int run_decompose(const GlobalOptions& opts, const std::string& config_path,
                         const std::string& samples_path, const std::string& clusters_path,
                         const std::optional<std::string>& sensor_traces_path,
                         const std::string& out_dir) {
  const LoadedConfig loaded = load_config(config_path);
  const auto samples =
      io::samples_from_csv(io::read_text(samples_path), loaded.config.sensors.size());
  const io::DetectionArtifact det =
      io::detection_from_json(io::read_json_file(clusters_path));
  std::vector<decomp::SensorChargeTrace> sensor_traces;
  if (sensor_traces_path)
    sensor_traces = io::sensor_traces_from_json(io::read_json_file(*sensor_traces_path));
  const decomp::DecompositionReport report =
      decomp::run_decomposition(samples, loaded.config.sensors, det.clusters, det.assignments,
                                sensor_traces, true, loaded.config.constants);
  const std::filesystem::path dir(out_dir);
  io::write_text_atomic(dir / "decomposition.json",
                        io::decomposition_to_json(report, loaded.hash).dump(2) + "\n");
  io::write_text_atomic(dir / "corrected.csv", io::samples_to_csv(report.corrected));
  double worst_before = 0.0, worst_after = 0.0;
  for (size_t i = 0; i < report.peak_to_peak_before.size(); ++i) {
    worst_before = std::max({worst_before, report.peak_to_peak_before[i].f_par,
                             report.peak_to_peak_before[i].f_perp});
    worst_after = std::max({worst_after, report.peak_to_peak_after[i].f_par,
                            report.peak_to_peak_after[i].f_perp});
  }
  log_info(opts, "decomposed " + std::to_string(samples.size()) + " epochs; worst peak-to-peak " +
                     io::format_double(worst_before) + " -> " + io::format_double(worst_after) +
                     " MHz");
  return kExitOk;
}

// report: fuse whatever artifacts exist in a directory into report.json and a
// human-readable summary on stdout.
inline int run_report(const GlobalOptions&, const std::string& dir_path,
                      const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(dir_path);
  io::json report;
  std::ostringstream text;
  text << "qpskit report for " << dir_path << "\n";
  bool found_any = false;

  if (fs::exists(dir / "manifest.json")) {
    const io::json manifest = io::read_json_file((dir / "manifest.json").string());
    report["manifest"] = manifest;
    text << "  run: seed " << manifest.value("seed", 0ull) << ", config "
         << manifest.value("config_hash", std::string("?")) << "\n";
    found_any = true;
  }
  if (fs::exists(dir / "clusters.json")) {
    const io::json clusters = io::read_json_file((dir / "clusters.json").string());
    const size_t n_clusters = clusters.at("clusters").size();
    const size_t n_jumps = clusters.at("jumps").size();
    report["detection"] = {{"clusters", n_clusters},
                           {"jumps", n_jumps},
                           {"unassociated", clusters.at("unassociated").size()}};
    text << "  detection: " << n_jumps << " jumps, " << n_clusters << " clusters\n";
    found_any = true;
  }
  if (fs::exists(dir / "defects.json")) {
    const io::json defects = io::read_json_file((dir / "defects.json").string());
    int accepted = 0;
    double best_fwhm = std::numeric_limits<double>::infinity();
    for (const auto& d : defects.at("defects")) {
      if (d.value("accepted", false)) {
        ++accepted;
        const double fwhm = io::json_to_double(d.at("fwhm_nm"), "defects.fwhm_nm");
        if (std::isfinite(fwhm)) best_fwhm = std::min(best_fwhm, fwhm);
      }
    }
    report["localization"] = {{"accepted", accepted},
                              {"total", defects.at("defects").size()},
                              {"best_fwhm_nm", io::json_number(best_fwhm)}};
    text << "  localization: " << accepted << "/" << defects.at("defects").size()
         << " clusters accepted";
    if (std::isfinite(best_fwhm)) text << ", best FWHM " << io::format_double(best_fwhm) << " nm";
    text << "\n";
    found_any = true;
  }
  if (fs::exists(dir / "isoregions.json")) {
    const io::json iso = io::read_json_file((dir / "isoregions.json").string());
    report["isoregions"] = iso.at("regions");
    text << "  accuracy map:";
    for (const auto& r : iso.at("regions"))
      text << " <=" << io::json_to_double(r.at("threshold_nm"), "threshold") << "nm: "
           << io::json_to_double(r.at("volume_nm3"), "volume") << " nm^3;";
    text << "\n";
    found_any = true;
  }
  if (fs::exists(dir / "decomposition.json")) {
    const io::json dec = io::read_json_file((dir / "decomposition.json").string());
    report["decomposition"] = {{"peak_to_peak_before", dec.at("peak_to_peak_before")},
                               {"peak_to_peak_after", dec.at("peak_to_peak_after")}};
    text << "  decomposition: " << dec.at("traces").size() << " traces\n";
    found_any = true;
  }
  if (!found_any) throw IoError("report: no artifacts found in " + dir_path);
  io::write_text_atomic(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
  std::cout << text.str();
  return kExitOk;
}

}  // namespace qpskit::cli
