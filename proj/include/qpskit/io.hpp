#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "qpskit/config.hpp"
#include "qpskit/decompose.hpp"
#include "qpskit/events.hpp"
#include "qpskit/qps.hpp"
#include "qpskit/telegraph.hpp"

namespace qpskit::io {

inline constexpr const char* kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Primitive formatting: round-trip-safe doubles, content hashing, atomic writes
// ---------------------------------------------------------------------------

// Shortest decimal string that parses back to the same double. Non-finite
// values render as inf / -inf / nan.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text, const std::string& ctx) {
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw IoError(ctx + ": cannot parse number '" + std::string(text) + "'");
  return v;
}

inline long parse_long(std::string_view text, const std::string& ctx) {
  long v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw IoError(ctx + ": cannot parse integer '" + std::string(text) + "'");
  return v;
}

// FNV-1a 64-bit hash; used to fingerprint configs in the run manifest.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : data) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Writes via a sibling temp file and renames, so readers never observe a
// partially written artifact.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << content;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// JSON value for a double that may be non-finite (JSON has no inf/nan
// literals; they are carried as strings and understood by json_to_double).
inline json json_number(double v) {
  if (std::isfinite(v)) return v;
  return format_double(v);
}

inline double json_to_double(const json& v, const std::string& ctx) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return parse_double(v.get<std::string>(), ctx);
  throw IoError(ctx + ": expected a number");
}

inline json vec3_json(const Vec3& v) {
  return json::array({v.x(), v.y(), v.z()});
}

inline Vec3 vec3_from(const json& v, const std::string& ctx) {
  if (!v.is_array() || v.size() != 3) throw IoError(ctx + ": expected [x, y, z]");
  return Vec3(json_to_double(v[0], ctx), json_to_double(v[1], ctx), json_to_double(v[2], ctx));
}

// ---------------------------------------------------------------------------
// Spectra CSV: epoch,sensor,f_par_mhz,f_perp_mhz (empty fields = no reading)
// ---------------------------------------------------------------------------

inline std::string samples_to_csv(const std::vector<sim::SpectralSample>& samples) {
  std::string out = "epoch,sensor,f_par_mhz,f_perp_mhz\n";
  for (const auto& sample : samples)
    for (size_t i = 0; i < sample.per_sensor.size(); ++i) {
      out += std::to_string(sample.epoch);
      out += ',';
      out += std::to_string(i);
      out += ',';
      if (sample.per_sensor[i]) {
        out += format_double(sample.per_sensor[i]->f_par);
        out += ',';
        out += format_double(sample.per_sensor[i]->f_perp);
      } else {
        out += ',';
      }
      out += '\n';
    }
  return out;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  size_t start = 0;
  for (size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      fields.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return fields;
}

inline std::vector<sim::SpectralSample> samples_from_csv(const std::string& text,
                                                         size_t sensor_count) {
  std::vector<sim::SpectralSample> samples;
  size_t pos = 0;
  bool header = true;
  int line_no = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (header) {
      if (line != "epoch,sensor,f_par_mhz,f_perp_mhz")
        throw IoError("samples csv: unexpected header '" + std::string(line) + "'");
      header = false;
      continue;
    }
    const auto fields = split_csv_line(line);
    const std::string ctx = "samples csv line " + std::to_string(line_no);
    if (fields.size() != 4) throw IoError(ctx + ": expected 4 fields");
    const int epoch = static_cast<int>(parse_long(fields[0], ctx));
    const long sensor = parse_long(fields[1], ctx);
    if (sensor < 0 || static_cast<size_t>(sensor) >= sensor_count)
      throw IoError(ctx + ": sensor index " + std::to_string(sensor) +
                    " out of range for " + std::to_string(sensor_count) + " sensors");
    if (samples.empty() || samples.back().epoch != epoch) {
      if (!samples.empty() && samples.back().epoch > epoch)
        throw IoError(ctx + ": epochs out of order");
      sim::SpectralSample s;
      s.epoch = epoch;
      s.per_sensor.resize(sensor_count);
      samples.push_back(std::move(s));
    }
    const bool has_par = !fields[2].empty(), has_perp = !fields[3].empty();
    if (has_par != has_perp)
      throw IoError(ctx + ": a reading needs both f_par and f_perp");
    if (has_par)
      samples.back().per_sensor[static_cast<size_t>(sensor)] =
          ObservablePair{parse_double(fields[2], ctx), parse_double(fields[3], ctx)};
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Accuracy-map CSV: ix,iy,iz,x_nm,y_nm,z_nm,fwhm_nm
// ---------------------------------------------------------------------------

inline std::string accuracy_map_to_csv(const qps::AccuracyMap& map) {
  std::string out = "ix,iy,iz,x_nm,y_nm,z_nm,fwhm_nm\n";
  const auto& g = map.grid;
  for (int iz = 0; iz < g.dims[2]; ++iz)
    for (int iy = 0; iy < g.dims[1]; ++iy)
      for (int ix = 0; ix < g.dims[0]; ++ix) {
        const Vec3 p = g.center(ix, iy, iz);
        out += std::to_string(ix) + ',' + std::to_string(iy) + ',' + std::to_string(iz) + ',';
        out += format_double(p.x()) + ',' + format_double(p.y()) + ',' + format_double(p.z());
        out += ',';
        out += format_double(map.at(ix, iy, iz));
        out += '\n';
      }
  return out;
}

// ---------------------------------------------------------------------------
// Simulation truth + manifest
// ---------------------------------------------------------------------------

inline json sensors_json(const std::vector<NVSensor>& sensors) {
  json arr = json::array();
  for (const auto& s : sensors) {
    arr.push_back({{"id", s.id()},
                   {"position_nm", vec3_json(s.position())},
                   {"frame", {{"x", vec3_json(s.frame().x_hat())},
                              {"y", vec3_json(s.frame().y_hat())},
                              {"z", vec3_json(s.frame().z_hat())}}},
                   {"strain_vcm", json::array({s.strain_perp().x(), s.strain_perp().y()})},
                   {"d_par_mhz_per_vcm", s.d_par()},
                   {"d_perp_mhz_per_vcm", s.d_perp()}});
  }
  return arr;
}

inline json truth_json(const sim::SimRun& run, const std::string& config_hash) {
  json defects = json::array();
  for (const auto& d : run.defects)
    defects.push_back({{"id", d.id},
                       {"position_nm", vec3_json(d.position_nm)},
                       {"charge_e", d.charge_e},
                       {"flip_prob", d.flip_prob},
                       {"initially_occupied", d.initially_occupied}});
  json traces = json::array();
  for (const auto& t : run.traces) {
    json occ = json::array();
    for (const auto v : t.occupancy) occ.push_back(static_cast<int>(v));
    traces.push_back({{"defect_id", t.defect_id}, {"occupancy", occ}});
  }
  json j{{"config_hash", config_hash},
         {"sensors", sensors_json(run.sensors)},
         {"defects", defects},
         {"traces", traces},
         {"noise", {{"sigma_f_mhz", run.noise.sigma_f_mhz},
                    {"missing_prob", run.noise.missing_prob},
                    {"rng_seed", run.noise.rng_seed}}},
         {"constants", {{"epsilon_r", run.constants.epsilon_r},
                        {"coulomb_prefactor", run.constants.coulomb_prefactor}}}};
  if (!run.background_field.empty()) {
    json bg = json::array();
    for (const auto& b : run.background_field) bg.push_back(vec3_json(b));
    j["background_field_vcm"] = bg;
  }
  return j;
}

inline json manifest_json(const std::string& command, const std::string& config_hash,
                          std::uint64_t seed, const json& outputs) {
  return json{{"tool", "qpskit"},
              {"version", kToolVersion},
              {"command", command},
              {"config_hash", config_hash},
              {"seed", seed},
              {"outputs", outputs}};
}

// ---------------------------------------------------------------------------
// Detection artifacts (events + clusters + assignments)
// ---------------------------------------------------------------------------

inline json event_json(const events::DiffEvent& ev) {
  json vec = json::array();
  for (int c = 0; c < ev.vector.size(); ++c) vec.push_back(ev.vector[c]);
  json valid = json::array();
  for (const auto v : ev.valid) valid.push_back(static_cast<int>(v));
  return json{{"epoch", ev.epoch},
              {"vector_mhz", vec},
              {"valid", valid},
              {"folded", ev.folded},
              {"fold_sign", ev.fold_sign}};
}

inline events::DiffEvent event_from_json(const json& j, const std::string& ctx) {
  events::DiffEvent ev;
  ev.epoch = j.at("epoch").get<int>();
  const auto& vec = j.at("vector_mhz");
  ev.vector = Eigen::VectorXd::Zero(static_cast<int>(vec.size()));
  for (size_t c = 0; c < vec.size(); ++c)
    ev.vector[static_cast<int>(c)] = json_to_double(vec[c], ctx + ".vector_mhz");
  for (const auto& v : j.at("valid")) ev.valid.push_back(v.get<int>() ? 1 : 0);
  if (2 * ev.valid.size() != static_cast<size_t>(ev.vector.size()))
    throw IoError(ctx + ": vector/valid size mismatch");
  ev.folded = j.at("folded").get<bool>();
  ev.fold_sign = j.at("fold_sign").get<int>();
  return ev;
}

inline json cluster_json(const events::DefectCluster& c) {
  json mean = json::array(), sd = json::array(), counts = json::array();
  for (int i = 0; i < c.mean_vector.size(); ++i) {
    mean.push_back(c.mean_vector[i]);
    sd.push_back(c.vector_std[i]);
    counts.push_back(c.component_count[static_cast<size_t>(i)]);
  }
  return json{{"id", c.id},
              {"member_indices", c.member_indices},
              {"member_epochs", c.member_epochs},
              {"mean_mhz", mean},
              {"std_mhz", sd},
              {"component_count", counts},
              {"count_plus", c.count_plus},
              {"count_minus", c.count_minus}};
}

inline events::DefectCluster cluster_from_json(const json& j, const std::string& ctx) {
  events::DefectCluster c;
  c.id = j.at("id").get<int>();
  c.member_indices = j.at("member_indices").get<std::vector<int>>();
  c.member_epochs = j.at("member_epochs").get<std::vector<int>>();
  const auto& mean = j.at("mean_mhz");
  const auto& sd = j.at("std_mhz");
  const auto& counts = j.at("component_count");
  if (mean.size() != sd.size() || mean.size() != counts.size())
    throw IoError(ctx + ": mean/std/count size mismatch");
  c.mean_vector = Eigen::VectorXd::Zero(static_cast<int>(mean.size()));
  c.vector_std = Eigen::VectorXd::Zero(static_cast<int>(sd.size()));
  for (size_t i = 0; i < mean.size(); ++i) {
    c.mean_vector[static_cast<int>(i)] = json_to_double(mean[i], ctx + ".mean_mhz");
    c.vector_std[static_cast<int>(i)] = json_to_double(sd[i], ctx + ".std_mhz");
    c.component_count.push_back(counts[i].get<int>());
  }
  c.count_plus = j.at("count_plus").get<int>();
  c.count_minus = j.at("count_minus").get<int>();
  return c;
}

inline json assignment_json(const events::EventAssignment& a) {
  return json{{"event_index", a.event_index},
              {"epoch", a.epoch},
              {"cluster_id", a.cluster_id},
              {"direction", a.direction},
              {"ambiguous", a.ambiguous}};
}

inline events::EventAssignment assignment_from_json(const json& j) {
  events::EventAssignment a;
  a.event_index = j.at("event_index").get<int>();
  a.epoch = j.at("epoch").get<int>();
  a.cluster_id = j.at("cluster_id").get<int>();
  a.direction = j.at("direction").get<int>();
  a.ambiguous = j.at("ambiguous").get<bool>();
  return a;
}

// The full output of the detection stage, as written to clusters.json.
struct DetectionArtifact {
  int sensor_count = 0;
  double sigma_f_mhz = 1.0;
  std::vector<int> pivot_order;
  std::vector<events::DiffEvent> jumps;  // folded
  std::vector<events::DefectCluster> clusters;
  std::vector<int> unassociated;
  std::vector<events::EventAssignment> assignments;
};

inline json detection_to_json(const DetectionArtifact& det, const std::string& config_hash) {
  json jumps = json::array();
  for (const auto& ev : det.jumps) jumps.push_back(event_json(ev));
  json clusters = json::array();
  for (const auto& c : det.clusters) clusters.push_back(cluster_json(c));
  json assignments = json::array();
  for (const auto& a : det.assignments) assignments.push_back(assignment_json(a));
  return json{{"config_hash", config_hash},
              {"sensor_count", det.sensor_count},
              {"sigma_f_mhz", det.sigma_f_mhz},
              {"pivot_order", det.pivot_order},
              {"jumps", jumps},
              {"clusters", clusters},
              {"unassociated", det.unassociated},
              {"assignments", assignments}};
}

inline DetectionArtifact detection_from_json(const json& j) {
  DetectionArtifact det;
  try {
    det.sensor_count = j.at("sensor_count").get<int>();
    det.sigma_f_mhz = j.at("sigma_f_mhz").get<double>();
    det.pivot_order = j.at("pivot_order").get<std::vector<int>>();
    int k = 0;
    for (const auto& e : j.at("jumps"))
      det.jumps.push_back(event_from_json(e, "jumps[" + std::to_string(k++) + "]"));
    k = 0;
    for (const auto& c : j.at("clusters"))
      det.clusters.push_back(cluster_from_json(c, "clusters[" + std::to_string(k++) + "]"));
    det.unassociated = j.at("unassociated").get<std::vector<int>>();
    for (const auto& a : j.at("assignments"))
      det.assignments.push_back(assignment_from_json(a));
  } catch (const json::exception& e) {
    throw IoError(std::string("clusters json: ") + e.what());
  }
  return det;
}

// ---------------------------------------------------------------------------
// Localization artifacts
// ---------------------------------------------------------------------------

inline json localization_json(int cluster_id, int cluster_size,
                              const qps::LocalizationResult& r, bool accepted,
                              const std::string& rejection_reason) {
  json cov = json::array();
  for (int a = 0; a < 3; ++a)
    cov.push_back(json::array({json_number(r.covariance(a, 0)), json_number(r.covariance(a, 1)),
                               json_number(r.covariance(a, 2))}));
  return json{{"cluster_id", cluster_id},
              {"cluster_size", cluster_size},
              {"accepted", accepted},
              {"rejection_reason", rejection_reason},
              {"position_nm", vec3_json(r.position)},
              {"objective", json_number(r.objective)},
              {"dof", r.dof},
              {"p_value", json_number(r.p_value)},
              {"covariance_nm2", cov},
              {"sigma_principal_nm",
               json::array({json_number(r.sigma_principal[0]), json_number(r.sigma_principal[1]),
                            json_number(r.sigma_principal[2])})},
              {"sigma_3d_nm", json_number(r.sigma_3d)},
              {"fwhm_nm", json_number(r.fwhm)},
              {"polarity", r.polarity},
              {"polarity_ambiguous", r.polarity_ambiguous},
              {"covariance_unreliable", r.covariance_unreliable},
              {"iterations", r.iterations},
              {"starts_tried", r.starts_tried}};
}

// ---------------------------------------------------------------------------
// Decomposition artifacts
// ---------------------------------------------------------------------------

inline json observable_pair_json(const ObservablePair& p) {
  return json{{"f_par_mhz", json_number(p.f_par)}, {"f_perp_mhz", json_number(p.f_perp)}};
}

inline json decomposition_to_json(const decomp::DecompositionReport& report,
                                  const std::string& config_hash) {
  json traces = json::array();
  for (size_t k = 0; k < report.traces.traces.size(); ++k) {
    json occ = json::array();
    for (const auto v : report.traces.traces[k].occupancy) occ.push_back(static_cast<int>(v));
    traces.push_back({{"cluster_id", report.traces.traces[k].defect_id},
                      {"occupancy", occ},
                      {"inconsistent", static_cast<bool>(report.traces.inconsistent[k])}});
  }
  json background = json::array();
  for (size_t t = 0; t < report.background.field_vcm.size(); ++t) {
    json entry{{"epoch_index", t},
               {"partial", static_cast<bool>(report.background.partial[t])},
               {"residual_rms_mhz", json_number(report.background.residual_rms_mhz[t])}};
    entry["field_vcm"] =
        report.background.field_vcm[t] ? vec3_json(*report.background.field_vcm[t]) : json();
    background.push_back(entry);
  }
  auto pair_list = [](const std::vector<ObservablePair>& v) {
    json arr = json::array();
    for (const auto& p : v) arr.push_back(observable_pair_json(p));
    return arr;
  };
  return json{{"config_hash", config_hash},
              {"traces", traces},
              {"background", background},
              {"baseline", pair_list(report.baseline)},
              {"peak_to_peak_before", pair_list(report.peak_to_peak_before)},
              {"peak_to_peak_after", pair_list(report.peak_to_peak_after)},
              {"std_before", pair_list(report.std_before)},
              {"std_after", pair_list(report.std_after)}};
}

inline std::vector<decomp::SensorChargeTrace> sensor_traces_from_json(const json& j) {
  std::vector<decomp::SensorChargeTrace> traces;
  try {
    for (const auto& t : j.at("traces")) {
      decomp::SensorChargeTrace tr;
      tr.sensor_id = t.at("sensor_id").get<int>();
      tr.charge_e = t.at("charge_e").get<double>();
      for (const auto& v : t.at("state")) tr.state.push_back(v.get<int>() ? 1 : 0);
      traces.push_back(std::move(tr));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("sensor traces json: ") + e.what());
  }
  return traces;
}

inline json isoregions_json(const std::vector<qps::IsoRegion>& regions,
                            const qps::GridSpec& grid, const std::string& config_hash) {
  json arr = json::array();
  for (const auto& r : regions)
    arr.push_back({{"threshold_nm", r.threshold_nm},
                   {"voxels", r.voxels},
                   {"volume_nm3", r.volume_nm3}});
  return json{{"config_hash", config_hash},
              {"grid", {{"origin_nm", vec3_json(grid.origin_nm)},
                        {"spacing_nm", grid.spacing_nm},
                        {"dims", json::array({grid.dims[0], grid.dims[1], grid.dims[2]})}}},
              {"regions", arr}};
}

}  // namespace qpskit::io
