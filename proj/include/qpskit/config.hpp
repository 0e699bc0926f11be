#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qpskit/core_model.hpp"
#include "qpskit/errors.hpp"
#include "qpskit/events.hpp"
#include "qpskit/qps.hpp"
#include "qpskit/scenario.hpp"
#include "qpskit/telegraph.hpp"

namespace qpskit::io {

using nlohmann::json;

namespace detail {

inline const json& member(const json& obj, const char* key, const std::string& ctx) {
  if (!obj.is_object())
    throw ConfigInvalid(ctx + ": expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw ConfigInvalid(ctx + "." + key + ": missing");
  return *it;
}

inline double number_or(const json& obj, const char* key, double fallback,
                        const std::string& ctx) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigInvalid(ctx + "." + key + ": expected a number");
  return v.get<double>();
}

inline int int_or(const json& obj, const char* key, int fallback, const std::string& ctx) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigInvalid(ctx + "." + key + ": expected an integer");
  return v.get<int>();
}

inline bool bool_or(const json& obj, const char* key, bool fallback, const std::string& ctx) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) throw ConfigInvalid(ctx + "." + key + ": expected a boolean");
  return v.get<bool>();
}

inline Vec3 vec3_of(const json& v, const std::string& ctx) {
  if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() ||
      !v[2].is_number())
    throw ConfigInvalid(ctx + ": expected an array of 3 numbers");
  return Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
}

}  // namespace detail

// Everything a pipeline run needs, resolved from one JSON document. The same
// config file drives all subcommands; each consumes the sections it needs.
struct PipelineConfig {
  std::uint64_t seed = 0;
  int epochs = 1000;
  PhysicsConstants constants;
  std::vector<NVSensor> sensors;

  bool defects_from_scenario = true;
  sim::ScenarioSpec scenario;
  std::vector<sim::PointDefect> defect_list;

  sim::NoiseModel noise;
  sim::BackgroundModel background;
  events::DetectorConfig detector;
  // How the fold pivot order is chosen at detection time: "auto" ranks
  // sensors by response power over the detected events, "per_event" lets each
  // event use its own largest-|f_par| sensor, "fixed" uses the configured order.
  std::string fold_mode = "auto";
  qps::SolverConfig solver;

  qps::GridSpec grid;
  bool grid_given = false;
  double map_sigma_mhz = 1.0;
  std::vector<double> map_thresholds_nm{10.0, 1.0, 0.154};

  // Materializes the defect list (running the scenario generator when the
  // config asked for one) and bundles the generative model.
  sim::SimConfig make_sim_config() const {
    sim::SimConfig cfg;
    cfg.sensors = sensors;
    cfg.defects = defects_from_scenario ? sim::generate_defects(scenario, sensors, seed)
                                        : defect_list;
    cfg.epochs = epochs;
    cfg.noise = noise;
    cfg.noise.rng_seed = seed;
    cfg.background = background;
    cfg.constants = constants;
    return cfg;
  }
};

inline std::vector<NVSensor> parse_sensors(const json& j, const PhysicsConstants&,
                                           const std::string& ctx = "sensors") {
  std::vector<NVSensor> sensors;
  if (j.contains("array")) {
    const auto& a = j.at("array");
    sensors = sim::default_sensor_array(
        detail::int_or(a, "count", 3, ctx + ".array"),
        detail::number_or(a, "spacing_nm", 200.0, ctx + ".array"),
        detail::number_or(a, "strain_mhz", 1000.0, ctx + ".array"),
        detail::number_or(a, "d_par_mhz_per_vcm", kDefaultDParMHzPerVcm, ctx + ".array"),
        detail::number_or(a, "d_perp_mhz_per_vcm", kDefaultDPerpMHzPerVcm, ctx + ".array"));
  } else if (j.contains("list")) {
    const auto& list = j.at("list");
    if (!list.is_array() || list.empty())
      throw ConfigInvalid(ctx + ".list: expected a non-empty array");
    for (size_t i = 0; i < list.size(); ++i) {
      const auto& s = list[i];
      const std::string sctx = ctx + ".list[" + std::to_string(i) + "]";
      const int id = detail::int_or(s, "id", static_cast<int>(i), sctx);
      const Vec3 pos = detail::vec3_of(detail::member(s, "position_nm", sctx), sctx + ".position_nm");
      SensorFrame frame = [&]() {
        if (s.contains("frame")) {
          const auto& f = s.at("frame");
          return SensorFrame(detail::vec3_of(detail::member(f, "x", sctx + ".frame"), sctx + ".frame.x"),
                             detail::vec3_of(detail::member(f, "y", sctx + ".frame"), sctx + ".frame.y"),
                             detail::vec3_of(detail::member(f, "z", sctx + ".frame"), sctx + ".frame.z"));
        }
        return SensorFrame::from_z_axis(
            detail::vec3_of(detail::member(s, "z_axis", sctx), sctx + ".z_axis"));
      }();
      const double d_par = detail::number_or(s, "d_par_mhz_per_vcm", kDefaultDParMHzPerVcm, sctx);
      const double d_perp = detail::number_or(s, "d_perp_mhz_per_vcm", kDefaultDPerpMHzPerVcm, sctx);
      Vec2 strain;
      if (s.contains("strain_vcm")) {
        const auto& sv = s.at("strain_vcm");
        if (!sv.is_array() || sv.size() != 2 || !sv[0].is_number() || !sv[1].is_number())
          throw ConfigInvalid(sctx + ".strain_vcm: expected an array of 2 numbers");
        strain = Vec2(sv[0].get<double>(), sv[1].get<double>());
      } else {
        const double mhz = detail::number_or(s, "strain_mhz", 1000.0, sctx);
        strain = Vec2(mhz / d_perp, 0.0);
      }
      sensors.emplace_back(id, pos, frame, strain, d_par, d_perp);
    }
  } else {
    throw ConfigInvalid(ctx + ": expected either \"array\" or \"list\"");
  }
  return sensors;
}

inline std::vector<sim::PointDefect> parse_defect_list(const json& list,
                                                       const std::string& ctx) {
  if (!list.is_array()) throw ConfigInvalid(ctx + ": expected an array");
  std::vector<sim::PointDefect> defects;
  for (size_t i = 0; i < list.size(); ++i) {
    const auto& d = list[i];
    const std::string dctx = ctx + "[" + std::to_string(i) + "]";
    sim::PointDefect defect;
    defect.id = detail::int_or(d, "id", static_cast<int>(i), dctx);
    defect.position_nm = detail::vec3_of(detail::member(d, "position_nm", dctx), dctx + ".position_nm");
    defect.charge_e = detail::number_or(d, "charge_e", -1.0, dctx);
    defect.flip_prob = detail::number_or(d, "flip_prob", 0.0, dctx);
    defect.initially_occupied = detail::bool_or(d, "initially_occupied", false, dctx);
    defects.push_back(defect);
  }
  return defects;
}

inline PipelineConfig parse_pipeline_config(const json& j) {
  if (!j.is_object()) throw ConfigInvalid("config: expected a JSON object");
  PipelineConfig cfg;
  try {
    if (j.contains("seed")) {
      const auto& s = j.at("seed");
      if (!s.is_number_integer() && !s.is_number_unsigned())
        throw ConfigInvalid("config.seed: expected an integer");
      cfg.seed = s.get<std::uint64_t>();
    }
    cfg.epochs = detail::int_or(j, "epochs", 1000, "config");

    if (j.contains("constants")) {
      const auto& c = j.at("constants");
      cfg.constants = PhysicsConstants(
          detail::number_or(c, "epsilon_r", kDefaultEpsilonR, "config.constants"),
          detail::number_or(c, "coulomb_prefactor", kCoulombPrefactorVcmNm2,
                            "config.constants"));
    }

    cfg.sensors = parse_sensors(detail::member(j, "sensors", "config"), cfg.constants,
                                "config.sensors");

    if (j.contains("defects")) {
      const auto& d = j.at("defects");
      if (d.contains("list")) {
        cfg.defects_from_scenario = false;
        cfg.defect_list = parse_defect_list(d.at("list"), "config.defects.list");
      } else if (d.contains("scenario")) {
        const auto& s = d.at("scenario");
        const std::string sctx = "config.defects.scenario";
        cfg.scenario.defect_count = detail::int_or(s, "count", 16, sctx);
        cfg.scenario.ball_radius_nm = detail::number_or(s, "radius_nm", 1000.0, sctx);
        cfg.scenario.sensor_exclusion_nm = detail::number_or(s, "exclusion_nm", 20.0, sctx);
        if (s.contains("flip_prob_range")) {
          const auto& r = s.at("flip_prob_range");
          if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number())
            throw ConfigInvalid(sctx + ".flip_prob_range: expected an array of 2 numbers");
          cfg.scenario.flip_prob_min = r[0].get<double>();
          cfg.scenario.flip_prob_max = r[1].get<double>();
        }
        cfg.scenario.charge_e = detail::number_or(s, "charge_e", -1.0, sctx);
        cfg.scenario.validate();
      } else {
        throw ConfigInvalid("config.defects: expected either \"scenario\" or \"list\"");
      }
    }

    if (j.contains("noise")) {
      const auto& noise = j.at("noise");
      cfg.noise.sigma_f_mhz = detail::number_or(noise, "sigma_f_mhz", 1.0, "config.noise");
      cfg.noise.missing_prob = detail::number_or(noise, "missing_prob", 0.0, "config.noise");
    }
    cfg.noise.validate();

    if (j.contains("background")) {
      const auto& b = j.at("background");
      cfg.background.enabled = detail::bool_or(b, "enabled", false, "config.background");
      cfg.background.sigma_vcm = detail::number_or(b, "sigma_vcm", 0.0, "config.background");
      cfg.background.correlation = detail::number_or(b, "correlation", 0.98, "config.background");
      cfg.background.validate();
    }

    if (j.contains("detector")) {
      const auto& d = j.at("detector");
      cfg.detector.jump_threshold_sigma =
          detail::number_or(d, "jump_threshold_sigma", 4.0, "config.detector");
      cfg.detector.cluster_radius_sigma =
          detail::number_or(d, "cluster_radius_sigma", 3.0, "config.detector");
      cfg.detector.min_repeats = detail::int_or(d, "min_repeats", 3, "config.detector");
      cfg.detector.min_valid_components =
          detail::int_or(d, "min_valid_components", 4, "config.detector");
      cfg.detector.min_alternation =
          detail::number_or(d, "min_alternation", 0.8, "config.detector");
      cfg.detector.min_alternation_pairs =
          detail::int_or(d, "min_alternation_pairs", 4, "config.detector");
      if (d.contains("fold_pivot")) {
        const auto& p = d.at("fold_pivot");
        if (p.is_string()) {
          const auto mode = p.get<std::string>();
          if (mode != "auto" && mode != "per_event")
            throw ConfigInvalid("config.detector.fold_pivot: expected \"auto\", "
                                "\"per_event\", or an array of sensor ids");
          cfg.fold_mode = mode;
        } else if (p.is_array()) {
          cfg.fold_mode = "fixed";
          for (const auto& v : p) {
            if (!v.is_number_integer())
              throw ConfigInvalid("config.detector.fold_pivot: expected sensor ids");
            cfg.detector.fold_pivot.sensor_order.push_back(v.get<int>());
          }
        } else {
          throw ConfigInvalid("config.detector.fold_pivot: expected a string or an array");
        }
      }
    }
    cfg.detector.validate();

    if (j.contains("solver")) {
      const auto& s = j.at("solver");
      cfg.solver.significance = detail::number_or(s, "significance", 0.05, "config.solver");
      cfg.solver.levmar.max_iterations =
          detail::int_or(s, "max_iterations", 200, "config.solver");
      cfg.solver.shell_near = detail::number_or(s, "shell_near", 0.5, "config.solver");
      cfg.solver.shell_far = detail::number_or(s, "shell_far", 2.0, "config.solver");
      cfg.solver.grid_halfwidth_factor =
          detail::number_or(s, "grid_halfwidth_factor", 6.0, "config.solver");
      cfg.solver.grid_points_per_axis =
          detail::int_or(s, "grid_points_per_axis", 11, "config.solver");
      cfg.solver.charge_magnitude_e =
          detail::number_or(s, "charge_magnitude_e", 1.0, "config.solver");
      cfg.solver.condition_limit =
          detail::number_or(s, "condition_limit", 1e12, "config.solver");
      cfg.solver.aspect_limit = detail::number_or(s, "aspect_limit", 2.5, "config.solver");
    }
    cfg.solver.validate();

    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      cfg.grid_given = true;
      cfg.grid.origin_nm = detail::vec3_of(detail::member(g, "origin_nm", "config.grid"),
                                           "config.grid.origin_nm");
      cfg.grid.spacing_nm = detail::number_or(g, "spacing_nm", 1.0, "config.grid");
      const auto& dims = detail::member(g, "dims", "config.grid");
      if (!dims.is_array() || dims.size() != 3)
        throw ConfigInvalid("config.grid.dims: expected an array of 3 integers");
      for (int a = 0; a < 3; ++a) {
        if (!dims[static_cast<size_t>(a)].is_number_integer())
          throw ConfigInvalid("config.grid.dims: expected integers");
        cfg.grid.dims[static_cast<size_t>(a)] = dims[static_cast<size_t>(a)].get<int>();
      }
      cfg.grid.validate();
    } else {
      // Default: a cube spanning 3x the array scale at 64 voxels per axis.
      const double spacing = qps::detail::mean_spacing(cfg.sensors);
      const Vec3 centroid = qps::detail::sensor_centroid(cfg.sensors);
      const double half = 1.5 * spacing;
      cfg.grid.dims = {64, 64, 64};
      cfg.grid.spacing_nm = 2.0 * half / 63.0;
      cfg.grid.origin_nm = centroid - Vec3(half, half, half);
    }
    cfg.map_sigma_mhz = detail::number_or(j, "map_sigma_mhz", cfg.noise.sigma_f_mhz, "config");
    if (!(cfg.map_sigma_mhz > 0.0))
      throw ConfigInvalid("config.map_sigma_mhz: must be > 0");
    if (j.contains("map_thresholds_nm")) {
      const auto& t = j.at("map_thresholds_nm");
      if (!t.is_array() || t.empty())
        throw ConfigInvalid("config.map_thresholds_nm: expected a non-empty array");
      cfg.map_thresholds_nm.clear();
      for (const auto& v : t) {
        if (!v.is_number() || !(v.get<double>() > 0.0))
          throw ConfigInvalid("config.map_thresholds_nm: thresholds must be positive numbers");
        cfg.map_thresholds_nm.push_back(v.get<double>());
      }
    }
    if (cfg.epochs < 0) throw ConfigInvalid("config.epochs: must be >= 0");
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("config: malformed JSON structure (") + e.what() + ")");
  }
  return cfg;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigInvalid(path + ": invalid JSON (" + std::string(e.what()) + ")");
  }
  return j;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  return parse_pipeline_config(read_json_file(path));
}

}  // namespace qpskit::io
