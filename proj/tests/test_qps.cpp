// Point-charge localization: forward model, analytic gradients, the
// multistart weighted fit, uncertainty reporting, and the accuracy map.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <random>

#include "qpskit/qps.hpp"
#include "qpskit/scenario.hpp"
#include "test_support.hpp"

using namespace qpskit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

qps::FitTarget noiseless_target(const Vec3& position, double charge,
                                const std::vector<NVSensor>& sensors, double sigma) {
  qps::FitTarget target;
  target.values = qps::forward_observables(position, charge, sensors);
  target.sigmas = Eigen::VectorXd::Constant(target.values.size(), sigma);
  target.valid.assign(static_cast<size_t>(target.values.size()), 1);
  return target;
}

}  // namespace

TEST_CASE("forward model matches a from-scratch computation", "[qps]") {
  // Identity frame so the projections are bare components.
  const Vec3 sensor_pos(10.0, -20.0, 30.0);
  const NVSensor sensor(0, sensor_pos,
                        SensorFrame(Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)),
                        Vec2(500.0, 120.0), 1.42, 1.83);
  const Vec3 charge_pos(45.0, -60.0, 80.0);
  const double q = -1.0;

  const Vec3 s = sensor_pos - charge_pos;
  const double d = std::sqrt(s.x() * s.x() + s.y() * s.y() + s.z() * s.z());
  const double scale = kCoulombPrefactorVcmNm2 * q / (kDefaultEpsilonR * d * d * d);
  const double ex = scale * s.x(), ey = scale * s.y(), ez = scale * s.z();
  const double f_par = 1.42 * ez;
  const double ux = 500.0 + ex, uy = 120.0 + ey;
  const double f_perp =
      1.83 * (std::sqrt(ux * ux + uy * uy) - std::sqrt(500.0 * 500.0 + 120.0 * 120.0));

  const auto out = qps::forward_observables(charge_pos, q, {sensor});
  REQUIRE(out.size() == 2);
  CHECK_THAT(out[0], WithinRel(f_par, 1e-12));
  CHECK_THAT(out[1], WithinRel(f_perp, 1e-12));
}

TEST_CASE("analytic jacobian agrees with central differences", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  auto rng = test::test_rng(2024);
  std::uniform_real_distribution<double> radius(30.0, 400.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 p = radius(rng) * test::random_unit_vector(rng);
    const double charge = (trial % 2 == 0) ? -1.0 : 1.0;
    const auto analytic = qps::forward_jacobian(p, charge, sensors);
    const auto numeric = qps::forward_jacobian_fd(p, charge, sensors);
    const double scale =
        std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
    REQUIRE(scale > 0.0);
    for (int r = 0; r < analytic.rows(); ++r)
      for (int c = 0; c < 3; ++c) {
        const double a = analytic(r, c), n = numeric(r, c);
        CHECK(std::abs(a - n) <=
              1e-6 * std::max(std::abs(a), std::abs(n)) + 1e-9 * scale);
      }
  }
}

TEST_CASE("noiseless localization recovers position and polarity", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  const Vec3 truth(70.0, -40.0, 55.0);

  for (const double charge : {-1.0, 1.0}) {
    const auto target = noiseless_target(truth, charge, sensors, 0.3);
    const auto fit = qps::localize(target, sensors);
    CHECK(fit.converged);
    CHECK(fit.polarity == (charge < 0 ? -1 : +1));
    CHECK(!fit.polarity_ambiguous);
    CHECK((fit.position - truth).norm() < 1e-6);
    CHECK(fit.objective < 1e-12);
    CHECK(fit.dof == 3);
    CHECK(fit.p_value > 0.999);
    CHECK(!fit.covariance_unreliable);
    CHECK(std::isfinite(fit.fwhm));
    CHECK(fit.fwhm > 0.0);
    CHECK(fit.sigma_principal[0] <= fit.sigma_principal[1]);
    CHECK(fit.sigma_principal[1] <= fit.sigma_principal[2]);
  }
}

TEST_CASE("the coarse scan reaches minima far outside the start shells", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  const Vec3 truth(350.0, 200.0, -250.0);  // ~475 nm out; shells end at 400
  const auto target = noiseless_target(truth, -1.0, sensors, 0.5);
  const auto fit = qps::localize(target, sensors);
  CHECK(fit.converged);
  CHECK((fit.position - truth).norm() < 1e-5);
  CHECK(fit.starts_tried >= 28 * 2);
}

TEST_CASE("polarity tie handling is explicit and deterministic", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  const auto target = noiseless_target(Vec3(60.0, 30.0, -45.0), -1.0, sensors, 0.5);
  qps::SolverConfig config;
  config.polarity_tie_rel = 1e99;  // force every comparison into the tie branch
  const auto fit = qps::localize(target, sensors, config);
  CHECK(fit.polarity_ambiguous);
  CHECK(fit.polarity == -1);
}

TEST_CASE("localization input validation", "[qps]") {
  const auto sensors = sim::default_sensor_array();

  SECTION("fewer than four valid components") {
    auto target = noiseless_target(Vec3(50, 50, 50), -1.0, sensors, 1.0);
    target.valid = {1, 1, 0, 0, 0, 0};
    CHECK_THROWS_AS(qps::localize(target, sensors), ConfigInvalid);
    const std::vector<NVSensor> one{sensors[0]};
    qps::FitTarget small;
    small.values = Eigen::VectorXd::Zero(2);
    small.sigmas = Eigen::VectorXd::Constant(2, 1.0);
    small.valid = {1, 1};
    CHECK_THROWS_AS(qps::localize(small, one), ConfigInvalid);
  }
  SECTION("size mismatch") {
    auto target = noiseless_target(Vec3(50, 50, 50), -1.0, sensors, 1.0);
    target.valid.pop_back();
    CHECK_THROWS_AS(qps::localize(target, sensors), ConfigInvalid);
  }
  SECTION("valid components need positive sigma") {
    auto target = noiseless_target(Vec3(50, 50, 50), -1.0, sensors, 1.0);
    target.sigmas[2] = 0.0;
    CHECK_THROWS_AS(qps::localize(target, sensors), ConfigInvalid);
  }
}

TEST_CASE("reported uncertainty scales linearly with the data sigma", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  const Vec3 truth(80.0, 10.0, 60.0);
  const auto narrow = qps::localize(noiseless_target(truth, -1.0, sensors, 0.5), sensors);
  const auto wide = qps::localize(noiseless_target(truth, -1.0, sensors, 1.0), sensors);
  CHECK_THAT(wide.fwhm / narrow.fwhm, WithinRel(2.0, 1e-6));
  for (int i = 0; i < 3; ++i)
    CHECK_THAT(wide.sigma_principal[static_cast<size_t>(i)] /
                   narrow.sigma_principal[static_cast<size_t>(i)],
               WithinRel(2.0, 1e-6));
}

TEST_CASE("fit targets from clusters carry repeat-count uncertainties", "[qps]") {
  events::DefectCluster cluster;
  cluster.mean_vector = Eigen::VectorXd::Zero(6);
  cluster.mean_vector << 5.0, -2.0, 0.0, 0.0, 1.0, 0.5;
  cluster.component_count = {5, 5, 0, 0, 3, 3};
  sim::NoiseModel noise;
  noise.sigma_f_mhz = 2.0;
  const double unit = std::sqrt(2.0) * 2.0;

  SECTION("with no recorded scatter, the scale is set by measurement noise") {
    const auto target = qps::make_fit_target(cluster, noise, 0.0);
    CHECK(target.valid == std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1});
    CHECK(target.values == cluster.mean_vector);
    CHECK_THAT(target.sigmas[0], WithinRel(unit / std::sqrt(5.0), 1e-12));
    CHECK_THAT(target.sigmas[4], WithinRel(unit / std::sqrt(3.0), 1e-12));
    CHECK(target.sigmas[2] == 0.0);
  }
  SECTION("the default systematic floor adds in quadrature and does not average down") {
    const auto target = qps::make_fit_target(cluster, noise);
    const double floor = 0.5 * unit;
    CHECK_THAT(target.sigmas[0],
               WithinRel(std::sqrt(unit * unit / 5.0 + floor * floor), 1e-12));
    CHECK_THAT(target.sigmas[4],
               WithinRel(std::sqrt(unit * unit / 3.0 + floor * floor), 1e-12));
    CHECK(target.sigmas[2] == 0.0);
  }
  SECTION("observed scatter beyond the noise scale widens the sigma") {
    cluster.vector_std = Eigen::VectorXd::Zero(6);
    cluster.vector_std << 7.0, 1.0, 0.0, 0.0, 1.0, 1.0;
    const auto target = qps::make_fit_target(cluster, noise, 1.0);
    CHECK_THAT(target.sigmas[0], WithinRel(std::sqrt(49.0 / 5.0 + 1.0), 1e-12));
    CHECK_THAT(target.sigmas[1], WithinRel(std::sqrt(unit * unit / 5.0 + 1.0), 1e-12));
  }
}

TEST_CASE("expected accuracy at a point", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  const Vec3 p(90.0, -30.0, 70.0);

  SECTION("one sensor cannot constrain three coordinates") {
    const std::vector<NVSensor> one{sensors[0]};
    CHECK(std::isinf(qps::localization_fwhm_at(p, one, 1.0)));
  }
  SECTION("three sensors give a finite, sigma-linear accuracy") {
    const double f1 = qps::localization_fwhm_at(p, sensors, 1.0);
    const double f2 = qps::localization_fwhm_at(p, sensors, 2.0);
    REQUIRE(std::isfinite(f1));
    CHECK(f1 > 0.0);
    CHECK_THAT(f2 / f1, WithinRel(2.0, 1e-12));
  }
  SECTION("sigma must be positive") {
    CHECK_THROWS_AS(qps::localization_fwhm_at(p, sensors, 0.0), ConfigInvalid);
  }
}

TEST_CASE("accuracy maps mark exclusion zones and honor the thread budget", "[qps]") {
  const auto sensors = sim::default_sensor_array();
  qps::GridSpec grid;
  grid.origin_nm = sensors[0].position() - Vec3(2.0, 2.0, 2.0);
  grid.spacing_nm = 1.0;
  grid.dims = {5, 5, 5};

  const auto map = qps::accuracy_map(sensors, 1.0, grid);
  REQUIRE(map.fwhm_nm.size() == 125);

  // Voxel (2,2,2) sits exactly on the sensor: inside the exclusion zone.
  CHECK(std::isnan(map.at(2, 2, 2)));
  CHECK((grid.center(2, 2, 2) - sensors[0].position()).norm() < 1e-12);
  // A corner voxel is outside and evaluates to a finite accuracy.
  CHECK(std::isfinite(map.at(0, 0, 0)));
  CHECK(map.at(0, 0, 0) > 0.0);

  // Index layout: x fastest.
  CHECK(map.fwhm_nm[1] == map.at(1, 0, 0));
  CHECK(map.fwhm_nm[5] == map.at(0, 1, 0));
  CHECK(map.fwhm_nm[25] == map.at(0, 0, 1));

  SECTION("voxel values are independent of the thread count") {
    REQUIRE(setenv("QPSKIT_THREADS", "1", 1) == 0);
    const auto serial = qps::accuracy_map(sensors, 1.0, grid);
    REQUIRE(setenv("QPSKIT_THREADS", "7", 1) == 0);
    const auto parallel = qps::accuracy_map(sensors, 1.0, grid);
    unsetenv("QPSKIT_THREADS");
    REQUIRE(serial.fwhm_nm.size() == parallel.fwhm_nm.size());
    for (size_t i = 0; i < serial.fwhm_nm.size(); ++i) {
      if (std::isnan(serial.fwhm_nm[i]))
        CHECK(std::isnan(parallel.fwhm_nm[i]));
      else
        CHECK(serial.fwhm_nm[i] == parallel.fwhm_nm[i]);
    }
  }
}

TEST_CASE("isoregion volumes count only finite qualifying voxels", "[qps]") {
  qps::AccuracyMap map;
  map.grid.spacing_nm = 2.0;
  map.grid.dims = {4, 1, 1};
  map.fwhm_nm = {std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::infinity(), 1.0, 3.0};
  const auto region = qps::isoregion_volume(map, 3.0);
  CHECK(region.voxels == 2);
  CHECK_THAT(region.volume_nm3, WithinRel(16.0, 1e-12));
  CHECK(qps::isoregion_volume(map, 0.5).voxels == 0);

  // Nested thresholds on a real map.
  const auto sensors = sim::default_sensor_array();
  qps::GridSpec grid;
  grid.origin_nm = Vec3(-180.0, -180.0, -60.0);
  grid.spacing_nm = 12.0;
  grid.dims = {31, 31, 11};
  const auto real_map = qps::accuracy_map(sensors, 1.0, grid);
  const auto tight = qps::isoregion_volume(real_map, 1.0);
  const auto mid = qps::isoregion_volume(real_map, 5.0);
  const auto loose = qps::isoregion_volume(real_map, 25.0);
  CHECK(tight.voxels > 0);
  CHECK(tight.voxels < mid.voxels);
  CHECK(mid.voxels < loose.voxels);
}
