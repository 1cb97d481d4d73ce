#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "liom/simulator.hpp"

using namespace liom;
using namespace liom::sim;

namespace {
const Vec3 kGravity(0.0, 0.0, -9.80665);
}

TEST_CASE("static trajectory reads gravity only") {
    SineTrajectory traj;
    traj.center = Vec3(5, 4, 1.5);
    traj.duration = 10.0;
    const auto s = traj.at(3.0, kGravity);
    CHECK((s.acc_body - Vec3(0, 0, 9.80665)).norm() < 1e-12);
    CHECK(s.gyr_body.norm() < 1e-12);
    CHECK((s.pos - traj.center).norm() < 1e-12);
}

TEST_CASE("pure yaw sine keeps position constant") {
    SineTrajectory traj;
    traj.center = Vec3(5, 4, 1.5);
    traj.amp_rot = Vec3(0, 0, 0.5);
    traj.freq_rot = Vec3(0, 0, 1.0);
    traj.duration = 2.0;
    for (double t = 0.0; t < 2.0; t += 0.21) {
        const auto s = traj.at(t, kGravity);
        CHECK((s.pos - traj.center).norm() < 1e-12);
        const double expect = 0.5 * 2.0 * M_PI * std::cos(2.0 * M_PI * t);
        CHECK(s.gyr_body.z() == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("analytic derivatives match numeric differentiation") {
    SineTrajectory traj = make_profile(Profile::Moderate, 3, 6.0);
    const double h = 1e-6;
    for (double t = 0.5; t < 5.5; t += 0.61) {
        const auto sm = traj.at(t - h, kGravity);
        const auto sp = traj.at(t + h, kGravity);
        const auto s = traj.at(t, kGravity);

        const Vec3 v_num = (sp.pos - sm.pos) / (2.0 * h);
        CHECK((v_num - s.vel).norm() < 1e-6);

        const Vec3 w_num = (sm.rot.transpose() * sp.rot).log() / (2.0 * h);
        CHECK((w_num - s.gyr_body).norm() < 1e-6);
    }
}

TEST_CASE("profiles hit their angular speed targets") {
    const auto slow = make_profile(Profile::Slow, 42);
    const auto st_slow = measure_trajectory(slow, kGravity);
    CHECK(st_slow.mean_ang_speed * 180.0 / M_PI > 13.2);
    CHECK(st_slow.mean_ang_speed * 180.0 / M_PI < 16.2);

    const auto fast = make_profile(Profile::Fast, 7);
    const auto st_fast = measure_trajectory(fast, kGravity);
    CHECK(st_fast.mean_ang_speed * 180.0 / M_PI > 112.0);
    CHECK(st_fast.mean_ang_speed * 180.0 / M_PI < 138.0);

    // Linear speed close to the common target.
    CHECK(st_slow.mean_speed > 0.9 * 4.85);
    CHECK(st_slow.mean_speed < 1.1 * 4.85);
}

TEST_CASE("identical seeds give identical profiles") {
    const auto a = make_profile(Profile::Fast, 123);
    const auto b = make_profile(Profile::Fast, 123);
    CHECK((a.amp_pos - b.amp_pos).norm() == 0.0);
    CHECK((a.freq_rot - b.freq_rot).norm() == 0.0);
    CHECK((a.phase_pos - b.phase_pos).norm() == 0.0);
}

TEST_CASE("trajectories stay inside the room") {
    const PlaneWorld world = PlaneWorld::default_room();
    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
        const auto traj = make_profile(Profile::Fast, seed);
        for (double t = 0.0; t <= traj.duration; t += 0.01) {
            const auto s = traj.at(t, kGravity);
            for (int a = 0; a < 3; ++a) {
                CHECK(s.pos[a] > world.box_lo[a] + 0.2);
                CHECK(s.pos[a] < world.box_hi[a] - 0.2);
            }
            // On the room side of the oblique plane.
            CHECK(world.point_to_plane(s.pos, 6) < -0.2);
        }
    }
}

TEST_CASE("raycast hits the expected wall") {
    const PlaneWorld world = PlaneWorld::default_room();
    int id = -1;
    const auto r = world.raycast(Vec3(5, 4, 1.5), Vec3(0, 0, 1), &id);
    REQUIRE(r.has_value());
    CHECK(*r == doctest::Approx(1.5));
    CHECK(id == 5);  // ceiling

    const auto r2 = world.raycast(Vec3(5, 4, 1.5), Vec3(-1, 0, 0), &id);
    REQUIRE(r2.has_value());
    CHECK(*r2 == doctest::Approx(5.0));
    CHECK(id == 0);
}

TEST_CASE("noiseless static render satisfies the plane equations") {
    const PlaneWorld world = PlaneWorld::default_room();
    SineTrajectory traj;
    traj.center = Vec3(5, 4, 1.5);
    traj.duration = 1.0;
    SensorSpec spec;
    spec.noiseless = true;
    const auto r = render_lidar(world, traj, spec, 0.0, 0.2, 1);
    REQUIRE(r.points.size() > 1000);
    for (size_t i = 0; i < r.points.size(); i += 97) {
        const Vec3 x_w = r.true_imu_poses[i].transform(spec.true_calib.transform(r.points[i].xyz));
        CHECK(std::abs(world.point_to_plane(x_w, r.plane_ids[i])) < 1e-9);
    }
}

TEST_CASE("moving noiseless render satisfies the plane equations") {
    const PlaneWorld world = PlaneWorld::default_room();
    const auto traj = make_profile(Profile::Moderate, 5, 2.0);
    SensorSpec spec;
    spec.noiseless = true;
    spec.true_calib = Pose3(Rot3::exp(Vec3(0.05, -0.02, 0.1)), Vec3(0.1, 0.05, -0.03));
    const auto r = render_lidar(world, traj, spec, 0.0, 0.3, 1);
    REQUIRE(r.points.size() > 1000);
    for (size_t i = 0; i < r.points.size(); i += 53) {
        const Vec3 x_w = r.true_imu_poses[i].transform(spec.true_calib.transform(r.points[i].xyz));
        CHECK(std::abs(world.point_to_plane(x_w, r.plane_ids[i])) < 1e-6);
    }
}

TEST_CASE("point rate matches the sensor spec") {
    const PlaneWorld world = PlaneWorld::default_room();
    SineTrajectory traj;
    traj.center = Vec3(5, 4, 1.5);
    traj.duration = 1.5;
    SensorSpec spec;
    spec.noiseless = true;
    const auto r = render_lidar(world, traj, spec, 0.0, 1.0, 1);
    const double rate = static_cast<double>(r.points.size()) / 1.0;
    CHECK(rate > 0.95 * spec.points_per_second);
    CHECK(rate < 1.05 * spec.points_per_second);
}

TEST_CASE("static level IMU mean near gravity plus bias") {
    SineTrajectory traj;
    traj.center = Vec3(5, 4, 1.5);
    traj.duration = 10.0;
    SensorSpec spec;
    spec.true_bias_acc = Vec3(0.05, -0.02, 0.01);
    const auto samples = render_imu(traj, spec, 0.0, 10.0, 7);
    Vec3 mean = Vec3::Zero();
    for (const auto& s : samples) mean += s.acc;
    mean /= static_cast<double>(samples.size());
    const Vec3 expect = Vec3(0, 0, 9.80665) + spec.true_bias_acc;
    const double tol = 3.0 * spec.sigma_acc / std::sqrt(static_cast<double>(samples.size()));
    CHECK((mean - expect).norm() < 3.0 * tol);
}

TEST_CASE("imu multiplier scales the readings exactly") {
    SineTrajectory traj = make_profile(Profile::Slow, 9, 2.0);
    SensorSpec spec;
    spec.noiseless = true;
    const auto base = render_imu(traj, spec, 0.0, 1.0, 3);
    spec.imu_multiplier = 1.05;
    const auto scaled = render_imu(traj, spec, 0.0, 1.0, 3);
    REQUIRE(base.size() == scaled.size());
    for (size_t i = 0; i < base.size(); ++i) {
        CHECK((scaled[i].acc - 1.05 * base[i].acc).norm() < 1e-12);
        CHECK((scaled[i].gyr - 1.05 * base[i].gyr).norm() < 1e-12);
    }
}

TEST_CASE("noiseless imu equals the analytic trajectory") {
    SineTrajectory traj = make_profile(Profile::Moderate, 11, 2.0);
    SensorSpec spec;
    spec.noiseless = true;
    const auto samples = render_imu(traj, spec, 0.0, 1.0, 3);
    for (const auto& s : samples) {
        const auto ref = traj.at(s.t, spec.gravity);
        CHECK((s.acc - ref.acc_body).norm() < 1e-12);
        CHECK((s.gyr - ref.gyr_body).norm() < 1e-12);
    }
}

TEST_CASE("renders are deterministic in the seed") {
    const PlaneWorld world = PlaneWorld::default_room();
    const auto traj = make_profile(Profile::Slow, 21, 1.0);
    SensorSpec spec;
    const auto a = render_lidar(world, traj, spec, 0.0, 0.2, 55);
    const auto b = render_lidar(world, traj, spec, 0.0, 0.2, 55);
    REQUIRE(a.points.size() == b.points.size());
    for (size_t i = 0; i < a.points.size(); i += 131) {
        CHECK((a.points[i].xyz - b.points[i].xyz).norm() == 0.0);
    }
}
