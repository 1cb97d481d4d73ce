#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "liom/frontend_types.hpp"
#include "liom/geometry.hpp"
#include "liom/imu_gp.hpp"

namespace liom::sim {

// Convex-ish room: an axis-aligned box with one oblique plane cutting a
// corner, giving three independent normals from any interior viewpoint.
struct PlaneWorld {
    struct Plane {
        Vec3 normal;   // unit
        double offset; // n . x = offset
    };
    std::vector<Plane> planes;
    Vec3 box_lo{Vec3::Zero()};
    Vec3 box_hi{Vec3::Zero()};

    static PlaneWorld default_room();

    // Nearest forward intersection; returns range and plane index,
    // or nullopt when the ray escapes (should not happen indoors).
    std::optional<double> raycast(const Vec3& origin, const Vec3& dir,
                                  int* plane_id = nullptr) const;

    double point_to_plane(const Vec3& p, int plane_id) const {
        const Plane& pl = planes[plane_id];
        return pl.normal.dot(p) - pl.offset;
    }
};

// Analytic trajectory: one sine per translation axis plus one sine per
// rotation-vector axis, R(t) = Exp(theta(t)).
struct SineTrajectory {
    Vec3 center{Vec3::Zero()};
    Vec3 amp_pos{Vec3::Zero()};
    Vec3 freq_pos{Vec3::Zero()};   // Hz
    Vec3 phase_pos{Vec3::Zero()};
    Vec3 amp_rot{Vec3::Zero()};    // rad
    Vec3 freq_rot{Vec3::Zero()};
    Vec3 phase_rot{Vec3::Zero()};
    double duration = 10.0;
    uint64_t seed = 0;

    struct Sample {
        Rot3 rot;     // R_W at t
        Vec3 pos;
        Vec3 vel;
        Vec3 acc_body;  // specific force f = R^T (a_W - g)
        Vec3 gyr_body;  // angular rate in body frame
    };
    // Analytic pose, velocity and body-frame inertial readings.
    // Throws DataError for t outside [0, duration].
    Sample at(double t, const Vec3& gravity) const;
};

struct SensorSpec {
    // Lidar
    int channels = 16;
    double elevation_min_deg = -15.0;
    double elevation_max_deg = 15.0;
    double spin_hz = 10.0;
    double points_per_second = 3.0e5;
    double sigma_range = 0.01;  // +-3cm as a 3-sigma bound

    // IMU
    double imu_rate = 100.0;
    double sigma_acc = 0.02;          // m/s^2
    double sigma_gyr = 0.0016930;     // 0.097 deg/s in rad/s
    Vec3 true_bias_acc{Vec3::Zero()};
    Vec3 true_bias_gyr{Vec3::Zero()};
    double true_time_shift = 0.0;   // IMU stamps = true time - shift
    Pose3 true_calib;               // T_I^L
    double imu_multiplier = 1.0;    // sensitivity mismatch injection
    double imu_bias_walk_acc = 0.0; // extra in-run random walk, m/s^2/sqrt(s)
    double imu_bias_walk_gyr = 0.0;

    Vec3 gravity{0.0, 0.0, -9.80665};
    bool noiseless = false;  // zero all noise, biases and time shift
};

enum class Profile { Slow, Moderate, Fast };

// Random sine parameters rescaled so the realised mean angular speed and
// mean linear speed match the profile targets within tolerance.
SineTrajectory make_profile(Profile level, uint64_t seed, double duration = 10.0,
                            bool closed_loop = false);

struct RenderedLidar {
    std::vector<frontend::LidarPoint> points;  // ordered by time
    std::vector<int> plane_ids;                // ground-truth surface labels
    std::vector<Pose3> true_imu_poses;         // T_W^I at each point time
};

RenderedLidar render_lidar(const PlaneWorld& world, const SineTrajectory& traj,
                           const SensorSpec& spec, double t0, double duration,
                           uint64_t noise_seed);

std::vector<ImuSample> render_imu(const SineTrajectory& traj,
                                  const SensorSpec& spec, double span_lo,
                                  double span_hi, uint64_t noise_seed);

// Realised trajectory statistics from numeric sampling.
struct TrajectoryStats {
    double mean_speed = 0.0;        // m/s
    double mean_ang_speed = 0.0;    // rad/s
};
TrajectoryStats measure_trajectory(const SineTrajectory& traj, const Vec3& gravity);

}  // namespace liom::sim
