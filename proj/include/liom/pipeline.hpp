#pragma once

#include <map>
#include <memory>
#include <optional>

#include "liom/factors.hpp"
#include "liom/frontend.hpp"
#include "liom/solver.hpp"

namespace liom::pipeline {

enum class DeskewModel { Upm, ConstantVelocity };

struct PipelineConfig {
    double sweep_deg = 520.0;

    // GP regression
    double gp_overlap = 0.05;
    bool gp_optimize_hypers = true;
    double sigma_acc = 0.02;
    double sigma_gyr = 0.0016930;

    // UPMs
    double upsample_dt = 1e-3;
    DeskewModel deskew = DeskewModel::Upm;

    // Graph construction
    int n_init = 3;       // frames in the initialisation phase
    int n_every = 5;      // frames between optimisations
    int n_upm = 5;        // UPM retention window, frames
    int recheck_cap = 5;
    bool calib_mode = false;

    frontend::FrontendConfig frontend;
    frontend::LoopConfig loop;
    double sigma_range = 0.01;

    // Factors
    bool imu_factors = true;
    bool cauchy = true;
    double cauchy_scale = 1.0;
    double bisquare_c = 4.685;
    double sigma_bf_rw = 1e-3;     // m/s^2 per sqrt(s)
    double sigma_bw_rw = 1e-4;     // rad/s per sqrt(s)
    double sigma_dt_prior = 5e-3;  // s
    double bias_obs_sigma = 0.1;
    double bias_obs_release_thresh = 0.5;  // m/s^2
    double gravity = 9.80665;
    // Floors on the frame-to-frame preintegration noise: the propagated
    // covariance treats GP reading errors as white between steps, which
    // understates the correlated part, and the estimator must tolerate
    // honest model mismatch (time shift, locally-constant biases).
    double imu_sigma_floor_r = 1e-3;   // rad
    double imu_sigma_floor_v = 1e-2;   // m/s
    double imu_sigma_floor_p = 1e-3;   // m
    double lidar_sigma_floor = 1e-4;

    solver::SolveOptions solve;

    // Calibration epilogue
    double calib_tol_pos = 1e-6;
    double calib_tol_rot = 1e-5;
    int calib_iter_cap = 12;
};

struct LoopClosureEvent {
    int frame_a = -1;
    int frame_b = -1;
    double tau = 0.0;
};

struct RunReport {
    std::vector<double> frame_taus;
    EstimationState state;
    std::vector<LoopClosureEvent> loops;
    int solve_count = 0;
    long lm_iterations = 0;
    int feature_recomputations = 0;
    bool bias_guard_reactivated = false;
    double wall_seconds = 0.0;
};

// Frame seeds for refinement runs starting from a given trajectory.
struct FrameSeed {
    Rot3 rot;
    Vec3 pos{Vec3::Zero()};
    Vec3 vel{Vec3::Zero()};
};

// Gravity-aligned initial attitude from the mean specific force of the
// first frame's IMU support. Yaw-free (minimal rotation onto +z).
Rot3 initialize_attitude(const std::vector<ImuSample>& imu, double t_lo,
                         double t_hi, double gravity);

class Pipeline {
public:
    explicit Pipeline(const PipelineConfig& cfg);
    ~Pipeline();

    // The full incremental construction and optimisation loop.
    RunReport run(const std::vector<frontend::LidarPoint>& lidar,
                  const std::vector<ImuSample>& imu, const Pose3& calib_prior);

    // Batch refinement from a seeded trajectory: builds the whole graph at
    // the seed and iterates solve + recheck until convergence.
    RunReport refine(const std::vector<frontend::LidarPoint>& lidar,
                     const std::vector<ImuSample>& imu,
                     const std::vector<FrameSeed>& seeds,
                     const Pose3& calib_prior);

    // Dense map export support: world-frame coordinates of every point of
    // every complete frame at the final state, recomputing evicted UPMs.
    std::vector<Vec3> export_world_points();

    const EstimationState& state() const;
    const std::vector<std::pair<int, int>>& lidar_pairs() const;

    struct Impl;

private:
    std::unique_ptr<Impl> impl_;
};

// World-frame projection of a whole dataset at a previously estimated
// state, recomputing all UPMs; the frame assembly must match the state.
std::vector<Vec3> project_dataset(const PipelineConfig& cfg,
                                  const std::vector<frontend::LidarPoint>& lidar,
                                  const std::vector<ImuSample>& imu,
                                  const EstimationState& state);

}  // namespace liom::pipeline
