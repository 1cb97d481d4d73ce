#pragma once

#include <map>
#include <optional>
#include <string>

#include "liom/pipeline.hpp"
#include "liom/simulator.hpp"

namespace liom::io {

// ---- CSV data formats ------------------------------------------------------
// IMU:        t,fx,fy,fz,wx,wy,wz      strictly increasing t
// lidar:      t,x,y,z,ring             nondecreasing t
// trajectory: tau,qw,qx,qy,qz,px,py,pz,vx,vy,vz
// All doubles are printed with 17 significant digits so a load/save cycle
// is bit-exact.

std::vector<ImuSample> load_imu_csv(const std::string& path);
void save_imu_csv(const std::string& path, const std::vector<ImuSample>& samples);

std::vector<frontend::LidarPoint> load_lidar_csv(const std::string& path);
void save_lidar_csv(const std::string& path,
                    const std::vector<frontend::LidarPoint>& points);

struct TrajectoryRow {
    double tau = 0.0;
    Rot3 rot;
    Vec3 pos{Vec3::Zero()};
    Vec3 vel{Vec3::Zero()};
};
std::vector<TrajectoryRow> load_trajectory_csv(const std::string& path);
void save_trajectory_csv(const std::string& path,
                         const std::vector<TrajectoryRow>& rows);

// Per-point ground-truth surface labels, parallel to the lidar CSV.
std::vector<int> load_labels_csv(const std::string& path);
void save_labels_csv(const std::string& path, const std::vector<int>& labels);

// Full estimation state, for map export and inspection.
void save_state_csv(const std::string& path, const EstimationState& state);
EstimationState load_state_csv(const std::string& path);

// ASCII PLY with x y z float vertices. Returns the point count written.
size_t export_map_ply(const std::string& path, const std::vector<Vec3>& points);

// ---- Flat key = value configuration ----------------------------------------

using ConfigMap = std::map<std::string, std::string>;
ConfigMap load_config(const std::string& path);
ConfigMap default_config();
// Applies recognised keys onto the pipeline configuration; unknown keys
// raise DataError so typos do not pass silently.
void apply_config(const ConfigMap& overrides, pipeline::PipelineConfig* cfg);

// ---- Dataset bundle ----------------------------------------------------------

struct DatasetBundle {
    std::vector<frontend::LidarPoint> lidar;
    std::vector<ImuSample> imu;
    std::vector<TrajectoryRow> truth;  // may be empty
    std::vector<int> labels;           // may be empty
    sim::SensorSpec spec;              // from meta.cfg
    bool has_truth = false;
};

DatasetBundle load_dataset(const std::string& dir);
void save_dataset(const std::string& dir, const sim::SensorSpec& spec,
                  const std::vector<frontend::LidarPoint>& lidar,
                  const std::vector<ImuSample>& imu,
                  const std::vector<TrajectoryRow>& truth,
                  const std::vector<int>& labels);

}  // namespace liom::io
