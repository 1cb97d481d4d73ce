#pragma once

#include <string>
#include <vector>

#include "liom/io.hpp"

namespace liom::eval {

struct EvalSummary {
    double final_pos = 0.0;   // m
    double final_rot = 0.0;   // deg
    double rel_pos = 0.0;     // m, mean frame-to-frame registration error
    double rel_rot = 0.0;     // deg
    double rmse_pos = 0.0;    // m, along the whole trajectory
    double rmse_rot = 0.0;    // deg
    double planarity_rms = -1.0;  // m, -1 when no labels available
    bool failed = false;
};

// Compares two trajectories expressed relative to their own first frame
// (shared gauge anchor); no fitted alignment. Truth rows are looked up by
// timestamp and must cover every estimated frame time.
EvalSummary compare_trajectories(const std::vector<io::TrajectoryRow>& estimate,
                                 const std::vector<io::TrajectoryRow>& truth);

// RMS point-to-plane distance of labeled world points against planes fit
// by principal component analysis per label.
double planarity_rms(const std::vector<Vec3>& world_points,
                     const std::vector<int>& labels);

void save_eval_csv(const std::string& path, const EvalSummary& s);

}  // namespace liom::eval
