#pragma once

#include <vector>

#include "liom/geometry.hpp"
#include "liom/preintegration.hpp"

namespace liom {

// Per-frame estimated quantities plus the priors the frame's UPMs were
// preintegrated with. Corrections are the optimised variables; totals are
// prior + correction.
struct FrameState {
    double tau = 0.0;
    Rot3 rot;                      // R_W at tau
    Vec3 pos{Vec3::Zero()};
    Vec3 vel{Vec3::Zero()};
    Vec3 bf_prior{Vec3::Zero()};
    Vec3 bw_prior{Vec3::Zero()};
    double dt_prior = 0.0;
    Vec3 bf_corr{Vec3::Zero()};
    Vec3 bw_corr{Vec3::Zero()};
    double dt_corr = 0.0;

    BiasState bias_prior() const { return {bf_prior, bw_prior, dt_prior}; }
    Vec3 bias_acc_total() const { return bf_prior + bf_corr; }
    Vec3 bias_gyr_total() const { return bw_prior + bw_corr; }
    double time_shift_total() const { return dt_prior + dt_corr; }
};

struct EstimationState {
    std::vector<FrameState> frames;
    bool has_calib = false;  // calibration parameters active in the state
    Pose3 calib;             // T_I^L
    Vec3 gravity{0.0, 0.0, -9.80665};
};

// Pose of the IMU at a point timestamp inside frame `fs`, from the frame
// state and the point's first-order-corrected UPM.
inline PredictedState point_state(const FrameState& fs, const Upm& upm,
                                  const Vec3& gravity) {
    const CorrectedUpm c =
        apply_corrections(upm, fs.bf_corr, fs.bw_corr, fs.dt_corr);
    return predict_state(fs.rot, fs.pos, fs.vel, c, gravity, upm.t - fs.tau);
}

// x_W = T_W^{t_i} T_I^L x_L
inline Vec3 project_to_world(const FrameState& fs, const Upm& upm,
                             const Pose3& calib, const Vec3& x_l,
                             const Vec3& gravity) {
    const PredictedState s = point_state(fs, upm, gravity);
    return s.rot * (calib.rot * x_l + calib.trans) + s.pos;
}

// x into the lidar frame at the frame start:
// (T_I^L)^-1 (T_W^{tau})^-1 T_W^{t_i} T_I^L x_L
inline Vec3 deskew_point(const FrameState& fs, const Upm& upm,
                         const Pose3& calib, const Vec3& x_l,
                         const Vec3& gravity) {
    const Vec3 x_w = project_to_world(fs, upm, calib, x_l, gravity);
    return calib.inverse().transform(
        fs.rot.transpose() * (x_w - fs.pos));
}

}  // namespace liom
