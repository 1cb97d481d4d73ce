#include "liom/factors.hpp"

#include <cmath>

#include "liom/errors.hpp"

namespace liom::factors {

double bisquare_weight(double r, double c) {
    const double a = std::abs(r) / c;
    if (a >= 1.0) return 0.0;
    const double b = 1.0 - a * a;
    return b * b;
}

double point_to_line_residual(const Vec3& xi, const Vec3& xj, const Vec3& xk) {
    const Vec3 e = xj - xk;
    const double en = e.norm();
    if (en < 1e-9) throw DegenerateGeometry("edge endpoints coincide");
    return (xi - xj).cross(xi - xk).norm() / en;
}

double point_to_plane_residual(const Vec3& xi, const Vec3& xj, const Vec3& xk,
                               const Vec3& xl) {
    const Vec3 n = (xj - xk).cross(xj - xl);
    const double nn = n.norm();
    if (nn < 1e-9) throw DegenerateGeometry("plane points collinear");
    return (xi - xj).dot(n) / nn;
}

ProjectedPoint project_with_jacobians(const FrameState& fs, const Upm& upm,
                                      const Pose3& calib, const Vec3& x_l,
                                      const Vec3& gravity) {
    ProjectedPoint o;
    const Vec3 u_phi = upm.j_bw.block<3, 3>(0, 0) * fs.bw_corr +
                       upm.j_dt.segment<3>(0) * fs.dt_corr;
    const Rot3 dr_corr = upm.delta_r * Rot3::exp(u_phi);
    const Vec3 dv_unused = upm.delta_v;  // velocity does not enter the projection
    (void)dv_unused;
    const Vec3 dp_corr = upm.delta_p + upm.j_bf.bottomRows<3>() * fs.bf_corr +
                         upm.j_bw.block<3, 3>(6, 0) * fs.bw_corr +
                         upm.j_dt.segment<3>(6) * fs.dt_corr;

    const Vec3 x_i = calib.rot * x_l + calib.trans;
    const Vec3 y = dr_corr * x_i + dp_corr;
    o.ds = upm.t - fs.tau;
    const Mat3 r_m = fs.rot.matrix();
    o.x_w = fs.rot * y + fs.pos + o.ds * fs.vel +
            0.5 * o.ds * o.ds * gravity;

    const Mat3 rdr = r_m * dr_corr.matrix();
    const Mat3 jr_u = Rot3::right_jacobian(u_phi);
    const Mat3 lift = -rdr * skew(x_i) * jr_u;  // d x_w / d u_phi

    o.d_rot = -r_m * skew(y);
    o.d_bf = r_m * upm.j_bf.bottomRows<3>();
    o.d_bw = lift * upm.j_bw.block<3, 3>(0, 0) + r_m * upm.j_bw.block<3, 3>(6, 0);
    o.d_dt = lift * upm.j_dt.segment<3>(0) + r_m * upm.j_dt.segment<3>(6);
    o.d_crot = -rdr * calib.rot.matrix() * skew(x_l);
    o.d_cpos = rdr;
    o.d_xl = rdr * calib.rot.matrix();
    o.d_ur = -rdr * skew(x_i);
    o.d_up = r_m;
    return o;
}

// ---- LidarFactor ----------------------------------------------------------

LidarFactor::LidarFactor(std::vector<LidarMember> members, bool is_plane,
                         bool with_calib_blocks, const CauchyLoss& loss,
                         bool const_velocity)
    : members_(std::move(members)),
      is_plane_(is_plane),
      loss_(loss),
      with_calib_(with_calib_blocks),
      const_velocity_(const_velocity) {
    // One run of six blocks per distinct frame, in first-seen order.
    std::vector<int> frames;
    member_block_offset_.resize(members_.size());
    for (size_t i = 0; i < members_.size(); ++i) {
        const int f = members_[i].frame;
        int pos = -1;
        for (size_t k = 0; k < frames.size(); ++k) {
            if (frames[k] == f) pos = static_cast<int>(k);
        }
        if (pos < 0) {
            pos = static_cast<int>(frames.size());
            frames.push_back(f);
        }
        member_block_offset_[i] = {pos * 6, f};
    }
    for (int f : frames) {
        blocks_.push_back({BlockKind::Rot, f});
        blocks_.push_back({BlockKind::Pos, f});
        blocks_.push_back({BlockKind::Vel, f});
        blocks_.push_back({BlockKind::BiasF, f});
        blocks_.push_back({BlockKind::BiasW, f});
        blocks_.push_back({BlockKind::Dt, f});
    }
    if (with_calib_) {
        blocks_.push_back({BlockKind::CalibRot, -1});
        blocks_.push_back({BlockKind::CalibPos, -1});
    }
}

namespace {

// Constant-velocity projection: fixed within-frame rotation, linear
// position interpolation, no gravity or preintegration terms.
ProjectedPoint project_const_velocity(const FrameState& fs, const LidarMember& m,
                                      const Pose3& calib) {
    ProjectedPoint o;
    const Vec3 x_i = calib.rot * m.x_l + calib.trans;
    const Mat3 r_m = fs.rot.matrix();
    const Mat3 e = m.cv_rot.matrix();
    const Vec3 y = m.cv_rot * x_i;
    o.ds = m.ds;
    o.x_w = fs.rot * y + fs.pos + m.ds * fs.vel;
    o.d_rot = -r_m * skew(y);
    o.d_bf.setZero();
    o.d_bw.setZero();
    o.d_dt.setZero();
    o.d_crot = -r_m * e * calib.rot.matrix() * skew(m.x_l);
    o.d_cpos = r_m * e;
    o.d_xl = r_m * e * calib.rot.matrix();
    o.d_ur.setZero();
    o.d_up.setZero();
    return o;
}

// Distance value and gradients with respect to the projected points.
struct DistanceGrad {
    double d = 0.0;
    // gradient per member: query, then targets
    std::vector<Eigen::RowVector3d> g;
};

DistanceGrad plane_distance(const std::vector<Vec3>& x) {
    DistanceGrad out;
    const Vec3 a = x[0] - x[1];
    const Vec3 u = x[1] - x[2];
    const Vec3 w = x[1] - x[3];
    const Vec3 n = u.cross(w);
    const double nn = n.norm();
    if (nn < 1e-9) throw DegenerateGeometry("plane association collinear");
    const Vec3 nh = n / nn;
    out.d = a.dot(nh);
    const Eigen::RowVector3d dd_dn =
        (a.transpose() * (Mat3::Identity() - nh * nh.transpose())) / nn;
    out.g.resize(4);
    out.g[0] = nh.transpose();
    out.g[1] = -nh.transpose() + dd_dn * (skew(u) - skew(w));
    out.g[2] = dd_dn * skew(w);
    out.g[3] = dd_dn * (-skew(u));
    return out;
}

DistanceGrad line_distance(const std::vector<Vec3>& x) {
    DistanceGrad out;
    const Vec3 a = x[0] - x[1];
    const Vec3 b = x[0] - x[2];
    const Vec3 c = a.cross(b);
    const Vec3 e = x[1] - x[2];
    const double en = e.norm();
    if (en < 1e-9) throw DegenerateGeometry("edge association degenerate");
    const double cn = c.norm();
    out.d = cn / en;
    Eigen::RowVector3d dd_dc = Eigen::RowVector3d::Zero();
    if (cn > 1e-12) dd_dc = c.transpose() / (cn * en);
    const Eigen::RowVector3d dd_de = -(cn / (en * en * en)) * e.transpose();
    out.g.resize(3);
    out.g[0] = dd_dc * (skew(a) - skew(b));
    out.g[1] = dd_dc * skew(b) + dd_de;
    out.g[2] = dd_dc * (-skew(a)) - dd_de;
    return out;
}

}  // namespace

double LidarFactor::unweighted_residual(const EstimationState& state) const {
    std::vector<Vec3> x(members_.size());
    for (size_t i = 0; i < members_.size(); ++i) {
        const auto& m = members_[i];
        if (const_velocity_) {
            x[i] = project_const_velocity(state.frames[m.frame], m, state.calib).x_w;
        } else {
            x[i] = project_to_world(state.frames[m.frame], *m.upm, state.calib,
                                    m.x_l, state.gravity);
        }
    }
    return is_plane_ ? point_to_plane_residual(x[0], x[1], x[2], x[3])
                     : point_to_line_residual(x[0], x[1], x[2]);
}

void LidarFactor::evaluate(const EstimationState& state, bool with_jac,
                           FactorEval* out) const {
    std::vector<ProjectedPoint> proj(members_.size());
    std::vector<Vec3> x(members_.size());
    for (size_t i = 0; i < members_.size(); ++i) {
        const auto& m = members_[i];
        proj[i] = const_velocity_
                      ? project_const_velocity(state.frames[m.frame], m, state.calib)
                      : project_with_jacobians(state.frames[m.frame], *m.upm,
                                               state.calib, m.x_l, state.gravity);
        x[i] = proj[i].x_w;
    }
    const DistanceGrad dist = is_plane_ ? plane_distance(x) : line_distance(x);

    const double sigma = sigma_d_ * scale_mult_;
    const double r_white = dist.d / sigma;
    const double s = r_white * r_white;
    const double cauchy_w = loss_.weight(s);
    out->cost = bisquare_w_ * loss_.rho(s);
    const double w = std::sqrt(std::max(0.0, bisquare_w_ * cauchy_w));

    out->residual.resize(1);
    out->residual(0) = w * r_white;

    if (!with_jac) return;
    out->jac.assign(blocks_.size(), {});
    const int nb_frame_blocks = with_calib_ ? static_cast<int>(blocks_.size()) - 2
                                            : static_cast<int>(blocks_.size());
    for (int b = 0; b < static_cast<int>(blocks_.size()); ++b) {
        out->jac[b].setZero(1, block_dim(blocks_[b].kind));
    }
    const double scale = w / sigma;
    for (size_t i = 0; i < members_.size(); ++i) {
        const Eigen::RowVector3d g = scale * dist.g[i];
        const int base = member_block_offset_[i].first;
        out->jac[base + 0] += g * proj[i].d_rot;
        out->jac[base + 1] += g;                       // d x_w / d p = I
        out->jac[base + 2] += g * proj[i].ds;          // d x_w / d v = ds I
        out->jac[base + 3] += g * proj[i].d_bf;
        out->jac[base + 4] += g * proj[i].d_bw;
        out->jac[base + 5] += g * proj[i].d_dt;
        if (with_calib_) {
            out->jac[nb_frame_blocks + 0] += g * proj[i].d_crot;
            out->jac[nb_frame_blocks + 1] += g * proj[i].d_cpos;
        }
    }
}

void LidarFactor::refresh(const EstimationState& state, double sigma_range,
                          double sigma_floor, double bisquare_c,
                          double scale_mult) {
    bisquare_c_ = bisquare_c;
    scale_mult_ = std::max(1.0, scale_mult);

    std::vector<ProjectedPoint> proj(members_.size());
    std::vector<Vec3> x(members_.size());
    for (size_t i = 0; i < members_.size(); ++i) {
        const auto& m = members_[i];
        proj[i] = const_velocity_
                      ? project_const_velocity(state.frames[m.frame], m, state.calib)
                      : project_with_jacobians(state.frames[m.frame], *m.upm,
                                               state.calib, m.x_l, state.gravity);
        x[i] = proj[i].x_w;
    }
    const DistanceGrad dist = is_plane_ ? plane_distance(x) : line_distance(x);

    // Sigma_d = J Sigma_z J^T with Sigma_z block diagonal over the members'
    // lidar noise and UPM covariances.
    double var = 0.0;
    for (size_t i = 0; i < members_.size(); ++i) {
        const Eigen::RowVector3d g = dist.g[i];
        const Eigen::RowVector3d g_l = g * proj[i].d_xl;
        var += sigma_range * sigma_range * g_l.squaredNorm();
        if (!const_velocity_ && members_[i].upm != nullptr) {
            Eigen::Matrix<double, 1, 9> g_u;
            g_u.segment<3>(0) = g * proj[i].d_ur;
            g_u.segment<3>(3).setZero();
            g_u.segment<3>(6) = g * proj[i].d_up;
            var += (g_u * members_[i].upm->cov * g_u.transpose())(0, 0);
        }
    }
    sigma_d_ = std::max(std::sqrt(var), sigma_floor);

    const double r_white = dist.d / (sigma_d_ * scale_mult_);
    bisquare_w_ = bisquare_weight(r_white, bisquare_c_);
}

// ---- ImuFactor -------------------------------------------------------------

ImuFactor::ImuFactor(int frame_prev, int frame_next, const Upm* upm,
                     const Eigen::Matrix<double, 9, 1>& sigma_floor,
                     const CauchyLoss& loss)
    : prev_(frame_prev), next_(frame_next), upm_(upm), loss_(loss) {
    blocks_ = {{BlockKind::Rot, prev_},   {BlockKind::Pos, prev_},
               {BlockKind::Vel, prev_},   {BlockKind::BiasF, prev_},
               {BlockKind::BiasW, prev_}, {BlockKind::Dt, prev_},
               {BlockKind::Rot, next_},   {BlockKind::Pos, next_},
               {BlockKind::Vel, next_}};
    Eigen::Matrix<double, 9, 9> sigma = upm_->cov;
    sigma += sigma_floor.cwiseProduct(sigma_floor).asDiagonal();
    Eigen::LLT<Eigen::Matrix<double, 9, 9>> llt(sigma);
    if (llt.info() != Eigen::Success) {
        throw NumericalFailure("IMU factor covariance not positive definite");
    }
    white_ = Eigen::Matrix<double, 9, 9>(llt.matrixL())
                 .triangularView<Eigen::Lower>()
                 .solve(Eigen::Matrix<double, 9, 9>::Identity());
}

Eigen::Matrix<double, 9, 1> ImuFactor::unweighted_residual(
    const EstimationState& state) const {
    const FrameState& a = state.frames[prev_];
    const FrameState& b = state.frames[next_];
    const double dtau = b.tau - a.tau;
    const CorrectedUpm c = apply_corrections(*upm_, a.bf_corr, a.bw_corr, a.dt_corr);

    const Vec3 s_p = b.pos - a.pos - dtau * a.vel -
                     0.5 * dtau * dtau * state.gravity;
    const Vec3 s_v = b.vel - a.vel - dtau * state.gravity;
    Eigen::Matrix<double, 9, 1> r;
    r.segment<3>(0) = (c.delta_r.transpose() * (a.rot.transpose() * b.rot)).log();
    r.segment<3>(3) = a.rot.transpose() * s_v - c.delta_v;
    r.segment<3>(6) = a.rot.transpose() * s_p - c.delta_p;
    return r;
}

void ImuFactor::evaluate(const EstimationState& state, bool with_jac,
                         FactorEval* out) const {
    const FrameState& a = state.frames[prev_];
    const FrameState& b = state.frames[next_];
    const double dtau = b.tau - a.tau;
    const Vec3 u_phi = upm_->j_bw.block<3, 3>(0, 0) * a.bw_corr +
                       upm_->j_dt.segment<3>(0) * a.dt_corr;
    const CorrectedUpm c = apply_corrections(*upm_, a.bf_corr, a.bw_corr, a.dt_corr);

    const Vec3 s_p = b.pos - a.pos - dtau * a.vel -
                     0.5 * dtau * dtau * state.gravity;
    const Vec3 s_v = b.vel - a.vel - dtau * state.gravity;

    Eigen::Matrix<double, 9, 1> r;
    const Vec3 r_rot = (c.delta_r.transpose() * (a.rot.transpose() * b.rot)).log();
    r.segment<3>(0) = r_rot;
    r.segment<3>(3) = a.rot.transpose() * s_v - c.delta_v;
    r.segment<3>(6) = a.rot.transpose() * s_p - c.delta_p;

    const Eigen::Matrix<double, 9, 1> rw = white_ * r;
    const double s = rw.squaredNorm();
    out->cost = loss_.rho(s);
    const double w = std::sqrt(loss_.weight(s));
    out->residual = w * rw;

    if (!with_jac) return;
    Eigen::Matrix<double, 9, 9> j_prev6 = Eigen::Matrix<double, 9, 9>::Zero();
    // Columns: rot(3), pos(3), vel(3) of the previous frame.
    const Mat3 at = a.rot.transpose().matrix();
    const Mat3 jr_inv = Rot3::right_jacobian_inverse(r_rot);
    const Mat3 jl_inv = Rot3::right_jacobian_inverse(Vec3(-r_rot));
    const Mat3 jr_u = Rot3::right_jacobian(u_phi);

    j_prev6.block<3, 3>(0, 0) = -jr_inv * (b.rot.transpose() * a.rot).matrix();
    j_prev6.block<3, 3>(3, 0) = skew(at * s_v);
    j_prev6.block<3, 3>(6, 0) = skew(at * s_p);
    j_prev6.block<3, 3>(3, 6) = -at;
    j_prev6.block<3, 3>(6, 3) = -at;
    j_prev6.block<3, 3>(6, 6) = -dtau * at;

    Eigen::Matrix<double, 9, 7> j_bias = Eigen::Matrix<double, 9, 7>::Zero();
    // Columns: bf(3), bw(3), dt(1) of the previous frame.
    const Mat3 dlog_du = -jl_inv * jr_u;
    j_bias.block<3, 3>(0, 3) = dlog_du * upm_->j_bw.block<3, 3>(0, 0);
    j_bias.block<3, 1>(0, 6) = dlog_du * upm_->j_dt.segment<3>(0);
    j_bias.block<3, 3>(3, 0) = -upm_->j_bf.topRows<3>();
    j_bias.block<3, 3>(3, 3) = -upm_->j_bw.block<3, 3>(3, 0);
    j_bias.block<3, 1>(3, 6) = -upm_->j_dt.segment<3>(3);
    j_bias.block<3, 3>(6, 0) = -upm_->j_bf.bottomRows<3>();
    j_bias.block<3, 3>(6, 3) = -upm_->j_bw.block<3, 3>(6, 0);
    j_bias.block<3, 1>(6, 6) = -upm_->j_dt.segment<3>(6);

    Eigen::Matrix<double, 9, 9> j_next = Eigen::Matrix<double, 9, 9>::Zero();
    // Columns: rot(3), pos(3), vel(3) of the next frame.
    j_next.block<3, 3>(0, 0) = jr_inv;
    j_next.block<3, 3>(3, 6) = at;
    j_next.block<3, 3>(6, 3) = at;

    out->jac.assign(blocks_.size(), {});
    const Eigen::Matrix<double, 9, 9> wp = w * (white_ * j_prev6);
    const Eigen::Matrix<double, 9, 7> wb = w * (white_ * j_bias);
    const Eigen::Matrix<double, 9, 9> wn = w * (white_ * j_next);
    out->jac[0] = wp.block<9, 3>(0, 0);
    out->jac[1] = wp.block<9, 3>(0, 3);
    out->jac[2] = wp.block<9, 3>(0, 6);
    out->jac[3] = wb.block<9, 3>(0, 0);
    out->jac[4] = wb.block<9, 3>(0, 3);
    out->jac[5] = wb.block<9, 1>(0, 6);
    out->jac[6] = wn.block<9, 3>(0, 0);
    out->jac[7] = wn.block<9, 3>(0, 3);
    out->jac[8] = wn.block<9, 3>(0, 6);
}

// ---- Bias / time-shift factors ---------------------------------------------

BiasFactor::BiasFactor(int frame_prev, int frame_next, BiasKind kind,
                       double sigma_step)
    : prev_(frame_prev), next_(frame_next), kind_(kind),
      inv_sigma_(1.0 / sigma_step) {
    const BlockKind b = kind == BiasKind::Accelerometer ? BlockKind::BiasF
                                                        : BlockKind::BiasW;
    blocks_ = {{b, prev_}, {b, next_}};
}

void BiasFactor::evaluate(const EstimationState& state, bool with_jac,
                          FactorEval* out) const {
    const FrameState& a = state.frames[prev_];
    const FrameState& b = state.frames[next_];
    const Vec3 r = kind_ == BiasKind::Accelerometer
                       ? Vec3(b.bias_acc_total() - a.bias_acc_total())
                       : Vec3(b.bias_gyr_total() - a.bias_gyr_total());
    out->residual = inv_sigma_ * r;
    out->cost = out->residual.squaredNorm();
    if (!with_jac) return;
    out->jac.assign(2, {});
    out->jac[0] = -inv_sigma_ * Mat3::Identity();
    out->jac[1] = inv_sigma_ * Mat3::Identity();
}

TimeShiftFactor::TimeShiftFactor(int frame, double sigma)
    : frame_(frame), inv_sigma_(1.0 / sigma) {
    blocks_ = {{BlockKind::Dt, frame_}};
}

void TimeShiftFactor::evaluate(const EstimationState& state, bool with_jac,
                               FactorEval* out) const {
    out->residual.resize(1);
    out->residual(0) = inv_sigma_ * state.frames[frame_].dt_corr;
    out->cost = out->residual(0) * out->residual(0);
    if (!with_jac) return;
    out->jac.assign(1, {});
    out->jac[0].setConstant(1, 1, inv_sigma_);
}

BiasObservabilityFactor::BiasObservabilityFactor(double sigma)
    : inv_sigma_(1.0 / sigma) {
    blocks_ = {{BlockKind::BiasF, 0}};
}

void BiasObservabilityFactor::evaluate(const EstimationState& state,
                                       bool with_jac, FactorEval* out) const {
    const double gain = active_ ? inv_sigma_ : 0.0;
    out->residual = gain * state.frames[0].bias_acc_total();
    out->cost = out->residual.squaredNorm();
    if (!with_jac) return;
    out->jac.assign(1, {});
    out->jac[0] = gain * Mat3::Identity();
}

}  // namespace liom::factors
