#pragma once

#include <memory>
#include <vector>

#include "liom/state.hpp"

namespace liom::factors {

enum class BlockKind : int {
    Rot = 0, Pos, Vel, BiasF, BiasW, Dt, CalibRot, CalibPos
};

struct BlockRef {
    BlockKind kind = BlockKind::Rot;
    int frame = -1;  // -1 for calibration blocks

    bool operator==(const BlockRef& o) const {
        return kind == o.kind && frame == o.frame;
    }
    bool operator<(const BlockRef& o) const {
        if (frame != o.frame) return frame < o.frame;
        return static_cast<int>(kind) < static_cast<int>(o.kind);
    }
};

inline int block_dim(BlockKind k) { return k == BlockKind::Dt ? 1 : 3; }

// Whitened residual and Jacobians of one factor, with the robust weight
// already folded in. `cost` is the factor's exact robustified term.
struct FactorEval {
    Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 9, 1> residual;
    std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 9, 3>> jac;
    double cost = 0.0;
};

class Factor {
public:
    virtual ~Factor() = default;
    virtual int dim() const = 0;
    virtual const std::vector<BlockRef>& blocks() const = 0;
    virtual void evaluate(const EstimationState& state, bool with_jac,
                          FactorEval* out) const = 0;
};

// ---- Robust losses -------------------------------------------------------

// Cauchy on the Mahalanobis-squared s: rho(s) = c^2 log(1 + s / c^2).
struct CauchyLoss {
    double scale = 1.0;
    bool enabled = true;
    double rho(double s) const {
        if (!enabled) return s;
        const double c2 = scale * scale;
        return c2 * std::log1p(s / c2);
    }
    double weight(double s) const {
        if (!enabled) return 1.0;
        return 1.0 / (1.0 + s / (scale * scale));
    }
};

// Tukey bisquare IRLS weight on a standardised residual.
double bisquare_weight(double r, double c);

// ---- Geometric residuals -------------------------------------------------

// || (xi - xj) x (xi - xk) || / || xj - xk ||
double point_to_line_residual(const Vec3& xi, const Vec3& xj, const Vec3& xk);
// (xi - xj) . ((xj - xk) x (xj - xl)) / || (xj - xk) x (xj - xl) ||
double point_to_plane_residual(const Vec3& xi, const Vec3& xj, const Vec3& xk,
                               const Vec3& xl);

// ---- Point projection with sensitivities ---------------------------------

struct ProjectedPoint {
    Vec3 x_w{Vec3::Zero()};
    Mat3 d_rot, d_bf, d_bw, d_crot, d_cpos, d_xl, d_ur, d_up;
    Vec3 d_dt{Vec3::Zero()};
    double ds = 0.0;  // t - tau, multiplies the velocity Jacobian
};
ProjectedPoint project_with_jacobians(const FrameState& fs, const Upm& upm,
                                      const Pose3& calib, const Vec3& x_l,
                                      const Vec3& gravity);

// ---- Factors --------------------------------------------------------------

struct LidarMember {
    int frame = -1;
    int point = -1;
    Vec3 x_l{Vec3::Zero()};
    const Upm* upm = nullptr;
    // Constant-velocity ablation: fixed within-frame rotation and the time
    // offset from the frame start; the UPM is ignored in that mode.
    Rot3 cv_rot;
    double ds = 0.0;
};

class LidarFactor : public Factor {
public:
    // members: query first, then the 2 (edge) or 3 (plane) targets.
    LidarFactor(std::vector<LidarMember> members, bool is_plane,
                bool with_calib_blocks, const CauchyLoss& loss,
                bool const_velocity = false);

    int dim() const override { return 1; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& state, bool with_jac,
                  FactorEval* out) const override;

    // Recomputes the residual variance by propagating the lidar range noise
    // and the member UPM covariances through the distance Jacobian, and
    // refreshes the bisquare weight at the current state. scale_mult
    // inflates the standardisation while the estimate is still far off.
    void refresh(const EstimationState& state, double sigma_range,
                 double sigma_floor, double bisquare_c, double scale_mult);

    double unweighted_residual(const EstimationState& state) const;
    double sigma() const { return sigma_d_; }
    double weight() const { return bisquare_w_; }
    const std::vector<LidarMember>& members() const { return members_; }

private:
    std::vector<LidarMember> members_;
    bool is_plane_ = true;
    std::vector<BlockRef> blocks_;
    std::vector<std::pair<int, int>> member_block_offset_;  // per member: frame block run
    CauchyLoss loss_;
    double sigma_d_ = 0.01;
    double scale_mult_ = 1.0;
    double bisquare_w_ = 1.0;
    double bisquare_c_ = 4.685;
    bool with_calib_ = false;
    bool const_velocity_ = false;
};

class ImuFactor : public Factor {
public:
    // Frame-to-frame preintegration from frame m-1 to m, corrected with
    // frame m-1's bias and time-shift corrections.
    ImuFactor(int frame_prev, int frame_next, const Upm* upm,
              const Eigen::Matrix<double, 9, 1>& sigma_floor,
              const CauchyLoss& loss);

    int dim() const override { return 9; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& state, bool with_jac,
                  FactorEval* out) const override;

    Eigen::Matrix<double, 9, 1> unweighted_residual(const EstimationState& s) const;

private:
    int prev_, next_;
    const Upm* upm_;
    std::vector<BlockRef> blocks_;
    Eigen::Matrix<double, 9, 9> white_;  // inverse square root of the covariance
    CauchyLoss loss_;
};

enum class BiasKind { Accelerometer, Gyroscope };

// Brownian-motion step between consecutive frames' bias estimates.
class BiasFactor : public Factor {
public:
    BiasFactor(int frame_prev, int frame_next, BiasKind kind, double sigma_step);
    int dim() const override { return 3; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& state, bool with_jac,
                  FactorEval* out) const override;

private:
    int prev_, next_;
    BiasKind kind_;
    double inv_sigma_;
    std::vector<BlockRef> blocks_;
};

// Gaussian prior on each frame's time-shift correction.
class TimeShiftFactor : public Factor {
public:
    TimeShiftFactor(int frame, double sigma);
    int dim() const override { return 1; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& state, bool with_jac,
                  FactorEval* out) const override;

private:
    int frame_;
    double inv_sigma_;
    std::vector<BlockRef> blocks_;
};

// Pulls the first frame's total accelerometer bias toward zero; releasable.
class BiasObservabilityFactor : public Factor {
public:
    explicit BiasObservabilityFactor(double sigma);
    int dim() const override { return 3; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& state, bool with_jac,
                  FactorEval* out) const override;

    void set_active(bool a) { active_ = a; }
    bool active() const { return active_; }

private:
    double inv_sigma_;
    bool active_ = true;
    std::vector<BlockRef> blocks_;
};

}  // namespace liom::factors
