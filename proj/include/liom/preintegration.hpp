#pragma once

#include <memory>
#include <vector>

#include "liom/geometry.hpp"
#include "liom/imu_gp.hpp"

namespace liom {

// Bias and time-shift values held fixed while preintegrating. Estimated
// corrections around these priors are applied first-order afterwards.
struct BiasState {
    Vec3 b_f_prior{Vec3::Zero()};   // m/s^2
    Vec3 b_w_prior{Vec3::Zero()};   // rad/s
    double dt_prior = 0.0;          // seconds
};

// Preintegrated triple at one target timestamp, with uncertainty and
// first-order sensitivities to bias and time-shift corrections.
// Tangent ordering everywhere: (delta_r, delta_v, delta_p).
struct Upm {
    double t = 0.0;
    Rot3 delta_r;
    Vec3 delta_v{Vec3::Zero()};
    Vec3 delta_p{Vec3::Zero()};
    Eigen::Matrix<double, 9, 9> cov{Eigen::Matrix<double, 9, 9>::Zero()};
    Eigen::Matrix<double, 6, 3> j_bf{Eigen::Matrix<double, 6, 3>::Zero()};  // (dv;dp)
    Eigen::Matrix<double, 9, 3> j_bw{Eigen::Matrix<double, 9, 3>::Zero()};
    Eigen::Matrix<double, 9, 1> j_dt{Eigen::Matrix<double, 9, 1>::Zero()};
};

// Continuous inertial readings queried by the integrator. Implementations
// wrap either the GP regressors or raw-sample interpolation.
class InertialSource {
public:
    virtual ~InertialSource() = default;
    virtual void read(double t, Vec3* acc, Vec3* gyr,
                      Eigen::Matrix<double, 6, 1>* variance) const = 0;
    virtual double lo() const = 0;
    virtual double hi() const = 0;
};

class GpSource : public InertialSource {
public:
    explicit GpSource(const ImuGp& gp) : gp_(&gp) {}
    void read(double t, Vec3* acc, Vec3* gyr,
              Eigen::Matrix<double, 6, 1>* variance) const override;
    double lo() const override { return gp_->span_lo(); }
    double hi() const override { return gp_->span_hi(); }

private:
    const ImuGp* gp_;
};

enum class RawInterp { ZeroOrderHold, Linear };

class RawSource : public InertialSource {
public:
    RawSource(const std::vector<ImuSample>& samples, RawInterp kind,
              double sigma_acc = 0.0, double sigma_gyr = 0.0);
    void read(double t, Vec3* acc, Vec3* gyr,
              Eigen::Matrix<double, 6, 1>* variance) const override;
    double lo() const override;
    double hi() const override;

private:
    const std::vector<ImuSample>* samples_;
    RawInterp kind_;
    Eigen::Matrix<double, 6, 1> var_;
};

struct UpmOptions {
    double upsample_dt = 1e-3;   // internal quadrature step
    bool with_uncertainty = true;  // covariance propagation
    bool with_dt_jacobian = true;  // central-difference time-shift Jacobian
};

// Preintegrates from `from` to every target timestamp, sharing one sweep
// over the upsampled grid {from, from+dt, ...} with each target appended
// as a final partial step. Targets must be sorted ascending and >= from.
// Readings are taken at (t - dt_prior) with bias priors subtracted.
std::vector<Upm> compute_upms(const InertialSource& source, double from,
                              const std::vector<double>& targets,
                              const BiasState& bias, const UpmOptions& opts);

Upm compute_upm(const InertialSource& source, double from, double to,
                const BiasState& bias, const UpmOptions& opts);

// Zero-order-hold preintegration at the raw sample rate; the baseline
// the upsampled variants are benchmarked against.
Upm preintegrate_classic(const std::vector<ImuSample>& samples, double from,
                         double to, const BiasState& bias,
                         double sigma_acc = 0.0, double sigma_gyr = 0.0);

// First-order corrected preintegration values.
struct CorrectedUpm {
    Rot3 delta_r;
    Vec3 delta_v;
    Vec3 delta_p;
};
CorrectedUpm apply_corrections(const Upm& upm, const Vec3& db_f,
                               const Vec3& db_w, double ddt);

// The predicted IMU state at the UPM's timestamp given the frame-start
// state: R = R_m dR, v = v_m + ds g + R_m dv, p = p_m + ds v_m +
// ds^2/2 g + R_m dp, with ds = t - tau_m.
struct PredictedState {
    Rot3 rot;
    Vec3 pos;
    Vec3 vel;
};
PredictedState predict_state(const Rot3& rot_m, const Vec3& pos_m,
                             const Vec3& vel_m, const CorrectedUpm& upm,
                             const Vec3& gravity, double dt);

}  // namespace liom
