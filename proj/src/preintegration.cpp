#include "liom/preintegration.hpp"

#include <algorithm>
#include <cmath>

#include "liom/errors.hpp"

namespace liom {

void GpSource::read(double t, Vec3* acc, Vec3* gyr,
                    Eigen::Matrix<double, 6, 1>* variance) const {
    gp_->infer(t, acc, gyr, variance);
}

RawSource::RawSource(const std::vector<ImuSample>& samples, RawInterp kind,
                     double sigma_acc, double sigma_gyr)
    : samples_(&samples), kind_(kind) {
    var_.head<3>().setConstant(sigma_acc * sigma_acc);
    var_.tail<3>().setConstant(sigma_gyr * sigma_gyr);
}

double RawSource::lo() const { return samples_->front().t; }
double RawSource::hi() const { return samples_->back().t; }

void RawSource::read(double t, Vec3* acc, Vec3* gyr,
                     Eigen::Matrix<double, 6, 1>* variance) const {
    const auto& s = *samples_;
    auto it = std::upper_bound(s.begin(), s.end(), t,
                               [](double v, const ImuSample& a) { return v < a.t; });
    // Latest sample with time <= t; clamp at the ends.
    size_t i1 = static_cast<size_t>(std::distance(s.begin(), it));
    size_t i0 = i1 == 0 ? 0 : i1 - 1;
    if (i1 >= s.size()) i1 = s.size() - 1;

    if (kind_ == RawInterp::ZeroOrderHold || i0 == i1) {
        *acc = s[i0].acc;
        *gyr = s[i0].gyr;
    } else {
        const double span = s[i1].t - s[i0].t;
        const double w = span > 0.0 ? (t - s[i0].t) / span : 0.0;
        *acc = (1.0 - w) * s[i0].acc + w * s[i1].acc;
        *gyr = (1.0 - w) * s[i0].gyr + w * s[i1].gyr;
    }
    if (variance != nullptr) *variance = var_;
}

namespace {

// Accumulator for one integration sweep.
struct Accum {
    Rot3 dr;
    Vec3 dv{Vec3::Zero()};
    Vec3 dp{Vec3::Zero()};
    Eigen::Matrix<double, 9, 9> cov{Eigen::Matrix<double, 9, 9>::Zero()};
    Mat3 jr_bw{Mat3::Zero()};
    Mat3 jv_bf{Mat3::Zero()};
    Mat3 jv_bw{Mat3::Zero()};
    Mat3 jp_bf{Mat3::Zero()};
    Mat3 jp_bw{Mat3::Zero()};

    // One Euler step of length dt with readings (f, w) already bias-free.
    // var6 is the reading variance used for the covariance propagation.
    void step(const Vec3& f, const Vec3& w, double dt,
              const Eigen::Matrix<double, 6, 1>* var6, bool with_cov) {
        const Vec3 wdt = w * dt;
        const Rot3 e = Rot3::exp(wdt);
        const Mat3 jr_step = Rot3::right_jacobian(wdt);
        const Mat3 r = dr.matrix();
        const Mat3 fx = skew(f);

        if (with_cov && var6 != nullptr) {
            // First-order propagation of (dr, dv, dp) error.
            Eigen::Matrix<double, 9, 9> a = Eigen::Matrix<double, 9, 9>::Identity();
            a.block<3, 3>(0, 0) = e.matrix().transpose();
            a.block<3, 3>(3, 0) = -r * fx * dt;
            a.block<3, 3>(6, 0) = -0.5 * r * fx * dt * dt;
            a.block<3, 3>(6, 3) = Mat3::Identity() * dt;

            Eigen::Matrix<double, 9, 6> b = Eigen::Matrix<double, 9, 6>::Zero();
            b.block<3, 3>(0, 3) = jr_step * dt;
            b.block<3, 3>(3, 0) = r * dt;
            b.block<3, 3>(6, 0) = 0.5 * r * dt * dt;

            Eigen::Matrix<double, 6, 6> q = var6->asDiagonal();
            cov = a * cov * a.transpose() + b * q * b.transpose();
        }

        // Bias sensitivities (rotation part such that dR(b+e) ~ dR Exp(J e)).
        jp_bf += jv_bf * dt - 0.5 * r * dt * dt;
        jp_bw += jv_bw * dt - 0.5 * r * fx * jr_bw * dt * dt;
        jv_bf += -r * dt;
        jv_bw += -r * fx * jr_bw * dt;
        jr_bw = e.matrix().transpose() * jr_bw - jr_step * dt;

        dp += dv * dt + r * f * (0.5 * dt * dt);
        dv += r * f * dt;
        dr = dr * e;
    }
};

struct SweepResult {
    std::vector<Rot3> dr;
    std::vector<Vec3> dv, dp;
};

// Integrates along the grid, emitting the accumulated values at each target
// through a final partial step that does not advance the accumulator.
// Full per-target state (cov, jacobians) is written into `out` when not null.
SweepResult sweep(const InertialSource& source, double from,
                  const std::vector<double>& targets, const BiasState& bias,
                  double dt_shift, const UpmOptions& opts,
                  std::vector<Upm>* out) {
    SweepResult res;
    res.dr.reserve(targets.size());
    res.dv.reserve(targets.size());
    res.dp.reserve(targets.size());

    Accum acc;
    double t_node = from;
    Vec3 f, w;
    Eigen::Matrix<double, 6, 1> var;
    auto fetch = [&](double t) {
        source.read(t - dt_shift, &f, &w, &var);
        if (!f.allFinite() || !w.allFinite()) {
            throw NonFiniteReading("non-finite inertial reading");
        }
        f -= bias.b_f_prior;
        w -= bias.b_w_prior;
    };
    fetch(t_node);

    const bool with_cov = opts.with_uncertainty && out != nullptr;
    for (size_t i = 0; i < targets.size(); ++i) {
        const double target = targets[i];
        while (t_node + opts.upsample_dt <= target) {
            acc.step(f, w, opts.upsample_dt, &var, with_cov);
            t_node += opts.upsample_dt;
            fetch(t_node);
        }
        Accum final_acc = acc;
        const double rem = target - t_node;
        if (rem > 0.0) final_acc.step(f, w, rem, &var, with_cov);

        res.dr.push_back(final_acc.dr);
        res.dv.push_back(final_acc.dv);
        res.dp.push_back(final_acc.dp);
        if (out != nullptr) {
            Upm& u = (*out)[i];
            u.t = target;
            u.delta_r = final_acc.dr;
            u.delta_v = final_acc.dv;
            u.delta_p = final_acc.dp;
            u.cov = final_acc.cov;
            u.j_bf.topRows<3>() = final_acc.jv_bf;
            u.j_bf.bottomRows<3>() = final_acc.jp_bf;
            u.j_bw.block<3, 3>(0, 0) = final_acc.jr_bw;
            u.j_bw.block<3, 3>(3, 0) = final_acc.jv_bw;
            u.j_bw.block<3, 3>(6, 0) = final_acc.jp_bw;
        }
    }
    return res;
}

}  // namespace

std::vector<Upm> compute_upms(const InertialSource& source, double from,
                              const std::vector<double>& targets,
                              const BiasState& bias, const UpmOptions& opts) {
    if (opts.upsample_dt <= 0.0) {
        throw NumericalFailure("upsample_dt must be positive");
    }
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < from || (i > 0 && targets[i] < targets[i - 1])) {
            throw SpanNotCovered("targets must be sorted and >= span start");
        }
    }
    if (!targets.empty()) {
        if (from - bias.dt_prior < source.lo() - 1e-9 ||
            targets.back() - bias.dt_prior > source.hi() + 1e-9) {
            throw SpanNotCovered("inertial source does not cover the span");
        }
    }

    std::vector<Upm> out(targets.size());
    sweep(source, from, targets, bias, bias.dt_prior, opts, &out);

    if (opts.with_dt_jacobian && !targets.empty()) {
        const double h = 0.5 * opts.upsample_dt;
        SweepResult plus =
            sweep(source, from, targets, bias, bias.dt_prior + h, opts, nullptr);
        SweepResult minus =
            sweep(source, from, targets, bias, bias.dt_prior - h, opts, nullptr);
        for (size_t i = 0; i < targets.size(); ++i) {
            const Rot3 base_t = out[i].delta_r.transpose();
            const Vec3 dr_plus = (base_t * plus.dr[i]).log();
            const Vec3 dr_minus = (base_t * minus.dr[i]).log();
            out[i].j_dt.segment<3>(0) = (dr_plus - dr_minus) / (2.0 * h);
            out[i].j_dt.segment<3>(3) = (plus.dv[i] - minus.dv[i]) / (2.0 * h);
            out[i].j_dt.segment<3>(6) = (plus.dp[i] - minus.dp[i]) / (2.0 * h);
        }
    }
    return out;
}

Upm compute_upm(const InertialSource& source, double from, double to,
                const BiasState& bias, const UpmOptions& opts) {
    std::vector<double> t{to};
    return compute_upms(source, from, t, bias, opts)[0];
}

Upm preintegrate_classic(const std::vector<ImuSample>& samples, double from,
                         double to, const BiasState& bias,
                         double sigma_acc, double sigma_gyr) {
    if (samples.empty() || samples.front().t > from - bias.dt_prior + 1e-9 ||
        samples.back().t < to - bias.dt_prior - 1e-9) {
        throw SpanNotCovered("IMU samples do not cover the requested span");
    }
    Eigen::Matrix<double, 6, 1> var;
    var.head<3>().setConstant(sigma_acc * sigma_acc);
    var.tail<3>().setConstant(sigma_gyr * sigma_gyr);

    // Integration nodes: span start, every raw sample inside, span end.
    // Readings held constant from the latest sample at or before each node.
    Accum acc;
    double t_node = from;
    size_t idx = 0;
    auto latest_leq = [&](double t) {
        while (idx + 1 < samples.size() && samples[idx + 1].t <= t - bias.dt_prior + 1e-12) {
            ++idx;
        }
        return idx;
    };
    Upm u;
    u.t = to;
    while (t_node < to) {
        const size_t i = latest_leq(t_node);
        double t_next = to;
        if (i + 1 < samples.size()) {
            t_next = std::min(to, samples[i + 1].t + bias.dt_prior);
        }
        if (t_next <= t_node) break;
        const double dt = t_next - t_node;
        const Vec3 f = samples[i].acc - bias.b_f_prior;
        const Vec3 w = samples[i].gyr - bias.b_w_prior;
        acc.step(f, w, dt, &var, sigma_acc > 0.0 || sigma_gyr > 0.0);
        t_node = t_next;
    }
    u.delta_r = acc.dr;
    u.delta_v = acc.dv;
    u.delta_p = acc.dp;
    u.cov = acc.cov;
    u.j_bf.topRows<3>() = acc.jv_bf;
    u.j_bf.bottomRows<3>() = acc.jp_bf;
    u.j_bw.block<3, 3>(0, 0) = acc.jr_bw;
    u.j_bw.block<3, 3>(3, 0) = acc.jv_bw;
    u.j_bw.block<3, 3>(6, 0) = acc.jp_bw;
    return u;
}

CorrectedUpm apply_corrections(const Upm& upm, const Vec3& db_f,
                               const Vec3& db_w, double ddt) {
    CorrectedUpm c;
    const Vec3 dphi = upm.j_bw.block<3, 3>(0, 0) * db_w +
                      upm.j_dt.segment<3>(0) * ddt;
    c.delta_r = upm.delta_r * Rot3::exp(dphi);
    c.delta_v = upm.delta_v + upm.j_bf.topRows<3>() * db_f +
                upm.j_bw.block<3, 3>(3, 0) * db_w +
                upm.j_dt.segment<3>(3) * ddt;
    c.delta_p = upm.delta_p + upm.j_bf.bottomRows<3>() * db_f +
                upm.j_bw.block<3, 3>(6, 0) * db_w +
                upm.j_dt.segment<3>(6) * ddt;
    return c;
}

PredictedState predict_state(const Rot3& rot_m, const Vec3& pos_m,
                             const Vec3& vel_m, const CorrectedUpm& upm,
                             const Vec3& gravity, double dt) {
    PredictedState s;
    s.rot = rot_m * upm.delta_r;
    s.vel = vel_m + dt * gravity + rot_m * upm.delta_v;
    s.pos = pos_m + dt * vel_m + 0.5 * dt * dt * gravity + rot_m * upm.delta_p;
    return s;
}

}  // namespace liom
