#include "liom/simulator.hpp"

#include <cmath>
#include <random>

#include "liom/errors.hpp"

namespace liom::sim {

PlaneWorld PlaneWorld::default_room() {
    PlaneWorld w;
    w.box_lo = Vec3(0.0, 0.0, 0.0);
    w.box_hi = Vec3(10.0, 8.0, 3.0);
    w.planes.push_back({Vec3(1, 0, 0), 0.0});
    w.planes.push_back({Vec3(-1, 0, 0), -10.0});
    w.planes.push_back({Vec3(0, 1, 0), 0.0});
    w.planes.push_back({Vec3(0, -1, 0), -8.0});
    w.planes.push_back({Vec3(0, 0, 1), 0.0});
    w.planes.push_back({Vec3(0, 0, -1), -3.0});
    // Oblique plane cutting the far upper corner.
    Vec3 n = Vec3(1.0, 1.0, 0.5).normalized();
    w.planes.push_back({n, n.dot(Vec3(8.7, 6.8, 2.0))});
    return w;
}

std::optional<double> PlaneWorld::raycast(const Vec3& origin, const Vec3& dir,
                                          int* plane_id) const {
    double best = std::numeric_limits<double>::infinity();
    int best_id = -1;
    for (size_t i = 0; i < planes.size(); ++i) {
        const double denom = planes[i].normal.dot(dir);
        if (std::abs(denom) < 1e-12) continue;
        const double t = (planes[i].offset - planes[i].normal.dot(origin)) / denom;
        if (t < 1e-3 || t >= best) continue;
        const Vec3 hit = origin + t * dir;
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
            if (hit[a] < box_lo[a] - 1e-9 || hit[a] > box_hi[a] + 1e-9) {
                inside = false;
                break;
            }
        }
        if (!inside) continue;
        best = t;
        best_id = static_cast<int>(i);
    }
    if (best_id < 0) return std::nullopt;
    if (plane_id != nullptr) *plane_id = best_id;
    return best;
}

SineTrajectory::Sample SineTrajectory::at(double t, const Vec3& gravity) const {
    if (t < -1e-9 - 2.0 || t > duration + 2.0) {
        throw DataError("trajectory sampled outside its span");
    }
    Sample s;
    Vec3 theta, theta_dot, acc_w;
    for (int a = 0; a < 3; ++a) {
        const double wp = 2.0 * M_PI * freq_pos[a];
        const double ph = wp * t + phase_pos[a];
        s.pos[a] = center[a] + amp_pos[a] * std::sin(ph);
        s.vel[a] = amp_pos[a] * wp * std::cos(ph);
        acc_w[a] = -amp_pos[a] * wp * wp * std::sin(ph);

        const double wr = 2.0 * M_PI * freq_rot[a];
        const double phr = wr * t + phase_rot[a];
        theta[a] = amp_rot[a] * std::sin(phr);
        theta_dot[a] = amp_rot[a] * wr * std::cos(phr);
    }
    s.rot = Rot3::exp(theta);
    s.gyr_body = Rot3::right_jacobian(theta) * theta_dot;
    s.acc_body = s.rot.transpose() * (acc_w - gravity);
    return s;
}

TrajectoryStats measure_trajectory(const SineTrajectory& traj, const Vec3& gravity) {
    TrajectoryStats st;
    const double dt = 1e-3;
    int n = 0;
    for (double t = 0.0; t <= traj.duration; t += dt) {
        const auto s = traj.at(t, gravity);
        st.mean_speed += s.vel.norm();
        st.mean_ang_speed += s.gyr_body.norm();
        ++n;
    }
    st.mean_speed /= n;
    st.mean_ang_speed /= n;
    return st;
}

SineTrajectory make_profile(Profile level, uint64_t seed, double duration,
                            bool closed_loop) {
    double ang_target = 0.0;  // rad/s
    switch (level) {
        case Profile::Slow: ang_target = 14.7 * M_PI / 180.0; break;
        case Profile::Moderate: ang_target = 49.0 * M_PI / 180.0; break;
        case Profile::Fast: ang_target = 125.0 * M_PI / 180.0; break;
    }
    const double speed_target = 4.85;

    std::mt19937_64 rng(seed ^ 0x51f0a3d5u);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    SineTrajectory traj;
    traj.duration = duration;
    traj.seed = seed;
    traj.center = Vec3(5.0, 4.0, 1.5);

    auto snap = [&](double f) {
        if (!closed_loop) return f;
        const double base = 1.0 / duration;
        return std::max(base, std::round(f / base) * base);
    };

    // Frequencies chosen so the amplitude needed for the target speeds
    // stays inside the room.
    traj.freq_pos = Vec3(snap(0.5 + 0.3 * u01(rng)),
                         snap(0.5 + 0.3 * u01(rng)),
                         snap(0.8 + 0.5 * u01(rng)));
    traj.freq_rot = Vec3(snap(0.5 + 0.6 * u01(rng)),
                         snap(0.5 + 0.6 * u01(rng)),
                         snap(0.5 + 0.6 * u01(rng)));
    for (int a = 0; a < 3; ++a) {
        traj.phase_pos[a] = 2.0 * M_PI * u01(rng);
        traj.phase_rot[a] = 2.0 * M_PI * u01(rng);
    }

    // Axis shares of the velocity variance; z deliberately small.
    const Vec3 share_pos(0.45, 0.40, 0.15);
    const Vec3 share_rot(0.40, 0.35, 0.25);
    const double vel_rms = speed_target / 0.92;
    const double ang_rms = ang_target / 0.92;
    for (int a = 0; a < 3; ++a) {
        traj.amp_pos[a] = std::sqrt(2.0 * share_pos[a]) * vel_rms /
                          (2.0 * M_PI * traj.freq_pos[a]);
        traj.amp_rot[a] = std::sqrt(2.0 * share_rot[a]) * ang_rms /
                          (2.0 * M_PI * traj.freq_rot[a]);
    }

    // Rescale against the realised means; velocity responds linearly, the
    // angular speed only approximately (through the Exp map).
    const Vec3 g(0.0, 0.0, -9.80665);
    for (int it = 0; it < 5; ++it) {
        const auto st = measure_trajectory(traj, g);
        const double sv = speed_target / st.mean_speed;
        const double sw = ang_target / st.mean_ang_speed;
        for (int a = 0; a < 3; ++a) {
            traj.amp_pos[a] *= sv;
            traj.amp_rot[a] *= sw;
        }
        if (std::abs(sv - 1.0) < 0.01 && std::abs(sw - 1.0) < 0.01) break;
    }

    // Clamp to the room with margin; trades speed accuracy for safety.
    const Vec3 max_amp(2.3, 1.8, 0.7);
    for (int a = 0; a < 3; ++a) {
        traj.amp_pos[a] = std::min(traj.amp_pos[a], max_amp[a]);
        traj.amp_rot[a] = std::min(traj.amp_rot[a], 0.75);
    }
    return traj;
}

RenderedLidar render_lidar(const PlaneWorld& world, const SineTrajectory& traj,
                           const SensorSpec& spec, double t0, double duration,
                           uint64_t noise_seed) {
    RenderedLidar out;
    std::mt19937_64 rng(noise_seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int n_ch = spec.channels;
    const double firings_per_second = spec.points_per_second / n_ch;
    const double firing_dt = 1.0 / firings_per_second;
    const double az_step = 2.0 * M_PI * spec.spin_hz * firing_dt;
    const int64_t n_firings = static_cast<int64_t>(duration / firing_dt);

    std::vector<double> elev(n_ch), cos_e(n_ch), sin_e(n_ch);
    for (int c = 0; c < n_ch; ++c) {
        elev[c] = (spec.elevation_min_deg +
                   (spec.elevation_max_deg - spec.elevation_min_deg) * c /
                       (n_ch - 1)) * M_PI / 180.0;
        cos_e[c] = std::cos(elev[c]);
        sin_e[c] = std::sin(elev[c]);
    }

    const double sigma = spec.noiseless ? 0.0 : spec.sigma_range;
    out.points.reserve(n_firings * n_ch);
    for (int64_t j = 0; j < n_firings; ++j) {
        const double t = t0 + j * firing_dt;
        const double az = az_step * j;
        const auto s = traj.at(t, spec.gravity);
        const Pose3 t_wi(s.rot, s.pos);
        const Pose3 t_wl = t_wi * spec.true_calib;
        const double ca = std::cos(az), sa = std::sin(az);
        for (int c = 0; c < n_ch; ++c) {
            const Vec3 dir_l(ca * cos_e[c], sa * cos_e[c], sin_e[c]);
            const Vec3 dir_w = t_wl.rot * dir_l;
            int plane_id = -1;
            const auto range = world.raycast(t_wl.trans, dir_w, &plane_id);
            if (!range) continue;
            double rho = *range;
            if (sigma > 0.0) rho += sigma * gauss(rng);
            frontend::LidarPoint p;
            p.t = t;
            p.xyz = rho * dir_l;
            p.ring = c;
            out.points.push_back(p);
            out.plane_ids.push_back(plane_id);
            out.true_imu_poses.push_back(t_wi);
        }
    }
    return out;
}

std::vector<ImuSample> render_imu(const SineTrajectory& traj,
                                  const SensorSpec& spec, double span_lo,
                                  double span_hi, uint64_t noise_seed) {
    std::mt19937_64 rng(noise_seed ^ 0xc2b2ae3d27d4eb4full);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double dt = 1.0 / spec.imu_rate;
    const double shift = spec.noiseless ? 0.0 : spec.true_time_shift;
    const Vec3 ba = spec.noiseless ? Vec3::Zero() : spec.true_bias_acc;
    const Vec3 bw = spec.noiseless ? Vec3::Zero() : spec.true_bias_gyr;
    const double sa = spec.noiseless ? 0.0 : spec.sigma_acc;
    const double sg = spec.noiseless ? 0.0 : spec.sigma_gyr;

    Vec3 walk_a = Vec3::Zero(), walk_w = Vec3::Zero();
    std::vector<ImuSample> out;
    const int64_t i0 = static_cast<int64_t>(std::floor(span_lo / dt));
    const int64_t i1 = static_cast<int64_t>(std::ceil(span_hi / dt));
    out.reserve(i1 - i0 + 1);
    for (int64_t i = i0; i <= i1; ++i) {
        const double t_true = i * dt;
        const auto s = traj.at(t_true, spec.gravity);
        ImuSample m;
        m.t = t_true - shift;
        m.acc = spec.imu_multiplier * s.acc_body + ba + walk_a;
        m.gyr = spec.imu_multiplier * s.gyr_body + bw + walk_w;
        if (sa > 0.0) {
            for (int a = 0; a < 3; ++a) m.acc[a] += sa * gauss(rng);
        }
        if (sg > 0.0) {
            for (int a = 0; a < 3; ++a) m.gyr[a] += sg * gauss(rng);
        }
        if (!spec.noiseless && spec.imu_bias_walk_acc > 0.0) {
            for (int a = 0; a < 3; ++a) {
                walk_a[a] += spec.imu_bias_walk_acc * std::sqrt(dt) * gauss(rng);
            }
        }
        if (!spec.noiseless && spec.imu_bias_walk_gyr > 0.0) {
            for (int a = 0; a < 3; ++a) {
                walk_w[a] += spec.imu_bias_walk_gyr * std::sqrt(dt) * gauss(rng);
            }
        }
        out.push_back(m);
    }
    return out;
}

}  // namespace liom::sim
