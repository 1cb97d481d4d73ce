#include "liom/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "liom/errors.hpp"

namespace liom::pipeline {

using factors::BiasFactor;
using factors::BiasKind;
using factors::BiasObservabilityFactor;
using factors::CauchyLoss;
using factors::ImuFactor;
using factors::LidarFactor;
using factors::LidarMember;
using factors::TimeShiftFactor;
using frontend::Association;
using frontend::FeatureSet;
using frontend::LidarFrame;
using frontend::PointRef;
using frontend::WorldFeatures;

Rot3 initialize_attitude(const std::vector<ImuSample>& imu, double t_lo,
                         double t_hi, double gravity) {
    Vec3 mean = Vec3::Zero();
    int n = 0;
    for (const auto& s : imu) {
        if (s.t < t_lo || s.t > t_hi) continue;
        mean += s.acc;
        ++n;
    }
    if (n == 0) throw InsufficientData("no IMU samples for attitude initialisation");
    mean /= static_cast<double>(n);
    if (mean.norm() < 0.1 * gravity) {
        throw InsufficientData("accelerometer magnitude too small to observe gravity");
    }
    // R maps the mean specific force onto the up direction.
    return rotation_between(mean, Vec3(0.0, 0.0, 1.0));
}

namespace {

struct FrameContext {
    LidarFrame frame;
    ImuGp gp;
    bool gp_ready = false;
    std::vector<Upm> upms;  // per point, mean + correction jacobians
    bool upms_loaded = false;
    // Feature-point UPMs with covariance; stable addresses for factors.
    std::map<int, Upm> feature_upms;
    FeatureSet features;
    bool features_ready = false;
    double range_gate = 0.0;  // mean + std of ranges
    Vec3 mean_gyr{Vec3::Zero()};
};

std::vector<double> point_times(const LidarFrame& f) {
    std::vector<double> t(f.points.size());
    for (size_t i = 0; i < f.points.size(); ++i) t[i] = f.points[i].t;
    return t;
}

}  // namespace

struct Pipeline::Impl : frontend::FrameAccess {
    PipelineConfig cfg;
    Vec3 gravity_vec;
    const std::vector<ImuSample>* imu = nullptr;

    std::vector<FrameContext> frames;
    EstimationState state;
    std::vector<Upm> f2f_upms;  // frame-to-frame, index m holds (m-1 -> m)

    // Long-lived factors.
    std::vector<std::shared_ptr<const factors::Factor>> chain_factors;
    std::vector<std::shared_ptr<ImuFactor>> imu_chain;   // index m-1: (m-1, m)
    std::vector<int> imu_chain_next;
    std::shared_ptr<BiasObservabilityFactor> bias_obs;
    // Relaxed trust on the IMU translation/velocity until the gravity
    // direction has been bootstrapped.
    bool bootstrapped = false;
    struct Pair {
        std::vector<std::shared_ptr<LidarFactor>> factors;
    };
    std::map<std::pair<int, int>, Pair> pairs;
    std::vector<std::pair<int, int>> pair_list;

    RunReport report;
    double last_closure_tau = -1e18;

    explicit Impl(const PipelineConfig& c) : cfg(c) {
        gravity_vec = Vec3(0.0, 0.0, -cfg.gravity);
        state.gravity = gravity_vec;
    }

    CauchyLoss loss() const { return CauchyLoss{cfg.cauchy_scale, cfg.cauchy}; }

    // ---- UPM management ----------------------------------------------------

    void fit_gp(int m) {
        FrameContext& fc = frames[m];
        if (fc.gp_ready) return;
        ImuGp::Options o;
        o.overlap = cfg.gp_overlap;
        o.sigma_acc = cfg.sigma_acc;
        o.sigma_gyr = cfg.sigma_gyr;
        o.optimize_hypers = cfg.gp_optimize_hypers;
        fc.gp = ImuGp::fit(*imu, fc.frame.tau, fc.frame.t_end, o);
        fc.gp_ready = true;
    }

    void ensure_upms(int m) {
        FrameContext& fc = frames[m];
        if (fc.upms_loaded) return;
        fit_gp(m);
        GpSource src(fc.gp);
        UpmOptions o;
        o.upsample_dt = cfg.upsample_dt;
        o.with_uncertainty = false;
        fc.upms = compute_upms(src, fc.frame.tau, point_times(fc.frame),
                               state.frames[m].bias_prior(), o);
        fc.upms_loaded = true;
    }

    void evict_upms(int latest) {
        for (int m = 0; m <= latest - cfg.n_upm; ++m) {
            if (frames[m].upms_loaded) {
                frames[m].upms.clear();
                frames[m].upms.shrink_to_fit();
                frames[m].upms_loaded = false;
            }
        }
    }

    // Covariance-bearing UPMs for the frame's current feature points.
    void compute_feature_upms(int m) {
        FrameContext& fc = frames[m];
        std::vector<int> idx;
        idx.insert(idx.end(), fc.features.planar.begin(), fc.features.planar.end());
        idx.insert(idx.end(), fc.features.edge_in.begin(), fc.features.edge_in.end());
        idx.insert(idx.end(), fc.features.edge_out.begin(), fc.features.edge_out.end());
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());

        std::vector<double> targets(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) targets[i] = fc.frame.points[idx[i]].t;

        fit_gp(m);
        GpSource src(fc.gp);
        UpmOptions o;
        o.upsample_dt = cfg.upsample_dt;
        o.with_uncertainty = true;
        const auto upms = compute_upms(src, fc.frame.tau, targets,
                                       state.frames[m].bias_prior(), o);
        fc.feature_upms.clear();
        for (size_t i = 0; i < idx.size(); ++i) fc.feature_upms[idx[i]] = upms[i];
    }

    // ---- Deskewing and features ---------------------------------------------

    Vec3 project_point(int m, int idx, const Upm& upm) const {
        const FrameState& fs = state.frames[m];
        if (cfg.deskew == DeskewModel::ConstantVelocity) {
            const double ds = frames[m].frame.points[idx].t - fs.tau;
            const Vec3 x_i = state.calib.transform(frames[m].frame.points[idx].xyz);
            return fs.rot * (Rot3::exp(ds * frames[m].mean_gyr) * x_i) + fs.pos +
                   ds * fs.vel;
        }
        return project_to_world(fs, upm, state.calib,
                                frames[m].frame.points[idx].xyz, gravity_vec);
    }

    frontend::DeskewedFrame deskew(int m) {
        ensure_upms(m);
        const FrameContext& fc = frames[m];
        const FrameState& fs = state.frames[m];
        const Pose3 calib_inv = state.calib.inverse();
        std::vector<Vec3> pts(fc.frame.points.size());
        for (size_t i = 0; i < pts.size(); ++i) {
            const Vec3 x_w = project_point(m, static_cast<int>(i), fc.upms[i]);
            pts[i] = calib_inv.transform(fs.rot.transpose() * (x_w - fs.pos));
        }
        return frontend::make_deskewed(fc.frame, std::move(pts));
    }

    void extract(int m) {
        FrameContext& fc = frames[m];
        const auto dsk = deskew(m);
        fc.features = frontend::extract_features(fc.frame, dsk, cfg.frontend);
        fc.features_ready = true;
        compute_feature_upms(m);
    }

    // Returns true when the features were recomputed from scratch.
    bool recheck(int m) {
        FrameContext& fc = frames[m];
        if (!fc.features_ready) {
            extract(m);
            return true;
        }
        const auto dsk = deskew(m);
        auto res = frontend::recheck_features(fc.frame, dsk, fc.features, cfg.frontend);
        if (res.recomputed) {
            fc.features = std::move(res.features);
            compute_feature_upms(m);
            ++report.feature_recomputations;
        }
        return res.recomputed;
    }

    // ---- FrameAccess for outlier rejection ----------------------------------

    Vec3 world_point(const PointRef& ref) const override {
        const FrameContext& fc = frames[ref.frame];
        const auto it = fc.feature_upms.find(ref.index);
        if (it != fc.feature_upms.end()) {
            return project_point(ref.frame, ref.index, it->second);
        }
        if (!fc.upms_loaded) {
            throw MissingUpm("UPM array evicted for frame " +
                             std::to_string(ref.frame));
        }
        return project_point(ref.frame, ref.index, fc.upms[ref.index]);
    }

    std::vector<PointRef> line_neighbors(const PointRef& ref,
                                         int each_side) const override {
        const LidarFrame& f = frames[ref.frame].frame;
        const auto& ch = f.channels[f.points[ref.index].ring];
        int pos = -1;
        for (size_t k = 0; k < ch.size(); ++k) {
            if (ch[k] == ref.index) {
                pos = static_cast<int>(k);
                break;
            }
        }
        std::vector<PointRef> out;
        if (pos < 0) return out;
        for (int k = std::max(0, pos - each_side);
             k < std::min<int>(ch.size(), pos + each_side + 1); ++k) {
            if (k != pos) out.push_back({ref.frame, ch[k]});
        }
        return out;
    }

    // ---- Associations and factors -------------------------------------------

    WorldFeatures world_features(int m) {
        const FrameContext& fc = frames[m];
        return frontend::build_world_features(
            m, fc.frame, fc.features, [&](int idx) {
                return project_point(m, idx, fc.feature_upms.at(idx));
            });
    }

    void build_pair(int a, int b) {
        ensure_upms(a);
        ensure_upms(b);
        const WorldFeatures wa = world_features(a);
        const WorldFeatures wb = world_features(b);
        auto assocs = frontend::associate_pair(wa, wb, cfg.frontend);
        assocs = frontend::reject_outliers(assocs, *this, cfg.frontend);

        Pair p;
        p.factors.reserve(assocs.size());
        for (const auto& as : assocs) {
            std::vector<LidarMember> members;
            members.reserve(as.targets.size() + 1);
            auto add_member = [&](const PointRef& ref) {
                LidarMember m;
                m.frame = ref.frame;
                m.point = ref.index;
                m.x_l = frames[ref.frame].frame.points[ref.index].xyz;
                m.upm = &frames[ref.frame].feature_upms.at(ref.index);
                m.ds = frames[ref.frame].frame.points[ref.index].t -
                       frames[ref.frame].frame.tau;
                if (cfg.deskew == DeskewModel::ConstantVelocity) {
                    m.cv_rot = Rot3::exp(m.ds * frames[ref.frame].mean_gyr);
                }
                members.push_back(m);
            };
            add_member(as.query);
            for (const auto& t : as.targets) add_member(t);
            p.factors.push_back(std::make_shared<LidarFactor>(
                std::move(members), as.kind == frontend::AssocKind::Plane,
                state.has_calib, loss(),
                cfg.deskew == DeskewModel::ConstantVelocity));
        }
        const std::pair<int, int> key = std::minmax(a, b);
        if (pairs.find(key) == pairs.end()) pair_list.push_back(key);
        pairs[key] = std::move(p);
    }

    // Sigma_d, robust scale and bisquare weights. The scale estimate is
    // per frame pair: a freshly added (or disturbed) pair standardises
    // against its own residual spread instead of being zeroed wholesale.
    double refresh_lidar() {
        double max_scale = 1.0;
        std::vector<double> whitened;
        for (const auto& [key, p] : pairs) {
            whitened.clear();
            for (const auto& f : p.factors) {
                f->refresh(state, cfg.sigma_range, cfg.lidar_sigma_floor,
                           cfg.bisquare_c, 1.0);
                whitened.push_back(std::abs(f->unweighted_residual(state)) /
                                   f->sigma());
            }
            if (whitened.empty()) continue;
            // Scale from the 80th percentile: a pair that is still far from
            // registration keeps its factors alive even when a majority of
            // its residuals happen to be insensitive to the current error.
            auto q80 = whitened.begin() + (8 * whitened.size()) / 10;
            if (q80 == whitened.end()) --q80;
            std::nth_element(whitened.begin(), q80, whitened.end());
            const double mult = std::max(1.0, *q80 / 1.2816);
            max_scale = std::max(max_scale, mult);
            for (const auto& f : p.factors) {
                f->refresh(state, cfg.sigma_range, cfg.lidar_sigma_floor,
                           cfg.bisquare_c, mult);
            }
        }
        return max_scale;
    }

    Eigen::Matrix<double, 9, 1> imu_floor() const {
        Eigen::Matrix<double, 9, 1> floor;
        const double relax = bootstrapped ? 1.0 : 1e3;
        floor.segment<3>(0).setConstant(cfg.imu_sigma_floor_r);
        floor.segment<3>(3).setConstant(cfg.imu_sigma_floor_v * relax);
        floor.segment<3>(6).setConstant(cfg.imu_sigma_floor_p * relax);
        return floor;
    }

    solver::Problem assemble() const {
        solver::Problem prob;
        for (const auto& f : chain_factors) prob.add(f);
        for (const auto& f : imu_chain) prob.add(f);
        if (bias_obs) prob.add(bias_obs);
        for (const auto& key : pair_list) {
            for (const auto& f : pairs.at(key).factors) prob.add(f);
        }
        return prob;
    }

    solver::SolveReport optimise() {
        auto prob = assemble();
        auto rep = solver::solve(prob, &state, cfg.solve);
        ++report.solve_count;
        report.lm_iterations += rep.iterations;
        return rep;
    }

    // ---- Frame admission -----------------------------------------------------

    void add_chain_factors(int m) {
        if (m == 0) {
            chain_factors.push_back(
                std::make_shared<TimeShiftFactor>(0, cfg.sigma_dt_prior));
            bias_obs = std::make_shared<BiasObservabilityFactor>(cfg.bias_obs_sigma);
            return;
        }
        const double dtau = frames[m].frame.tau - frames[m - 1].frame.tau;
        chain_factors.push_back(
            std::make_shared<TimeShiftFactor>(m, cfg.sigma_dt_prior));
        chain_factors.push_back(std::make_shared<BiasFactor>(
            m - 1, m, BiasKind::Accelerometer, cfg.sigma_bf_rw * std::sqrt(dtau)));
        chain_factors.push_back(std::make_shared<BiasFactor>(
            m - 1, m, BiasKind::Gyroscope, cfg.sigma_bw_rw * std::sqrt(dtau)));
        if (cfg.imu_factors) {
            imu_chain.push_back(std::make_shared<ImuFactor>(
                m - 1, m, &f2f_upms[m], imu_floor(), loss()));
            imu_chain_next.push_back(m);
        }
    }

    void admit_frame(int m, const std::optional<FrameSeed>& seed) {
        FrameContext& fc = frames[m];

        // Range gate and mean gyro for this frame.
        double mean = 0.0, mean2 = 0.0;
        for (const auto& p : fc.frame.points) {
            const double r = p.xyz.norm();
            mean += r;
            mean2 += r * r;
        }
        mean /= static_cast<double>(fc.frame.points.size());
        fc.range_gate = mean + std::sqrt(std::max(0.0, mean2 / fc.frame.points.size() -
                                                           mean * mean));

        // Frame state slot with preintegration priors carried forward.
        FrameState fs;
        fs.tau = fc.frame.tau;
        if (m == 0) {
            fs.rot = initialize_attitude(*imu, fc.frame.tau - cfg.gp_overlap,
                                         fc.frame.t_end + cfg.gp_overlap,
                                         cfg.gravity);
            fs.pos = Vec3::Zero();
            fs.vel = Vec3::Zero();
        } else {
            const FrameState& prev = state.frames[m - 1];
            fs.bf_prior = prev.bias_acc_total();
            fs.bw_prior = prev.bias_gyr_total();
            fs.dt_prior = prev.time_shift_total();
        }
        state.frames.push_back(fs);

        int n_g = 0;
        for (const auto& s : *imu) {
            if (s.t >= fc.frame.tau && s.t <= fc.frame.t_end) {
                frames[m].mean_gyr += s.gyr;
                ++n_g;
            }
        }
        if (n_g > 0) frames[m].mean_gyr = frames[m].mean_gyr / n_g - fs.bw_prior;

        ensure_upms(m);

        if (m > 0) {
            // Frame-to-frame preintegration with the previous frame's priors.
            fit_gp(m - 1);
            GpSource src(frames[m - 1].gp);
            UpmOptions o;
            o.upsample_dt = cfg.upsample_dt;
            o.with_uncertainty = true;
            f2f_upms[m] = compute_upm(src, frames[m - 1].frame.tau, fc.frame.tau,
                                      state.frames[m - 1].bias_prior(), o);

            const FrameState& prev = state.frames[m - 1];
            const CorrectedUpm c = apply_corrections(
                f2f_upms[m], prev.bf_corr, prev.bw_corr, prev.dt_corr);
            const auto pred =
                predict_state(prev.rot, prev.pos, prev.vel, c, gravity_vec,
                              fc.frame.tau - prev.tau);
            state.frames[m].rot = pred.rot;
            state.frames[m].pos = pred.pos;
            state.frames[m].vel = pred.vel;
        }
        if (seed) {
            state.frames[m].rot = seed->rot;
            state.frames[m].pos = seed->pos;
            state.frames[m].vel = seed->vel;
        }

        add_chain_factors(m);
        extract(m);
        if (m > 0) build_pair(m - 1, m);
        refresh_lidar();
        report.frame_taus.push_back(fc.frame.tau);
        if (std::getenv("LIOM_DEBUG") != nullptr) {
            const size_t nf =
                m > 0 ? pairs.at({m - 1, m}).factors.size() : 0;
            std::fprintf(stderr,
                         "[admit %3d] tau=%.2f assoc=%zu |v|=%.2f |bf|=%.3f "
                         "|bw|=%.4f dt=%.4f\n",
                         m, fc.frame.tau, nf, state.frames[m].vel.norm(),
                         state.frames[m].bias_acc_total().norm(),
                         state.frames[m].bias_gyr_total().norm(),
                         state.frames[m].time_shift_total());
        }
    }

    // One optimise + recheck loop over [lo, hi]; runs until the state
    // converges with no feature churn, or the iteration cap.
    void optimise_and_recheck(int lo, int hi, int cap) {
        for (int it = 0; it < cap; ++it) {
            const auto rep = optimise();
            if (std::getenv("LIOM_DEBUG") != nullptr) {
                std::fprintf(stderr,
                             "[solve %3d..%3d it=%d] cost %.3e -> %.3e (%d LM) %s\n",
                             std::max(0, lo), hi, it, rep.initial_cost,
                             rep.final_cost, rep.iterations, rep.status.c_str());
            }
            bool any_recomputed = false;
            for (int f = std::max(0, lo); f <= hi; ++f) {
                if (recheck(f)) any_recomputed = true;
            }
            // Associations track the state; rebuild the affected pairs.
            for (const auto& key : pair_list) {
                if (key.second >= std::max(0, lo) && key.first <= hi) {
                    build_pair(key.first, key.second);
                }
            }
            const double scale = refresh_lidar();
            // Converged only once the robust scales have settled too.
            if (!any_recomputed && rep.converged && scale < 1.5 && it > 0) break;
        }
    }

    // Linear recovery of the gravity direction, the frame velocities and a
    // shared accelerometer-bias increment from the lidar-registered poses
    // and the preintegrations; the state is then re-anchored so gravity
    // points down. The bias column separates gravity tilt from bias once
    // the trajectory carries enough rotation; a Tikhonov prior keeps it
    // near zero before that.
    double bootstrap_gravity() {
        const int m_count = static_cast<int>(state.frames.size());
        if (m_count < 2 || !cfg.imu_factors) {
            bootstrapped = true;
            rebuild_imu_chain();
            return 0.0;
        }
        const int nv = 3 * m_count;
        const int cols = nv + 6;  // velocities, gravity, bias increment
        const int rows = 6 * (m_count - 1) + 3;
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, cols);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(rows);
        const double w_p = 1.0 / 0.01;   // position rows, ~1 cm
        const double w_v = 1.0 / 0.1;    // velocity rows
        const double w_b = 1.0 / 0.05;   // bias prior, m/s^2
        for (int m = 0; m + 1 < m_count; ++m) {
            const FrameState& fa = state.frames[m];
            const FrameState& fb = state.frames[m + 1];
            const double dtau = fb.tau - fa.tau;
            const Upm& u = f2f_upms[m + 1];
            // Evaluated at zero total accelerometer bias so the bias column
            // carries the total and the prior can act on it.
            const CorrectedUpm c =
                apply_corrections(u, Vec3(-fa.bf_prior), fa.bw_corr, fa.dt_corr);
            const Mat3 r_a = fa.rot.matrix();
            const int rp = 6 * m;
            // p_b - p_a = dtau v_a + dtau^2/2 g + R_a (dp + Jp_bf db)
            a.block<3, 3>(rp, 3 * m) = w_p * dtau * Mat3::Identity();
            a.block<3, 3>(rp, nv) = w_p * 0.5 * dtau * dtau * Mat3::Identity();
            a.block<3, 3>(rp, nv + 3) = w_p * r_a * u.j_bf.bottomRows<3>();
            b.segment<3>(rp) = w_p * (fb.pos - fa.pos - fa.rot * c.delta_p);
            // v_b - v_a = dtau g + R_a (dv + Jv_bf db)
            a.block<3, 3>(rp + 3, 3 * m) = -w_v * Mat3::Identity();
            a.block<3, 3>(rp + 3, 3 * (m + 1)) = w_v * Mat3::Identity();
            a.block<3, 3>(rp + 3, nv) = -w_v * dtau * Mat3::Identity();
            a.block<3, 3>(rp + 3, nv + 3) = -w_v * r_a * u.j_bf.topRows<3>();
            b.segment<3>(rp + 3) = w_v * (fa.rot * c.delta_v);
        }
        a.block<3, 3>(rows - 3, nv + 3) = w_b * Mat3::Identity();

        const Eigen::VectorXd x = a.colPivHouseholderQr().solve(b);
        const Vec3 g_est = x.segment<3>(nv);
        const Vec3 db = x.segment<3>(nv + 3);
        const bool first = !bootstrapped;
        bootstrapped = true;
        double tilt = 0.0;
        // The linear model is cruder than the full MAP problem; once the
        // tilt estimate is small, realigning would only inject its own
        // bias, so it acts as a rescue for gross errors only.
        const double apply_thresh = first ? 0.0 : 0.03;
        if (x.allFinite() && g_est.norm() > 0.85 * cfg.gravity &&
            g_est.norm() < 1.15 * cfg.gravity &&
            rotation_between(g_est, gravity_vec).log().norm() > apply_thresh) {
            const Rot3 align = rotation_between(g_est, gravity_vec);
            tilt = align.log().norm();
            for (int m = 0; m < m_count; ++m) {
                state.frames[m].rot = align * state.frames[m].rot;
                state.frames[m].pos = align * state.frames[m].pos;
                state.frames[m].vel = align * Vec3(x.segment<3>(3 * m));
                state.frames[m].bf_corr = db - state.frames[m].bf_prior;
            }
            if (std::getenv("LIOM_DEBUG") != nullptr) {
                std::fprintf(stderr,
                             "[bootstrap] |g|=%.3f tilt=%.2f deg |db|=%.4f\n",
                             g_est.norm(), tilt * 180.0 / M_PI, db.norm());
            }
        }
        rebuild_imu_chain();
        return tilt;
    }

    void rebuild_imu_chain() {
        for (size_t i = 0; i < imu_chain.size(); ++i) {
            const int m = imu_chain_next[i];
            imu_chain[i] = std::make_shared<ImuFactor>(m - 1, m, &f2f_upms[m],
                                                       imu_floor(), loss());
        }
    }

    // ---- Fig. 8 main loop ----------------------------------------------------

    void prepare(const std::vector<frontend::LidarPoint>& lidar,
                 const std::vector<ImuSample>& imu_stream) {
        imu = &imu_stream;
        if (cfg.n_init < 2) throw InsufficientData("n_init must be at least 2");
        auto all = frontend::assemble_frames(lidar, cfg.sweep_deg);
        for (auto& f : all) {
            if (!f.complete) continue;
            FrameContext fc;
            fc.frame = std::move(f);
            fc.frame.id = static_cast<int>(frames.size());
            frames.push_back(std::move(fc));
        }
        if (static_cast<int>(frames.size()) < cfg.n_init) {
            throw InsufficientData("fewer complete frames than the initialisation needs");
        }
        f2f_upms.resize(frames.size());
    }

    RunReport run(const std::vector<frontend::LidarPoint>& lidar,
                  const std::vector<ImuSample>& imu_stream,
                  const Pose3& calib_prior) {
        const auto t_start = std::chrono::steady_clock::now();
        prepare(lidar, imu_stream);
        state.calib = calib_prior;
        state.has_calib = false;

        const int M = static_cast<int>(frames.size());

        // Initialisation: every new frame triggers optimisation and
        // recomputation over everything already in the graph.
        for (int n = 0; n < cfg.n_init; ++n) {
            admit_frame(n, std::nullopt);
            if (n > 0) optimise_and_recheck(0, n, cfg.recheck_cap);
            evict_upms(n);
        }
        for (int round = 0; round < 4; ++round) {
            const double tilt = bootstrap_gravity();
            optimise_and_recheck(0, cfg.n_init - 1, cfg.recheck_cap);
            if (round > 0 && tilt < 2e-3) break;
        }

        const int stride = cfg.calib_mode ? 1 : cfg.n_every;
        for (int n = cfg.n_init; n < M; ++n) {
            admit_frame(n, std::nullopt);
            if (n % stride == 0 || n == M - 1) {
                // Keep refining the gravity direction while the trajectory
                // is short; the alignment is a no-op once it has settled.
                if (n <= 50) bootstrap_gravity();
                optimise_and_recheck(n - cfg.n_every, n, cfg.recheck_cap);
            }
            check_loop_closure(n);
            evict_upms(n);
        }

        release_bias_guard();

        if (cfg.calib_mode) calibration_epilogue(M);

        report.state = state;
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                .count();
        return report;
    }

    void check_loop_closure(int n) {
        if (!cfg.loop.enabled) return;
        std::vector<Pose3> poses;
        std::vector<double> taus, gates;
        poses.reserve(state.frames.size());
        for (size_t i = 0; i < state.frames.size(); ++i) {
            poses.emplace_back(state.frames[i].rot, state.frames[i].pos);
            taus.push_back(state.frames[i].tau);
            gates.push_back(frames[i].range_gate);
        }
        auto icp = [&](int a, int b) {
            const auto wa = world_features(a);
            const auto wb = world_features(b);
            std::vector<Vec3> pa = wa.planar.pts, pb = wb.planar.pts;
            return frontend::icp_fitness_score(pa, pb);
        };
        const auto hit = frontend::detect_loop(n, poses, taus, gates, state.calib,
                                               cfg.loop, last_closure_tau, icp);
        if (!hit) return;
        build_pair(*hit, n);
        const std::pair<int, int> key = std::minmax(*hit, n);
        if (pairs.at(key).factors.empty()) {
            pairs.erase(key);
            pair_list.erase(std::find(pair_list.begin(), pair_list.end(), key));
            return;
        }
        refresh_lidar();
        report.loops.push_back({*hit, n, state.frames[n].tau});
        last_closure_tau = state.frames[n].tau;
        optimise();
    }

    void release_bias_guard() {
        if (!bias_obs) return;
        bias_obs->set_active(false);
        optimise();
        if (state.frames[0].bias_acc_total().norm() > cfg.bias_obs_release_thresh) {
            bias_obs->set_active(true);
            optimise();
            report.bias_guard_reactivated = true;
        }
    }

    void calibration_epilogue(int M) {
        state.has_calib = true;
        // Calibration blocks enter every lidar factor.
        for (const auto& key : pair_list) build_pair(key.first, key.second);
        refresh_lidar();

        for (int it = 0; it < cfg.calib_iter_cap; ++it) {
            const Pose3 before = state.calib;
            optimise();
            bool any = false;
            for (int f = 0; f < M; ++f) {
                if (recheck(f)) any = true;
            }
            for (const auto& key : pair_list) build_pair(key.first, key.second);
            refresh_lidar();
            // Keep the UPM footprint bounded after the full sweep.
            for (int f = 0; f + cfg.n_upm < M; ++f) {
                frames[f].upms.clear();
                frames[f].upms.shrink_to_fit();
                frames[f].upms_loaded = false;
            }
            const double dpos = (state.calib.trans - before.trans).norm();
            const double drot = rotation_distance(state.calib.rot, before.rot);
            if (!any && dpos < cfg.calib_tol_pos && drot < cfg.calib_tol_rot) break;
        }
    }

    RunReport refine(const std::vector<frontend::LidarPoint>& lidar,
                     const std::vector<ImuSample>& imu_stream,
                     const std::vector<FrameSeed>& seeds,
                     const Pose3& calib_prior) {
        const auto t_start = std::chrono::steady_clock::now();
        prepare(lidar, imu_stream);
        state.calib = calib_prior;
        bootstrapped = true;
        if (seeds.size() != frames.size()) {
            throw LengthMismatch("seed count does not match the frame count");
        }
        for (size_t m = 0; m < frames.size(); ++m) {
            admit_frame(static_cast<int>(m), seeds[m]);
        }
        optimise_and_recheck(0, static_cast<int>(frames.size()) - 1,
                             std::max(cfg.recheck_cap, 8));
        release_bias_guard();
        report.state = state;
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                .count();
        return report;
    }

    std::vector<Vec3> export_world_points() {
        std::vector<Vec3> out;
        for (size_t m = 0; m < frames.size(); ++m) {
            ensure_upms(static_cast<int>(m));
            const FrameContext& fc = frames[m];
            for (size_t i = 0; i < fc.frame.points.size(); ++i) {
                out.push_back(project_point(static_cast<int>(m), static_cast<int>(i),
                                            fc.upms[i]));
            }
            frames[m].upms.clear();
            frames[m].upms.shrink_to_fit();
            frames[m].upms_loaded = false;
        }
        return out;
    }
};

Pipeline::Pipeline(const PipelineConfig& cfg) : impl_(new Impl(cfg)) {}
Pipeline::~Pipeline() = default;

RunReport Pipeline::run(const std::vector<frontend::LidarPoint>& lidar,
                        const std::vector<ImuSample>& imu,
                        const Pose3& calib_prior) {
    return impl_->run(lidar, imu, calib_prior);
}

RunReport Pipeline::refine(const std::vector<frontend::LidarPoint>& lidar,
                           const std::vector<ImuSample>& imu,
                           const std::vector<FrameSeed>& seeds,
                           const Pose3& calib_prior) {
    return impl_->refine(lidar, imu, seeds, calib_prior);
}

std::vector<Vec3> Pipeline::export_world_points() {
    return impl_->export_world_points();
}

const EstimationState& Pipeline::state() const { return impl_->state; }

const std::vector<std::pair<int, int>>& Pipeline::lidar_pairs() const {
    return impl_->pair_list;
}

std::vector<Vec3> project_dataset(const PipelineConfig& cfg,
                                  const std::vector<frontend::LidarPoint>& lidar,
                                  const std::vector<ImuSample>& imu,
                                  const EstimationState& state) {
    Pipeline::Impl impl(cfg);
    impl.prepare(lidar, imu);
    if (impl.frames.size() != state.frames.size()) {
        throw LengthMismatch("state frame count does not match the dataset");
    }
    for (size_t m = 0; m < impl.frames.size(); ++m) {
        if (std::abs(impl.frames[m].frame.tau - state.frames[m].tau) > 1e-9) {
            throw LengthMismatch("state frame times do not match the dataset");
        }
    }
    impl.state = state;
    impl.state.gravity = Vec3(0.0, 0.0, -cfg.gravity);
    return impl.export_world_points();
}

}  // namespace liom::pipeline
