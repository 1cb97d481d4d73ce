#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "liom/errors.hpp"
#include "liom/factors.hpp"
#include "liom/solver.hpp"

using namespace liom;
using namespace liom::factors;

namespace {

std::mt19937_64 g_rng(2024);

double urand(double lo = -1.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(g_rng);
}
Vec3 vrand(double s = 1.0) { return s * Vec3(urand(), urand(), urand()); }

std::vector<ImuSample> sine_stream(double lo, double hi) {
    std::vector<ImuSample> s;
    for (double t = lo; t <= hi + 1e-12; t += 1e-3) {
        s.push_back({t,
                     Vec3(2.0 * std::sin(4 * t), -1.5 * std::cos(3 * t), 9.5),
                     Vec3(0.6 * std::cos(5 * t), -0.4, 0.8 * std::sin(2 * t))});
    }
    return s;
}

Upm make_upm(double from, double to, const BiasState& bias = {}) {
    static const std::vector<ImuSample> stream = sine_stream(-0.2, 1.0);
    RawSource src(stream, RawInterp::Linear, 0.02, 0.002);
    UpmOptions opts;
    opts.upsample_dt = 1e-3;
    return compute_upm(src, from, to, bias, opts);
}

EstimationState random_state(int n_frames, bool with_calib) {
    EstimationState st;
    st.has_calib = with_calib;
    st.calib = Pose3(Rot3::exp(vrand(0.2)), vrand(0.2));
    for (int i = 0; i < n_frames; ++i) {
        FrameState f;
        f.tau = 0.1 * i;
        f.rot = Rot3::exp(vrand(1.0));
        f.pos = vrand(3.0);
        f.vel = vrand(1.0);
        f.bf_corr = vrand(0.05);
        f.bw_corr = vrand(0.005);
        f.dt_corr = urand(-2e-3, 2e-3);
        st.frames.push_back(f);
    }
    return st;
}

// Applies a tangent-space perturbation to one block coordinate.
void perturb(EstimationState* st, const BlockRef& b, int coord, double h) {
    Vec3 d = Vec3::Zero();
    if (block_dim(b.kind) == 3) d[coord] = h;
    switch (b.kind) {
        case BlockKind::Rot: {
            auto& f = st->frames[b.frame];
            f.rot = f.rot * Rot3::exp(d);
            break;
        }
        case BlockKind::Pos: st->frames[b.frame].pos += d; break;
        case BlockKind::Vel: st->frames[b.frame].vel += d; break;
        case BlockKind::BiasF: st->frames[b.frame].bf_corr += d; break;
        case BlockKind::BiasW: st->frames[b.frame].bw_corr += d; break;
        case BlockKind::Dt: st->frames[b.frame].dt_corr += h; break;
        case BlockKind::CalibRot: st->calib.rot = st->calib.rot * Rot3::exp(d); break;
        case BlockKind::CalibPos: st->calib.trans += d; break;
    }
}

// Max relative error between analytic and central-difference Jacobians.
double jacobian_rel_error(const Factor& f, const EstimationState& state) {
    FactorEval ev;
    f.evaluate(state, true, &ev);
    double worst = 0.0;
    const double h = 1e-6;
    for (size_t b = 0; b < f.blocks().size(); ++b) {
        const int dim = block_dim(f.blocks()[b].kind);
        for (int c = 0; c < dim; ++c) {
            EstimationState plus = state, minus = state;
            perturb(&plus, f.blocks()[b], c, h);
            perturb(&minus, f.blocks()[b], c, -h);
            FactorEval ep, em;
            f.evaluate(plus, false, &ep);
            f.evaluate(minus, false, &em);
            const Eigen::VectorXd fd = (ep.residual - em.residual) / (2.0 * h);
            const Eigen::VectorXd an = ev.jac[b].col(c);
            const double scale = std::max(1.0, an.norm());
            worst = std::max(worst, (fd - an).norm() / scale);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("point_to_line examples") {
    CHECK(point_to_line_residual(Vec3(0.5, 0, 0), Vec3(0, 0, 0), Vec3(1, 0, 0)) ==
          doctest::Approx(0.0));
    CHECK(point_to_line_residual(Vec3(0.5, 1, 0), Vec3(0, 0, 0), Vec3(1, 0, 0)) ==
          doctest::Approx(1.0));
    CHECK_THROWS_AS(point_to_line_residual(Vec3(1, 1, 1), Vec3(2, 2, 2), Vec3(2, 2, 2)),
                    DegenerateGeometry);
}

TEST_CASE("point_to_line equals the parametric minimisation oracle") {
    for (int i = 0; i < 100; ++i) {
        const Vec3 xi = vrand(5), xj = vrand(5), xk = vrand(5);
        if ((xj - xk).norm() < 1e-3) continue;
        // distance from xi to xj + t (xk - xj), minimised in closed form
        const Vec3 d = xk - xj;
        const double t = (xi - xj).dot(d) / d.squaredNorm();
        const double oracle = (xi - (xj + t * d)).norm();
        CHECK(point_to_line_residual(xi, xj, xk) ==
              doctest::Approx(oracle).epsilon(1e-12));
    }
}

TEST_CASE("point_to_plane examples") {
    CHECK(point_to_plane_residual(Vec3(0.3, 0.4, 0), Vec3(0, 0, 0), Vec3(1, 0, 0),
                                  Vec3(0, 1, 0)) == doctest::Approx(0.0));
    // (xj-xk) x (xj-xl) = (-1,0,0) x (0,-1,0) = (0,0,1)
    CHECK(point_to_plane_residual(Vec3(0, 0, 1), Vec3(0, 0, 0), Vec3(1, 0, 0),
                                  Vec3(0, 1, 0)) == doctest::Approx(1.0));
    CHECK_THROWS_AS(point_to_plane_residual(Vec3(0, 0, 1), Vec3(0, 0, 0),
                                            Vec3(1, 1, 1), Vec3(2, 2, 2)),
                    DegenerateGeometry);
}

TEST_CASE("point_to_plane equals the normal-form oracle") {
    for (int i = 0; i < 100; ++i) {
        const Vec3 xi = vrand(5), xj = vrand(5), xk = vrand(5), xl = vrand(5);
        const Vec3 n = (xj - xk).cross(xj - xl);
        if (n.norm() < 1e-3) continue;
        const double oracle = n.normalized().dot(xi - xj);
        CHECK(point_to_plane_residual(xi, xj, xk, xl) ==
              doctest::Approx(oracle).epsilon(1e-12));
    }
}

TEST_CASE("distances are invariant under common rigid transforms") {
    for (int i = 0; i < 50; ++i) {
        const Pose3 T(Rot3::exp(vrand(2.0)), vrand(4.0));
        const Vec3 a = vrand(3), b = vrand(3), c = vrand(3), d = vrand(3);
        if ((b - c).norm() < 1e-3 || (b - c).cross(b - d).norm() < 1e-3) continue;
        CHECK(point_to_line_residual(T.transform(a), T.transform(b), T.transform(c)) ==
              doctest::Approx(point_to_line_residual(a, b, c)).epsilon(1e-9));
        CHECK(point_to_plane_residual(T.transform(a), T.transform(b), T.transform(c),
                                      T.transform(d)) ==
              doctest::Approx(point_to_plane_residual(a, b, c, d)).epsilon(1e-9));
    }
}

TEST_CASE("robust losses") {
    CauchyLoss cauchy{1.0, true};
    CHECK(cauchy.rho(0.0) == doctest::Approx(0.0));
    CHECK(cauchy.weight(0.0) == doctest::Approx(1.0));
    for (double s : {0.1, 1.0, 10.0, 1e4}) {
        CHECK(cauchy.rho(s) < s);  // log(1+x) < x
        CHECK(cauchy.rho(s) > 0.0);
    }
    CHECK(bisquare_weight(0.0, 4.685) == doctest::Approx(1.0));
    CHECK(bisquare_weight(4.685, 4.685) == doctest::Approx(0.0));
    CHECK(bisquare_weight(10.0, 4.685) == doctest::Approx(0.0));
    CHECK(bisquare_weight(2.0, 4.685) > 0.0);
    CHECK(bisquare_weight(2.0, 4.685) < 1.0);
}

TEST_CASE("imu residual vanishes at the predicted state") {
    for (int trial = 0; trial < 20; ++trial) {
        EstimationState st = random_state(2, false);
        st.frames[0].bf_corr.setZero();
        st.frames[0].bw_corr.setZero();
        st.frames[0].dt_corr = 0.0;
        const Upm upm = make_upm(st.frames[0].tau, st.frames[1].tau);
        const CorrectedUpm c{upm.delta_r, upm.delta_v, upm.delta_p};
        const auto pred =
            predict_state(st.frames[0].rot, st.frames[0].pos, st.frames[0].vel, c,
                          st.gravity, st.frames[1].tau - st.frames[0].tau);
        st.frames[1].rot = pred.rot;
        st.frames[1].pos = pred.pos;
        st.frames[1].vel = pred.vel;

        ImuFactor f(0, 1, &upm, Eigen::Matrix<double, 9, 1>::Constant(1e-4),
                    CauchyLoss{1.0, false});
        CHECK(f.unweighted_residual(st).norm() < 1e-9);
    }
}

TEST_CASE("imu residual responds linearly to a velocity change") {
    EstimationState st = random_state(2, false);
    const Upm upm = make_upm(st.frames[0].tau, st.frames[1].tau);
    ImuFactor f(0, 1, &upm, Eigen::Matrix<double, 9, 1>::Constant(1e-4),
                CauchyLoss{1.0, false});
    const auto r0 = f.unweighted_residual(st);
    st.frames[1].vel += Vec3(0.1, 0, 0);
    const auto r1 = f.unweighted_residual(st);
    const Vec3 expect = st.frames[0].rot.transpose() * Vec3(0.1, 0, 0);
    CHECK((r1.segment<3>(3) - r0.segment<3>(3) - expect).norm() < 1e-12);
}

TEST_CASE("imu rotation residual is locally metric") {
    EstimationState st = random_state(2, false);
    const Upm upm = make_upm(st.frames[0].tau, st.frames[1].tau);
    ImuFactor f(0, 1, &upm, Eigen::Matrix<double, 9, 1>::Constant(1e-4),
                CauchyLoss{1.0, false});
    const auto r0 = f.unweighted_residual(st);
    const double eps = 1e-5;
    st.frames[1].rot = st.frames[1].rot * Rot3::exp(Vec3(0, 0, eps));
    const auto r1 = f.unweighted_residual(st);
    CHECK((r1.segment<3>(0) - r0.segment<3>(0)).norm() ==
          doctest::Approx(eps).epsilon(1e-6));
}

TEST_CASE("bias and time-shift residuals") {
    EstimationState st = random_state(2, false);
    st.frames[0].bf_prior = Vec3(0.01, 0, 0);
    st.frames[1].bf_prior = Vec3(0.011, 0, 0);
    st.frames[0].bf_corr.setZero();
    st.frames[1].bf_corr.setZero();
    BiasFactor f(0, 1, BiasKind::Accelerometer, 1.0);
    FactorEval ev;
    f.evaluate(st, false, &ev);
    CHECK((ev.residual - Eigen::Vector3d(1e-3, 0, 0)).norm() < 1e-15);

    st.frames[1].dt_corr = 2e-3;
    TimeShiftFactor ts(1, 1.0);
    ts.evaluate(st, false, &ev);
    CHECK(ev.residual(0) == doctest::Approx(2e-3));

    // Equal totals across frames: zero residual.
    st.frames[0].bf_prior = st.frames[1].bf_prior = Vec3(0.02, -0.01, 0);
    st.frames[0].bf_corr = st.frames[1].bf_corr = Vec3(1e-3, 0, 0);
    f.evaluate(st, false, &ev);
    CHECK(ev.residual.norm() < 1e-15);
}

TEST_CASE("analytic jacobians match finite differences") {
    // 100 random states per factor type, worst relative error <= 1e-4.
    double worst_lidar = 0.0, worst_imu = 0.0, worst_rest = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        EstimationState st = random_state(2, true);

        // Plane factor: members from both frames.
        std::vector<Upm> upms;
        upms.push_back(make_upm(0.0, 0.03 + 0.02 * urand(0, 1)));
        upms.push_back(make_upm(0.1, 0.13 + 0.02 * urand(0, 1)));
        upms.push_back(make_upm(0.1, 0.11));
        upms.push_back(make_upm(0.1, 0.15));
        std::vector<LidarMember> members;
        members.push_back({0, 0, vrand(4.0), &upms[0]});
        members.push_back({1, 1, vrand(4.0), &upms[1]});
        members.push_back({1, 2, vrand(4.0), &upms[2]});
        members.push_back({1, 3, vrand(4.0), &upms[3]});
        LidarFactor plane(members, true, true, CauchyLoss{1.0, false});
        worst_lidar = std::max(worst_lidar, jacobian_rel_error(plane, st));

        std::vector<LidarMember> edge_members(members.begin(), members.begin() + 3);
        LidarFactor edge(edge_members, false, true, CauchyLoss{1.0, false});
        worst_lidar = std::max(worst_lidar, jacobian_rel_error(edge, st));

        const Upm f2f = make_upm(0.0, 0.1);
        ImuFactor imu(0, 1, &f2f, Eigen::Matrix<double, 9, 1>::Constant(1e-3),
                      CauchyLoss{1.0, false});
        worst_imu = std::max(worst_imu, jacobian_rel_error(imu, st));

        BiasFactor bf(0, 1, BiasKind::Accelerometer, 1e-3);
        BiasFactor bw(0, 1, BiasKind::Gyroscope, 1e-4);
        TimeShiftFactor ts(0, 5e-3);
        BiasObservabilityFactor obs(0.1);
        worst_rest = std::max({worst_rest, jacobian_rel_error(bf, st),
                               jacobian_rel_error(bw, st), jacobian_rel_error(ts, st),
                               jacobian_rel_error(obs, st)});
    }
    CHECK(worst_lidar < 1e-4);
    CHECK(worst_imu < 1e-4);
    CHECK(worst_rest < 1e-4);
}

TEST_CASE("calib jacobians are exposed only in calibration mode") {
    std::vector<Upm> upms{make_upm(0.0, 0.05), make_upm(0.1, 0.12),
                          make_upm(0.1, 0.11), make_upm(0.1, 0.15)};
    std::vector<LidarMember> members;
    for (int i = 0; i < 4; ++i) {
        members.push_back({i < 1 ? 0 : 1, i, vrand(4.0), &upms[i]});
    }
    LidarFactor with(members, true, true, CauchyLoss{1.0, false});
    LidarFactor without(members, true, false, CauchyLoss{1.0, false});
    bool has_calib_block = false;
    for (const auto& b : with.blocks()) {
        if (b.kind == BlockKind::CalibRot) has_calib_block = true;
    }
    CHECK(has_calib_block);
    for (const auto& b : without.blocks()) {
        CHECK(b.kind != BlockKind::CalibRot);
        CHECK(b.kind != BlockKind::CalibPos);
    }
}

TEST_CASE("lidar sigma is positive and refresh computes bisquare weights") {
    EstimationState st = random_state(2, false);
    std::vector<Upm> upms{make_upm(0.0, 0.05), make_upm(0.1, 0.12),
                          make_upm(0.1, 0.11), make_upm(0.1, 0.15)};
    std::vector<LidarMember> members;
    for (int i = 0; i < 4; ++i) {
        members.push_back({i < 1 ? 0 : 1, i, vrand(4.0), &upms[i]});
    }
    LidarFactor f(members, true, false, CauchyLoss{1.0, true});
    f.refresh(st, 0.01, 1e-4, 4.685, 1.0);
    CHECK(f.sigma() > 0.0);
    CHECK(f.weight() >= 0.0);
    CHECK(f.weight() <= 1.0);
}
