#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "liom/errors.hpp"
#include "liom/preintegration.hpp"

using namespace liom;

namespace {

std::vector<ImuSample> sampled(double lo, double hi, double rate,
                               const std::function<Vec3(double)>& acc,
                               const std::function<Vec3(double)>& gyr) {
    std::vector<ImuSample> s;
    for (double t = lo; t <= hi + 1e-12; t += 1.0 / rate) {
        s.push_back({t, acc(t), gyr(t)});
    }
    return s;
}

const auto kZero = [](double) { return Vec3::Zero(); };

}  // namespace

TEST_CASE("zero readings preintegrate to identity") {
    auto s = sampled(0.0, 1.0, 100.0, kZero, kZero);
    const Upm u = preintegrate_classic(s, 0.0, 0.7, {});
    CHECK((u.delta_r.matrix() - Mat3::Identity()).norm() < 1e-12);
    CHECK(u.delta_v.norm() < 1e-12);
    CHECK(u.delta_p.norm() < 1e-12);
}

TEST_CASE("constant rate rotation matches closed form") {
    auto s = sampled(0.0, 1.1, 100.0, kZero, [](double) { return Vec3(0, 0, 1); });
    const Upm u = preintegrate_classic(s, 0.0, 1.0, {});
    const Rot3 expect = Rot3::exp(Vec3(0, 0, 1));
    CHECK((u.delta_r.matrix() - expect.matrix()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("constant acceleration double integral") {
    auto s = sampled(0.0, 1.1, 100.0, [](double) { return Vec3(1, 0, 0); }, kZero);
    const Upm u = preintegrate_classic(s, 0.0, 1.0, {});
    CHECK((u.delta_v - Vec3(1, 0, 0)).norm() < 1e-2);
    CHECK((u.delta_p - Vec3(0.5, 0, 0)).norm() < 1e-2);
}

TEST_CASE("classic requires span coverage") {
    auto s = sampled(0.0, 0.5, 100.0, kZero, kZero);
    CHECK_THROWS_AS(preintegrate_classic(s, 0.0, 1.0, {}), SpanNotCovered);
}

TEST_CASE("upm at the span start is the identity with zero covariance") {
    auto s = sampled(-0.1, 0.5, 100.0, [](double) { return Vec3(0, 0, 9.81); }, kZero);
    RawSource src(s, RawInterp::Linear, 0.02, 0.002);
    const Upm u = compute_upm(src, 0.0, 0.0, {}, {});
    CHECK((u.delta_r.matrix() - Mat3::Identity()).norm() == 0.0);
    CHECK(u.delta_v.norm() == 0.0);
    CHECK(u.delta_p.norm() == 0.0);
    CHECK(u.cov.norm() == 0.0);
}

TEST_CASE("static stream: gravity cancels in the state prediction") {
    auto s = sampled(-0.1, 0.5, 100.0, [](double) { return Vec3(0, 0, 9.81); }, kZero);
    RawSource src(s, RawInterp::Linear);
    const double dt = 0.3;
    const Upm u = compute_upm(src, 0.0, dt, {}, {});
    CHECK((u.delta_v - Vec3(0, 0, 9.81 * dt)).norm() < 1e-6);
    CHECK((u.delta_p - Vec3(0, 0, 0.5 * 9.81 * dt * dt)).norm() < 1e-6);

    const CorrectedUpm c = apply_corrections(u, Vec3::Zero(), Vec3::Zero(), 0.0);
    const PredictedState ps = predict_state(Rot3(), Vec3(1, 2, 3), Vec3::Zero(), c,
                                            Vec3(0, 0, -9.81), dt);
    CHECK((ps.pos - Vec3(1, 2, 3)).norm() < 1e-6);
    CHECK(ps.vel.norm() < 1e-6);
}

TEST_CASE("free fall prediction") {
    CorrectedUpm zero{Rot3(), Vec3::Zero(), Vec3::Zero()};
    const PredictedState ps = predict_state(Rot3(), Vec3::Zero(), Vec3::Zero(),
                                            zero, Vec3(0, 0, -9.81), 1.0);
    CHECK(ps.pos.z() == doctest::Approx(-4.905));
    CHECK(ps.vel.z() == doctest::Approx(-9.81));
}

TEST_CASE("identity prediction at dt zero") {
    CorrectedUpm zero{Rot3(), Vec3::Zero(), Vec3::Zero()};
    const Rot3 r = Rot3::exp(Vec3(0.2, 0.1, -0.3));
    const PredictedState ps =
        predict_state(r, Vec3(4, 5, 6), Vec3(1, 1, 1), zero, Vec3(0, 0, -9.81), 0.0);
    CHECK((ps.pos - Vec3(4, 5, 6)).norm() == 0.0);
    CHECK((ps.vel - Vec3(1, 1, 1)).norm() == 0.0);
    CHECK((ps.rot.matrix() - r.matrix()).norm() == 0.0);
}

TEST_CASE("upm with hold interpolation on the raw grid equals classic") {
    auto acc = [](double t) { return Vec3(std::sin(5 * t), 0.3, 9.0 + 0.2 * t); };
    auto gyr = [](double t) { return Vec3(0.2, std::cos(4 * t), -0.1); };
    auto s = sampled(0.0, 0.5, 100.0, acc, gyr);

    BiasState bias;
    bias.b_f_prior = Vec3(0.01, -0.02, 0.005);
    bias.b_w_prior = Vec3(0.001, 0.002, -0.001);

    const double to = 0.40;
    const Upm classic = preintegrate_classic(s, 0.0, to, bias);

    RawSource src(s, RawInterp::ZeroOrderHold);
    UpmOptions opts;
    opts.upsample_dt = 0.01;  // the raw sampling period
    opts.with_uncertainty = false;
    opts.with_dt_jacobian = false;
    const Upm upm = compute_upm(src, 0.0, to, bias, opts);

    CHECK((upm.delta_r.matrix() - classic.delta_r.matrix()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((upm.delta_v - classic.delta_v).norm() < 1e-12);
    CHECK((upm.delta_p - classic.delta_p).norm() < 1e-12);
}

TEST_CASE("chaining matches direct preintegration on smooth streams") {
    auto acc = [](double t) { return Vec3(2.0 * std::sin(3 * t), -1.0, 9.81); };
    auto gyr = [](double t) { return Vec3(0.5 * std::cos(2 * t), 0.2, -0.4); };
    auto s = sampled(-0.05, 0.6, 1000.0, acc, gyr);
    RawSource src(s, RawInterp::Linear);
    UpmOptions opts;
    opts.upsample_dt = 5e-4;
    opts.with_uncertainty = false;
    opts.with_dt_jacobian = false;

    const double ta = 0.2, tb = 0.5;
    const Upm direct = compute_upm(src, 0.0, tb, {}, opts);
    const Upm first = compute_upm(src, 0.0, ta, {}, opts);
    const Upm second = compute_upm(src, ta, tb, {}, opts);

    // Compose the two legs through the prediction equations with zero
    // gravity (it cancels against the raw specific force anyway here).
    const Vec3 g = Vec3::Zero();
    const CorrectedUpm c1{first.delta_r, first.delta_v, first.delta_p};
    const CorrectedUpm c2{second.delta_r, second.delta_v, second.delta_p};
    const PredictedState mid = predict_state(Rot3(), Vec3::Zero(), Vec3::Zero(), c1, g, ta);
    const PredictedState end =
        predict_state(mid.rot, mid.pos, mid.vel, c2, g, tb - ta);

    const PredictedState ref =
        predict_state(Rot3(), Vec3::Zero(), Vec3::Zero(),
                      {direct.delta_r, direct.delta_v, direct.delta_p}, g, tb);
    CHECK((end.rot.matrix() - ref.rot.matrix()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((end.vel - ref.vel).norm() < 1e-6);
    CHECK((end.pos - ref.pos).norm() < 1e-6);
}

TEST_CASE("bias corrections match recomputation to second order") {
    auto acc = [](double t) { return Vec3(2.0 * std::sin(4 * t), 0.5, 9.81); };
    auto gyr = [](double t) { return Vec3(0.3 * std::cos(5 * t), -0.2, 0.5); };
    auto s = sampled(-0.05, 0.4, 1000.0, acc, gyr);
    RawSource src(s, RawInterp::Linear);
    UpmOptions opts;
    opts.upsample_dt = 1e-3;
    opts.with_uncertainty = false;

    const double to = 0.3;
    const Upm base = compute_upm(src, 0.0, to, {}, opts);

    SUBCASE("zero corrections leave values unchanged") {
        const CorrectedUpm c = apply_corrections(base, Vec3::Zero(), Vec3::Zero(), 0.0);
        CHECK((c.delta_r.matrix() - base.delta_r.matrix()).norm() == 0.0);
        CHECK((c.delta_v - base.delta_v).norm() == 0.0);
        CHECK((c.delta_p - base.delta_p).norm() == 0.0);
    }

    SUBCASE("gyroscope bias correction") {
        const Vec3 db_w(1e-4, 0, 0);
        BiasState shifted;
        shifted.b_w_prior = db_w;
        const Upm recomputed = compute_upm(src, 0.0, to, shifted, opts);
        const CorrectedUpm c = apply_corrections(base, Vec3::Zero(), db_w, 0.0);
        CHECK((c.delta_r.transpose() * recomputed.delta_r).log().norm() < 1e-8);
        CHECK((c.delta_v - recomputed.delta_v).norm() < 1e-7);
        CHECK((c.delta_p - recomputed.delta_p).norm() < 1e-7);
    }

    SUBCASE("accelerometer bias correction") {
        const Vec3 db_f(2e-3, -1e-3, 5e-4);
        BiasState shifted;
        shifted.b_f_prior = db_f;
        const Upm recomputed = compute_upm(src, 0.0, to, shifted, opts);
        const CorrectedUpm c = apply_corrections(base, db_f, Vec3::Zero(), 0.0);
        // Linear in b_f, so the match is exact up to integration noise.
        CHECK((c.delta_v - recomputed.delta_v).norm() < 1e-10);
        CHECK((c.delta_p - recomputed.delta_p).norm() < 1e-10);
    }

    SUBCASE("time-shift correction") {
        const double ddt = 1e-3;
        BiasState shifted;
        shifted.dt_prior = ddt;
        const Upm recomputed = compute_upm(src, 0.0, to, shifted, opts);
        const CorrectedUpm c = apply_corrections(base, Vec3::Zero(), Vec3::Zero(), ddt);
        const double err_corr = (c.delta_v - recomputed.delta_v).norm();
        const double err_uncorr = (base.delta_v - recomputed.delta_v).norm();
        CHECK(err_corr < 1e-4);
        CHECK(err_corr < 0.05 * err_uncorr);
    }
}

TEST_CASE("covariance trace grows with the span") {
    auto s = sampled(-0.05, 0.5, 100.0,
                     [](double t) { return Vec3(std::sin(t), 0, 9.81); },
                     [](double) { return Vec3(0.1, 0.2, 0.3); });
    RawSource src(s, RawInterp::Linear, 0.02, 0.002);
    UpmOptions opts;
    opts.with_dt_jacobian = false;
    std::vector<double> targets;
    for (double t = 0.0; t <= 0.4; t += 0.05) targets.push_back(t);
    const auto upms = compute_upms(src, 0.0, targets, {}, opts);
    double prev = -1.0;
    for (const auto& u : upms) {
        const double tr = u.cov.trace();
        CHECK(tr >= prev - 1e-15);
        // Symmetric PSD.
        CHECK((u.cov - u.cov.transpose()).cwiseAbs().maxCoeff() < 1e-9);
        prev = tr;
    }
    CHECK(prev > 0.0);
}

TEST_CASE("span violations raise errors") {
    auto s = sampled(0.0, 0.2, 100.0, kZero, kZero);
    RawSource src(s, RawInterp::Linear);
    CHECK_THROWS_AS(compute_upm(src, 0.0, 0.5, {}, {}), SpanNotCovered);
    std::vector<double> bad{0.2, 0.1};
    CHECK_THROWS_AS(compute_upms(src, 0.0, bad, {}, {}), SpanNotCovered);
}
