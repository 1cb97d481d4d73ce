#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "liom/eval.hpp"
#include "liom/io.hpp"

using namespace liom;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("imu csv round trip is bit exact") {
    std::vector<ImuSample> samples;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    double t = 0.0;
    for (int i = 0; i < 50; ++i) {
        t += 0.01 + 1e-4 * std::abs(u(rng));
        samples.push_back({t, Vec3(u(rng), u(rng), u(rng)),
                           Vec3(u(rng), u(rng), u(rng))});
    }
    const auto path = tmp_path("liom_imu_rt.csv");
    io::save_imu_csv(path, samples);
    const auto loaded = io::load_imu_csv(path);
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].t == samples[i].t);
        CHECK(loaded[i].acc == samples[i].acc);
        CHECK(loaded[i].gyr == samples[i].gyr);
    }
    // Re-export is byte identical.
    const auto path2 = tmp_path("liom_imu_rt2.csv");
    io::save_imu_csv(path2, loaded);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("malformed rows are rejected with line numbers") {
    const auto path = tmp_path("liom_bad.csv");
    {
        std::ofstream out(path);
        out << "t,fx,fy,fz,wx,wy,wz\n0.0,1,2,3,4,5,6\n0.01,1,2,3,4,5\n";
    }
    try {
        io::load_imu_csv(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line_number == 3);
    }

    {
        std::ofstream out(path);
        out << "t,fx,fy,fz,wx,wy,wz\n0.0,1,2,3,4,5,6\n0.0,1,2,3,4,5,6\n";
    }
    try {
        io::load_imu_csv(path);
        FAIL("expected NonMonotonicTime");
    } catch (const NonMonotonicTime& e) {
        CHECK(e.line_number == 3);
    }
}

TEST_CASE("lidar csv round trip and monotonicity") {
    std::vector<frontend::LidarPoint> pts;
    for (int i = 0; i < 30; ++i) {
        frontend::LidarPoint p;
        p.t = 0.001 * i;
        p.xyz = Vec3(0.1 * i, -0.2 * i, 1.0);
        p.ring = i % 16;
        pts.push_back(p);
    }
    pts[10].t = pts[9].t;  // equal stamps are allowed for lidar
    const auto path = tmp_path("liom_lidar_rt.csv");
    io::save_lidar_csv(path, pts);
    const auto loaded = io::load_lidar_csv(path);
    REQUIRE(loaded.size() == pts.size());
    for (size_t i = 0; i < pts.size(); ++i) {
        CHECK(loaded[i].t == pts[i].t);
        CHECK(loaded[i].xyz == pts[i].xyz);
        CHECK(loaded[i].ring == pts[i].ring);
    }
}

TEST_CASE("trajectory csv round trip preserves poses") {
    std::vector<io::TrajectoryRow> rows;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 20; ++i) {
        io::TrajectoryRow r;
        r.tau = 0.1 * i;
        r.rot = Rot3::exp(Vec3(u(rng), u(rng), u(rng)));
        r.pos = Vec3(u(rng), u(rng), u(rng));
        r.vel = Vec3(u(rng), u(rng), u(rng));
        rows.push_back(r);
    }
    const auto path = tmp_path("liom_traj_rt.csv");
    io::save_trajectory_csv(path, rows);
    const auto loaded = io::load_trajectory_csv(path);
    REQUIRE(loaded.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK((loaded[i].rot.matrix() - rows[i].rot.matrix()).cwiseAbs().maxCoeff() <
              1e-15);
        CHECK(loaded[i].pos == rows[i].pos);
        CHECK(loaded[i].vel == rows[i].vel);
    }
}

TEST_CASE("state csv round trip") {
    EstimationState st;
    st.has_calib = true;
    st.calib = Pose3(Rot3::exp(Vec3(0.1, 0.2, -0.3)), Vec3(0.5, -0.2, 0.1));
    for (int i = 0; i < 5; ++i) {
        FrameState f;
        f.tau = 0.1 * i;
        f.rot = Rot3::exp(Vec3(0.01 * i, -0.02, 0.3));
        f.pos = Vec3(i, 2 * i, 0.5);
        f.vel = Vec3(0.1, 0.2, -0.1 * i);
        f.bf_prior = Vec3(0.01, 0, 0);
        f.bf_corr = Vec3(0, 0.002, 0);
        f.bw_prior = Vec3(0.001, 0, 0);
        f.bw_corr = Vec3(0, -0.0005, 0);
        f.dt_prior = 0.001;
        f.dt_corr = 0.0005 * i;
        st.frames.push_back(f);
    }
    const auto path = tmp_path("liom_state_rt.csv");
    io::save_state_csv(path, st);
    const auto loaded = io::load_state_csv(path);
    REQUIRE(loaded.frames.size() == st.frames.size());
    CHECK(loaded.has_calib);
    CHECK((loaded.calib.trans - st.calib.trans).norm() < 1e-15);
    for (size_t i = 0; i < st.frames.size(); ++i) {
        CHECK(loaded.frames[i].dt_corr == st.frames[i].dt_corr);
        CHECK(loaded.frames[i].bf_corr == st.frames[i].bf_corr);
        CHECK((loaded.frames[i].pos - st.frames[i].pos).norm() == 0.0);
    }
}

TEST_CASE("ply export counts vertices and repeats byte-identically") {
    std::vector<Vec3> pts{{1, 2, 3}, {4, 5, 6}, {-1, 0, 2.5}};
    const auto a = tmp_path("liom_a.ply");
    const auto b = tmp_path("liom_b.ply");
    CHECK(io::export_map_ply(a, pts) == 3);
    CHECK(io::export_map_ply(b, pts) == 3);
    CHECK(slurp(a) == slurp(b));
    CHECK(io::export_map_ply(a, {}) == 0);
    CHECK(slurp(a).find("element vertex 0") != std::string::npos);
}

TEST_CASE("config parsing") {
    const auto path = tmp_path("liom_cfg.cfg");
    {
        std::ofstream out(path);
        out << "# comment line\n"
            << "n_every = 7\n"
            << "cauchy = false\n"
            << "sigma_range = 0.02  # trailing comment\n";
    }
    const auto cfg_map = io::load_config(path);
    pipeline::PipelineConfig cfg;
    io::apply_config(cfg_map, &cfg);
    CHECK(cfg.n_every == 7);
    CHECK(!cfg.cauchy);
    CHECK(cfg.sigma_range == doctest::Approx(0.02));

    io::ConfigMap bad{{"not_a_key", "1"}};
    CHECK_THROWS_AS(io::apply_config(bad, &cfg), DataError);

    // Every default key applies cleanly.
    pipeline::PipelineConfig fresh;
    io::apply_config(io::default_config(), &fresh);
    CHECK(fresh.n_every == pipeline::PipelineConfig().n_every);
}

TEST_CASE("trajectory comparison metrics") {
    std::vector<io::TrajectoryRow> truth;
    for (int i = 0; i < 50; ++i) {
        io::TrajectoryRow r;
        r.tau = 0.1 * i;
        r.rot = Rot3::exp(Vec3(0, 0, 0.01 * i));
        r.pos = Vec3(0.2 * i, 0.1 * i, 0);
        truth.push_back(r);
    }

    SUBCASE("identical trajectories have zero error") {
        const auto s = eval::compare_trajectories(truth, truth);
        CHECK(s.final_pos == doctest::Approx(0.0));
        CHECK(s.rmse_pos == doctest::Approx(0.0));
        CHECK(s.rel_pos == doctest::Approx(0.0));
        CHECK(s.rmse_rot == doctest::Approx(0.0));
    }

    SUBCASE("constant offsets cancel frame to frame") {
        auto est = truth;
        for (auto& r : est) r.pos += Vec3(0.1, 0, 0);
        // The shared-gauge normalisation also removes a constant offset.
        const auto s = eval::compare_trajectories(est, truth);
        CHECK(s.rel_pos == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(s.rmse_pos == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("a drifting estimate shows up in all error terms") {
        auto est = truth;
        for (size_t i = 0; i < est.size(); ++i) {
            est[i].pos += Vec3(0.002 * i, 0, 0);
        }
        const auto s = eval::compare_trajectories(est, truth);
        CHECK(s.final_pos == doctest::Approx(0.002 * 49));
        CHECK(s.rel_pos == doctest::Approx(0.002));
        CHECK(s.rmse_pos > 0.0);
    }

    SUBCASE("invariant under a common rigid transform") {
        const Pose3 g(Rot3::exp(Vec3(0.3, -0.2, 0.8)), Vec3(5, -2, 1));
        auto est = truth;
        for (size_t i = 0; i < est.size(); ++i) {
            est[i].pos += Vec3(0.001 * i, 0, -0.0005 * i);
        }
        const auto base = eval::compare_trajectories(est, truth);
        auto est2 = est;
        auto truth2 = truth;
        for (auto& r : est2) {
            r.pos = g.transform(r.pos);
            r.rot = g.rot * r.rot;
        }
        for (auto& r : truth2) {
            r.pos = g.transform(r.pos);
            r.rot = g.rot * r.rot;
        }
        const auto moved = eval::compare_trajectories(est2, truth2);
        CHECK(moved.rmse_pos == doctest::Approx(base.rmse_pos).epsilon(1e-9));
        CHECK(moved.final_rot == doctest::Approx(base.final_rot).epsilon(1e-9));
    }
}

TEST_CASE("planarity of noisy synthetic planes") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(0.0, 0.01);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::vector<Vec3> pts;
    std::vector<int> labels;
    for (int i = 0; i < 4000; ++i) {
        pts.emplace_back(u(rng), u(rng), g(rng));
        labels.push_back(0);
    }
    for (int i = 0; i < 4000; ++i) {
        pts.emplace_back(5.0 + g(rng), u(rng), u(rng));
        labels.push_back(1);
    }
    const double rms = eval::planarity_rms(pts, labels);
    CHECK(rms > 0.008);
    CHECK(rms < 0.012);
}
