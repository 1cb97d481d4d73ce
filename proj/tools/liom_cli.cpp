// Command line front door: dataset simulation, estimation runs,
// calibration, evaluation, map export and Monte-Carlo batches.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include "liom/eval.hpp"
#include "liom/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace liom;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct SimOptions {
    std::string profile = "slow";
    uint64_t seed = 1;
    double duration = 10.0;
    bool closed_loop = false;
    bool noiseless = false;
    bool calib_identity = false;
    double imu_multiplier = 1.0;
    double bias_walk_acc = 0.0;
    double bias_walk_gyr = 0.0;
};

sim::Profile parse_profile(const std::string& s) {
    if (s == "slow") return sim::Profile::Slow;
    if (s == "moderate") return sim::Profile::Moderate;
    if (s == "fast") return sim::Profile::Fast;
    throw DataError("unknown profile: " + s);
}

// Deterministic per-seed sensor truth: small biases, a 2 ms clock offset
// and a randomly drawn extrinsic transform.
sim::SensorSpec make_spec(const SimOptions& o) {
    sim::SensorSpec spec;
    spec.noiseless = o.noiseless;
    spec.imu_multiplier = o.imu_multiplier;
    spec.imu_bias_walk_acc = o.bias_walk_acc;
    spec.imu_bias_walk_gyr = o.bias_walk_gyr;
    std::mt19937_64 rng(o.seed ^ 0xced1bead5eedull);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    spec.true_bias_acc = 0.03 * Vec3(u(rng), u(rng), u(rng));
    spec.true_bias_gyr = 0.0015 * Vec3(u(rng), u(rng), u(rng));
    spec.true_time_shift = 2e-3;
    if (!o.calib_identity) {
        const Vec3 axis = Vec3(u(rng), u(rng), u(rng)).normalized();
        spec.true_calib = Pose3(Rot3::exp(0.08 * std::abs(u(rng)) * axis),
                                0.08 * Vec3(u(rng), u(rng), u(rng)));
    }
    return spec;
}

struct SimData {
    sim::SensorSpec spec;
    sim::SineTrajectory traj;
    std::vector<frontend::LidarPoint> lidar;
    std::vector<ImuSample> imu;
    std::vector<io::TrajectoryRow> truth;
    std::vector<int> labels;
};

SimData simulate(const SimOptions& o) {
    SimData d;
    d.spec = make_spec(o);
    d.traj = sim::make_profile(parse_profile(o.profile), o.seed, o.duration,
                               o.closed_loop);
    const auto world = sim::PlaneWorld::default_room();
    auto rendered = sim::render_lidar(world, d.traj, d.spec, 0.0, o.duration,
                                      o.seed * 3 + 1);
    d.lidar = std::move(rendered.points);
    d.labels = std::move(rendered.plane_ids);
    d.imu = sim::render_imu(d.traj, d.spec, -0.25, o.duration + 0.25, o.seed * 3 + 2);

    // Dense truth on a 1 ms grid covering all frame-start times.
    for (double t = 0.0; t <= o.duration + 1e-9; t += 1e-3) {
        const auto s = d.traj.at(t, d.spec.gravity);
        d.truth.push_back({t, s.rot, s.pos, s.vel});
    }
    return d;
}

std::vector<io::TrajectoryRow> state_trajectory(const EstimationState& st) {
    std::vector<io::TrajectoryRow> rows;
    rows.reserve(st.frames.size());
    for (const auto& f : st.frames) rows.push_back({f.tau, f.rot, f.pos, f.vel});
    return rows;
}

struct RunResult {
    eval::EvalSummary summary;
    pipeline::RunReport report;
    bool has_summary = false;
    std::string error;
    int exit_code = kExitOk;
};

// Executes a pipeline run and evaluates it against the dataset's truth.
RunResult execute_run(const io::DatasetBundle& bundle,
                      const pipeline::PipelineConfig& cfg, const Pose3& calib_prior,
                      double fail_rmse) {
    RunResult r;
    try {
        pipeline::Pipeline pipe(cfg);
        r.report = pipe.run(bundle.lidar, bundle.imu, calib_prior);
        if (bundle.has_truth) {
            r.summary = eval::compare_trajectories(
                state_trajectory(r.report.state), bundle.truth);
            r.summary.failed = r.summary.failed || r.summary.rmse_pos > fail_rmse ||
                               !std::isfinite(r.summary.rmse_pos);
            r.has_summary = true;
        }
    } catch (const DataError& e) {
        r.error = e.what();
        r.exit_code = kExitData;
        r.summary.failed = true;
    } catch (const NumericalFailure& e) {
        r.error = e.what();
        r.exit_code = kExitNumerical;
        r.summary.failed = true;
    }
    return r;
}

json summary_json(const eval::EvalSummary& s) {
    return json{{"final_pos_m", s.final_pos},   {"final_rot_deg", s.final_rot},
                {"rel_pos_m", s.rel_pos},       {"rel_rot_deg", s.rel_rot},
                {"rmse_pos_m", s.rmse_pos},     {"rmse_rot_deg", s.rmse_rot},
                {"planarity_rms_m", s.planarity_rms}, {"failed", s.failed}};
}

void write_report(const std::string& dir, const RunResult& r) {
    json j;
    j["status"] = r.error.empty() ? "ok" : "error";
    j["error"] = r.error;
    j["frames"] = r.report.frame_taus.size();
    j["solves"] = r.report.solve_count;
    j["lm_iterations"] = r.report.lm_iterations;
    j["feature_recomputations"] = r.report.feature_recomputations;
    j["bias_guard_reactivated"] = r.report.bias_guard_reactivated;
    j["wall_seconds"] = r.report.wall_seconds;
    json loops = json::array();
    for (const auto& l : r.report.loops) {
        loops.push_back({{"frame_a", l.frame_a}, {"frame_b", l.frame_b}, {"tau", l.tau}});
    }
    j["loop_closures"] = loops;
    if (r.has_summary) j["eval"] = summary_json(r.summary);
    std::ofstream out(dir + "/report.json");
    out << j.dump(2) << '\n';
}

void write_run_outputs(const std::string& out_dir, const RunResult& r) {
    fs::create_directories(out_dir);
    if (r.error.empty()) {
        io::save_trajectory_csv(out_dir + "/trajectory.csv",
                                state_trajectory(r.report.state));
        io::save_state_csv(out_dir + "/state.csv", r.report.state);
        if (r.has_summary) eval::save_eval_csv(out_dir + "/eval.csv", r.summary);
    }
    write_report(out_dir, r);
}

Pose3 parse_pose(const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
    if (v.size() != 7) throw DataError("pose must be qw,qx,qy,qz,x,y,z");
    return Pose3(Rot3::from_quaternion(v[0], v[1], v[2], v[3]), Vec3(v[4], v[5], v[6]));
}

// Calibration guess: the dataset's true extrinsics perturbed by the given
// rotation/translation error magnitudes.
Pose3 perturbed_calib(const Pose3& truth, double err_m, double err_deg,
                      uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9a1bca11ull);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const Vec3 axis = Vec3(u(rng), u(rng), u(rng)).normalized();
    const Vec3 dir = Vec3(u(rng), u(rng), u(rng)).normalized();
    return Pose3(truth.rot * Rot3::exp(err_deg * M_PI / 180.0 * axis),
                 truth.trans + err_m * dir);
}

pipeline::PipelineConfig build_config(const std::string& config_path,
                                      const std::string& mode,
                                      const io::DatasetBundle& bundle) {
    pipeline::PipelineConfig cfg;
    cfg.loop.enabled = mode == "slam";
    // Sensor noise levels follow the dataset metadata.
    cfg.sigma_range = std::max(bundle.spec.sigma_range, 1e-4);
    cfg.sigma_acc = std::max(bundle.spec.sigma_acc, 1e-4);
    cfg.sigma_gyr = std::max(bundle.spec.sigma_gyr, 1e-5);
    if (bundle.spec.noiseless) {
        cfg.sigma_range = 1e-3;
        cfg.sigma_acc = 1e-3;
        cfg.sigma_gyr = 1e-4;
    }
    cfg.frontend.mean_err_th = 2.0 * cfg.sigma_range;
    cfg.frontend.max_err_th = 4.0 * cfg.sigma_range;
    cfg.frontend.range_noise_gate = 3.0 * cfg.sigma_range;
    if (!config_path.empty()) io::apply_config(io::load_config(config_path), &cfg);
    return cfg;
}

int run_montecarlo(const SimOptions& base, int trials, const std::string& mode,
                   const std::string& config_path, const std::string& out_csv,
                   double fail_rmse, int jobs) {
    struct Trial {
        eval::EvalSummary s;
        bool done = false;
    };
    std::vector<Trial> results(trials);

    auto worker = [&](int t) {
        SimOptions o = base;
        o.seed = base.seed + static_cast<uint64_t>(t);
        const SimData d = simulate(o);
        io::DatasetBundle bundle;
        bundle.lidar = d.lidar;
        bundle.imu = d.imu;
        bundle.truth = d.truth;
        bundle.has_truth = true;
        bundle.spec = d.spec;
        const auto cfg = build_config(config_path, mode, bundle);
        const auto r = execute_run(bundle, cfg, d.spec.true_calib, fail_rmse);
        results[t].s = r.summary;
        results[t].done = true;
    };

    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int j = 0; j < std::max(1, jobs); ++j) {
        pool.emplace_back([&]() {
            for (int t = next.fetch_add(1); t < trials; t = next.fetch_add(1)) {
                worker(t);
            }
        });
    }
    for (auto& th : pool) th.join();

    // Aggregate over successful runs, Table-style mean +- std.
    auto agg = [&](auto getter) {
        double mean = 0.0, m2 = 0.0;
        int n = 0;
        for (const auto& tr : results) {
            if (tr.s.failed) continue;
            const double v = getter(tr.s);
            ++n;
            const double d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        const double std_dev = n > 1 ? std::sqrt(m2 / (n - 1)) : 0.0;
        return std::pair<double, double>(mean, std_dev);
    };

    int fails = 0;
    for (const auto& tr : results) fails += tr.s.failed ? 1 : 0;

    std::ofstream out(out_csv);
    if (!out) throw IoError("cannot write " + out_csv);
    char buf[128];
    out << "metric,mean,std\n";
    std::snprintf(buf, sizeof(buf), "num_fails,%d,0\n", fails);
    out << buf;
    auto row = [&](const char* name, auto getter) {
        const auto [m, s] = agg(getter);
        std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g\n", name, m, s);
        out << buf;
    };
    row("final_pos_m", [](const eval::EvalSummary& s) { return s.final_pos; });
    row("final_rot_deg", [](const eval::EvalSummary& s) { return s.final_rot; });
    row("rel_pos_m", [](const eval::EvalSummary& s) { return s.rel_pos; });
    row("rel_rot_deg", [](const eval::EvalSummary& s) { return s.rel_rot; });
    row("rmse_pos_m", [](const eval::EvalSummary& s) { return s.rmse_pos; });
    row("rmse_rot_deg", [](const eval::EvalSummary& s) { return s.rmse_rot; });
    out << "trial,failed,rmse_pos_m,rmse_rot_deg,final_pos_m,final_rot_deg\n";
    for (int t = 0; t < trials; ++t) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.6g,%.6g,%.6g,%.6g\n", t,
                      results[t].s.failed ? 1 : 0, results[t].s.rmse_pos,
                      results[t].s.rmse_rot, results[t].s.final_pos,
                      results[t].s.final_rot);
        out << buf;
    }
    std::cout << "montecarlo: " << trials << " trials, " << fails
              << " failures, aggregate written to " << out_csv << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lidar-inertial localisation, mapping and calibration toolkit"};
    app.require_subcommand(1);

    // ---- simulate ----
    SimOptions sim_opts;
    std::string sim_out;
    auto* c_sim = app.add_subcommand("simulate", "generate a synthetic dataset");
    c_sim->add_option("--profile", sim_opts.profile, "slow|moderate|fast");
    c_sim->add_option("--seed", sim_opts.seed, "random seed");
    c_sim->add_option("--duration", sim_opts.duration, "seconds");
    c_sim->add_flag("--closed-loop", sim_opts.closed_loop,
                    "first and last poses coincide");
    c_sim->add_flag("--noiseless", sim_opts.noiseless, "no noise, biases or shift");
    c_sim->add_flag("--calib-identity", sim_opts.calib_identity,
                    "identity lidar-IMU extrinsics");
    c_sim->add_option("--imu-multiplier", sim_opts.imu_multiplier,
                      "IMU sensitivity mismatch factor");
    c_sim->add_option("--bias-walk-acc", sim_opts.bias_walk_acc,
                      "in-run accelerometer bias walk, m/s^2/sqrt(s)");
    c_sim->add_option("--bias-walk-gyr", sim_opts.bias_walk_gyr,
                      "in-run gyroscope bias walk, rad/s/sqrt(s)");
    c_sim->add_option("--out", sim_out, "output dataset directory")->required();

    // ---- run ----
    std::string run_dataset, run_out, run_config, run_mode = "odom", run_calib;
    double fail_rmse = 1.0;
    bool run_export_map = false;
    auto* c_run = app.add_subcommand("run", "estimate a trajectory from a dataset");
    c_run->add_option("--dataset", run_dataset)->required();
    c_run->add_option("--out", run_out)->required();
    c_run->add_option("--config", run_config, "flat key = value file");
    c_run->add_option("--mode", run_mode, "odom|slam");
    c_run->add_option("--calib", run_calib,
                      "extrinsic prior qw,qx,qy,qz,x,y,z (default: dataset truth)");
    c_run->add_option("--fail-rmse", fail_rmse, "RMSE position failure gate, m");
    c_run->add_flag("--export-map", run_export_map, "also write map.ply");

    // ---- calibrate ----
    std::string cal_dataset, cal_out, cal_config, cal_guess;
    double cal_err_m = -1.0, cal_err_deg = -1.0;
    uint64_t cal_guess_seed = 1;
    int cal_iterations = 1;
    auto* c_cal = app.add_subcommand("calibrate", "estimate lidar-IMU extrinsics");
    c_cal->add_option("--dataset", cal_dataset)->required();
    c_cal->add_option("--out", cal_out)->required();
    c_cal->add_option("--config", cal_config);
    c_cal->add_option("--guess", cal_guess, "initial guess qw,qx,qy,qz,x,y,z");
    c_cal->add_option("--guess-error-m", cal_err_m,
                      "build the guess from the truth with this translation error");
    c_cal->add_option("--guess-error-deg", cal_err_deg, "... and this rotation error");
    c_cal->add_option("--guess-seed", cal_guess_seed);
    c_cal->add_option("--iterations", cal_iterations,
                      "full calibration passes, reusing the estimate as prior");

    // ---- eval ----
    std::string ev_run, ev_dataset, ev_out;
    bool ev_planarity = false;
    auto* c_eval = app.add_subcommand("eval", "compare a run against ground truth");
    c_eval->add_option("--run", ev_run)->required();
    c_eval->add_option("--dataset", ev_dataset)->required();
    c_eval->add_option("--out", ev_out, "output CSV (default <run>/eval.csv)");
    c_eval->add_flag("--planarity", ev_planarity,
                     "also compute the labeled point-to-plane RMS (recomputes UPMs)");

    // ---- export-map ----
    std::string xm_run, xm_dataset, xm_out;
    auto* c_map = app.add_subcommand("export-map", "project the dataset at a run's state");
    c_map->add_option("--run", xm_run)->required();
    c_map->add_option("--dataset", xm_dataset)->required();
    c_map->add_option("--out", xm_out)->required();

    // ---- montecarlo ----
    SimOptions mc_opts;
    int mc_trials = 10, mc_jobs = 2;
    std::string mc_mode = "odom", mc_config, mc_out;
    double mc_fail_rmse = 1.0;
    auto* c_mc = app.add_subcommand("montecarlo", "seeded batch of simulate+run+eval");
    c_mc->add_option("--profile", mc_opts.profile);
    c_mc->add_option("--seed", mc_opts.seed);
    c_mc->add_option("--duration", mc_opts.duration);
    c_mc->add_option("--trials", mc_trials);
    c_mc->add_option("--mode", mc_mode);
    c_mc->add_option("--config", mc_config);
    c_mc->add_option("--imu-multiplier", mc_opts.imu_multiplier);
    c_mc->add_option("--bias-walk-acc", mc_opts.bias_walk_acc);
    c_mc->add_flag("--closed-loop", mc_opts.closed_loop);
    c_mc->add_option("--fail-rmse", mc_fail_rmse);
    c_mc->add_option("--jobs", mc_jobs, "parallel trials");
    c_mc->add_option("--out", mc_out, "aggregate CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (c_sim->parsed()) {
            const SimData d = simulate(sim_opts);
            io::save_dataset(sim_out, d.spec, d.lidar, d.imu, d.truth, d.labels);
            std::cout << "dataset written to " << sim_out << ": " << d.lidar.size()
                      << " lidar points, " << d.imu.size() << " IMU samples\n";
            return kExitOk;
        }

        if (c_run->parsed()) {
            const auto bundle = io::load_dataset(run_dataset);
            const auto cfg = build_config(run_config, run_mode, bundle);
            const Pose3 prior =
                run_calib.empty() ? bundle.spec.true_calib : parse_pose(run_calib);
            RunResult r = execute_run(bundle, cfg, prior, fail_rmse);
            if (r.error.empty() && run_export_map && !bundle.labels.empty()) {
                pipeline::Pipeline pipe(cfg);  // fresh projection pass
                const auto pts =
                    pipeline::project_dataset(cfg, bundle.lidar, bundle.imu,
                                              r.report.state);
                io::export_map_ply(run_out + "/map.ply", pts);
            }
            write_run_outputs(run_out, r);
            if (r.has_summary) {
                std::cout << "rmse_pos_m " << r.summary.rmse_pos << " rmse_rot_deg "
                          << r.summary.rmse_rot << (r.summary.failed ? " FAILED" : "")
                          << "\n";
            }
            if (!r.error.empty()) std::cerr << "error: " << r.error << "\n";
            return r.exit_code;
        }

        if (c_cal->parsed()) {
            const auto bundle = io::load_dataset(cal_dataset);
            auto cfg = build_config(cal_config, "odom", bundle);
            cfg.calib_mode = true;
            Pose3 guess;
            if (!cal_guess.empty()) {
                guess = parse_pose(cal_guess);
            } else if (cal_err_m >= 0.0 && cal_err_deg >= 0.0) {
                guess = perturbed_calib(bundle.spec.true_calib, cal_err_m,
                                        cal_err_deg, cal_guess_seed);
            } else {
                throw DataError("provide --guess or --guess-error-m/--guess-error-deg");
            }

            RunResult r;
            for (int it = 0; it < std::max(1, cal_iterations); ++it) {
                r = execute_run(bundle, cfg, guess, 1e9);
                if (!r.error.empty()) break;
                guess = r.report.state.calib;
            }
            fs::create_directories(cal_out);
            write_run_outputs(cal_out, r);
            if (r.error.empty()) {
                const Pose3& est = r.report.state.calib;
                const double err_m = (est.trans - bundle.spec.true_calib.trans).norm();
                const double err_deg =
                    rotation_distance(est.rot, bundle.spec.true_calib.rot) * 180.0 / M_PI;
                std::ofstream out(cal_out + "/calib.csv");
                const auto q = est.rot.quaternion();
                out << "qw,qx,qy,qz,x,y,z,err_m,err_deg\n"
                    << q.w() << ',' << q.x() << ',' << q.y() << ',' << q.z() << ','
                    << est.trans.x() << ',' << est.trans.y() << ',' << est.trans.z()
                    << ',' << err_m << ',' << err_deg << '\n';
                std::cout << "calib error: " << err_m << " m, " << err_deg << " deg\n";
            }
            return r.exit_code;
        }

        if (c_eval->parsed()) {
            const auto bundle = io::load_dataset(ev_dataset);
            if (!bundle.has_truth) throw DataError("dataset has no ground truth");
            const auto est = io::load_trajectory_csv(ev_run + "/trajectory.csv");
            auto summary = eval::compare_trajectories(est, bundle.truth);
            if (ev_planarity && !bundle.labels.empty()) {
                const auto state = io::load_state_csv(ev_run + "/state.csv");
                const auto cfg = build_config("", "odom", bundle);
                const auto pts =
                    pipeline::project_dataset(cfg, bundle.lidar, bundle.imu, state);
                // Points of incomplete trailing frames carry no state; the
                // projection covers exactly the complete frames.
                std::vector<int> labels;
                labels.reserve(pts.size());
                auto frames = frontend::assemble_frames(bundle.lidar, cfg.sweep_deg);
                for (const auto& f : frames) {
                    if (!f.complete) continue;
                    for (const auto src : f.source_index) {
                        labels.push_back(bundle.labels[src]);
                    }
                }
                summary.planarity_rms = eval::planarity_rms(pts, labels);
            }
            eval::save_eval_csv(ev_out.empty() ? ev_run + "/eval.csv" : ev_out, summary);
            std::cout << "final_pos_m " << summary.final_pos << " rmse_pos_m "
                      << summary.rmse_pos << " planarity_rms_m "
                      << summary.planarity_rms << "\n";
            return kExitOk;
        }

        if (c_map->parsed()) {
            const auto bundle = io::load_dataset(xm_dataset);
            const auto state = io::load_state_csv(xm_run + "/state.csv");
            const auto cfg = build_config("", "odom", bundle);
            const auto pts =
                pipeline::project_dataset(cfg, bundle.lidar, bundle.imu, state);
            const size_t n = io::export_map_ply(xm_out, pts);
            std::cout << n << " points written to " << xm_out << "\n";
            return kExitOk;
        }

        if (c_mc->parsed()) {
            return run_montecarlo(mc_opts, mc_trials, mc_mode, mc_config, mc_out,
                                  mc_fail_rmse, mc_jobs);
        }
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitUsage;
}
