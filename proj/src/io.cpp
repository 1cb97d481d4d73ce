#include "liom/io.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "liom/errors.hpp"

namespace liom::io {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<double> parse_row(const std::string& line, size_t expected,
                              const std::string& path, int line_no) {
    std::vector<double> out;
    out.reserve(expected);
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
        double v;
        const auto [next, ec] = std::from_chars(p, end, v);
        if (ec != std::errc()) throw ParseError(path, line_no, "bad number");
        out.push_back(v);
        p = next;
        if (p < end) {
            if (*p != ',') throw ParseError(path, line_no, "expected comma");
            ++p;
        }
    }
    if (out.size() != expected) {
        throw ParseError(path, line_no,
                         "expected " + std::to_string(expected) + " fields, got " +
                             std::to_string(out.size()));
    }
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return in;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    return out;
}

}  // namespace

std::vector<ImuSample> load_imu_csv(const std::string& path) {
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);
    if (line != "t,fx,fy,fz,wx,wy,wz") throw ParseError(path, 1, "bad IMU header");
    std::vector<ImuSample> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto v = parse_row(line, 7, path, line_no);
        ImuSample s{v[0], Vec3(v[1], v[2], v[3]), Vec3(v[4], v[5], v[6])};
        if (!out.empty() && s.t <= out.back().t) {
            throw NonMonotonicTime(path, line_no);
        }
        out.push_back(s);
    }
    return out;
}

void save_imu_csv(const std::string& path, const std::vector<ImuSample>& samples) {
    auto out = open_out(path);
    out << "t,fx,fy,fz,wx,wy,wz\n";
    for (const auto& s : samples) {
        out << fmt(s.t) << ',' << fmt(s.acc.x()) << ',' << fmt(s.acc.y()) << ','
            << fmt(s.acc.z()) << ',' << fmt(s.gyr.x()) << ',' << fmt(s.gyr.y())
            << ',' << fmt(s.gyr.z()) << '\n';
    }
}

std::vector<frontend::LidarPoint> load_lidar_csv(const std::string& path) {
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);
    if (line != "t,x,y,z,ring") throw ParseError(path, 1, "bad lidar header");
    std::vector<frontend::LidarPoint> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto v = parse_row(line, 5, path, line_no);
        frontend::LidarPoint p;
        p.t = v[0];
        p.xyz = Vec3(v[1], v[2], v[3]);
        p.ring = static_cast<int>(v[4]);
        if (!out.empty() && p.t < out.back().t) throw NonMonotonicTime(path, line_no);
        if (!p.xyz.allFinite()) throw ParseError(path, line_no, "non-finite point");
        out.push_back(p);
    }
    return out;
}

void save_lidar_csv(const std::string& path,
                    const std::vector<frontend::LidarPoint>& points) {
    auto out = open_out(path);
    out << "t,x,y,z,ring\n";
    for (const auto& p : points) {
        out << fmt(p.t) << ',' << fmt(p.xyz.x()) << ',' << fmt(p.xyz.y()) << ','
            << fmt(p.xyz.z()) << ',' << p.ring << '\n';
    }
}

std::vector<TrajectoryRow> load_trajectory_csv(const std::string& path) {
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);
    if (line != "tau,qw,qx,qy,qz,px,py,pz,vx,vy,vz") {
        throw ParseError(path, 1, "bad trajectory header");
    }
    std::vector<TrajectoryRow> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto v = parse_row(line, 11, path, line_no);
        TrajectoryRow r;
        r.tau = v[0];
        r.rot = Rot3::from_quaternion(v[1], v[2], v[3], v[4]);
        r.pos = Vec3(v[5], v[6], v[7]);
        r.vel = Vec3(v[8], v[9], v[10]);
        out.push_back(r);
    }
    return out;
}

void save_trajectory_csv(const std::string& path,
                         const std::vector<TrajectoryRow>& rows) {
    auto out = open_out(path);
    out << "tau,qw,qx,qy,qz,px,py,pz,vx,vy,vz\n";
    for (const auto& r : rows) {
        const auto q = r.rot.quaternion();
        out << fmt(r.tau) << ',' << fmt(q.w()) << ',' << fmt(q.x()) << ','
            << fmt(q.y()) << ',' << fmt(q.z()) << ',' << fmt(r.pos.x()) << ','
            << fmt(r.pos.y()) << ',' << fmt(r.pos.z()) << ',' << fmt(r.vel.x())
            << ',' << fmt(r.vel.y()) << ',' << fmt(r.vel.z()) << '\n';
    }
}

std::vector<int> load_labels_csv(const std::string& path) {
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);
    if (line != "plane") throw ParseError(path, 1, "bad labels header");
    std::vector<int> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(std::stoi(line));
    }
    return out;
}

void save_labels_csv(const std::string& path, const std::vector<int>& labels) {
    auto out = open_out(path);
    out << "plane\n";
    for (int l : labels) out << l << '\n';
}

void save_state_csv(const std::string& path, const EstimationState& state) {
    auto out = open_out(path);
    out << "tau,qw,qx,qy,qz,px,py,pz,vx,vy,vz,"
           "bfpx,bfpy,bfpz,bfcx,bfcy,bfcz,"
           "bwpx,bwpy,bwpz,bwcx,bwcy,bwcz,dtp,dtc\n";
    auto put3 = [&](const Vec3& v) {
        out << ',' << fmt(v.x()) << ',' << fmt(v.y()) << ',' << fmt(v.z());
    };
    for (const auto& f : state.frames) {
        const auto q = f.rot.quaternion();
        out << fmt(f.tau) << ',' << fmt(q.w()) << ',' << fmt(q.x()) << ','
            << fmt(q.y()) << ',' << fmt(q.z());
        put3(f.pos);
        put3(f.vel);
        put3(f.bf_prior);
        put3(f.bf_corr);
        put3(f.bw_prior);
        put3(f.bw_corr);
        out << ',' << fmt(f.dt_prior) << ',' << fmt(f.dt_corr) << '\n';
    }
    // Trailing calibration row flagged by a NaN-free sentinel header line.
    const auto qc = state.calib.rot.quaternion();
    out << "calib," << fmt(qc.w()) << ',' << fmt(qc.x()) << ',' << fmt(qc.y())
        << ',' << fmt(qc.z()) << ',' << fmt(state.calib.trans.x()) << ','
        << fmt(state.calib.trans.y()) << ',' << fmt(state.calib.trans.z()) << ','
        << (state.has_calib ? 1 : 0) << '\n';
}

EstimationState load_state_csv(const std::string& path) {
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);  // header
    EstimationState st;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line.rfind("calib,", 0) == 0) {
            const auto v = parse_row(line.substr(6), 8, path, line_no);
            st.calib = Pose3(Rot3::from_quaternion(v[0], v[1], v[2], v[3]),
                             Vec3(v[4], v[5], v[6]));
            st.has_calib = v[7] != 0.0;
            continue;
        }
        const auto v = parse_row(line, 25, path, line_no);
        FrameState f;
        f.tau = v[0];
        f.rot = Rot3::from_quaternion(v[1], v[2], v[3], v[4]);
        f.pos = Vec3(v[5], v[6], v[7]);
        f.vel = Vec3(v[8], v[9], v[10]);
        f.bf_prior = Vec3(v[11], v[12], v[13]);
        f.bf_corr = Vec3(v[14], v[15], v[16]);
        f.bw_prior = Vec3(v[17], v[18], v[19]);
        f.bw_corr = Vec3(v[20], v[21], v[22]);
        f.dt_prior = v[23];
        f.dt_corr = v[24];
        st.frames.push_back(f);
    }
    return st;
}

size_t export_map_ply(const std::string& path, const std::vector<Vec3>& points) {
    auto out = open_out(path);
    out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
        << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    char buf[96];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f\n", p.x(), p.y(), p.z());
        out << buf;
    }
    return points.size();
}

// ---- Configuration ----------------------------------------------------------

ConfigMap load_config(const std::string& path) {
    auto in = open_in(path);
    ConfigMap out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw ParseError(path, line_no, "expected key = value");
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError(path, line_no, "empty key");
        out[key] = val;
    }
    return out;
}

namespace {

struct ConfigBinder {
    pipeline::PipelineConfig* cfg;
    std::map<std::string, std::function<void(const std::string&)>> setters;
    ConfigMap defaults;

    void bind_double(const std::string& key, double* field) {
        defaults[key] = fmt(*field);
        setters[key] = [field](const std::string& v) { *field = std::stod(v); };
    }
    void bind_int(const std::string& key, int* field) {
        defaults[key] = std::to_string(*field);
        setters[key] = [field](const std::string& v) { *field = std::stoi(v); };
    }
    void bind_bool(const std::string& key, bool* field) {
        defaults[key] = *field ? "true" : "false";
        setters[key] = [field](const std::string& v) {
            *field = v == "true" || v == "1" || v == "on";
        };
    }

    explicit ConfigBinder(pipeline::PipelineConfig* c) : cfg(c) {
        bind_double("sweep_deg", &cfg->sweep_deg);
        bind_double("gp_overlap", &cfg->gp_overlap);
        bind_bool("gp_optimize_hypers", &cfg->gp_optimize_hypers);
        bind_double("sigma_acc", &cfg->sigma_acc);
        bind_double("sigma_gyr", &cfg->sigma_gyr);
        bind_double("sigma_range", &cfg->sigma_range);
        bind_double("upsample_dt", &cfg->upsample_dt);
        bind_int("n_init", &cfg->n_init);
        bind_int("n_every", &cfg->n_every);
        bind_int("n_upm", &cfg->n_upm);
        bind_int("recheck_cap", &cfg->recheck_cap);
        bind_int("feature_neighborhood", &cfg->frontend.neighborhood);
        bind_int("feature_bins", &cfg->frontend.bins_per_channel);
        bind_int("feature_planar_per_bin", &cfg->frontend.planar_per_bin);
        bind_int("feature_edge_per_bin", &cfg->frontend.edge_per_bin);
        bind_double("planar_score_min", &cfg->frontend.planar_score_min);
        bind_double("edge_score_max", &cfg->frontend.edge_score_max);
        bind_double("parallel_beam_cos_max", &cfg->frontend.parallel_beam_cos_max);
        bind_double("theta_keep", &cfg->frontend.theta_keep);
        bind_double("assoc_min_spread", &cfg->frontend.min_spread);
        bind_double("assoc_max_spread", &cfg->frontend.max_spread);
        bind_double("collinear_min_extent", &cfg->frontend.collinear_min_extent);
        bind_bool("loop_enabled", &cfg->loop.enabled);
        bind_double("loop_min_frame_gap", &cfg->loop.min_frame_gap);
        bind_double("loop_min_closure_gap", &cfg->loop.min_closure_gap);
        bind_double("loop_dh_max", &cfg->loop.dh_max);
        bind_double("loop_cos_alpha_min", &cfg->loop.cos_alpha_min);
        bind_bool("loop_icp_gate", &cfg->loop.icp_gate);
        bind_double("loop_icp_fitness_max", &cfg->loop.icp_fitness_max);
        bind_bool("imu_factors", &cfg->imu_factors);
        bind_bool("cauchy", &cfg->cauchy);
        bind_double("cauchy_scale", &cfg->cauchy_scale);
        bind_double("bisquare_c", &cfg->bisquare_c);
        bind_double("sigma_bf_rw", &cfg->sigma_bf_rw);
        bind_double("sigma_bw_rw", &cfg->sigma_bw_rw);
        bind_double("sigma_dt_prior", &cfg->sigma_dt_prior);
        bind_double("bias_obs_sigma", &cfg->bias_obs_sigma);
        bind_double("bias_obs_release_thresh", &cfg->bias_obs_release_thresh);
        bind_double("gravity", &cfg->gravity);
        bind_double("imu_sigma_floor_r", &cfg->imu_sigma_floor_r);
        bind_double("imu_sigma_floor_v", &cfg->imu_sigma_floor_v);
        bind_double("imu_sigma_floor_p", &cfg->imu_sigma_floor_p);
        bind_double("lidar_sigma_floor", &cfg->lidar_sigma_floor);
        bind_int("lm_max_iters", &cfg->solve.max_iters);
        bind_double("lm_lambda_init", &cfg->solve.lambda_init);
        bind_double("lm_cost_tol", &cfg->solve.cost_tol);
        bind_double("lm_step_tol", &cfg->solve.step_tol);
        bind_double("calib_tol_pos", &cfg->calib_tol_pos);
        bind_double("calib_tol_rot", &cfg->calib_tol_rot);
        bind_int("calib_iter_cap", &cfg->calib_iter_cap);
        defaults["deskew_model"] = "upm";
        setters["deskew_model"] = [c](const std::string& v) {
            if (v == "upm") {
                c->deskew = pipeline::DeskewModel::Upm;
            } else if (v == "const_velocity") {
                c->deskew = pipeline::DeskewModel::ConstantVelocity;
            } else {
                throw DataError("deskew_model must be upm or const_velocity");
            }
        };
    }
};

}  // namespace

ConfigMap default_config() {
    pipeline::PipelineConfig cfg;
    ConfigBinder binder(&cfg);
    return binder.defaults;
}

void apply_config(const ConfigMap& overrides, pipeline::PipelineConfig* cfg) {
    ConfigBinder binder(cfg);
    for (const auto& [k, v] : overrides) {
        const auto it = binder.setters.find(k);
        if (it == binder.setters.end()) throw DataError("unknown config key: " + k);
        it->second(v);
    }
}

// ---- Dataset bundle -----------------------------------------------------------

namespace {

void save_meta(const std::string& path, const sim::SensorSpec& spec) {
    auto out = open_out(path);
    const auto q = spec.true_calib.rot.quaternion();
    out << "channels = " << spec.channels << '\n'
        << "spin_hz = " << fmt(spec.spin_hz) << '\n'
        << "points_per_second = " << fmt(spec.points_per_second) << '\n'
        << "imu_rate = " << fmt(spec.imu_rate) << '\n'
        << "sigma_range = " << fmt(spec.sigma_range) << '\n'
        << "sigma_acc = " << fmt(spec.sigma_acc) << '\n'
        << "sigma_gyr = " << fmt(spec.sigma_gyr) << '\n'
        << "true_bias_acc = " << fmt(spec.true_bias_acc.x()) << ' '
        << fmt(spec.true_bias_acc.y()) << ' ' << fmt(spec.true_bias_acc.z()) << '\n'
        << "true_bias_gyr = " << fmt(spec.true_bias_gyr.x()) << ' '
        << fmt(spec.true_bias_gyr.y()) << ' ' << fmt(spec.true_bias_gyr.z()) << '\n'
        << "true_time_shift = " << fmt(spec.true_time_shift) << '\n'
        << "true_calib_q = " << fmt(q.w()) << ' ' << fmt(q.x()) << ' ' << fmt(q.y())
        << ' ' << fmt(q.z()) << '\n'
        << "true_calib_p = " << fmt(spec.true_calib.trans.x()) << ' '
        << fmt(spec.true_calib.trans.y()) << ' ' << fmt(spec.true_calib.trans.z())
        << '\n'
        << "noiseless = " << (spec.noiseless ? 1 : 0) << '\n';
}

Vec3 parse_vec3(const std::string& s) {
    std::istringstream in(s);
    Vec3 v;
    in >> v.x() >> v.y() >> v.z();
    return v;
}

sim::SensorSpec load_meta(const std::string& path) {
    sim::SensorSpec spec;
    const ConfigMap m = load_config(path);
    auto get = [&](const std::string& k) -> std::optional<std::string> {
        const auto it = m.find(k);
        if (it == m.end()) return std::nullopt;
        return it->second;
    };
    if (auto v = get("channels")) spec.channels = std::stoi(*v);
    if (auto v = get("spin_hz")) spec.spin_hz = std::stod(*v);
    if (auto v = get("points_per_second")) spec.points_per_second = std::stod(*v);
    if (auto v = get("imu_rate")) spec.imu_rate = std::stod(*v);
    if (auto v = get("sigma_range")) spec.sigma_range = std::stod(*v);
    if (auto v = get("sigma_acc")) spec.sigma_acc = std::stod(*v);
    if (auto v = get("sigma_gyr")) spec.sigma_gyr = std::stod(*v);
    if (auto v = get("true_bias_acc")) spec.true_bias_acc = parse_vec3(*v);
    if (auto v = get("true_bias_gyr")) spec.true_bias_gyr = parse_vec3(*v);
    if (auto v = get("true_time_shift")) spec.true_time_shift = std::stod(*v);
    if (auto vq = get("true_calib_q")) {
        std::istringstream in(*vq);
        double w, x, y, z;
        in >> w >> x >> y >> z;
        spec.true_calib.rot = Rot3::from_quaternion(w, x, y, z);
    }
    if (auto v = get("true_calib_p")) spec.true_calib.trans = parse_vec3(*v);
    if (auto v = get("noiseless")) spec.noiseless = *v == "1" || *v == "true";
    return spec;
}

}  // namespace

DatasetBundle load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    DatasetBundle b;
    b.lidar = load_lidar_csv(dir + "/lidar.csv");
    b.imu = load_imu_csv(dir + "/imu.csv");
    if (fs::exists(dir + "/meta.cfg")) b.spec = load_meta(dir + "/meta.cfg");
    if (fs::exists(dir + "/truth.csv")) {
        b.truth = load_trajectory_csv(dir + "/truth.csv");
        b.has_truth = !b.truth.empty();
    }
    if (fs::exists(dir + "/labels.csv")) b.labels = load_labels_csv(dir + "/labels.csv");
    return b;
}

void save_dataset(const std::string& dir, const sim::SensorSpec& spec,
                  const std::vector<frontend::LidarPoint>& lidar,
                  const std::vector<ImuSample>& imu,
                  const std::vector<TrajectoryRow>& truth,
                  const std::vector<int>& labels) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_lidar_csv(dir + "/lidar.csv", lidar);
    save_imu_csv(dir + "/imu.csv", imu);
    save_meta(dir + "/meta.cfg", spec);
    if (!truth.empty()) save_trajectory_csv(dir + "/truth.csv", truth);
    if (!labels.empty()) save_labels_csv(dir + "/labels.csv", labels);
}

}  // namespace liom::io
