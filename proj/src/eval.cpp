#include "liom/eval.hpp"

#include <fstream>

#include <algorithm>
#include <cmath>
#include <map>

#include "liom/errors.hpp"

namespace liom::eval {

namespace {

Pose3 row_pose(const io::TrajectoryRow& r) { return Pose3(r.rot, r.pos); }

// Truth row at the given timestamp; nearest match must be closer than half
// the truth sampling period to count as the same instant.
const io::TrajectoryRow& truth_at(const std::vector<io::TrajectoryRow>& truth,
                                  double tau) {
    auto it = std::lower_bound(
        truth.begin(), truth.end(), tau,
        [](const io::TrajectoryRow& r, double t) { return r.tau < t; });
    const io::TrajectoryRow* best = nullptr;
    double best_err = std::numeric_limits<double>::infinity();
    for (auto cand : {it, it == truth.begin() ? it : std::prev(it)}) {
        if (cand == truth.end()) continue;
        const double e = std::abs(cand->tau - tau);
        if (e < best_err) {
            best_err = e;
            best = &*cand;
        }
    }
    if (best == nullptr || best_err > 1e-4) {
        throw LengthMismatch("no ground-truth sample at t=" + std::to_string(tau));
    }
    return *best;
}

double deg(double rad) { return rad * 180.0 / M_PI; }

}  // namespace

EvalSummary compare_trajectories(const std::vector<io::TrajectoryRow>& estimate,
                                 const std::vector<io::TrajectoryRow>& truth) {
    if (estimate.empty() || truth.empty()) {
        throw LengthMismatch("empty trajectory in evaluation");
    }
    EvalSummary s;

    // Everything relative to the first frame: the estimator's gauge anchor
    // and the ground truth are normalised the same way.
    const Pose3 g_est = row_pose(estimate.front()).inverse();
    const Pose3 g_tru = row_pose(truth_at(truth, estimate.front().tau)).inverse();

    double sum_p2 = 0.0, sum_r2 = 0.0;
    std::vector<Pose3> rel_est, rel_tru;
    Pose3 prev_a, prev_b;
    for (size_t m = 0; m < estimate.size(); ++m) {
        const Pose3 a = g_est * row_pose(estimate[m]);
        const Pose3 b = g_tru * row_pose(truth_at(truth, estimate[m].tau));
        const double ep = (a.trans - b.trans).norm();
        const double er = rotation_distance(a.rot, b.rot);
        if (!std::isfinite(ep) || !std::isfinite(er)) s.failed = true;
        sum_p2 += ep * ep;
        sum_r2 += er * er;
        if (m == estimate.size() - 1) {
            s.final_pos = ep;
            s.final_rot = deg(er);
        }
        if (m > 0) {
            const Pose3 da = prev_a.inverse() * a;
            const Pose3 db = prev_b.inverse() * b;
            s.rel_pos += (da.trans - db.trans).norm();
            s.rel_rot += deg(rotation_distance(da.rot, db.rot));
        }
        prev_a = a;
        prev_b = b;
    }
    const double n = static_cast<double>(estimate.size());
    s.rmse_pos = std::sqrt(sum_p2 / n);
    s.rmse_rot = deg(std::sqrt(sum_r2 / n));
    if (estimate.size() > 1) {
        s.rel_pos /= n - 1.0;
        s.rel_rot /= n - 1.0;
    }
    return s;
}

double planarity_rms(const std::vector<Vec3>& world_points,
                     const std::vector<int>& labels) {
    if (world_points.size() != labels.size()) {
        throw LengthMismatch("labels do not match the point count");
    }
    std::map<int, std::vector<int>> by_label;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= 0) by_label[labels[i]].push_back(static_cast<int>(i));
    }
    double sum2 = 0.0;
    size_t count = 0;
    for (const auto& [label, idx] : by_label) {
        if (idx.size() < 100) continue;
        Vec3 mean = Vec3::Zero();
        for (int i : idx) mean += world_points[i];
        mean /= static_cast<double>(idx.size());
        Mat3 scatter = Mat3::Zero();
        for (int i : idx) {
            const Vec3 d = world_points[i] - mean;
            scatter += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
        const Vec3 normal = eig.eigenvectors().col(0);
        for (int i : idx) {
            const double d = normal.dot(world_points[i] - mean);
            sum2 += d * d;
        }
        count += idx.size();
    }
    if (count == 0) return -1.0;
    return std::sqrt(sum2 / static_cast<double>(count));
}

void save_eval_csv(const std::string& path, const EvalSummary& s) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "metric,value\n";
    out << "final_pos_m," << s.final_pos << '\n';
    out << "final_rot_deg," << s.final_rot << '\n';
    out << "rel_pos_m," << s.rel_pos << '\n';
    out << "rel_rot_deg," << s.rel_rot << '\n';
    out << "rmse_pos_m," << s.rmse_pos << '\n';
    out << "rmse_rot_deg," << s.rmse_rot << '\n';
    out << "planarity_rms_m," << s.planarity_rms << '\n';
    out << "failed," << (s.failed ? 1 : 0) << '\n';
}

}  // namespace liom::eval
