#include <algorithm>
#include <cmath>

#include "liom/frontend.hpp"

namespace liom::frontend {

namespace {

// Square root of the middle eigenvalue of the scatter of three points:
// the off-line extent used for the collinearity test.
double triple_extent(const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 mean = (a + b + c) / 3.0;
    Mat3 scatter = Mat3::Zero();
    for (const Vec3* p : {&a, &b, &c}) {
        const Vec3 d = *p - mean;
        scatter += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter / 3.0);
    return std::sqrt(std::max(0.0, eig.eigenvalues()(1)));
}


}  // namespace

WorldFeatures build_world_features(
    int frame_id, const LidarFrame& frame, const FeatureSet& feats,
    const std::function<Vec3(int)>& project_point) {
    WorldFeatures w;
    w.frame_id = frame_id;
    auto fill = [&](const std::vector<int>& idx, WorldFeatures::Group* g) {
        g->index = idx;
        g->ring.reserve(idx.size());
        g->pts.reserve(idx.size());
        for (int i : idx) {
            g->ring.push_back(frame.points[i].ring);
            g->pts.push_back(project_point(i));
        }
        g->tree = KdTree(g->pts);
    };
    fill(feats.planar, &w.planar);
    fill(feats.edge_in, &w.edge_in);
    fill(feats.edge_out, &w.edge_out);
    return w;
}

namespace {

// Picks n target points near q satisfying the spread and channel rules;
// later neighbours are substituted when the closest ones violate them.
// For planes (n = 3) the non-collinearity of the picked triple is enforced.
bool pick_targets(const WorldFeatures::Group& g, const Vec3& q, int n,
                  const FrontendConfig& cfg, std::vector<int>* picked) {
    const int k_query = std::min<int>(static_cast<int>(g.pts.size()), 4 * n + 4);
    const auto nn = g.tree.knn(q, k_query);
    if (static_cast<int>(nn.size()) < n) return false;

    picked->clear();
    std::vector<Vec3> chosen;
    for (const auto& cand : nn) {
        if ((g.pts[cand.index] - q).norm() > cfg.max_spread) break;
        bool ok = true;
        for (const Vec3& c : chosen) {
            if ((g.pts[cand.index] - c).norm() < cfg.min_spread) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        if (static_cast<int>(chosen.size()) == n - 1) {
            // Closing the tuple: channel and collinearity rules.
            bool all_same_ring = true;
            for (int i : *picked) {
                if (g.ring[i] != g.ring[cand.index]) all_same_ring = false;
            }
            if (all_same_ring) continue;
            if (n == 3 &&
                triple_extent(g.pts[(*picked)[0]], g.pts[(*picked)[1]],
                              g.pts[cand.index]) < cfg.collinear_min_extent) {
                continue;
            }
        }
        picked->push_back(cand.index);
        chosen.push_back(g.pts[cand.index]);
        if (static_cast<int>(chosen.size()) == n) return true;
    }
    return false;
}

void associate_group(const WorldFeatures::Group& query_g, int query_frame,
                     const WorldFeatures::Group& target_g, int target_frame,
                     AssocKind kind, EdgeOrientation orient,
                     const FrontendConfig& cfg, std::vector<Association>* out) {
    const int n = kind == AssocKind::Plane ? 3 : 2;
    if (target_g.pts.size() < static_cast<size_t>(n)) return;
    std::vector<int> picked;
    for (size_t qi = 0; qi < query_g.pts.size(); ++qi) {
        if (!pick_targets(target_g, query_g.pts[qi], n, cfg, &picked)) continue;
        Association a;
        a.kind = kind;
        a.orientation = orient;
        a.query = {query_frame, query_g.index[qi]};
        for (int t : picked) a.targets.push_back({target_frame, target_g.index[t]});
        if (kind == AssocKind::Edge) {
            // The two following nearest neighbours, for the outlier test.
            const auto nn = target_g.tree.knn(query_g.pts[qi], n + 6);
            for (const auto& cand : nn) {
                if (std::find(picked.begin(), picked.end(), cand.index) !=
                    picked.end()) {
                    continue;
                }
                a.extra_targets.push_back({target_frame, target_g.index[cand.index]});
                if (a.extra_targets.size() == 2) break;
            }
        }
        out->push_back(a);
    }
}

}  // namespace

std::vector<Association> associate(const WorldFeatures& query,
                                   const WorldFeatures& target,
                                   const FrontendConfig& cfg) {
    std::vector<Association> out;
    associate_group(query.planar, query.frame_id, target.planar, target.frame_id,
                    AssocKind::Plane, EdgeOrientation::Inward, cfg, &out);
    associate_group(query.edge_in, query.frame_id, target.edge_in, target.frame_id,
                    AssocKind::Edge, EdgeOrientation::Inward, cfg, &out);
    associate_group(query.edge_out, query.frame_id, target.edge_out,
                    target.frame_id, AssocKind::Edge, EdgeOrientation::Outward,
                    cfg, &out);
    return out;
}

std::vector<Association> associate_pair(const WorldFeatures& a,
                                        const WorldFeatures& b,
                                        const FrontendConfig& cfg) {
    std::vector<Association> out = associate(a, b, cfg);
    std::vector<Association> back = associate(b, a, cfg);
    out.insert(out.end(), back.begin(), back.end());
    return out;
}

std::vector<Association> reject_outliers(const std::vector<Association>& assocs,
                                         const FrameAccess& access,
                                         const FrontendConfig& cfg) {
    std::vector<Association> kept;
    kept.reserve(assocs.size());
    for (const auto& a : assocs) {
        std::vector<Vec3> pts;
        pts.push_back(access.world_point(a.query));
        for (const auto& t : a.targets) pts.push_back(access.world_point(t));

        double spread = 0.0;
        for (size_t i = 0; i < pts.size(); ++i) {
            for (size_t j = i + 1; j < pts.size(); ++j) {
                spread = std::max(spread, (pts[i] - pts[j]).norm());
            }
        }
        if (spread > cfg.max_spread) continue;

        bool valid = true;
        if (a.kind == AssocKind::Plane) {
            const Vec3& xj = pts[1];
            const Vec3& xk = pts[2];
            const Vec3& xl = pts[3];
            const Vec3 n = (xj - xk).cross(xj - xl);
            const double nn = n.norm();
            if (nn < 1e-9) {
                valid = false;
            } else {
                // Patch test: line-neighbours of the matched points must
                // lie on the matched plane within the range noise.
                for (const auto& t : a.targets) {
                    for (const auto& nb : access.line_neighbors(t, cfg.neighborhood)) {
                        const Vec3 u = access.world_point(nb);
                        if (std::abs((u - xj).dot(n) / nn) > cfg.range_noise_gate) {
                            valid = false;
                            break;
                        }
                    }
                    if (!valid) break;
                }
            }
        } else {
            // The matched pair and the two following neighbours must be
            // collinear within the range noise.
            std::vector<Vec3> line_pts{pts[1], pts[2]};
            for (const auto& t : a.extra_targets) {
                line_pts.push_back(access.world_point(t));
            }
            if (line_pts.size() >= 3) {
                Vec3 mean = Vec3::Zero();
                for (const auto& p : line_pts) mean += p;
                mean /= static_cast<double>(line_pts.size());
                Mat3 scatter = Mat3::Zero();
                for (const auto& p : line_pts) {
                    scatter += (p - mean) * (p - mean).transpose();
                }
                Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
                const Vec3 dir = eig.eigenvectors().col(2);
                for (const auto& p : line_pts) {
                    const Vec3 d = p - mean;
                    if ((d - dir * dir.dot(d)).norm() > cfg.range_noise_gate) {
                        valid = false;
                        break;
                    }
                }
            }
        }
        if (valid) kept.push_back(a);
    }
    return kept;
}

LoopMetrics loop_closure_metrics(const Pose3& pose_m, const Pose3& pose_i,
                                 const Pose3& calib) {
    LoopMetrics lm;
    const Vec3 rel =
        calib.inverse().transform(pose_m.inverse().transform(pose_i.transform(calib.trans)));
    lm.d_r = std::sqrt(rel.x() * rel.x() + rel.y() * rel.y());
    lm.d_h = std::abs(rel.z());
    const Vec3 uz(0.0, 0.0, 1.0);
    lm.cos_d_alpha = uz.dot(calib.rot.transpose() *
                            (pose_m.rot.transpose() * (pose_i.rot * (calib.rot * uz))));
    return lm;
}

std::optional<int> detect_loop(
    int query, const std::vector<Pose3>& poses, const std::vector<double>& taus,
    const std::vector<double>& range_gate, const Pose3& calib,
    const LoopConfig& cfg, double last_closure_tau,
    const std::function<double(int, int)>& icp_fitness) {
    if (!cfg.enabled) return std::nullopt;
    if (taus[query] - last_closure_tau < cfg.min_closure_gap) return std::nullopt;
    for (int m = 0; m < query; ++m) {
        if (taus[query] - taus[m] < cfg.min_frame_gap) break;  // taus ascending
        const LoopMetrics lm = loop_closure_metrics(poses[m], poses[query], calib);
        if (lm.d_r > range_gate[query]) continue;
        if (lm.d_h > cfg.dh_max) continue;
        if (std::abs(lm.cos_d_alpha) < cfg.cos_alpha_min) continue;
        if (cfg.icp_gate && icp_fitness &&
            icp_fitness(m, query) > cfg.icp_fitness_max) {
            continue;
        }
        return m;
    }
    return std::nullopt;
}

double icp_fitness_score(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                         int iterations) {
    if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
    KdTree tree(b);
    Rot3 r;
    Vec3 t = Vec3::Zero();
    double fitness = std::numeric_limits<double>::infinity();
    for (int it = 0; it < iterations; ++it) {
        // Correspondences at the current alignment.
        std::vector<Vec3> src, dst;
        double acc = 0.0;
        for (const auto& p : a) {
            const Vec3 q = r * p + t;
            const auto nn = tree.knn(q, 1);
            if (nn.empty()) continue;
            src.push_back(p);
            dst.push_back(tree.point(nn[0].index));
            acc += nn[0].dist2;
        }
        if (src.size() < 3) break;
        fitness = acc / static_cast<double>(src.size());

        Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
        for (size_t i = 0; i < src.size(); ++i) {
            mu_s += src[i];
            mu_d += dst[i];
        }
        mu_s /= static_cast<double>(src.size());
        mu_d /= static_cast<double>(src.size());
        Mat3 h = Mat3::Zero();
        for (size_t i = 0; i < src.size(); ++i) {
            h += (src[i] - mu_s) * (dst[i] - mu_d).transpose();
        }
        Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 rm = svd.matrixV() * svd.matrixU().transpose();
        if (rm.determinant() < 0.0) {
            Mat3 d = Mat3::Identity();
            d(2, 2) = -1.0;
            rm = svd.matrixV() * d * svd.matrixU().transpose();
        }
        r = Rot3(rm);
        t = mu_d - r * mu_s;
    }
    return fitness;
}

}  // namespace liom::frontend
