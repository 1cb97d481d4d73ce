#pragma once

#include <functional>
#include <optional>
#include <span>

#include "liom/errors.hpp"
#include "liom/frontend_types.hpp"
#include "liom/kdtree.hpp"

namespace liom::frontend {

struct FrontendConfig {
    int neighborhood = 5;  // points each side of the scored point
    // Appendix regression-error thresholds, metres.
    double mean_err_th = 0.02;
    double max_err_th = 0.04;
    int bins_per_channel = 6;
    int planar_per_bin = 4;
    int edge_per_bin = 2;
    double planar_score_min = 0.95;
    double edge_score_max = 0.7071067811865476;  // cos(45 deg)
    // Reject planar candidates whose fitted lines run close to the beam.
    double parallel_beam_cos_max = 0.966;
    double theta_keep = 0.95;
    double min_spread = 0.05;
    double max_spread = 1.0;
    double collinear_min_extent = 0.01;
    double range_noise_gate = 0.03;  // 3 sigma of the lidar range noise
};

struct EmptyStream : DataError {
    using DataError::DataError;
};

// Cuts the stream into overlapping frames of sweep_deg of azimuth; a new
// frame starts every 360 deg. Trailing frames that never reach the full
// sweep are flagged incomplete.
std::vector<LidarFrame> assemble_frames(const std::vector<LidarPoint>& stream,
                                        double sweep_deg);

// Per-point geometry used by the scorer, after deskewing.
struct DeskewedFrame {
    std::vector<Vec3> pts;
    std::vector<double> range;
    std::vector<double> azimuth;  // unwrapped, consistent with the raw sweep
};
DeskewedFrame make_deskewed(const LidarFrame& frame, std::vector<Vec3> pts);

// Regression score of element i of one channel sequence; ranges/azimuths
// are the channel's points in sweep order. Implements the two-sided fit
// with the occlusion/rejection tests on the regression errors.
ScoredPoint score_point_seq(std::span<const double> ranges,
                            std::span<const double> azimuths, int i,
                            const FrontendConfig& cfg);

FeatureSet extract_features(const LidarFrame& frame, const DeskewedFrame& dsk,
                            const FrontendConfig& cfg);

struct RecheckResult {
    FeatureSet features;
    bool recomputed = false;
    double theta = 1.0;
};
// Rescores only the previously selected points and their stored runner-up
// candidates; falls back to full extraction when the overlap ratio of the
// reselected sets drops below theta_keep.
RecheckResult recheck_features(const LidarFrame& frame, const DeskewedFrame& dsk,
                               const FeatureSet& previous,
                               const FrontendConfig& cfg);

// Features of one frame projected into the world for matching.
struct WorldFeatures {
    int frame_id = -1;
    struct Group {
        std::vector<int> index;   // point index in the frame
        std::vector<int> ring;
        std::vector<Vec3> pts;
        KdTree tree;
    };
    Group planar, edge_in, edge_out;
};
WorldFeatures build_world_features(
    int frame_id, const LidarFrame& frame, const FeatureSet& feats,
    const std::function<Vec3(int)>& project_point);

// One-directional matching: 3 spread non-collinear planar neighbours,
// 2 spread edge neighbours of matching orientation. Edge associations
// carry the two following neighbours for the outlier test.
std::vector<Association> associate(const WorldFeatures& query,
                                   const WorldFeatures& target,
                                   const FrontendConfig& cfg);

// Back-and-forth association: i -> m plus m -> i.
std::vector<Association> associate_pair(const WorldFeatures& a,
                                        const WorldFeatures& b,
                                        const FrontendConfig& cfg);

// World positions and channel-line neighbours of arbitrary points,
// provided by the pipeline which owns the UPM stores.
class FrameAccess {
public:
    virtual ~FrameAccess() = default;
    virtual Vec3 world_point(const PointRef& ref) const = 0;
    virtual std::vector<PointRef> line_neighbors(const PointRef& ref,
                                                 int each_side) const = 0;
};

// Plane associations: every line-neighbour of the matched points must lie
// on the matched plane within the range-noise gate. Edge associations:
// the two following neighbours must be collinear with the matched pair.
// Oversized point spreads are dropped in both cases.
std::vector<Association> reject_outliers(const std::vector<Association>& assocs,
                                         const FrameAccess& access,
                                         const FrontendConfig& cfg);

struct LoopMetrics {
    double d_r = 0.0;
    double d_h = 0.0;
    double cos_d_alpha = 1.0;
};
LoopMetrics loop_closure_metrics(const Pose3& pose_m, const Pose3& pose_i,
                                 const Pose3& calib);

struct LoopConfig {
    bool enabled = false;
    double min_frame_gap = 10.0;    // seconds between the two frames
    double min_closure_gap = 5.0;   // seconds between consecutive closures
    double dh_max = 1.0;            // metres
    double cos_alpha_min = 0.9396926207859084;  // cos(2/3 * 30 deg)
    bool icp_gate = false;
    double icp_fitness_max = 0.05;  // mean squared distance, m^2
};

// Earliest frame satisfying the time gaps and proximity metrics against
// frame `query`. range_gate holds each frame's mean+std range.
std::optional<int> detect_loop(
    int query, const std::vector<Pose3>& poses, const std::vector<double>& taus,
    const std::vector<double>& range_gate, const Pose3& calib,
    const LoopConfig& cfg, double last_closure_tau,
    const std::function<double(int, int)>& icp_fitness = nullptr);

// Point-to-point ICP fitness between two clouds: mean squared nearest
// neighbour distance after a few alignment iterations.
double icp_fitness_score(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                         int iterations = 10);

}  // namespace liom::frontend
