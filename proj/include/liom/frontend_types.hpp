#pragma once

#include <cstdint>
#include <vector>

#include "liom/geometry.hpp"

namespace liom::frontend {

struct LidarPoint {
    double t = 0.0;     // seconds
    Vec3 xyz{Vec3::Zero()};  // lidar frame at time t
    int ring = 0;
    double azimuth = 0.0;  // unwrapped within the sweep, radians
};

struct LidarFrame {
    int id = 0;
    double tau = 0.0;          // frame start, first point time
    double t_end = 0.0;        // last point time
    double sweep_deg = 520.0;  // azimuth covered
    bool complete = true;
    std::vector<LidarPoint> points;  // sorted by time
    // Per-channel point indices in azimuth (= time) order.
    std::vector<std::vector<int>> channels;
    // Original indices into the source stream, for ground-truth lookups.
    std::vector<int64_t> source_index;
};

enum class EdgeOrientation { Inward, Outward };

// Two-sided line fit around a point in its local azimuth/range plane.
struct RegressionPatch {
    double slope_left = 0.0, intercept_left = 0.0;
    double slope_right = 0.0, intercept_right = 0.0;
    double mean_err_left = 0.0, max_err_left = 0.0;
    double mean_err_right = 0.0, max_err_right = 0.0;
    Eigen::Vector2d dir_left{Eigen::Vector2d::Zero()};
    Eigen::Vector2d dir_right{Eigen::Vector2d::Zero()};
    double score = 0.0;  // cos of the angle between the two fitted lines
};

struct ScoredPoint {
    bool accepted = false;
    RegressionPatch patch;
};

struct FeatureSet {
    // Point indices into the frame.
    std::vector<int> planar;
    std::vector<int> edge_in;
    std::vector<int> edge_out;
    // Bin bookkeeping for recomputation: selected sets B and next
    // candidates C, keyed by (channel, bin, feature kind 0=planar 1=edge).
    struct Bin {
        std::vector<int> selected;
        std::vector<int> candidates;
    };
    std::vector<Bin> planar_bins;
    std::vector<Bin> edge_bins;
    // Slopes at selection time, for edge orientation.
    std::vector<double> planar_scores;
};

struct PointRef {
    int frame = -1;
    int index = -1;
    bool operator==(const PointRef& o) const {
        return frame == o.frame && index == o.index;
    }
};

enum class AssocKind { Edge, Plane };

struct Association {
    AssocKind kind = AssocKind::Plane;
    PointRef query;                 // member 1
    std::vector<PointRef> targets;  // members 2..n, all from one other frame
    // Edges: the two following nearest neighbours, kept for the
    // collinearity outlier test.
    std::vector<PointRef> extra_targets;
    EdgeOrientation orientation = EdgeOrientation::Inward;  // edges only
};

}  // namespace liom::frontend
