#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "liom/geometry.hpp"

namespace liom {

// Static 3D kd-tree over a point set; rebuilt whenever the points move.
class KdTree {
public:
    KdTree() = default;

    explicit KdTree(std::vector<Vec3> points) : pts_(std::move(points)) {
        idx_.resize(pts_.size());
        std::iota(idx_.begin(), idx_.end(), 0);
        if (!idx_.empty()) build(0, static_cast<int>(idx_.size()), 0);
    }

    size_t size() const { return pts_.size(); }

    struct Neighbor {
        int index = -1;
        double dist2 = std::numeric_limits<double>::infinity();
    };

    // k nearest neighbors sorted by increasing distance.
    std::vector<Neighbor> knn(const Vec3& q, int k) const {
        std::vector<Neighbor> heap;  // max-heap on dist2
        if (!idx_.empty() && k > 0) {
            search(0, static_cast<int>(idx_.size()), 0, q, k, &heap);
        }
        std::sort(heap.begin(), heap.end(),
                  [](const Neighbor& a, const Neighbor& b) { return a.dist2 < b.dist2; });
        return heap;
    }

    const Vec3& point(int i) const { return pts_[i]; }

private:
    // Median-split over [lo, hi) on axis = depth % 3; the median element
    // stays in place as the node.
    void build(int lo, int hi, int depth) {
        if (hi - lo <= 1) return;
        const int axis = depth % 3;
        const int mid = (lo + hi) / 2;
        std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                         [&](int a, int b) {
                             if (pts_[a][axis] != pts_[b][axis]) {
                                 return pts_[a][axis] < pts_[b][axis];
                             }
                             return a < b;
                         });
        build(lo, mid, depth + 1);
        build(mid + 1, hi, depth + 1);
    }

    void search(int lo, int hi, int depth, const Vec3& q, int k,
                std::vector<Neighbor>* heap) const {
        if (lo >= hi) return;
        const int axis = depth % 3;
        const int mid = (lo + hi) / 2;
        const int node = idx_[mid];
        const double d2 = (pts_[node] - q).squaredNorm();
        push(heap, k, {node, d2});

        const double split = pts_[node][axis];
        const double delta = q[axis] - split;
        const int near_lo = delta <= 0.0 ? lo : mid + 1;
        const int near_hi = delta <= 0.0 ? mid : hi;
        const int far_lo = delta <= 0.0 ? mid + 1 : lo;
        const int far_hi = delta <= 0.0 ? hi : mid;

        search(near_lo, near_hi, depth + 1, q, k, heap);
        const double worst = heap->size() < static_cast<size_t>(k)
                                 ? std::numeric_limits<double>::infinity()
                                 : heap->front().dist2;
        if (delta * delta <= worst) {
            search(far_lo, far_hi, depth + 1, q, k, heap);
        }
    }

    static void push(std::vector<Neighbor>* heap, int k, Neighbor n) {
        auto cmp = [](const Neighbor& a, const Neighbor& b) {
            return a.dist2 < b.dist2;
        };
        if (heap->size() < static_cast<size_t>(k)) {
            heap->push_back(n);
            std::push_heap(heap->begin(), heap->end(), cmp);
        } else if (n.dist2 < heap->front().dist2) {
            std::pop_heap(heap->begin(), heap->end(), cmp);
            heap->back() = n;
            std::push_heap(heap->begin(), heap->end(), cmp);
        }
    }

    std::vector<Vec3> pts_;
    std::vector<int> idx_;
};

}  // namespace liom
