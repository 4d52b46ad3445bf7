#pragma once

// Unit-sphere geometry, the equiangular latitude-longitude grid and k-nearest
// neighbour queries between point sets on the sphere.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <queue>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
    double norm() const { return std::sqrt(dot(*this)); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

// Latitude in [-pi/2, pi/2], longitude in radians.
inline Vec3 unit_vector(double lat, double lon) {
    const double c = std::cos(lat);
    return {c * std::cos(lon), c * std::sin(lon), std::sin(lat)};
}

// Numerically robust great-circle distance between unit vectors.
inline double great_circle_distance(const Vec3& a, const Vec3& b) {
    return std::atan2(a.cross(b).norm(), a.dot(b));
}

// Equiangular H x W grid with cell-centred latitudes ordered north to south
// and longitudes starting at 0.
class LatLonGrid {
public:
    LatLonGrid(std::size_t height, std::size_t width) : h_(height), w_(width) {
        if (height == 0 || width == 0) throw ConfigError("grid dimensions must be positive");
    }

    std::size_t height() const noexcept { return h_; }
    std::size_t width() const noexcept { return w_; }
    std::size_t size() const noexcept { return h_ * w_; }

    double lat(std::size_t row) const {
        return std::numbers::pi / 2 - (static_cast<double>(row) + 0.5) * std::numbers::pi / static_cast<double>(h_);
    }
    double lon(std::size_t col) const { return 2 * std::numbers::pi * static_cast<double>(col) / static_cast<double>(w_); }

    Vec3 point(std::size_t index) const { return unit_vector(lat(index / w_), lon(index % w_)); }

    std::vector<Vec3> points() const {
        std::vector<Vec3> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = point(i);
        return out;
    }

    bool operator==(const LatLonGrid& o) const { return h_ == o.h_ && w_ == o.w_; }

private:
    std::size_t h_, w_;
};

// k nearest sources for every target, flattened [targets x k], ordered by
// great-circle distance with ties broken by the smaller source index.
struct NeighborLists {
    std::size_t k = 0;
    std::vector<std::size_t> index;

    std::size_t targets() const { return k ? index.size() / k : 0; }
    std::span<const std::size_t> of(std::size_t target) const { return {index.data() + target * k, k}; }
};

// Static 3-d tree over unit vectors. Euclidean chord length is monotone in the
// great-circle distance, so the tree prunes in chord space and ranks in angle.
class KdTree {
public:
    explicit KdTree(std::vector<Vec3> points) : pts_(std::move(points)), order_(pts_.size()) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        nodes_.reserve(pts_.size());
        if (!pts_.empty()) build(0, pts_.size(), 0);
    }

    std::size_t size() const noexcept { return pts_.size(); }

    std::vector<std::size_t> nearest(const Vec3& q, std::size_t k) const {
        if (k > pts_.size()) throw ConfigError("k exceeds the number of source points");
        Heap heap;
        search(0, q, k, heap);
        std::vector<Candidate> c;
        c.reserve(heap.size());
        while (!heap.empty()) {
            c.push_back(heap.top());
            heap.pop();
        }
        std::sort(c.begin(), c.end());
        std::vector<std::size_t> out(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].index;
        return out;
    }

private:
    struct Candidate {
        double angle;
        std::size_t index;
        bool operator<(const Candidate& o) const { return angle < o.angle || (angle == o.angle && index < o.index); }
    };
    using Heap = std::priority_queue<Candidate>;

    struct Node {
        std::size_t point;
        int axis;
        std::ptrdiff_t left = -1, right = -1;
    };

    std::ptrdiff_t build(std::size_t lo, std::size_t hi, int depth) {
        if (lo >= hi) return -1;
        // split on the axis with the widest spread
        std::array<double, 3> mn{1e9, 1e9, 1e9}, mx{-1e9, -1e9, -1e9};
        for (std::size_t i = lo; i < hi; ++i)
            for (int a = 0; a < 3; ++a) {
                mn[a] = std::min(mn[a], pts_[order_[i]][a]);
                mx[a] = std::max(mx[a], pts_[order_[i]][a]);
            }
        int axis = 0;
        for (int a = 1; a < 3; ++a)
            if (mx[a] - mn[a] > mx[axis] - mn[axis]) axis = a;
        const std::size_t mid = lo + (hi - lo) / 2;
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(hi), [&](std::size_t a, std::size_t b) {
                             return pts_[a][axis] < pts_[b][axis] || (pts_[a][axis] == pts_[b][axis] && a < b);
                         });
        const auto id = static_cast<std::ptrdiff_t>(nodes_.size());
        nodes_.push_back(Node{order_[mid], axis});
        const auto l = build(lo, mid, depth + 1);
        const auto r = build(mid + 1, hi, depth + 1);
        nodes_[static_cast<std::size_t>(id)].left = l;
        nodes_[static_cast<std::size_t>(id)].right = r;
        return id;
    }

    static double chord_of(double angle) { return 2 * std::sin(std::min(angle, std::numbers::pi) / 2); }

    void search(std::ptrdiff_t node, const Vec3& q, std::size_t k, Heap& heap) const {
        if (node < 0) return;
        const Node& n = nodes_[static_cast<std::size_t>(node)];
        const Vec3& p = pts_[n.point];
        Candidate c{great_circle_distance(q, p), n.point};
        if (heap.size() < k)
            heap.push(c);
        else if (c < heap.top()) {
            heap.pop();
            heap.push(c);
        }
        const double diff = q[n.axis] - p[n.axis];
        const auto near = diff < 0 ? n.left : n.right;
        const auto far = diff < 0 ? n.right : n.left;
        search(near, q, k, heap);
        // slack keeps ties at the boundary inside the search
        const double bound = heap.size() < k ? 1e300 : chord_of(heap.top().angle) * (1 + 1e-12) + 1e-15;
        if (std::abs(diff) <= bound) search(far, q, k, heap);
    }

    std::vector<Vec3> pts_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
};

inline NeighborLists knn(std::span<const Vec3> targets, std::span<const Vec3> sources, std::size_t k) {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (sources.empty()) throw ConfigError("neighbour search over an empty source set");
    if (k > sources.size())
        throw ConfigError("k = " + std::to_string(k) + " exceeds source count " + std::to_string(sources.size()));
    KdTree tree(std::vector<Vec3>(sources.begin(), sources.end()));
    NeighborLists out;
    out.k = k;
    out.index.reserve(targets.size() * k);
    for (const auto& t : targets) {
        auto nn = tree.nearest(t, k);
        out.index.insert(out.index.end(), nn.begin(), nn.end());
    }
    return out;
}

}  // namespace mosaic
