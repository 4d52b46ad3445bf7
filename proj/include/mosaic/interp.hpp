#pragma once

// Cross-attention interpolation between point sets on the sphere. Each target
// attends over its k nearest sources; the query for a (target, source) pair
// comes from their unit relative position, keys and values from the
// RMS-normalised source features.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "mosaic/geometry.hpp"
#include "mosaic/ops.hpp"
#include "mosaic/tape.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic::interp {

// Neighbour lists and unit relative positions, fixed at construction.
template <class T>
struct InterpGeometry {
    NeighborLists neighbors;
    Tensor<T> rel;  // [targets * k, 3]
    std::size_t sources = 0;

    std::size_t targets() const { return neighbors.targets(); }
    std::size_t k() const { return neighbors.k; }

    static InterpGeometry build(std::span<const Vec3> targets, std::span<const Vec3> sources, std::size_t k) {
        InterpGeometry g;
        g.neighbors = knn(targets, sources, k);
        g.sources = sources.size();
        g.rel = Tensor<T>(Shape{targets.size() * k, 3});
        for (std::size_t t = 0; t < targets.size(); ++t)
            for (std::size_t j = 0; j < k; ++j) {
                const Vec3 d = targets[t] - sources[g.neighbors.of(t)[j]];
                const double len = d.norm();
                // coincident points keep a zero query direction
                const double inv = len > 1e-12 ? 1.0 / len : 0.0;
                T* r = g.rel.data() + (t * k + j) * 3;
                r[0] = static_cast<T>(d.x * inv);
                r[1] = static_cast<T>(d.y * inv);
                r[2] = static_cast<T>(d.z * inv);
            }
        return g;
    }
};

template <class T>
struct InterpWeights {
    Var<T> wq;  // [3, d]
    Var<T> wk;  // [c_in, d]
    Var<T> wv;  // [c_in, d]
    Var<T> wo;  // [d, c_out]
};

// Softmax weights over each target's neighbours: [targets, k].
template <class T>
Tensor<T> neighbor_weights(const Tensor<T>& q, const Tensor<T>& keys, const NeighborLists& nn) {
    const std::size_t k = nn.k, nt = nn.targets(), d = keys.dim(1);
    if (q.rank() != 2 || q.dim(0) != nt * k || q.dim(1) != d)
        throw DimensionError("neighbour queries " + shape_str(q.shape()) + " do not match " + std::to_string(nt) +
                             " targets x " + std::to_string(k) + " neighbours of width " + std::to_string(d));
    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    Tensor<T> p(Shape{nt, k});
    for (std::size_t t = 0; t < nt; ++t) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            const T* qr = q.data() + (t * k + j) * d;
            const T* kr = keys.data() + nn.of(t)[j] * d;
            T s = 0;
            for (std::size_t c = 0; c < d; ++c) s += qr[c] * kr[c];
            p.at(t, j) = s * scale;
            mx = std::max(mx, p.at(t, j));
        }
        T z = 0;
        for (std::size_t j = 0; j < k; ++j) z += (p.at(t, j) = std::exp(p.at(t, j) - mx));
        for (std::size_t j = 0; j < k; ++j) p.at(t, j) /= z;
    }
    return p;
}

// out[t] = sum_j softmax_j(q[t,j] . keys[n_j] / sqrt(d)) values[n_j]
template <class T>
Var<T> neighbor_attention(Var<T> q, Var<T> keys, Var<T> values, const NeighborLists& nn) {
    const auto& K = keys.value();
    const auto& Vv = values.value();
    if (K.rank() != 2 || Vv.rank() != 2 || K.dim(0) != Vv.dim(0))
        throw DimensionError("neighbour keys " + shape_str(K.shape()) + " and values " + shape_str(Vv.shape()) +
                             " disagree");
    Tensor<T> p = neighbor_weights(q.value(), K, nn);
    const std::size_t k = nn.k, nt = nn.targets(), dv = Vv.dim(1);
    Tensor<T> out(Shape{nt, dv});
    for (std::size_t t = 0; t < nt; ++t)
        for (std::size_t j = 0; j < k; ++j) {
            const T w = p.at(t, j);
            const T* vr = Vv.data() + nn.of(t)[j] * dv;
            T* o = out.data() + t * dv;
            for (std::size_t c = 0; c < dv; ++c) o[c] += w * vr[c];
        }
    return q.tape->record(std::move(out), {q, keys, values}, [q, keys, values, nn, p](Tape<T>& tp, const Tensor<T>& g) {
        const auto& Q = q.value();
        const auto& K = keys.value();
        const auto& Vv = values.value();
        const std::size_t k = nn.k, nt = nn.targets(), d = K.dim(1), dv = Vv.dim(1);
        const T scale = T{1} / std::sqrt(static_cast<T>(d));
        T* gq = tp.grad_buffer(q);
        T* gk = tp.grad_buffer(keys);
        T* gv = tp.grad_buffer(values);
        std::vector<T> dp(k);
        for (std::size_t t = 0; t < nt; ++t) {
            const T* gt = g.data() + t * dv;
            T avg = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t src = nn.of(t)[j];
                const T* vr = Vv.data() + src * dv;
                T s = 0;
                for (std::size_t c = 0; c < dv; ++c) s += gt[c] * vr[c];
                dp[j] = s;
                avg += p.at(t, j) * s;
                if (gv)
                    for (std::size_t c = 0; c < dv; ++c) gv[src * dv + c] += p.at(t, j) * gt[c];
            }
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t src = nn.of(t)[j];
                const T ds = p.at(t, j) * (dp[j] - avg) * scale;
                const T* qr = Q.data() + (t * k + j) * d;
                const T* kr = K.data() + src * d;
                if (gq)
                    for (std::size_t c = 0; c < d; ++c) gq[(t * k + j) * d + c] += ds * kr[c];
                if (gk)
                    for (std::size_t c = 0; c < d; ++c) gk[src * d + c] += ds * qr[c];
            }
        }
    });
}

// Interpolates source features [sources, c_in] onto the targets, giving
// [targets, c_out].
template <class T>
Var<T> interpolate(Var<T> source, const InterpGeometry<T>& geo, const InterpWeights<T>& w) {
    if (source.value().rank() != 2 || source.dim(0) != geo.sources)
        throw DimensionError("interpolation source " + shape_str(source.shape()) + " does not match " +
                             std::to_string(geo.sources) + " neighbour sources");
    Var<T> xn = rmsnorm(source);
    Var<T> keys = matmul(xn, w.wk);
    Var<T> values = matmul(xn, w.wv);
    Var<T> q = matmul(source.tape->constant(geo.rel), w.wq);
    return matmul(neighbor_attention(q, keys, values, geo.neighbors), w.wo);
}

// Attention weights the operator would use, for inspection.
template <class T>
Tensor<T> interpolation_weights(const Tensor<T>& source, const InterpGeometry<T>& geo, const Tensor<T>& wq,
                                const Tensor<T>& wk) {
    Tape<T> tape;
    Var<T> keys = matmul(rmsnorm(tape.constant(source)), tape.constant(wk));
    Var<T> q = matmul(tape.constant(geo.rel), tape.constant(wq));
    return neighbor_weights(q.value(), keys.value(), geo.neighbors);
}

}  // namespace mosaic::interp
