#pragma once

// Direct loop evaluations of the attention branches, written without any of
// the library kernels: masked dense softmax attention, block pooling and
// block-score ranking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic::oracle {

using Mask = std::function<bool(std::size_t h, std::size_t i, std::size_t j)>;

// softmax(q k^T / sqrt(d)) v restricted to allowed (i, j); query head h uses
// kv head h / (H / Hkv).
inline Tensor<double> masked_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                                       const Mask& allowed) {
    const std::size_t H = q.dim(0), n = q.dim(1), d = q.dim(2), group = H / k.dim(0);
    Tensor<double> out(q.shape());
    std::vector<double> w(n);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t kh = h / group;
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (std::size_t j = 0; j < n; ++j) {
                if (!allowed(h, i, j)) continue;
                double s = 0;
                for (std::size_t c = 0; c < d; ++c) s += q.at(h, i, c) * k.at(kh, j, c);
                w[j] = s / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, w[j]);
            }
            double z = 0;
            for (std::size_t j = 0; j < n; ++j)
                if (allowed(h, i, j)) z += std::exp(w[j] - mx);
            for (std::size_t j = 0; j < n; ++j) {
                if (!allowed(h, i, j)) continue;
                const double p = std::exp(w[j] - mx) / z;
                for (std::size_t c = 0; c < d; ++c) out.at(h, i, c) += p * v.at(kh, j, c);
            }
        }
    }
    return out;
}

inline Tensor<double> dense_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v) {
    return masked_attention(q, k, v, [](std::size_t, std::size_t, std::size_t) { return true; });
}

inline Tensor<double> block_mean(const Tensor<double>& x, std::size_t b) {
    const std::size_t H = x.dim(0), m = x.dim(1) / b, d = x.dim(2);
    Tensor<double> out(Shape{H, m, d});
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < d; ++c) {
                double s = 0;
                for (std::size_t t = 0; t < b; ++t) s += x.at(h, i * b + t, c);
                out.at(h, i, c) = s / static_cast<double>(b);
            }
    return out;
}

struct Compressed {
    Tensor<double> scores;  // [H, m, m]
    Tensor<double> out;     // [H, N, d]
};

inline Compressed compression(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                              std::size_t b) {
    const std::size_t H = q.dim(0), n = q.dim(1), d = q.dim(2), m = n / b, group = H / k.dim(0);
    const auto qb = block_mean(q, b), kb = block_mean(k, b), vb = block_mean(v, b);
    Compressed c{Tensor<double>(Shape{H, m, m}), Tensor<double>(q.shape())};
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t kh = h / group;
        for (std::size_t i = 0; i < m; ++i) {
            std::vector<double> s(m);
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t e = 0; e < d; ++e) s[j] += qb.at(h, i, e) * kb.at(kh, j, e);
                s[j] /= std::sqrt(static_cast<double>(d));
            }
            const double mx = *std::max_element(s.begin(), s.end());
            double z = 0;
            for (auto x : s) z += std::exp(x - mx);
            for (std::size_t j = 0; j < m; ++j) c.scores.at(h, i, j) = std::exp(s[j] - mx) / z;
            for (std::size_t t = i * b; t < (i + 1) * b; ++t)
                for (std::size_t e = 0; e < d; ++e) {
                    double o = 0;
                    for (std::size_t j = 0; j < m; ++j) o += c.scores.at(h, i, j) * vb.at(kh, j, e);
                    c.out.at(h, t, e) = o;
                }
        }
    }
    return c;
}

// Indices of the n largest entries of a row, ties to the lower index.
inline std::vector<std::size_t> top_indices(const std::vector<double>& row, std::size_t n) {
    std::vector<std::size_t> idx(row.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    idx.resize(n);
    return idx;
}

}  // namespace mosaic::oracle
