#pragma once

// Block-sparse attention over NESTED-ordered tokens. Three branches share one
// row kernel: compression (block-to-block attention broadcast to tokens),
// selection (each query block attends to its top-n key blocks) and local
// (dense attention inside fixed contiguous blocks). Their outputs are mixed by
// per-token, per-head sigmoid gates. A token-level NSA path and a dense path
// serve as references.
//
// Head tensors are [heads, N, head_dim]; query head h reads kv head
// h / gqa_ratio.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mosaic/healpix.hpp"
#include "mosaic/linalg.hpp"
#include "mosaic/ops.hpp"
#include "mosaic/parallel.hpp"
#include "mosaic/tape.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic::attn {

struct AttentionConfig {
    std::size_t num_heads = 4;
    std::size_t gqa_ratio = 1;
    std::size_t head_dim = 16;
    std::size_t local_block = 256;
    std::size_t sparse_block = 64;
    std::size_t top_n = 4;
    double rope_theta = 10000.0;
    bool use_rope = true;
    bool compression = true;
    bool selection = true;
    bool local = true;
    // Replaces the learned gates by constants (g_CG, g_FG, g_L).
    std::optional<std::array<double, 3>> forced_gates;

    std::size_t kv_heads() const { return num_heads / gqa_ratio; }

    void validate() const {
        if (num_heads == 0 || head_dim == 0) throw ConfigError("attention needs at least one head of positive width");
        if (gqa_ratio == 0 || num_heads % gqa_ratio != 0)
            throw ConfigError("gqa_ratio " + std::to_string(gqa_ratio) + " does not divide num_heads " +
                              std::to_string(num_heads));
        if (use_rope && head_dim % 4 != 0)
            throw ConfigError("2-d rotary embedding needs head_dim divisible by 4, got " + std::to_string(head_dim));
        if (local_block == 0 || sparse_block == 0 || top_n == 0)
            throw ConfigError("block sizes and top_n must be positive");
        if (!compression && !selection && !local) throw ConfigError("at least one attention branch must be enabled");
    }

    void validate(std::size_t n) const {
        validate();
        if (n % sparse_block != 0)
            throw ConfigError("sequence length " + std::to_string(n) + " is not divisible by sparse block " +
                              std::to_string(sparse_block));
        if (n % local_block != 0)
            throw ConfigError("sequence length " + std::to_string(n) + " is not divisible by local block " +
                              std::to_string(local_block));
        if (top_n > n / sparse_block)
            throw ConfigError("top_n " + std::to_string(top_n) + " exceeds block count " +
                              std::to_string(n / sparse_block));
    }
};

struct KeyRange {
    std::size_t begin, end;
};

struct HeadLayout {
    std::size_t heads, kv_heads, n, d;
    std::size_t group() const { return heads / kv_heads; }
};

template <class T>
HeadLayout head_layout(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw DimensionError("attention expects [heads, N, head_dim] tensors, got " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    k.require_same(v, "attention keys/values");
    if (q.dim(1) != k.dim(1) || q.dim(2) != k.dim(2))
        throw DimensionError("attention query " + shape_str(q.shape()) + " incompatible with keys " +
                             shape_str(k.shape()));
    if (q.dim(0) % k.dim(0) != 0)
        throw DimensionError("query heads " + std::to_string(q.dim(0)) + " not a multiple of kv heads " +
                             std::to_string(k.dim(0)));
    return {q.dim(0), k.dim(0), q.dim(1), q.dim(2)};
}

namespace detail {

template <class T>
using RowArray = Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>;

template <class T>
struct Scratch {
    AlignedVector<T> kg, vg, s, dp, dkg, dvg;
};

inline std::size_t range_length(std::span<const KeyRange> ranges) {
    std::size_t len = 0;
    for (const auto& r : ranges) len += r.end - r.begin;
    return len;
}

// Contiguous view of the selected key rows; copies only for multiple ranges.
template <class T>
const T* gather(const T* src, std::size_t d, std::span<const KeyRange> ranges, AlignedVector<T>& buf) {
    if (ranges.size() == 1) return src + ranges[0].begin * d;
    buf.resize(range_length(ranges) * d);
    T* out = buf.data();
    for (const auto& r : ranges) {
        std::copy(src + r.begin * d, src + r.end * d, out);
        out += (r.end - r.begin) * d;
    }
    return buf.data();
}

template <class T>
void scatter_add(T* dst, std::size_t d, std::span<const KeyRange> ranges, const T* src) {
    for (const auto& r : ranges) {
        const std::size_t len = (r.end - r.begin) * d;
        T* o = dst + r.begin * d;
        for (std::size_t i = 0; i < len; ++i) o[i] += src[i];
        src += len;
    }
}

// Softmax attention of nq query rows over the union of key ranges. Writes
// the output rows and the per-row log-sum-exp of the scaled logits.
template <class T>
void attend_rows(const T* q, std::size_t nq, const T* k, const T* v, std::size_t d, std::span<const KeyRange> ranges,
                 T* out, T* lse, Scratch<T>& ws) {
    const std::size_t len = range_length(ranges);
    const T* kg = gather(k, d, ranges, ws.kg);
    const T* vg = gather(v, d, ranges, ws.vg);
    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    ws.s.resize(nq * len);
    linalg::gemm(q, kg, ws.s.data(), nq, len, d, false, true, scale);
    for (std::size_t r = 0; r < nq; ++r) {
        RowArray<T> row(ws.s.data() + r * len, static_cast<Eigen::Index>(len));
        const T mx = row.maxCoeff();
        row = (row - mx).exp();
        const T total = row.sum();
        row /= total;
        lse[r] = mx + std::log(total);
    }
    linalg::gemm(ws.s.data(), vg, out, nq, d, len);
    count_macs(2ull * nq * len * d);
}

// Gradient of attend_rows. The probabilities are recomputed from the stored
// log-sum-exp; dq/dk/dv are accumulated and may be null.
template <class T>
void attend_rows_backward(const T* q, std::size_t nq, const T* k, const T* v, std::size_t d,
                          std::span<const KeyRange> ranges, const T* out, const T* lse, const T* dout, T* dq, T* dk,
                          T* dv, Scratch<T>& ws) {
    const std::size_t len = range_length(ranges);
    const T* kg = gather(k, d, ranges, ws.kg);
    const T* vg = gather(v, d, ranges, ws.vg);
    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    ws.s.resize(nq * len);
    ws.dp.resize(nq * len);
    linalg::gemm(q, kg, ws.s.data(), nq, len, d, false, true, scale);
    for (std::size_t r = 0; r < nq; ++r) {
        RowArray<T> row(ws.s.data() + r * len, static_cast<Eigen::Index>(len));
        row = (row - lse[r]).exp();
    }
    const bool direct = ranges.size() == 1;
    if (dv) {
        if (direct) {
            linalg::gemm(ws.s.data(), dout, dv + ranges[0].begin * d, len, d, nq, true, false, T{1}, T{1});
        } else {
            ws.dvg.resize(len * d);
            linalg::gemm(ws.s.data(), dout, ws.dvg.data(), len, d, nq, true, false);
            scatter_add(dv, d, ranges, ws.dvg.data());
        }
    }
    linalg::gemm(dout, vg, ws.dp.data(), nq, len, d, false, true);
    for (std::size_t r = 0; r < nq; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += dout[r * d + c] * out[r * d + c];
        T* p = ws.s.data() + r * len;
        const T* g = ws.dp.data() + r * len;
        for (std::size_t j = 0; j < len; ++j) p[j] *= g[j] - dot;
    }
    if (dq) linalg::gemm(ws.s.data(), kg, dq, nq, d, len, false, false, scale, T{1});
    if (dk) {
        if (direct) {
            linalg::gemm(ws.s.data(), q, dk + ranges[0].begin * d, len, d, nq, true, false, scale, T{1});
        } else {
            ws.dkg.resize(len * d);
            linalg::gemm(ws.s.data(), q, ws.dkg.data(), len, d, nq, true, false, scale);
            scatter_add(dk, d, ranges, ws.dkg.data());
        }
    }
    count_macs(4ull * nq * len * d);
}

}  // namespace detail

// Query-block attention with log-sum-exp kept for the backward pass.
template <class T>
struct BranchResult {
    Tensor<T> out;
    std::vector<T> lse;
};

// Each query block qb of every head attends over ranges(h, qb).
template <class T, class RangesFn>
BranchResult<T> blockwise_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t q_block,
                                  RangesFn&& ranges) {
    const HeadLayout L = head_layout(q, k, v);
    if (q_block == 0 || L.n % q_block != 0) throw ConfigError("query block does not divide the sequence length");
    BranchResult<T> res{Tensor<T>(q.shape()), std::vector<T>(L.heads * L.n)};
    const std::size_t blocks = L.n / q_block;
    parallel_for(L.heads, [&](std::size_t h) {
        detail::Scratch<T> ws;
        const std::size_t kvh = h / L.group();
        const T* kh = k.data() + kvh * L.n * L.d;
        const T* vh = v.data() + kvh * L.n * L.d;
        for (std::size_t qb = 0; qb < blocks; ++qb) {
            const std::vector<KeyRange> rg = ranges(h, qb);
            const std::size_t row = h * L.n + qb * q_block;
            detail::attend_rows(q.data() + row * L.d, q_block, kh, vh, L.d, rg, res.out.data() + row * L.d,
                                res.lse.data() + row, ws);
        }
    });
    return res;
}

template <class T, class RangesFn>
void blockwise_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const BranchResult<T>& fwd,
                        const Tensor<T>& dout, std::size_t q_block, RangesFn&& ranges, T* dq, T* dk, T* dv) {
    const HeadLayout L = head_layout(q, k, v);
    const std::size_t blocks = L.n / q_block;
    parallel_for(L.kv_heads, [&](std::size_t kvh) {
        detail::Scratch<T> ws;
        const std::size_t kv_off = kvh * L.n * L.d;
        for (std::size_t h = kvh * L.group(); h < (kvh + 1) * L.group(); ++h)
            for (std::size_t qb = 0; qb < blocks; ++qb) {
                const std::vector<KeyRange> rg = ranges(h, qb);
                const std::size_t row = h * L.n + qb * q_block;
                const std::size_t off = row * L.d;
                detail::attend_rows_backward(q.data() + off, q_block, k.data() + kv_off, v.data() + kv_off, L.d, rg,
                                             fwd.out.data() + off, fwd.lse.data() + row, dout.data() + off,
                                             dq ? dq + off : nullptr, dk ? dk + kv_off : nullptr,
                                             dv ? dv + kv_off : nullptr, ws);
            }
    });
}

// Largest divisor of n not above 128, used to tile dense attention.
inline std::size_t dense_tile(std::size_t n) {
    for (std::size_t t = std::min<std::size_t>(n, 128); t > 1; --t)
        if (n % t == 0) return t;
    return 1;
}

template <class T>
Tensor<T> dense_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    const std::size_t n = q.dim(1);
    return blockwise_forward(q, k, v, dense_tile(n), [n](std::size_t, std::size_t) {
               return std::vector<KeyRange>{{0, n}};
           }).out;
}

// ---- compression branch -------------------------------------------------

// Mean over consecutive groups of b tokens: [H, N, d] -> [H, N/b, d].
template <class T>
Tensor<T> pool_blocks(const Tensor<T>& x, std::size_t b) {
    const std::size_t H = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (b == 0 || n % b != 0) throw ConfigError("block size does not divide the sequence length");
    const std::size_t m = n / b;
    Tensor<T> out(Shape{H, m, d});
    const T inv = T{1} / static_cast<T>(b);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < m; ++i) {
            T* o = out.data() + (h * m + i) * d;
            for (std::size_t t = 0; t < b; ++t) {
                const T* src = x.data() + (h * n + i * b + t) * d;
                for (std::size_t c = 0; c < d; ++c) o[c] += src[c];
            }
            for (std::size_t c = 0; c < d; ++c) o[c] *= inv;
        }
    count_macs(static_cast<std::uint64_t>(H) * n * d);
    return out;
}

template <class T>
struct CompressResult {
    Tensor<T> out;     // [H, N, d], block output broadcast to its tokens
    Tensor<T> scores;  // [H, m, m], block-level softmax
    BranchResult<T> pooled;
};

template <class T>
CompressResult<T> compress_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t b) {
    const HeadLayout L = head_layout(q, k, v);
    const Tensor<T> qp = pool_blocks(q, b), kp = pool_blocks(k, b), vp = pool_blocks(v, b);
    const std::size_t m = L.n / b;
    CompressResult<T> res;
    res.pooled = blockwise_forward(qp, kp, vp, dense_tile(m), [m](std::size_t, std::size_t) {
        return std::vector<KeyRange>{{0, m}};
    });
    // block scores from the stored log-sum-exp: a_ij = exp(s_ij - lse_i)
    res.scores = Tensor<T>(Shape{L.heads, m, m});
    const T scale = T{1} / std::sqrt(static_cast<T>(L.d));
    for (std::size_t h = 0; h < L.heads; ++h) {
        const std::size_t kvh = h / L.group();
        T* s = res.scores.data() + h * m * m;
        linalg::gemm(qp.data() + h * m * L.d, kp.data() + kvh * m * L.d, s, m, m, L.d, false, true, scale);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) s[i * m + j] = std::exp(s[i * m + j] - res.pooled.lse[h * m + i]);
    }
    res.out = Tensor<T>(q.shape());
    for (std::size_t h = 0; h < L.heads; ++h)
        for (std::size_t t = 0; t < L.n; ++t) {
            const T* src = res.pooled.out.data() + (h * m + t / b) * L.d;
            std::copy(src, src + L.d, res.out.data() + (h * L.n + t) * L.d);
        }
    return res;
}

template <class T>
void compress_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t b,
                       const CompressResult<T>& fwd, const Tensor<T>& dout, T* dq, T* dk, T* dv) {
    const HeadLayout L = head_layout(q, k, v);
    const std::size_t m = L.n / b;
    const Tensor<T> qp = pool_blocks(q, b), kp = pool_blocks(k, b), vp = pool_blocks(v, b);
    // broadcast transposes to a block sum
    Tensor<T> dop(qp.shape());
    for (std::size_t h = 0; h < L.heads; ++h)
        for (std::size_t t = 0; t < L.n; ++t) {
            const T* g = dout.data() + (h * L.n + t) * L.d;
            T* o = dop.data() + (h * m + t / b) * L.d;
            for (std::size_t c = 0; c < L.d; ++c) o[c] += g[c];
        }
    Tensor<T> dqp(qp.shape()), dkp(kp.shape()), dvp(vp.shape());
    blockwise_backward(qp, kp, vp, fwd.pooled, dop, dense_tile(m),
                       [m](std::size_t, std::size_t) { return std::vector<KeyRange>{{0, m}}; }, dqp.data(), dkp.data(),
                       dvp.data());
    const T inv = T{1} / static_cast<T>(b);
    auto unpool = [&](const Tensor<T>& src, T* dst, std::size_t heads) {
        if (!dst) return;
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < L.n; ++t) {
                const T* s = src.data() + (h * m + t / b) * L.d;
                T* o = dst + (h * L.n + t) * L.d;
                for (std::size_t c = 0; c < L.d; ++c) o[c] += inv * s[c];
            }
    };
    unpool(dqp, dq, L.heads);
    unpool(dkp, dk, L.kv_heads);
    unpool(dvp, dv, L.kv_heads);
}

// ---- selection branch ---------------------------------------------------

// Top-n key blocks per (query head, query block), stored in ascending order.
struct BlockSelection {
    std::size_t heads = 0, blocks = 0, top_n = 0;
    std::vector<std::uint32_t> index;

    std::span<const std::uint32_t> of(std::size_t h, std::size_t i) const {
        return {index.data() + (h * blocks + i) * top_n, top_n};
    }
};

// Ranks each row of the block scores; ties go to the lower block index.
template <class T>
BlockSelection select_top_blocks(const Tensor<T>& scores, std::size_t top_n) {
    const std::size_t H = scores.dim(0), m = scores.dim(1);
    if (top_n == 0 || top_n > m)
        throw ConfigError("top_n " + std::to_string(top_n) + " outside [1, " + std::to_string(m) + "]");
    BlockSelection sel{H, m, top_n, std::vector<std::uint32_t>(H * m * top_n)};
    std::vector<std::uint32_t> order(m);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < m; ++i) {
            const T* row = scores.data() + (h * m + i) * m;
            std::iota(order.begin(), order.end(), 0u);
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_n), order.end(),
                              [row](std::uint32_t a, std::uint32_t b) {
                                  return row[a] > row[b] || (row[a] == row[b] && a < b);
                              });
            std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_n));
            std::copy(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_n),
                      sel.index.begin() + static_cast<std::ptrdiff_t>((h * m + i) * top_n));
        }
    return sel;
}

// Sorted block ids to token ranges, merging neighbours.
inline std::vector<KeyRange> block_ranges(std::span<const std::uint32_t> blocks, std::size_t b) {
    std::vector<KeyRange> out;
    for (auto id : blocks) {
        const std::size_t lo = id * b;
        if (!out.empty() && out.back().end == lo)
            out.back().end = lo + b;
        else
            out.push_back({lo, lo + b});
    }
    return out;
}

template <class T>
BranchResult<T> selection_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  const BlockSelection& sel, std::size_t b) {
    return blockwise_forward(q, k, v, b, [&](std::size_t h, std::size_t i) { return block_ranges(sel.of(h, i), b); });
}

template <class T>
BranchResult<T> local_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t block) {
    return blockwise_forward(q, k, v, block, [block](std::size_t, std::size_t i) {
        return std::vector<KeyRange>{{i * block, (i + 1) * block}};
    });
}

// ---- gating -------------------------------------------------------------

// out[h,t,:] = sum over branches of gates[t, branch*H + h] * branch[h,t,:].
// Null branches contribute nothing.
template <class T>
Tensor<T> gate_combine(const Tensor<T>& gates, const std::array<const Tensor<T>*, 3>& branches) {
    const Tensor<T>* ref = nullptr;
    for (auto* b : branches)
        if (b) ref = b;
    if (!ref) throw ConfigError("gate_combine needs at least one branch");
    const std::size_t H = ref->dim(0), n = ref->dim(1), d = ref->dim(2);
    if (gates.rank() != 2 || gates.dim(0) != n || gates.dim(1) != 3 * H)
        throw DimensionError("gates " + shape_str(gates.shape()) + " do not match branch outputs " +
                             shape_str(ref->shape()));
    Tensor<T> out(ref->shape());
    for (std::size_t br = 0; br < 3; ++br) {
        if (!branches[br]) continue;
        branches[br]->require_same(*ref, "gate_combine");
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t t = 0; t < n; ++t) {
                const T g = gates.at(t, br * H + h);
                const T* src = branches[br]->data() + (h * n + t) * d;
                T* o = out.data() + (h * n + t) * d;
                for (std::size_t c = 0; c < d; ++c) o[c] += g * src[c];
            }
    }
    count_macs(3ull * H * n * d);
    return out;
}

template <class T>
Tensor<T> constant_gates(std::size_t n, std::size_t heads, const std::array<double, 3>& g) {
    Tensor<T> out(Shape{n, 3 * heads});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t br = 0; br < 3; ++br)
            for (std::size_t h = 0; h < heads; ++h) out.at(t, br * heads + h) = static_cast<T>(g[br]);
    return out;
}

// ---- 2-d rotary embedding -----------------------------------------------

struct TokenPositions {
    std::vector<double> lat, lon;

    std::size_t size() const { return lat.size(); }

    static TokenPositions from_mesh(const healpix::HealpixMesh& mesh) {
        TokenPositions p;
        for (const auto& a : mesh.angles()) {
            p.lat.push_back(a.lat);
            p.lon.push_back(a.lon);
        }
        return p;
    }
};

// Per-token rotation angles for the d/2 dimension pairs: the first d/4 pairs
// rotate with latitude, the rest with longitude.
class RopeTable {
public:
    RopeTable(const TokenPositions& pos, std::size_t head_dim, double theta) : n_(pos.size()), pairs_(head_dim / 2) {
        if (head_dim % 4 != 0) throw ConfigError("rotary head_dim must be divisible by 4");
        if (pos.lat.size() != pos.lon.size()) throw DimensionError("latitude/longitude position counts differ");
        const std::size_t quarter = head_dim / 4;
        cos_.resize(n_ * pairs_);
        sin_.resize(n_ * pairs_);
        for (std::size_t t = 0; t < n_; ++t)
            for (std::size_t p = 0; p < pairs_; ++p) {
                const std::size_t j = p % quarter;
                const double freq = std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim / 2));
                const double angle = (p < quarter ? pos.lat[t] : pos.lon[t]) * freq;
                cos_[t * pairs_ + p] = std::cos(angle);
                sin_[t * pairs_ + p] = std::sin(angle);
            }
    }

    std::size_t tokens() const { return n_; }

    // Rotates x [H, N, d] in place; inverse applies the transpose rotation.
    template <class T>
    void apply(Tensor<T>& x, bool inverse = false) const {
        if (x.rank() != 3 || x.dim(1) != n_ || x.dim(2) != 2 * pairs_)
            throw DimensionError("rotary table for " + std::to_string(n_) + " tokens cannot rotate " +
                                 shape_str(x.shape()));
        const double sgn = inverse ? -1.0 : 1.0;
        for (std::size_t h = 0; h < x.dim(0); ++h)
            for (std::size_t t = 0; t < n_; ++t) {
                T* row = x.data() + (h * n_ + t) * 2 * pairs_;
                for (std::size_t p = 0; p < pairs_; ++p) {
                    const T c = static_cast<T>(cos_[t * pairs_ + p]);
                    const T s = static_cast<T>(sgn * sin_[t * pairs_ + p]);
                    const T a = row[2 * p], b = row[2 * p + 1];
                    row[2 * p] = a * c - b * s;
                    row[2 * p + 1] = a * s + b * c;
                }
            }
    }

private:
    std::size_t n_, pairs_;
    std::vector<double> cos_, sin_;
};

// ---- tape operations ----------------------------------------------------

// [N, H*d] -> [H, N, d]
template <class T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
    const auto& X = x.value();
    if (X.rank() != 2 || X.dim(1) % heads != 0)
        throw DimensionError("split_heads: " + shape_str(X.shape()) + " into " + std::to_string(heads) + " heads");
    const std::size_t n = X.dim(0), d = X.dim(1) / heads;
    Tensor<T> out(Shape{heads, n, d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t h = 0; h < heads; ++h)
            std::copy_n(X.data() + t * heads * d + h * d, d, out.data() + (h * n + t) * d);
    return x.tape->record(std::move(out), {x}, [x, heads, n, d](Tape<T>& tp, const Tensor<T>& g) {
        T* gx = tp.grad_buffer(x);
        if (!gx) return;
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t h = 0; h < heads; ++h) {
                const T* src = g.data() + (h * n + t) * d;
                T* dst = gx + t * heads * d + h * d;
                for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
            }
    });
}

// [H, N, d] -> [N, H*d]
template <class T>
Var<T> merge_heads(Var<T> x) {
    const auto& X = x.value();
    if (X.rank() != 3) throw DimensionError("merge_heads expects [heads, N, d], got " + shape_str(X.shape()));
    const std::size_t heads = X.dim(0), n = X.dim(1), d = X.dim(2);
    Tensor<T> out(Shape{n, heads * d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < n; ++t)
            std::copy_n(X.data() + (h * n + t) * d, d, out.data() + t * heads * d + h * d);
    return x.tape->record(std::move(out), {x}, [x, heads, n, d](Tape<T>& tp, const Tensor<T>& g) {
        T* gx = tp.grad_buffer(x);
        if (!gx) return;
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < n; ++t) {
                const T* src = g.data() + t * heads * d + h * d;
                T* dst = gx + (h * n + t) * d;
                for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
            }
    });
}

template <class T>
Var<T> rope(Var<T> x, const RopeTable& table) {
    Tensor<T> out = x.value();
    table.apply(out);
    return x.tape->record(std::move(out), {x}, [x, table](Tape<T>& tp, const Tensor<T>& g) {
        T* gx = tp.grad_buffer(x);
        if (!gx) return;
        Tensor<T> back = g;
        table.apply(back, true);
        for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
    });
}

template <class T>
struct CompressOp {
    Var<T> out;
    Tensor<T> scores;
};

template <class T>
CompressOp<T> compress_op(Var<T> q, Var<T> k, Var<T> v, std::size_t b) {
    CompressResult<T> res = compress_forward(q.value(), k.value(), v.value(), b);
    Tensor<T> scores = res.scores;
    Tensor<T> out = res.out;
    res.out = Tensor<T>();
    Var<T> o = q.tape->record(std::move(out), {q, k, v}, [q, k, v, b, res = std::move(res)](Tape<T>& tp, const Tensor<T>& g) {
        compress_backward(q.value(), k.value(), v.value(), b, res, g, tp.grad_buffer(q), tp.grad_buffer(k),
                          tp.grad_buffer(v));
    });
    return {o, std::move(scores)};
}

template <class T, class RangesFn>
Var<T> blockwise_op(Var<T> q, Var<T> k, Var<T> v, std::size_t q_block, RangesFn ranges) {
    BranchResult<T> res = blockwise_forward(q.value(), k.value(), v.value(), q_block, ranges);
    Tensor<T> out = res.out;
    return q.tape->record(std::move(out), {q, k, v},
                          [q, k, v, q_block, ranges, res = std::move(res)](Tape<T>& tp, const Tensor<T>& g) {
                              blockwise_backward(q.value(), k.value(), v.value(), res, g, q_block, ranges,
                                                 tp.grad_buffer(q), tp.grad_buffer(k), tp.grad_buffer(v));
                          });
}

// Selection indices are held constant: gradients reach q, k and v through
// the selected blocks only.
template <class T>
Var<T> selection_op(Var<T> q, Var<T> k, Var<T> v, const BlockSelection& sel, std::size_t b) {
    return blockwise_op(q, k, v, b, [sel, b](std::size_t h, std::size_t i) { return block_ranges(sel.of(h, i), b); });
}

template <class T>
Var<T> local_op(Var<T> q, Var<T> k, Var<T> v, std::size_t block) {
    return blockwise_op(q, k, v, block, [block](std::size_t, std::size_t i) {
        return std::vector<KeyRange>{{i * block, (i + 1) * block}};
    });
}

template <class T>
Var<T> dense_op(Var<T> q, Var<T> k, Var<T> v) {
    const std::size_t n = q.value().dim(1);
    return blockwise_op(q, k, v, dense_tile(n),
                        [n](std::size_t, std::size_t) { return std::vector<KeyRange>{{0, n}}; });
}

template <class T>
Var<T> gate_combine_op(Var<T> gates, const std::array<std::optional<Var<T>>, 3>& branches) {
    std::array<const Tensor<T>*, 3> vals{};
    std::vector<Var<T>> inputs{gates};
    for (std::size_t i = 0; i < 3; ++i)
        if (branches[i]) {
            vals[i] = &branches[i]->value();
            inputs.push_back(*branches[i]);
        }
    Tensor<T> out = gate_combine(gates.value(), vals);
    return gates.tape->record(std::move(out), inputs, [gates, branches](Tape<T>& tp, const Tensor<T>& g) {
        const auto& G = gates.value();
        const std::size_t H = g.dim(0), n = g.dim(1), d = g.dim(2);
        T* gg = tp.grad_buffer(gates);
        for (std::size_t br = 0; br < 3; ++br) {
            if (!branches[br]) continue;
            const Var<T> b = *branches[br];
            const auto& B = b.value();
            T* gb = tp.grad_buffer(b);
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t t = 0; t < n; ++t) {
                    const std::size_t off = (h * n + t) * d;
                    const T w = G.at(t, br * H + h);
                    if (gb)
                        for (std::size_t c = 0; c < d; ++c) gb[off + c] += w * g[off + c];
                    if (gg) {
                        T dot = 0;
                        for (std::size_t c = 0; c < d; ++c) dot += g[off + c] * B[off + c];
                        gg[t * 3 * H + br * H + h] += dot;
                    }
                }
        }
    });
}

// ---- full layer ---------------------------------------------------------

// Row-vector projections: x [N, d_model] times W [d_in, d_out].
template <class T>
struct BsaWeights {
    Var<T> wq;     // [d_model, H*d]
    Var<T> wk;     // [d_model, Hkv*d]
    Var<T> wv;     // [d_model, Hkv*d]
    Var<T> wo;     // [H*d, d_model]
    Var<T> wgate;  // [d_model, 3H]
};

template <class T>
struct BsaOutput {
    Var<T> out;       // [N, d_model]
    Var<T> combined;  // [H, N, d] before the output projection
    std::optional<Var<T>> o_cg, o_fg, o_l;
    Var<T> gates;     // [N, 3H]; column branch*H + head
    Tensor<T> block_scores;
    BlockSelection selection;
};

template <class T>
struct Projected {
    Var<T> q, k, v, gates;
};

template <class T>
Projected<T> project(Var<T> x, const BsaWeights<T>& w, const AttentionConfig& cfg, const RopeTable* table) {
    Var<T> q = split_heads(matmul(x, w.wq), cfg.num_heads);
    Var<T> k = split_heads(matmul(x, w.wk), cfg.kv_heads());
    Var<T> v = split_heads(matmul(x, w.wv), cfg.kv_heads());
    if (q.dim(2) != cfg.head_dim) throw DimensionError("query projection width does not match heads * head_dim");
    if (table) {
        q = rope(q, *table);
        k = rope(k, *table);
    }
    Var<T> gates = cfg.forced_gates
                       ? x.tape->constant(constant_gates<T>(x.dim(0), cfg.num_heads, *cfg.forced_gates))
                       : sigmoid(matmul(x, w.wgate));
    return {q, k, v, gates};
}

template <class T>
BsaOutput<T> bsa_forward(Var<T> x, const BsaWeights<T>& w, const AttentionConfig& cfg, const TokenPositions& pos,
                         const RopeTable* table = nullptr) {
    const std::size_t n = x.dim(0);
    cfg.validate(n);
    if (pos.size() != n) throw DimensionError("positions do not match the token count");
    std::optional<RopeTable> own;
    if (cfg.use_rope && !table) {
        own.emplace(pos, cfg.head_dim, cfg.rope_theta);
        table = &*own;
    }
    Projected<T> p = project(x, w, cfg, cfg.use_rope ? table : nullptr);
    BsaOutput<T> res;
    res.gates = p.gates;
    if (cfg.compression || cfg.selection) {
        CompressOp<T> c = compress_op(p.q, p.k, p.v, cfg.sparse_block);
        if (cfg.compression) res.o_cg = c.out;
        res.block_scores = std::move(c.scores);
    }
    if (cfg.selection) {
        res.selection = select_top_blocks(res.block_scores, cfg.top_n);
        res.o_fg = selection_op(p.q, p.k, p.v, res.selection, cfg.sparse_block);
    }
    if (cfg.local) res.o_l = local_op(p.q, p.k, p.v, cfg.local_block);
    res.combined = gate_combine_op(p.gates, {res.o_cg, res.o_fg, res.o_l});
    res.out = matmul(merge_heads(res.combined), w.wo);
    return res;
}

// Attention core without projections: branches plus gating on raw Q, K, V.
template <class T>
Tensor<T> bsa_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& gates,
                        const AttentionConfig& cfg) {
    cfg.validate(q.dim(1));
    std::optional<CompressResult<T>> c;
    std::optional<BranchResult<T>> fg, loc;
    if (cfg.compression || cfg.selection) c = compress_forward(q, k, v, cfg.sparse_block);
    if (cfg.selection) fg = selection_forward(q, k, v, select_top_blocks(c->scores, cfg.top_n), cfg.sparse_block);
    if (cfg.local) loc = local_forward(q, k, v, cfg.local_block);
    return gate_combine(gates, {cfg.compression ? &c->out : nullptr, fg ? &fg->out : nullptr,
                                loc ? &loc->out : nullptr});
}

// ---- token-level NSA reference -----------------------------------------

// Every query token picks its own top-n key blocks from its token-to-block
// compression scores; the local branch is a sliding window of local_block
// tokens centred on the query and clamped to the sequence.
template <class T>
Tensor<T> nsa_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& gates,
                        const AttentionConfig& cfg) {
    const HeadLayout L = head_layout(q, k, v);
    cfg.validate(L.n);
    const std::size_t b = cfg.sparse_block, m = L.n / b, win = cfg.local_block;
    const Tensor<T> kp = pool_blocks(k, b), vp = pool_blocks(v, b);
    Tensor<T> o_cg(q.shape()), o_fg(q.shape()), o_l(q.shape());
    const std::size_t tile = dense_tile(L.n);
    parallel_for(L.heads, [&](std::size_t h) {
        detail::Scratch<T> inner;
        const std::size_t kvh = h / L.group();
        const T* kh = k.data() + kvh * L.n * L.d;
        const T* vh = v.data() + kvh * L.n * L.d;
        const T* kph = kp.data() + kvh * m * L.d;
        const T* vph = vp.data() + kvh * m * L.d;
        const T scale = T{1} / std::sqrt(static_cast<T>(L.d));
        AlignedVector<T> scores(tile * m), lse(1);
        std::vector<std::uint32_t> order(m);
        for (std::size_t t0 = 0; t0 < L.n; t0 += tile) {
            const T* qt = q.data() + (h * L.n + t0) * L.d;
            linalg::gemm(qt, kph, scores.data(), tile, m, L.d, false, true, scale);
            for (std::size_t r = 0; r < tile; ++r) {
                detail::RowArray<T> row(scores.data() + r * m, static_cast<Eigen::Index>(m));
                row = (row - row.maxCoeff()).exp();
                row /= row.sum();
            }
            linalg::gemm(scores.data(), vph, o_cg.data() + (h * L.n + t0) * L.d, tile, L.d, m);
            count_macs(2ull * tile * m * L.d);
            for (std::size_t r = 0; r < tile; ++r) {
                const std::size_t t = t0 + r;
                const T* row = scores.data() + r * m;
                std::iota(order.begin(), order.end(), 0u);
                std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.top_n), order.end(),
                                  [row](std::uint32_t a, std::uint32_t c) {
                                      return row[a] > row[c] || (row[a] == row[c] && a < c);
                                  });
                std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.top_n));
                const auto rg = block_ranges(std::span<const std::uint32_t>(order.data(), cfg.top_n), b);
                const std::size_t off = (h * L.n + t) * L.d;
                detail::attend_rows(q.data() + off, 1, kh, vh, L.d, rg, o_fg.data() + off, lse.data(), inner);
                const std::size_t lo = std::min(t >= win / 2 ? t - win / 2 : 0, L.n - win);
                const std::vector<KeyRange> wr{{lo, lo + win}};
                detail::attend_rows(q.data() + off, 1, kh, vh, L.d, wr, o_l.data() + off, lse.data(), inner);
            }
        }
    });
    return gate_combine(gates, {cfg.compression ? &o_cg : nullptr, cfg.selection ? &o_fg : nullptr,
                                cfg.local ? &o_l : nullptr});
}

// Full NSA layer with the same weights as bsa_forward; forward only, the
// weights are read as constants.
template <class T>
Tensor<T> nsa_forward(Var<T> x, const BsaWeights<T>& weights, const AttentionConfig& cfg, const TokenPositions& pos) {
    cfg.validate(x.dim(0));
    Tape<T> tape;
    const BsaWeights<T> w{tape.constant(weights.wq.value()), tape.constant(weights.wk.value()),
                          tape.constant(weights.wv.value()), tape.constant(weights.wo.value()),
                          tape.constant(weights.wgate.value())};
    Var<T> xv = tape.constant(x.value());
    std::optional<RopeTable> table;
    if (cfg.use_rope) table.emplace(pos, cfg.head_dim, cfg.rope_theta);
    Projected<T> p = project(xv, w, cfg, table ? &*table : nullptr);
    Tensor<T> heads = nsa_attention(p.q.value(), p.k.value(), p.v.value(), p.gates.value(), cfg);
    return matmul(merge_heads(tape.constant(std::move(heads))), w.wo).value();
}

}  // namespace mosaic::attn
