#pragma once

// Forward-pass timing and MAC counts of the attention core (block-sparse vs
// dense) over a range of sequence lengths.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "mosaic/attention.hpp"
#include "mosaic/parallel.hpp"

namespace mosaic::bench {

struct BenchConfig {
    std::vector<std::size_t> lengths{8192, 16384, 32768, 65536};
    std::size_t sparse_block = 64;
    std::size_t local_block = 256;
    std::size_t top_n = 8;
    std::size_t head_dim = 32;
    std::size_t heads = 1;
    std::size_t repeats = 3;
    bool dense = true;
    std::uint64_t seed = 0;

    attn::AttentionConfig attention() const {
        attn::AttentionConfig c;
        c.num_heads = heads;
        c.head_dim = head_dim;
        c.sparse_block = sparse_block;
        c.local_block = local_block;
        c.top_n = top_n;
        c.use_rope = false;
        return c;
    }
};

struct BenchRow {
    std::size_t length = 0;
    std::string variant;
    double ms = 0;  // median over repeats
    std::uint64_t macs = 0;
};

namespace detail {

inline Tensor<float> random_qkv(std::size_t heads, std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<float> nd(0.0f, 1.0f);
    Tensor<float> t(Shape{heads, n, d});
    for (auto& v : t.values()) v = nd(rng);
    return t;
}

template <class F>
BenchRow time_variant(std::size_t n, const std::string& name, std::size_t repeats, F&& run) {
    BenchRow row{n, name, 0, 0};
    {
        FlopCounter fc;
        CountFlops guard(fc);
        run();
        row.macs = fc.macs.load();
    }
    std::vector<double> ms;
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::nth_element(ms.begin(), ms.begin() + ms.size() / 2, ms.end());
    row.ms = ms[ms.size() / 2];
    return row;
}

}  // namespace detail

// One row per (length, variant). The first call of each variant is an
// untimed warm-up that also counts MACs.
inline std::vector<BenchRow> run(const BenchConfig& cfg) {
    if (cfg.repeats == 0) throw ConfigError("bench needs at least one repeat");
    const auto ac = cfg.attention();
    std::vector<BenchRow> rows;
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t n : cfg.lengths) {
        ac.validate(n);
        const auto q = detail::random_qkv(cfg.heads, n, cfg.head_dim, rng);
        const auto k = detail::random_qkv(cfg.heads, n, cfg.head_dim, rng);
        const auto v = detail::random_qkv(cfg.heads, n, cfg.head_dim, rng);
        const auto gates = attn::constant_gates<float>(n, cfg.heads, {1.0 / 3, 1.0 / 3, 1.0 / 3});
        rows.push_back(detail::time_variant(n, "bsa", cfg.repeats, [&] { (void)attn::bsa_attention(q, k, v, gates, ac); }));
        if (cfg.dense)
            rows.push_back(detail::time_variant(n, "dense", cfg.repeats, [&] { (void)attn::dense_attention(q, k, v); }));
    }
    return rows;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope needs two or more matched points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(y.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

// Slope of `field` (ms or macs) for one variant.
inline double variant_slope(const std::vector<BenchRow>& rows, const std::string& variant, bool use_macs = false) {
    std::vector<double> x, y;
    for (const auto& r : rows)
        if (r.variant == variant) {
            x.push_back(static_cast<double>(r.length));
            y.push_back(use_macs ? static_cast<double>(r.macs) : r.ms);
        }
    return loglog_slope(x, y);
}

inline void write_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
    os << "length,variant,ms,macs\n";
    for (const auto& r : rows) os << r.length << ',' << r.variant << ',' << r.ms << ',' << r.macs << '\n';
}

}  // namespace mosaic::bench
