#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mosaic/attention.hpp"
#include "support/attention_oracle.hpp"
#include "support/testing.hpp"

using namespace mosaic;
using namespace mosaic::attn;
using mosaic::testing::random_tensor;
using Vs = std::vector<Var<double>>;

namespace {

AttentionConfig make_config(std::size_t heads, std::size_t gqa, std::size_t dim, std::size_t local, std::size_t sparse,
                            std::size_t top) {
    AttentionConfig c;
    c.num_heads = heads;
    c.gqa_ratio = gqa;
    c.head_dim = dim;
    c.local_block = local;
    c.sparse_block = sparse;
    c.top_n = top;
    return c;
}

struct Qkv {
    Tensor<double> q, k, v;
};

Qkv random_qkv(std::mt19937_64& rng, std::size_t heads, std::size_t kv_heads, std::size_t n, std::size_t d,
               double sd = 1.0) {
    return {random_tensor({heads, n, d}, rng, sd), random_tensor({kv_heads, n, d}, rng, sd),
            random_tensor({kv_heads, n, d}, rng, sd)};
}

TokenPositions random_positions(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> la(-1.5, 1.5), lo(0.0, 2 * std::numbers::pi);
    TokenPositions p;
    for (std::size_t i = 0; i < n; ++i) {
        p.lat.push_back(la(rng));
        p.lon.push_back(lo(rng));
    }
    return p;
}

}  // namespace

TEST(Compression, SingleBlock) {
    std::mt19937_64 rng(1);
    auto [q, k, v] = random_qkv(rng, 2, 2, 8, 4);
    auto c = compress_forward(q, k, v, 8);
    EXPECT_NEAR(c.scores[0], 1.0, 1e-15);
    auto vb = oracle::block_mean(v, 8);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t t = 0; t < 8; ++t)
            for (std::size_t e = 0; e < 4; ++e) EXPECT_NEAR(c.out.at(h, t, e), vb.at(h, 0, e), 1e-14);
}

TEST(Compression, ConstantKeysGiveUniformScores) {
    std::mt19937_64 rng(2);
    auto [q, k, v] = random_qkv(rng, 1, 1, 16, 4);
    for (std::size_t t = 0; t < 16; ++t)
        for (std::size_t e = 0; e < 4; ++e) k.at(0, t, e) = 0.3 * static_cast<double>(e);
    auto c = compress_forward(q, k, v, 4);
    for (auto s : c.scores.values()) EXPECT_NEAR(s, 0.25, 1e-14);
}

TEST(Compression, MatchesDirectEvaluation) {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        auto [q, k, v] = random_qkv(rng, 4, 2, 8, 4);
        auto c = compress_forward(q, k, v, 2);
        auto ref = oracle::compression(q, k, v, 2);
        EXPECT_LT(max_abs_diff(c.scores, ref.scores), 1e-12);
        EXPECT_LT(max_abs_diff(c.out, ref.out), 1e-12);
    }
}

TEST(Compression, PermutationWithinKeyBlockInvariant) {
    std::mt19937_64 rng(4);
    auto [q, k, v] = random_qkv(rng, 1, 1, 16, 4);
    auto a = compress_forward(q, k, v, 4);
    // swap tokens 5 and 7 (same block) in k and v
    for (std::size_t e = 0; e < 4; ++e) {
        std::swap(k.at(0, 5, e), k.at(0, 7, e));
        std::swap(v.at(0, 5, e), v.at(0, 7, e));
    }
    auto b = compress_forward(q, k, v, 4);
    EXPECT_LT(max_abs_diff(a.scores, b.scores), 1e-14);
    EXPECT_LT(max_abs_diff(a.out, b.out), 1e-14);
}

TEST(Selection, AllBlocksEqualsDense) {
    std::mt19937_64 rng(5);
    auto [q, k, v] = random_qkv(rng, 2, 1, 32, 8);
    auto c = compress_forward(q, k, v, 4);
    auto sel = select_top_blocks(c.scores, 8);
    EXPECT_LT(max_abs_diff(selection_forward(q, k, v, sel, 4).out, oracle::dense_attention(q, k, v)), 1e-10);
}

TEST(Selection, MatchesMaskedDense) {
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 20; ++rep) {
        auto [q, k, v] = random_qkv(rng, 2, 2, 16, 4);
        const std::size_t b = 4, top = 2;
        auto ref = oracle::compression(q, k, v, b);
        std::vector<std::vector<std::vector<std::size_t>>> chosen(2, std::vector<std::vector<std::size_t>>(4));
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < 4; ++i) {
                std::vector<double> row(4);
                for (std::size_t j = 0; j < 4; ++j) row[j] = ref.scores.at(h, i, j);
                chosen[h][i] = oracle::top_indices(row, top);
            }
        auto expect = oracle::masked_attention(q, k, v, [&](std::size_t h, std::size_t i, std::size_t j) {
            const auto& s = chosen[h][i / b];
            return std::find(s.begin(), s.end(), j / b) != s.end();
        });
        auto sel = select_top_blocks(compress_forward(q, k, v, b).scores, top);
        EXPECT_LT(max_abs_diff(selection_forward(q, k, v, sel, b).out, expect), 1e-10);
    }
}

TEST(Selection, DominantBlockOnly) {
    std::mt19937_64 rng(7);
    auto [q, k, v] = random_qkv(rng, 1, 1, 16, 4, 0.1);
    // every query aligned with a direction that block 2's keys amplify
    for (std::size_t t = 0; t < 16; ++t) q.at(0, t, 0) = 1.0;
    for (std::size_t t = 8; t < 12; ++t) k.at(0, t, 0) = 20.0;
    auto c = compress_forward(q, k, v, 4);
    auto sel = select_top_blocks(c.scores, 1);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(sel.of(0, i)[0], 2u);
    auto expect = oracle::masked_attention(q, k, v, [](std::size_t, std::size_t, std::size_t j) { return j / 4 == 2; });
    EXPECT_LT(max_abs_diff(selection_forward(q, k, v, sel, 4).out, expect), 1e-10);
}

TEST(Selection, TiesGoToLowerIndex) {
    Tensor<double> scores(Shape{1, 5, 5}, 0.2);
    const double row[] = {0.1, 0.3, 0.1, 0.3, 0.2};
    for (std::size_t j = 0; j < 5; ++j) scores.at(0, 0, j) = row[j];
    auto sel = select_top_blocks(scores, 3);
    EXPECT_EQ(std::vector<std::uint32_t>(sel.of(0, 0).begin(), sel.of(0, 0).end()),
              (std::vector<std::uint32_t>{1, 3, 4}));
    auto two = select_top_blocks(Tensor<double>(Shape{1, 4, 4}, 0.25), 2);
    EXPECT_EQ(two.of(0, 0)[0], 0u);
    EXPECT_EQ(two.of(0, 0)[1], 1u);
    EXPECT_THROW(select_top_blocks(scores, 6), ConfigError);
}

TEST(Selection, ScaleConsistent) {
    std::mt19937_64 rng(8);
    auto [q, k, v] = random_qkv(rng, 2, 2, 32, 4);
    auto a = select_top_blocks(compress_forward(q, k, v, 4).scores, 3);
    q *= 2.5;
    auto b = select_top_blocks(compress_forward(q, k, v, 4).scores, 3);
    EXPECT_EQ(a.index, b.index);
}

TEST(Local, IdentitiesAndMaskedDense) {
    std::mt19937_64 rng(9);
    auto [q, k, v] = random_qkv(rng, 2, 1, 12, 4);
    EXPECT_LT(max_abs_diff(local_forward(q, k, v, 12).out, oracle::dense_attention(q, k, v)), 1e-10);
    auto self = local_forward(q, k, v, 1).out;
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t t = 0; t < 12; ++t)
            for (std::size_t e = 0; e < 4; ++e) EXPECT_NEAR(self.at(h, t, e), v.at(0, t, e), 1e-15);
    auto expect = oracle::masked_attention(q, k, v, [](std::size_t, std::size_t i, std::size_t j) { return i / 4 == j / 4; });
    EXPECT_LT(max_abs_diff(local_forward(q, k, v, 4).out, expect), 1e-10);
}

TEST(BranchKernels, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(10);
    auto [q, k, v] = random_qkv(rng, 4, 2, 16, 4);
    auto c = compress_forward(q, k, v, 4);
    const BlockSelection sel = select_top_blocks(c.scores, 2);
    auto check = [&](const char* name, mosaic::testing::LossFn fn) {
        auto r = mosaic::testing::gradcheck({q, k, v}, fn);
        EXPECT_LT(r.max_rel_err, 1e-6) << name;
    };
    check("compress", [](Tape<double>&, const Vs& x) { return mosaic::testing::project_to_scalar(compress_op(x[0], x[1], x[2], 4).out); });
    check("select", [&](Tape<double>&, const Vs& x) { return mosaic::testing::project_to_scalar(selection_op(x[0], x[1], x[2], sel, 4)); });
    check("local", [](Tape<double>&, const Vs& x) { return mosaic::testing::project_to_scalar(local_op(x[0], x[1], x[2], 8)); });
    check("dense", [](Tape<double>&, const Vs& x) { return mosaic::testing::project_to_scalar(dense_op(x[0], x[1], x[2])); });
}

TEST(Rope, RotationPreservesNormAndInverts) {
    std::mt19937_64 rng(11);
    auto pos = random_positions(rng, 6);
    RopeTable table(pos, 8, 10000.0);
    auto x = random_tensor({2, 6, 8}, rng);
    auto y = x;
    table.apply(y);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t t = 0; t < 6; ++t) {
            double a = 0, b = 0;
            for (std::size_t e = 0; e < 8; ++e) {
                a += x.at(h, t, e) * x.at(h, t, e);
                b += y.at(h, t, e) * y.at(h, t, e);
            }
            EXPECT_NEAR(a, b, 1e-12);
        }
    table.apply(y, true);
    EXPECT_LT(max_abs_diff(x, y), 1e-14);
    EXPECT_THROW(RopeTable(pos, 6, 10000.0), ConfigError);
}

// Rotated dot products depend on positions only through their differences.
TEST(Rope, RelativePositionProperty) {
    std::mt19937_64 rng(12);
    auto qv = random_tensor({1, 1, 8}, rng), kv = random_tensor({1, 1, 8}, rng);
    auto dot_at = [&](double lat_q, double lon_q, double lat_k, double lon_k) {
        TokenPositions pq{{lat_q}, {lon_q}}, pk{{lat_k}, {lon_k}};
        auto a = qv, b = kv;
        RopeTable(pq, 8, 10000.0).apply(a);
        RopeTable(pk, 8, 10000.0).apply(b);
        double s = 0;
        for (std::size_t e = 0; e < 8; ++e) s += a[e] * b[e];
        return s;
    };
    EXPECT_NEAR(dot_at(0.3, 1.0, 0.1, 0.4), dot_at(0.5, 2.0, 0.3, 1.4), 1e-12);
    EXPECT_GT(std::abs(dot_at(0.3, 1.0, 0.1, 0.4) - dot_at(0.3, 1.0, 0.1, 0.9)), 1e-6);
}

namespace {

struct Layer {
    AttentionConfig cfg;
    std::size_t d_model;
    std::vector<Tensor<double>> weights;  // wq wk wv wo wgate
};

Layer random_layer(std::mt19937_64& rng, AttentionConfig cfg, std::size_t d_model) {
    const std::size_t H = cfg.num_heads, Hk = cfg.kv_heads(), d = cfg.head_dim;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    return {cfg, d_model,
            {random_tensor({d_model, H * d}, rng, s), random_tensor({d_model, Hk * d}, rng, s),
             random_tensor({d_model, Hk * d}, rng, s), random_tensor({H * d, d_model}, rng, s),
             random_tensor({d_model, 3 * H}, rng, s)}};
}

BsaWeights<double> bind_weights(Tape<double>& t, const std::vector<Tensor<double>>& w) {
    return {t.constant(w[0]), t.constant(w[1]), t.constant(w[2]), t.constant(w[3]), t.constant(w[4])};
}

// Projected, rotated q/k/v computed independently of the layer.
Qkv projected(const Layer& L, const Tensor<double>& x, const TokenPositions& pos) {
    Tape<double> t;
    auto xv = t.constant(x);
    auto w = bind_weights(t, L.weights);
    auto q = split_heads(matmul(xv, w.wq), L.cfg.num_heads).value();
    auto k = split_heads(matmul(xv, w.wk), L.cfg.kv_heads()).value();
    auto v = split_heads(matmul(xv, w.wv), L.cfg.kv_heads()).value();
    RopeTable table(pos, L.cfg.head_dim, L.cfg.rope_theta);
    table.apply(q);
    table.apply(k);
    return {q, k, v};
}

}  // namespace

TEST(BsaForward, ForcedGatesReduceToBranches) {
    std::mt19937_64 rng(13);
    auto cfg = make_config(4, 2, 8, 16, 8, 8);
    auto L = random_layer(rng, cfg, 16);
    auto x = random_tensor({64, 16}, rng);
    auto pos = random_positions(rng, 64);
    auto p = projected(L, x, pos);

    Tape<double> t;
    L.cfg.forced_gates = std::array<double, 3>{0, 0, 1};
    auto local = bsa_forward(t.constant(x), bind_weights(t, L.weights), L.cfg, pos);
    EXPECT_LT(max_abs_diff(local.combined.value(), local_forward(p.q, p.k, p.v, 16).out), 1e-12);

    L.cfg.forced_gates = std::array<double, 3>{0, 1, 0};
    auto dense = bsa_forward(t.constant(x), bind_weights(t, L.weights), L.cfg, pos);
    EXPECT_LT(max_abs_diff(dense.combined.value(), oracle::dense_attention(p.q, p.k, p.v)), 1e-10);
}

TEST(BsaForward, OutputIsGatedSumOfBranches) {
    std::mt19937_64 rng(14);
    auto cfg = make_config(2, 1, 4, 16, 8, 3);
    auto L = random_layer(rng, cfg, 8);
    auto x = random_tensor({64, 8}, rng);
    auto pos = random_positions(rng, 64);
    Tape<double> t;
    auto out = bsa_forward(t.constant(x), bind_weights(t, L.weights), cfg, pos);
    const auto& G = out.gates.value();
    const std::size_t H = 2;
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t n = 0; n < 64; ++n)
            for (std::size_t e = 0; e < 4; ++e) {
                const double expect = G.at(n, h) * out.o_cg->value().at(h, n, e) +
                                      G.at(n, H + h) * out.o_fg->value().at(h, n, e) +
                                      G.at(n, 2 * H + h) * out.o_l->value().at(h, n, e);
                EXPECT_NEAR(out.combined.value().at(h, n, e), expect, 1e-14);
                EXPECT_GT(G.at(n, h), 0.0);
                EXPECT_LT(G.at(n, h), 1.0);
            }
    EXPECT_EQ(out.selection.top_n, 3u);
    EXPECT_EQ(out.selection.index.size(), H * 8 * 3);
}

TEST(BsaForward, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(15);
    auto cfg = make_config(2, 2, 4, 16, 8, 3);
    auto L = random_layer(rng, cfg, 8);
    auto x = random_tensor({64, 8}, rng);
    auto pos = random_positions(rng, 64);
    std::vector<Tensor<double>> inputs{x};
    inputs.insert(inputs.end(), L.weights.begin(), L.weights.end());
    auto r = mosaic::testing::gradcheck(inputs, [&](Tape<double>&, const Vs& v) {
        BsaWeights<double> w{v[1], v[2], v[3], v[4], v[5]};
        return mosaic::testing::project_to_scalar(bsa_forward(v[0], w, cfg, pos).out);
    });
    EXPECT_LT(r.max_rel_err, 1e-4);
}

TEST(BsaForward, ValidatesConfiguration) {
    std::mt19937_64 rng(16);
    auto cfg = make_config(2, 1, 4, 16, 8, 3);
    auto L = random_layer(rng, cfg, 8);
    Tape<double> t;
    auto x = t.constant(random_tensor({60, 8}, rng));
    EXPECT_THROW(bsa_forward(x, bind_weights(t, L.weights), cfg, random_positions(rng, 60)), ConfigError);
    cfg.top_n = 20;
    EXPECT_THROW(cfg.validate(64), ConfigError);
    cfg.top_n = 3;
    cfg.gqa_ratio = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Nsa, AllBlocksEqualsDense) {
    std::mt19937_64 rng(17);
    auto cfg = make_config(2, 1, 4, 4, 4, 4);
    auto [q, k, v] = random_qkv(rng, 2, 1, 16, 4);
    cfg.num_heads = 2;
    cfg.gqa_ratio = 2;
    auto out = nsa_attention(q, k, v, constant_gates<double>(16, 2, {0, 1, 0}), cfg);
    EXPECT_LT(max_abs_diff(out, oracle::dense_attention(q, k, v)), 1e-10);
}

TEST(Nsa, PerTokenMasksAndSlidingWindow) {
    std::mt19937_64 rng(18);
    for (std::size_t b : {1, 4}) {
        auto cfg = make_config(1, 1, 4, 4, b, 2);
        auto [q, k, v] = random_qkv(rng, 1, 1, 16, 4);
        const std::size_t m = 16 / b;
        const auto kb = oracle::block_mean(k, b), vb = oracle::block_mean(v, b);
        std::vector<std::vector<std::size_t>> chosen(16);
        Tensor<double> cmp(q.shape());
        for (std::size_t t = 0; t < 16; ++t) {
            std::vector<double> s(m);
            double mx = -1e300;
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t e = 0; e < 4; ++e) s[j] += q.at(0, t, e) * kb.at(0, j, e);
                s[j] /= 2.0;
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (auto& x : s) z += (x = std::exp(x - mx));
            for (auto& x : s) x /= z;
            chosen[t] = oracle::top_indices(s, 2);
            for (std::size_t e = 0; e < 4; ++e)
                for (std::size_t j = 0; j < m; ++j) cmp.at(0, t, e) += s[j] * vb.at(0, j, e);
        }
        auto fg = oracle::masked_attention(q, k, v, [&](std::size_t, std::size_t i, std::size_t j) {
            return std::find(chosen[i].begin(), chosen[i].end(), j / b) != chosen[i].end();
        });
        auto win = oracle::masked_attention(q, k, v, [](std::size_t, std::size_t i, std::size_t j) {
            const std::size_t lo = std::min<std::size_t>(i >= 2 ? i - 2 : 0, 12);
            return j >= lo && j < lo + 4;
        });
        EXPECT_LT(max_abs_diff(nsa_attention(q, k, v, constant_gates<double>(16, 1, {0, 1, 0}), cfg), fg), 1e-10);
        EXPECT_LT(max_abs_diff(nsa_attention(q, k, v, constant_gates<double>(16, 1, {0, 0, 1}), cfg), win), 1e-10);
        EXPECT_LT(max_abs_diff(nsa_attention(q, k, v, constant_gates<double>(16, 1, {1, 0, 0}), cfg), cmp), 1e-10);
    }
}

TEST(Nsa, LayerMatchesBsaWhenSelectionCoversAll) {
    std::mt19937_64 rng(19);
    auto cfg = make_config(2, 1, 4, 16, 4, 4);
    cfg.forced_gates = std::array<double, 3>{0, 1, 0};
    auto L = random_layer(rng, cfg, 8);
    auto x = random_tensor({16, 8}, rng);
    auto pos = random_positions(rng, 16);
    Tape<double> t;
    auto w = bind_weights(t, L.weights);
    auto a = bsa_forward(t.constant(x), w, cfg, pos).out.value();
    auto b = nsa_forward(t.constant(x), w, cfg, pos);
    EXPECT_LT(max_abs_diff(a, b), 1e-10);
}

TEST(FlopCounter, LinearForBsaQuadraticForDense) {
    auto cfg = make_config(1, 1, 8, 64, 32, 2);
    std::mt19937_64 rng(20);
    auto count = [&](std::size_t n, bool dense) {
        auto q = random_tensor({1, n, 8}, rng);
        FlopCounter fc;
        {
            CountFlops guard(fc);
            if (dense)
                (void)dense_attention(q, q, q);
            else
                (void)bsa_attention(q, q, q, constant_gates<double>(n, 1, {1, 1, 1}), cfg);
        }
        return static_cast<double>(fc.macs.load());
    };
    const double b1 = count(1024, false), b2 = count(4096, false);
    EXPECT_NEAR(std::log(b2 / b1) / std::log(4.0), 1.0, 0.05);
    const double d1 = count(256, true), d2 = count(1024, true);
    EXPECT_NEAR(std::log(d2 / d1) / std::log(4.0), 2.0, 0.01);
}
