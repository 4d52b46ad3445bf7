#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mosaic/diagnostics.hpp"
#include "mosaic/spectral.hpp"
#include "support/testing.hpp"

using namespace mosaic;
using namespace mosaic::spectral;
using mosaic::testing::random_tensor;

namespace {

Coefficients random_coefficients(std::size_t n_max, std::mt19937_64& rng, std::size_t n_min = 0) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Coefficients c(n_max);
    for (std::size_t n = n_min; n <= n_max; ++n) {
        c(n, 0) = nd(rng);
        for (std::size_t m = 1; m <= n; ++m) c(n, m) = {nd(rng) / std::sqrt(2.0), nd(rng) / std::sqrt(2.0)};
    }
    return c;
}

// Area mean on a fine grid by the midpoint rule in latitude and longitude.
double area_mean(const Tensor<double>& f, const LatLonGrid& g) {
    double s = 0, w = 0;
    for (std::size_t j = 0; j < g.height(); ++j) {
        const double c = std::cos(g.lat(j));
        for (std::size_t k = 0; k < g.width(); ++k) s += c * f[j * g.width() + k];
        w += c * static_cast<double>(g.width());
    }
    return s / w;
}

Tensor<double> field(std::size_t h, std::size_t w, double v) { return Tensor<double>(Shape{h, w}, v); }

Tensor<double> scaled(Tensor<double> t, double s) {
    t *= s;
    return t;
}

Tensor<double> plus(Tensor<double> a, const Tensor<double>& b) {
    a += b;
    return a;
}

}  // namespace

// ---- spherical transform ------------------------------------------------------

TEST(Legendre, LowDegreeClosedForms) {
    const double x = 0.37, s = std::sqrt(1 - x * x);
    const auto p = legendre_table(2, x);
    EXPECT_NEAR(p[Coefficients::index(0, 0)], 1.0, 1e-15);
    EXPECT_NEAR(p[Coefficients::index(1, 0)], std::sqrt(3.0) * x, 1e-14);
    EXPECT_NEAR(p[Coefficients::index(1, 1)], std::sqrt(1.5) * s, 1e-14);
    EXPECT_NEAR(p[Coefficients::index(2, 0)], std::sqrt(5.0) * (3 * x * x - 1) / 2, 1e-14);
    EXPECT_NEAR(p[Coefficients::index(2, 2)], std::sqrt(15.0 / 8) * s * s, 1e-14);
}

TEST(Fejer, IntegratesPolynomials) {
    const auto w = fejer_weights(12);
    double s0 = 0, s2 = 0, s7 = 0;
    for (std::size_t j = 0; j < w.size(); ++j) {
        const double x = std::cos((static_cast<double>(j) + 0.5) * std::numbers::pi / 12);
        s0 += w[j];
        s2 += w[j] * x * x;
        s7 += w[j] * std::pow(x, 7);
    }
    EXPECT_NEAR(s0, 2.0, 1e-13);
    EXPECT_NEAR(s2, 2.0 / 3, 1e-13);
    EXPECT_NEAR(s7, 0.0, 1e-13);
}

TEST(SphericalTransform, SynthesisAnalysisRoundTrip) {
    std::mt19937_64 rng(1);
    const SphericalTransform st(24, 48, 11);
    const auto c = random_coefficients(11, rng);
    const auto back = st.analyze(st.synthesize(c));
    for (std::size_t i = 0; i < c.a.size(); ++i) EXPECT_NEAR(std::abs(back.a[i] - c.a[i]), 0.0, 1e-10);
}

TEST(SphericalTransform, ParsevalOnBandLimitedFields) {
    std::mt19937_64 rng(2);
    const std::size_t L = 10;
    const auto c = random_coefficients(L, rng);
    const SphericalTransform fine(96, 192, L);
    Tensor<double> f = fine.synthesize(c);
    for (auto& v : f.values()) v *= v;
    const double mean_sq = area_mean(f, fine.grid());
    const SphericalTransform st(32, 64, L);
    const auto p = st.power(st.synthesize(c));
    double total = 0;
    for (double v : p) total += v;
    EXPECT_NEAR(total / mean_sq, 1.0, 0.01);
}

TEST(SphericalTransform, SingleHarmonicConcentratesInItsDegree) {
    const SphericalTransform st(32, 64, 20);
    for (auto [n, m] : {std::pair<std::size_t, int>{3, 0}, {7, 4}, {12, -5}, {20, 20}}) {
        Tensor<double> f(Shape{32, 64});
        for (std::size_t j = 0; j < 32; ++j)
            for (std::size_t k = 0; k < 64; ++k) f.at(j, k) = real_harmonic(n, m, st.grid().lat(j), st.grid().lon(k));
        const auto p = st.power(f);
        double total = 0;
        for (double v : p) total += v;
        EXPECT_GT(p[n] / total, 0.99) << "n=" << n << " m=" << m;
    }
}

TEST(SphericalTransform, RejectsDegreesTheGridCannotHold) {
    EXPECT_THROW(SphericalTransform(16, 32, 16), ConfigError);
    EXPECT_THROW(SphericalTransform(16, 20, 10), ConfigError);
    const SphericalTransform st(8, 16, 5);
    EXPECT_THROW(st.analyze(Tensor<double>(Shape{4, 4})), DimensionError);
}

TEST(SpectralRatio, IdentityAndScaling) {
    std::mt19937_64 rng(3);
    const SphericalTransform st(16, 32, 7);
    std::vector<Tensor<double>> ref, half;
    for (int i = 0; i < 3; ++i) {
        ref.push_back(st.synthesize(random_coefficients(7, rng)));
        half.push_back(scaled(ref.back(), 0.5));
    }
    for (const auto& r : spectral_ratio(ref, ref, 7)) {
        ASSERT_TRUE(r.has_value());
        EXPECT_EQ(*r, 1.0);
    }
    for (const auto& r : spectral_ratio(half, ref, 7)) EXPECT_NEAR(*r, 0.25, 1e-12);
    for (const auto& r : spectral_ratio(half, ref, 7, true)) EXPECT_NEAR(*r, 0.5, 1e-12);
}

TEST(SpectralRatio, LowPassFilteredCopy) {
    std::mt19937_64 rng(4);
    const std::size_t L = 12, cutoff = 6;
    const SphericalTransform st(16, 32, L - 3);
    const SphericalTransform synth(16, 32, L - 3);
    std::vector<Tensor<double>> ref, low;
    for (int i = 0; i < 4; ++i) {
        auto c = random_coefficients(L - 3, rng);
        ref.push_back(synth.synthesize(c));
        for (std::size_t n = cutoff + 1; n <= c.n_max; ++n)
            for (std::size_t m = 0; m <= n; ++m) c(n, m) *= 0.3;
        low.push_back(synth.synthesize(c));
    }
    const auto r = spectral_ratio(low, ref, L - 3);
    for (std::size_t n = 0; n <= cutoff; ++n) EXPECT_NEAR(*r[n], 1.0, 1e-9);
    for (std::size_t n = cutoff + 1; n <= L - 3; ++n) EXPECT_LT(*r[n], 0.5);
    EXPECT_EQ(effective_resolution(r), cutoff);
}

TEST(SpectralRatio, ZeroReferencePowerIsMissing) {
    std::vector<Tensor<double>> ref{field(8, 16, 2.0)}, model{field(8, 16, 3.0)};
    const auto r = spectral_ratio(model, ref, 3);
    ASSERT_TRUE(r[0].has_value());
    EXPECT_NEAR(*r[0], 2.25, 1e-12);
    for (std::size_t n = 1; n <= 3; ++n) EXPECT_FALSE(r[n].has_value());
    EXPECT_THROW(spectral_ratio({}, {}, 3), DimensionError);
}

TEST(EffectiveResolution, Definitions) {
    std::vector<std::optional<double>> ones(21, 1.0);
    EXPECT_EQ(effective_resolution(ones), 20u);
    auto drop = ones;
    for (std::size_t n = 10; n <= 20; ++n) drop[n] = 0.85;
    EXPECT_EQ(effective_resolution(drop), 9u);
    auto gap = ones;
    gap[5].reset();
    EXPECT_EQ(effective_resolution(gap), 4u);
}

TEST(EffectiveResolution, DampedSpectrumCrossing) {
    // ratio exp(-(n/30)^2) leaves [0.9, 1.1] once n > 30 sqrt(ln(1/0.9)) = 9.74
    std::vector<std::optional<double>> r(40);
    for (std::size_t n = 0; n < 40; ++n) r[n] = std::exp(-std::pow(static_cast<double>(n) / 30, 2));
    EXPECT_EQ(effective_resolution(r), 9u);
    EXPECT_EQ(effective_resolution(r, 0.2), 14u);  // 30 sqrt(ln 1.25) = 14.17
}

// ---- scores -------------------------------------------------------------------------

TEST(Scores, WeightedMeanAndRmse) {
    const LatLonGrid g(6, 12);
    EXPECT_NEAR(diag::weighted_mean(field(6, 12, 3.5), g), 3.5, 1e-12);
    EXPECT_EQ(diag::latitude_weighted_rmse(field(6, 12, 1), field(6, 12, 1), g), 0.0);
    EXPECT_NEAR(diag::latitude_weighted_rmse(field(6, 12, 1), field(6, 12, -0.5), g), 1.5, 1e-12);
    EXPECT_THROW(diag::weighted_mean(field(5, 12, 0), g), DimensionError);
}

TEST(Scores, RmseWeightsRowsByCosineLatitude) {
    const LatLonGrid g(4, 8);
    Tensor<double> a(Shape{4, 8});
    for (std::size_t k = 0; k < 8; ++k) a.at(0, k) = 2.0;  // error only in the first row
    const auto w = train::latitude_weights(g);
    EXPECT_NEAR(diag::latitude_weighted_rmse(a, field(4, 8, 0), g), std::sqrt(w[0] * 4 / 4), 1e-12);
}

TEST(Drift, TrivialCases) {
    const LatLonGrid g(4, 8);
    Tensor<double> constant(Shape{5, 4, 8}, 1013.0);
    for (double d : diag::gmsp_drift(constant, g)) EXPECT_NEAR(d, 0.0, 1e-12);
    Tensor<double> ramp(Shape{5, 4, 8});
    for (std::size_t s = 0; s < 5; ++s)
        for (std::size_t i = 0; i < 32; ++i) ramp[s * 32 + i] = 1000 + 0.1 * static_cast<double>(s);
    const auto d = diag::gmsp_drift(ramp, g);
    for (std::size_t s = 0; s < 5; ++s) EXPECT_NEAR(d[s], 0.1 * static_cast<double>(s), 1e-9);
}

TEST(Drift, LinearInTheField) {
    std::mt19937_64 rng(5);
    const LatLonGrid g(4, 8);
    const auto x = random_tensor({6, 4, 8}, rng);
    const auto a = diag::gmsp_drift(x, g);
    const auto b = diag::gmsp_drift(scaled(x, 2.5), g);
    for (std::size_t s = 0; s < a.size(); ++s) EXPECT_NEAR(b[s], 2.5 * a[s], 1e-12);
}

TEST(EnsembleScore, PerfectMembersScoreZero) {
    std::mt19937_64 rng(6);
    const LatLonGrid g(4, 8);
    const auto truth = random_tensor({4, 8}, rng);
    diag::EnsembleScore s(g);
    s.add({truth, truth, truth}, truth);
    const auto m = s.result();
    EXPECT_NEAR(m.rmse, 0.0, 1e-15);
    EXPECT_NEAR(m.crps, 0.0, 1e-15);
    EXPECT_NEAR(m.spread, 0.0, 1e-15);
}

TEST(EnsembleScore, TwoMemberDoubleLoopOracle) {
    std::mt19937_64 rng(7);
    const LatLonGrid g(3, 6);
    const auto w = train::latitude_weights(g);
    double mse = 0, var = 0, crps = 0;
    diag::EnsembleScore s(g);
    for (int c = 0; c < 3; ++c) {
        const auto a = random_tensor({3, 6}, rng), b = random_tensor({3, 6}, rng), y = random_tensor({3, 6}, rng);
        s.add({a, b}, y);
        double cm = 0, cv = 0, cc = 0;
        for (std::size_t i = 0; i < 18; ++i) {
            const double x[2] = {a[i], b[i]};
            double skill = 0, pair = 0;
            for (double u : x) {
                skill += std::abs(u - y[i]);
                for (double v : x) pair += std::abs(u - v);
            }
            const double mean = (x[0] + x[1]) / 2;
            cm += w[i / 6] * (mean - y[i]) * (mean - y[i]);
            cv += w[i / 6] * ((x[0] - mean) * (x[0] - mean) + (x[1] - mean) * (x[1] - mean));
            cc += w[i / 6] * (skill / 2 - pair / 4);
        }
        mse += cm / 18;
        var += cv / 18;
        crps += cc / 18;
    }
    const auto m = s.result(2.0);
    EXPECT_NEAR(m.rmse, std::sqrt(mse / 3), 1e-12);
    EXPECT_NEAR(m.nrmse, std::sqrt(mse / 3) / 2, 1e-12);
    EXPECT_NEAR(m.spread, std::sqrt(var / 3), 1e-12);
    EXPECT_NEAR(m.crps, crps / 3, 1e-12);
    EXPECT_NEAR(m.ssr, m.spread / m.rmse, 1e-12);
}

TEST(EnsembleScore, CalibratedEnsembleHasUnitSpreadSkill) {
    std::mt19937_64 rng(8);
    const LatLonGrid g(4, 8);
    diag::EnsembleScore s(g);
    for (int trial = 0; trial < 200; ++trial) {
        // truth and members are i.i.d. draws around a shared random mean
        const auto centre = random_tensor({4, 8}, rng, 3.0);
        const auto truth = plus(centre, random_tensor({4, 8}, rng));
        std::vector<Tensor<double>> members;
        for (int n = 0; n < 48; ++n) members.push_back(plus(centre, random_tensor({4, 8}, rng)));
        s.add(members, truth);
    }
    EXPECT_NEAR(s.result().ssr, 1.0, 0.1);
}

TEST(EnsembleScore, SingleMemberHasNoProbabilisticScores) {
    const LatLonGrid g(2, 4);
    diag::EnsembleScore s(g);
    s.add({field(2, 4, 1)}, field(2, 4, 0));
    EXPECT_THROW(s.result(), ConfigError);
    const auto m = s.result(1.0, false);
    EXPECT_NEAR(m.rmse, 1.0, 1e-12);
    EXPECT_TRUE(std::isnan(m.crps));
    EXPECT_THROW(diag::EnsembleScore(g).result(), ConfigError);
}

// ---- aliasing -------------------------------------------------------------------------

TEST(Aliasing, RingFoldingMatchesProductExpansion) {
    // (cos a + cos b)^2 = 1 + cos 2a / 2 + cos 2b / 2 + cos(a+b) + cos(a-b)
    for (auto [m, k1, k2] : {std::tuple<std::size_t, std::size_t, std::size_t>{16, 3, 5}, {16, 5, 7}, {12, 4, 5}, {20, 9, 2}}) {
        const auto p = diag::ring_power(m, k1, k2, [](double x) { return x * x; });
        std::vector<double> coef(m / 2 + 1, 0.0);
        auto add = [&](std::size_t f, double amp) {
            // cos(f t) puts amp/2 on +f and on -f, both taken mod m
            for (std::size_t k : {f % m, (m - f % m) % m})
                if (k <= m / 2) coef[k] += amp / 2;
        };
        add(0, 1.0);
        add(2 * k1, 0.5);
        add(2 * k2, 0.5);
        add(k1 + k2, 1.0);
        add(k1 > k2 ? k1 - k2 : k2 - k1, 1.0);
        for (std::size_t f = 0; f <= m / 2; ++f)
            EXPECT_NEAR(p[f], coef[f] * coef[f], 1e-12) << "m=" << m << " f=" << f;
    }
}

TEST(Aliasing, FoldedFrequency) {
    EXPECT_EQ(diag::folded_frequency(3, 16), 3u);
    EXPECT_EQ(diag::folded_frequency(10, 16), 6u);
    EXPECT_EQ(diag::folded_frequency(14, 12), 2u);
    EXPECT_EQ(diag::folded_frequency(16, 16), 0u);
}

TEST(Aliasing, MeshProjectorRecoversBandLimitedCoefficients) {
    std::mt19937_64 rng(9);
    const auto c = random_coefficients(5, rng);
    const diag::MeshProjector proj(8, 5);
    const auto back = proj.analyze(proj.evaluate(c));
    double err = 0, norm = 0;
    for (std::size_t i = 0; i < c.a.size(); ++i) {
        err += std::norm(back.a[i] - c.a[i]);
        norm += std::norm(c.a[i]);
    }
    EXPECT_LT(std::sqrt(err / norm), 0.02);
}

class AliasingDemo : public ::testing::Test {
protected:
    std::vector<Coefficients> signals = diag::red_signals(4, 24, 0.0, 1);
    LatLonGrid source{96, 192};
};

TEST_F(AliasingDemo, IdentityOnlyBandLimits) {
    const auto r = diag::aliasing_demo(signals, source, 16, 4, [](double x) { return x; });
    for (std::size_t n = 1; n <= 24; ++n) {
        ASSERT_TRUE(r.native_ratio[n].has_value()) << n;
        EXPECT_NEAR(*r.native_ratio[n], 1.0, 0.05) << n;
    }
    for (std::size_t n = 25; n < r.native_ratio.size(); ++n) EXPECT_FALSE(r.native_ratio[n].has_value()) << n;
    EXPECT_NEAR(r.excess(), 1.0, 0.1);
}

TEST_F(AliasingDemo, SquaringFoldsPowerBackOnTheCoarseMesh) {
    auto sq = [](double x) { return x * x; };
    const auto r2 = diag::aliasing_demo(signals, source, 16, 2, sq);
    const std::size_t lo = r2.band_lo, hi = r2.band_hi;
    const double e2 = r2.excess(lo, hi);
    const double e4 = diag::aliasing_demo(signals, source, 16, 4, sq).excess(lo, hi);
    const double e8 = diag::aliasing_demo(signals, source, 16, 8, sq).excess(lo, hi);
    EXPECT_GT(e2, 1.2);
    EXPECT_GT(e2, e4);
    EXPECT_GT(e4, e8);
    EXPECT_NEAR(e8, 1.0, 0.1);
}

TEST_F(AliasingDemo, RejectsInvalidSetups) {
    auto id = [](double x) { return x; };
    EXPECT_THROW(diag::aliasing_demo(signals, source, 4, 4, id), ConfigError);
    EXPECT_THROW(diag::aliasing_demo(signals, source, 16, 3, id), ConfigError);
    EXPECT_THROW(diag::aliasing_demo(signals, LatLonGrid(32, 64), 16, 4, id), ConfigError);
}
