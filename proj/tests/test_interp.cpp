#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mosaic/healpix.hpp"
#include "mosaic/interp.hpp"
#include "support/testing.hpp"

using namespace mosaic;
using namespace mosaic::interp;
using mosaic::testing::random_tensor;

namespace {

Tensor<double> identity(std::size_t n) {
    Tensor<double> t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1;
    return t;
}

struct SmallCase {
    InterpGeometry<double> geo;
    std::size_t sources;
};

// 12-pixel mesh as targets, 3 x 6 grid as sources.
SmallCase grid_to_mesh(std::size_t k) {
    healpix::HealpixMesh mesh(1);
    LatLonGrid grid(3, 6);
    const auto pts = grid.points();
    return {InterpGeometry<double>::build(mesh.centers(), pts, k), pts.size()};
}

}  // namespace

TEST(Interp, RelativePositionsAreUnitAndListsFull) {
    auto [geo, n] = grid_to_mesh(5);
    EXPECT_EQ(geo.targets(), 12u);
    EXPECT_EQ(geo.k(), 5u);
    EXPECT_EQ(geo.sources, n);
    for (std::size_t r = 0; r < geo.rel.dim(0); ++r) {
        const double len = std::hypot(geo.rel.at(r, 0), geo.rel.at(r, 1), geo.rel.at(r, 2));
        // unit length, or zero where a grid point sits on a pixel centre
        EXPECT_TRUE(std::abs(len - 1.0) < 1e-12 || len == 0.0) << len;
    }
}

TEST(Interp, CoincidentNeighbourGetsZeroDirection) {
    healpix::HealpixMesh mesh(2);
    auto geo = InterpGeometry<double>::build(mesh.centers(), mesh.centers(), 3);
    for (std::size_t t = 0; t < geo.targets(); ++t) {
        ASSERT_EQ(geo.neighbors.of(t)[0], t);
        for (int c = 0; c < 3; ++c) EXPECT_EQ(geo.rel.at(t * 3, c), 0.0);
    }
}

TEST(Interp, ConstantFieldStaysConstant) {
    std::mt19937_64 rng(3);
    auto [geo, n] = grid_to_mesh(6);
    const std::size_t d = 4;
    Tensor<double> src(Shape{n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) src.at(i, c) = 0.5 + static_cast<double>(c);
    Tape<double> tape;
    auto out = interpolate(tape.constant(src), geo,
                           {tape.constant(random_tensor({3, d}, rng)), tape.constant(random_tensor({d, d}, rng)),
                            tape.constant(identity(d)), tape.constant(identity(d))});
    // every target sees the same normalised row
    Tape<double> ref;
    auto row = rmsnorm(ref.constant(src)).value();
    for (std::size_t t = 0; t < geo.targets(); ++t)
        for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.value().at(t, c), row.at(0, c), 1e-12);
}

TEST(Interp, SingleNeighbourIgnoresQuery) {
    std::mt19937_64 rng(4);
    auto [geo, n] = grid_to_mesh(1);
    const std::size_t c_in = 5, d = 3, c_out = 2;
    auto src = random_tensor({n, c_in}, rng);
    auto wv = random_tensor({c_in, d}, rng), wo = random_tensor({d, c_out}, rng), wk = random_tensor({c_in, d}, rng);
    Tape<double> tape;
    auto expected = matmul(matmul(rmsnorm(tape.constant(src)), tape.constant(wv)), tape.constant(wo)).value();
    for (int trial = 0; trial < 2; ++trial) {
        auto out = interpolate(tape.constant(src), geo,
                               {tape.constant(random_tensor({3, d}, rng, 5.0)), tape.constant(wk), tape.constant(wv),
                                tape.constant(wo)});
        for (std::size_t t = 0; t < geo.targets(); ++t)
            for (std::size_t c = 0; c < c_out; ++c)
                EXPECT_NEAR(out.value().at(t, c), expected.at(geo.neighbors.of(t)[0], c), 1e-12);
    }
}

TEST(Interp, WeightsArePositiveAndSumToOne) {
    std::mt19937_64 rng(5);
    auto [geo, n] = grid_to_mesh(8);
    auto w = interpolation_weights(random_tensor({n, 6}, rng), geo, random_tensor({3, 4}, rng, 3.0),
                                   random_tensor({6, 4}, rng, 3.0));
    for (std::size_t t = 0; t < geo.targets(); ++t) {
        double s = 0;
        for (std::size_t j = 0; j < 8; ++j) {
            EXPECT_GT(w.at(t, j), 0.0);
            s += w.at(t, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Interp, IdenticalRelativePositionsGiveIdenticalWeights) {
    // Two targets with the same relative positions and the same neighbour
    // features must weight their neighbours identically.
    std::mt19937_64 rng(6);
    const std::size_t k = 4, d = 3;
    InterpGeometry<double> geo;
    geo.neighbors.k = k;
    geo.neighbors.index = {0, 1, 2, 3, 4, 5, 6, 7};
    geo.sources = 8;
    auto rel = random_tensor({k, 3}, rng);
    geo.rel = Tensor<double>(Shape{2 * k, 3});
    for (std::size_t j = 0; j < k; ++j)
        for (int c = 0; c < 3; ++c) geo.rel.at(j, c) = geo.rel.at(k + j, c) = rel.at(j, c);
    auto half = random_tensor({k, d}, rng);
    Tensor<double> src(Shape{8, d});
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t c = 0; c < d; ++c) src.at(j, c) = src.at(k + j, c) = half.at(j, c);
    auto w = interpolation_weights(src, geo, random_tensor({3, 5}, rng), random_tensor({d, 5}, rng));
    for (std::size_t j = 0; j < k; ++j) EXPECT_DOUBLE_EQ(w.at(0, j), w.at(1, j));
}

TEST(Interp, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    auto [geo, n] = grid_to_mesh(4);
    const std::size_t c_in = 3, d = 4, c_out = 2;
    auto res = mosaic::testing::gradcheck(
        {random_tensor({n, c_in}, rng), random_tensor({3, d}, rng), random_tensor({c_in, d}, rng),
         random_tensor({c_in, d}, rng), random_tensor({d, c_out}, rng)},
        [&geo](Tape<double>&, const std::vector<Var<double>>& v) {
            return mosaic::testing::project_to_scalar(interpolate(v[0], geo, {v[1], v[2], v[3], v[4]}));
        });
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Interp, ReverseDirectionUsesSameOperator) {
    std::mt19937_64 rng(8);
    healpix::HealpixMesh mesh(1);
    LatLonGrid grid(3, 6);
    auto geo = InterpGeometry<double>::build(grid.points(), mesh.centers(), 3);
    Tape<double> tape;
    auto out = interpolate(tape.constant(random_tensor({12, 4}, rng)), geo,
                           {tape.constant(random_tensor({3, 4}, rng)), tape.constant(random_tensor({4, 4}, rng)),
                            tape.constant(random_tensor({4, 4}, rng)), tape.constant(random_tensor({4, 2}, rng))});
    EXPECT_EQ(out.shape(), (Shape{18, 2}));
}

TEST(Interp, RejectsMismatchedSource) {
    std::mt19937_64 rng(9);
    auto [geo, n] = grid_to_mesh(3);
    Tape<double> tape;
    InterpWeights<double> w{tape.constant(random_tensor({3, 2}, rng)), tape.constant(random_tensor({2, 2}, rng)),
                            tape.constant(random_tensor({2, 2}, rng)), tape.constant(random_tensor({2, 2}, rng))};
    EXPECT_THROW(interpolate(tape.constant(random_tensor({n + 1, 2}, rng)), geo, w), DimensionError);
    EXPECT_THROW(interpolate(tape.constant(random_tensor({n, 3}, rng)), geo, w), DimensionError);
}
