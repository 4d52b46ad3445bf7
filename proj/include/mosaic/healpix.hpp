#pragma once

// HEALPix tessellation in NESTED ordering: pixel geometry, the quad-tree
// hierarchy and contiguous block partitions of the index space.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "mosaic/geometry.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic::healpix {

inline constexpr std::size_t kMaxNside = 1024;

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t npix(std::size_t nside) { return 12 * nside * nside; }

inline void require_nside(std::size_t nside) {
    if (!is_power_of_two(nside) || nside > kMaxNside)
        throw ConfigError("nside must be a power of two in [1, " + std::to_string(kMaxNside) + "], got " +
                          std::to_string(nside));
}

// Square root of the pixel area, in degrees.
inline double resolution_deg(std::size_t nside) {
    return std::sqrt(4 * std::numbers::pi / static_cast<double>(npix(nside))) * 180.0 / std::numbers::pi;
}

namespace detail {

inline constexpr std::array<int, 12> kJrll{2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4};
inline constexpr std::array<int, 12> kJpll{1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7};

inline std::uint64_t spread_bits(std::uint64_t v) {
    v &= 0xffffffffull;
    v = (v | (v << 16)) & 0x0000ffff0000ffffull;
    v = (v | (v << 8)) & 0x00ff00ff00ff00ffull;
    v = (v | (v << 4)) & 0x0f0f0f0f0f0f0f0full;
    v = (v | (v << 2)) & 0x3333333333333333ull;
    v = (v | (v << 1)) & 0x5555555555555555ull;
    return v;
}

inline std::uint64_t compress_bits(std::uint64_t v) {
    v &= 0x5555555555555555ull;
    v = (v | (v >> 1)) & 0x3333333333333333ull;
    v = (v | (v >> 2)) & 0x0f0f0f0f0f0f0f0full;
    v = (v | (v >> 4)) & 0x00ff00ff00ff00ffull;
    v = (v | (v >> 8)) & 0x0000ffff0000ffffull;
    v = (v | (v >> 16)) & 0x00000000ffffffffull;
    return v;
}

struct Xyf {
    std::int64_t ix, iy;
    int face;
};

inline Xyf nest2xyf(std::size_t nside, std::size_t pix) {
    const std::size_t face_pixels = nside * nside;
    const auto ipf = static_cast<std::uint64_t>(pix % face_pixels);
    return {static_cast<std::int64_t>(compress_bits(ipf)), static_cast<std::int64_t>(compress_bits(ipf >> 1)),
            static_cast<int>(pix / face_pixels)};
}

inline std::size_t xyf2nest(std::size_t nside, std::int64_t ix, std::int64_t iy, int face) {
    return static_cast<std::size_t>(face) * nside * nside +
           static_cast<std::size_t>(spread_bits(static_cast<std::uint64_t>(ix)) +
                                    (spread_bits(static_cast<std::uint64_t>(iy)) << 1));
}

}  // namespace detail

struct Angles {
    double lat;  // [-pi/2, pi/2]
    double lon;  // [0, 2pi)
};

// Pixel centre of a NESTED index.
inline Angles pix2ang(std::size_t nside, std::size_t pix) {
    const auto [ix, iy, face] = detail::nest2xyf(nside, pix);
    const auto ns = static_cast<std::int64_t>(nside);
    const std::int64_t jr = detail::kJrll[face] * ns - ix - iy - 1;
    std::int64_t nr;
    double z;
    int kshift;
    const double fact = 1.0 / (3.0 * static_cast<double>(ns) * static_cast<double>(ns));
    if (jr < ns) {
        nr = jr;
        z = 1 - static_cast<double>(nr * nr) * fact;
        kshift = 0;
    } else if (jr > 3 * ns) {
        nr = 4 * ns - jr;
        z = static_cast<double>(nr * nr) * fact - 1;
        kshift = 0;
    } else {
        nr = ns;
        z = static_cast<double>(2 * ns - jr) * 2.0 / (3.0 * static_cast<double>(ns));
        kshift = static_cast<int>((jr - ns) & 1);
    }
    std::int64_t jp = (detail::kJpll[face] * nr + ix - iy + 1 + kshift) / 2;
    if (jp > 4 * ns) jp -= 4 * ns;
    if (jp < 1) jp += 4 * ns;
    const double lon = (static_cast<double>(jp) - (kshift + 1) * 0.5) * (std::numbers::pi / 2) / static_cast<double>(nr);
    return {std::asin(std::clamp(z, -1.0, 1.0)), lon};
}

// NESTED index of the pixel containing a direction. Latitude is clamped to
// the valid range and longitude wrapped into [0, 2pi).
inline std::size_t ang2pix(std::size_t nside, double lat, double lon) {
    lat = std::clamp(lat, -std::numbers::pi / 2, std::numbers::pi / 2);
    lon = std::fmod(lon, 2 * std::numbers::pi);
    if (lon < 0) lon += 2 * std::numbers::pi;
    const double z = std::sin(lat);
    const double za = std::abs(z);
    double tt = lon / (std::numbers::pi / 2);
    if (tt >= 4) tt -= 4;
    const auto ns = static_cast<std::int64_t>(nside);
    std::int64_t ix, iy;
    int face;
    if (za <= 2.0 / 3.0) {
        const double t1 = static_cast<double>(ns) * (0.5 + tt);
        const double t2 = static_cast<double>(ns) * z * 0.75;
        const auto jp = static_cast<std::int64_t>(t1 - t2);
        const auto jm = static_cast<std::int64_t>(t1 + t2);
        const std::int64_t ifp = jp / ns, ifm = jm / ns;
        face = static_cast<int>(ifp == ifm ? (ifp | 4) : (ifp < ifm ? ifp : ifm + 8));
        ix = jm & (ns - 1);
        iy = ns - (jp & (ns - 1)) - 1;
    } else {
        const int ntt = std::min(3, static_cast<int>(tt));
        const double tp = tt - ntt;
        const double tmp = static_cast<double>(ns) * std::sqrt(3 * (1 - za));
        auto jp = static_cast<std::int64_t>(tp * tmp);
        auto jm = static_cast<std::int64_t>((1.0 - tp) * tmp);
        jp = std::min(jp, ns - 1);
        jm = std::min(jm, ns - 1);
        if (z >= 0) {
            face = ntt;
            ix = ns - jm - 1;
            iy = ns - jp - 1;
        } else {
            face = ntt + 8;
            ix = jp;
            iy = jm;
        }
    }
    return detail::xyf2nest(nside, ix, iy, face);
}

inline std::array<std::size_t, 4> children(std::size_t pix, std::size_t nside) {
    if (pix >= npix(nside))
        throw DimensionError("pixel " + std::to_string(pix) + " out of range for nside " + std::to_string(nside));
    return {4 * pix, 4 * pix + 1, 4 * pix + 2, 4 * pix + 3};
}

// Parent at nside/2 of a pixel at nside.
inline std::size_t parent(std::size_t pix, std::size_t nside) {
    if (pix >= npix(nside))
        throw DimensionError("pixel " + std::to_string(pix) + " out of range for nside " + std::to_string(nside));
    if (nside < 2) throw DimensionError("pixels at nside 1 have no parent");
    return pix / 4;
}

// Partition of [0, npix) into npix / block_size contiguous index ranges.
class BlockPartition {
public:
    BlockPartition(std::size_t total, std::size_t block_size) : total_(total), block_(block_size) {
        if (block_size == 0 || total % block_size != 0)
            throw ConfigError("block size " + std::to_string(block_size) + " does not divide " + std::to_string(total));
    }

    std::size_t block_size() const noexcept { return block_; }
    std::size_t count() const noexcept { return total_ / block_; }
    std::pair<std::size_t, std::size_t> range(std::size_t block) const { return {block * block_, (block + 1) * block_}; }
    std::size_t block_of(std::size_t index) const { return index / block_; }

private:
    std::size_t total_, block_;
};

class HealpixMesh {
public:
    explicit HealpixMesh(std::size_t nside) : nside_(nside) {
        require_nside(nside);
        const std::size_t n = healpix::npix(nside);
        angles_.resize(n);
        centers_.resize(n);
        for (std::size_t p = 0; p < n; ++p) {
            angles_[p] = pix2ang(nside, p);
            centers_[p] = unit_vector(angles_[p].lat, angles_[p].lon);
        }
    }

    std::size_t nside() const noexcept { return nside_; }
    std::size_t npix() const noexcept { return centers_.size(); }
    const std::vector<Vec3>& centers() const noexcept { return centers_; }
    const std::vector<Angles>& angles() const noexcept { return angles_; }
    const Vec3& center(std::size_t p) const { return centers_.at(p); }

    BlockPartition blocks(std::size_t block_size) const { return BlockPartition(npix(), block_size); }

    // Largest great-circle distance between two pixel centres of a block.
    double block_diameter(const BlockPartition& part, std::size_t block) const {
        const auto [lo, hi] = part.range(block);
        double d = 0;
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = i + 1; j < hi; ++j) d = std::max(d, great_circle_distance(centers_[i], centers_[j]));
        return d;
    }

    double mean_pixel_size() const { return std::sqrt(4 * std::numbers::pi / static_cast<double>(npix())); }

    // Child centre minus parent centre for the four children of each pixel,
    // one row of 12 values per parent (this mesh is the parent level).
    template <class T>
    Tensor<T> child_offsets(const HealpixMesh& fine) const {
        if (fine.nside() != 2 * nside_) throw ConfigError("child mesh must have twice the nside");
        Tensor<T> out(Shape{npix(), 12});
        for (std::size_t p = 0; p < npix(); ++p)
            for (std::size_t c = 0; c < 4; ++c) {
                const Vec3 d = fine.center(4 * p + c) - centers_[p];
                out.at(p, 3 * c) = static_cast<T>(d.x);
                out.at(p, 3 * c + 1) = static_cast<T>(d.y);
                out.at(p, 3 * c + 2) = static_cast<T>(d.z);
            }
        return out;
    }

private:
    std::size_t nside_;
    std::vector<Angles> angles_;
    std::vector<Vec3> centers_;
};

// Nearest grid points for every mesh pixel.
inline NeighborLists knn_mesh_to_grid(const HealpixMesh& mesh, const LatLonGrid& grid, std::size_t k) {
    const auto pts = grid.points();
    return knn(mesh.centers(), pts, k);
}

// Nearest mesh pixels for every grid point.
inline NeighborLists knn_grid_to_mesh(const HealpixMesh& mesh, const LatLonGrid& grid, std::size_t k) {
    const auto pts = grid.points();
    return knn(pts, mesh.centers(), k);
}

}  // namespace mosaic::healpix
