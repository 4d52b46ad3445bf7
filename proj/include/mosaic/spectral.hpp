#pragma once

// Spherical-harmonic analysis and synthesis on the equiangular lat-lon grid
// by direct summation: a DFT along each latitude ring, then Legendre
// quadrature over latitude with Fejer's first rule (exact for the
// cell-centred colatitudes). Harmonics are 4pi-normalised, so the power
// spectrum sums to the area mean of f^2.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <optional>
#include <vector>

#include "mosaic/geometry.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic::spectral {

// Normalised associated Legendre values Pbar_n^m(x) for 0 <= m <= n <= n_max,
// without the Condon-Shortley phase, stored at index n*(n+1)/2 + m.
// Pbar_n^m = sqrt((2n+1) (n-m)! / (n+m)!) P_n^m.
inline std::vector<double> legendre_table(std::size_t n_max, double x) {
    const std::size_t count = (n_max + 1) * (n_max + 2) / 2;
    std::vector<double> p(count, 0.0);
    auto idx = [](std::size_t n, std::size_t m) { return n * (n + 1) / 2 + m; };
    const double s = std::sqrt(std::max(0.0, 1.0 - x * x));
    p[0] = 1.0;
    for (std::size_t m = 1; m <= n_max; ++m) {
        const double md = static_cast<double>(m);
        p[idx(m, m)] = std::sqrt((2 * md + 1) / (2 * md)) * s * p[idx(m - 1, m - 1)];
    }
    for (std::size_t m = 0; m < n_max; ++m) {
        const double md = static_cast<double>(m);
        p[idx(m + 1, m)] = std::sqrt(2 * md + 3) * x * p[idx(m, m)];
        for (std::size_t n = m + 2; n <= n_max; ++n) {
            const double nd = static_cast<double>(n);
            const double a = std::sqrt((4 * nd * nd - 1) / (nd * nd - md * md));
            const double b = std::sqrt(((nd - 1) * (nd - 1) - md * md) / (4 * (nd - 1) * (nd - 1) - 1));
            p[idx(n, m)] = a * (x * p[idx(n - 1, m)] - b * p[idx(n - 2, m)]);
        }
    }
    return p;
}

// Fejer's first rule on x = cos(theta_j), theta_j = (j + 1/2) pi / H, for
// integrals over x in [-1, 1].
inline std::vector<double> fejer_weights(std::size_t h) {
    std::vector<double> w(h);
    const double hd = static_cast<double>(h);
    for (std::size_t j = 0; j < h; ++j) {
        const double th = (static_cast<double>(j) + 0.5) * std::numbers::pi / hd;
        double s = 0;
        for (std::size_t l = 1; l <= h / 2; ++l) {
            const double ld = static_cast<double>(l);
            s += std::cos(2 * ld * th) / (4 * ld * ld - 1);
        }
        w[j] = 2.0 / hd * (1 - 2 * s);
    }
    return w;
}

// Coefficients f_nm for m >= 0 of a real field; f_{n,-m} = conj(f_nm).
struct Coefficients {
    std::size_t n_max = 0;
    std::vector<std::complex<double>> a;

    static std::size_t index(std::size_t n, std::size_t m) { return n * (n + 1) / 2 + m; }
    std::complex<double>& operator()(std::size_t n, std::size_t m) { return a[index(n, m)]; }
    const std::complex<double>& operator()(std::size_t n, std::size_t m) const { return a[index(n, m)]; }

    explicit Coefficients(std::size_t nmax = 0) : n_max(nmax), a((nmax + 1) * (nmax + 2) / 2) {}
};

class SphericalTransform {
public:
    SphericalTransform(std::size_t h, std::size_t w, std::size_t n_max) : grid_(h, w), n_max_(n_max) {
        if (n_max + 1 > std::min(h, w / 2))
            throw ConfigError("n_max " + std::to_string(n_max) + " too large for a " + std::to_string(h) + "x" +
                              std::to_string(w) + " grid (needs n_max <= min(H, W/2) - 1)");
        weights_ = fejer_weights(h);
        legendre_.reserve(h);
        for (std::size_t j = 0; j < h; ++j) legendre_.push_back(legendre_table(n_max, std::sin(grid_.lat(j))));
    }

    std::size_t n_max() const { return n_max_; }
    const LatLonGrid& grid() const { return grid_; }

    // field: H*W row-major values, north to south.
    Coefficients analyze(const double* field) const {
        const std::size_t h = grid_.height(), w = grid_.width();
        Coefficients c(n_max_);
        std::vector<std::complex<double>> ring(n_max_ + 1);
        for (std::size_t j = 0; j < h; ++j) {
            for (std::size_t m = 0; m <= n_max_; ++m) {
                std::complex<double> s = 0;
                for (std::size_t k = 0; k < w; ++k)
                    s += field[j * w + k] * std::polar(1.0, -static_cast<double>(m) * grid_.lon(k));
                // (1/4pi) * dlambda * dx-weight
                ring[m] = s * (2 * std::numbers::pi / static_cast<double>(w)) * weights_[j] / (4 * std::numbers::pi);
            }
            const auto& p = legendre_[j];
            for (std::size_t n = 0; n <= n_max_; ++n)
                for (std::size_t m = 0; m <= n; ++m) c(n, m) += ring[m] * p[Coefficients::index(n, m)];
        }
        return c;
    }

    Coefficients analyze(const Tensor<double>& field) const {
        require_grid(field);
        return analyze(field.data());
    }

    Tensor<double> synthesize(const Coefficients& c) const {
        const std::size_t h = grid_.height(), w = grid_.width();
        const std::size_t nm = std::min(c.n_max, n_max_);
        Tensor<double> out(Shape{h, w});
        std::vector<std::complex<double>> ring(nm + 1);
        for (std::size_t j = 0; j < h; ++j) {
            const auto& p = legendre_[j];
            for (std::size_t m = 0; m <= nm; ++m) {
                ring[m] = 0;
                for (std::size_t n = m; n <= nm; ++n) ring[m] += c(n, m) * p[Coefficients::index(n, m)];
            }
            for (std::size_t k = 0; k < w; ++k) {
                double v = ring[0].real();
                for (std::size_t m = 1; m <= nm; ++m)
                    v += 2 * (ring[m] * std::polar(1.0, static_cast<double>(m) * grid_.lon(k))).real();
                out.at(j, k) = v;
            }
        }
        return out;
    }

    std::vector<double> power(const Tensor<double>& field) const { return power(analyze(field)); }

    static std::vector<double> power(const Coefficients& c) {
        std::vector<double> p(c.n_max + 1, 0.0);
        for (std::size_t n = 0; n <= c.n_max; ++n) {
            p[n] = std::norm(c(n, 0));
            for (std::size_t m = 1; m <= n; ++m) p[n] += 2 * std::norm(c(n, m));
        }
        return p;
    }

private:
    void require_grid(const Tensor<double>& f) const {
        if (f.size() != grid_.size())
            throw DimensionError("field " + shape_str(f.shape()) + " does not match the " +
                                 std::to_string(grid_.height()) + "x" + std::to_string(grid_.width()) + " grid");
    }

    LatLonGrid grid_;
    std::size_t n_max_;
    std::vector<double> weights_;
    std::vector<std::vector<double>> legendre_;
};

// Real spherical harmonic at a point: Pbar_n^m(sin lat) times cos(m lon)
// (m >= 0) or sin(|m| lon) (m < 0).
inline double real_harmonic(std::size_t n, int m, double lat, double lon) {
    const std::size_t am = static_cast<std::size_t>(std::abs(m));
    const auto p = legendre_table(n, std::sin(lat));
    const double pn = p[Coefficients::index(n, am)];
    return m >= 0 ? pn * std::cos(static_cast<double>(am) * lon) : pn * std::sin(static_cast<double>(am) * lon);
}

inline std::vector<double> spherical_power_spectrum(const Tensor<double>& field, std::size_t n_max) {
    if (field.rank() != 2) throw DimensionError("spectrum expects an [H, W] field, got " + shape_str(field.shape()));
    return SphericalTransform(field.dim(0), field.dim(1), n_max).power(field);
}

// Mean model spectrum over mean reference spectrum per degree; degrees with
// no reference power (below 1e-20 of the total) are missing. `amplitude` takes the square root.
inline std::vector<std::optional<double>> spectral_ratio(const std::vector<Tensor<double>>& model,
                                                         const std::vector<Tensor<double>>& reference,
                                                         std::size_t n_max, bool amplitude = false) {
    if (model.empty() || model.size() != reference.size())
        throw DimensionError("spectral_ratio needs matched, non-empty field sets");
    const SphericalTransform st(model[0].dim(0), model[0].dim(1), n_max);
    std::vector<double> pm(n_max + 1, 0.0), pr(n_max + 1, 0.0);
    for (std::size_t i = 0; i < model.size(); ++i) {
        const auto a = st.power(model[i]);
        const auto b = st.power(reference[i]);
        for (std::size_t n = 0; n <= n_max; ++n) {
            pm[n] += a[n];
            pr[n] += b[n];
        }
    }
    // power at rounding level counts as none
    double total = 0;
    for (double v : pr) total += v;
    std::vector<std::optional<double>> r(n_max + 1);
    for (std::size_t n = 0; n <= n_max; ++n) {
        if (pr[n] <= 1e-20 * total) continue;
        const double v = pm[n] / pr[n];
        r[n] = amplitude ? std::sqrt(v) : v;
    }
    return r;
}

// Largest n with |ratio - 1| <= tau for every degree 1..n (0 when degree 1
// already deviates). Missing degrees count as deviating.
inline std::size_t effective_resolution(const std::vector<std::optional<double>>& ratio, double tau = 0.1) {
    std::size_t n = 0;
    for (std::size_t d = 1; d < ratio.size(); ++d) {
        if (!ratio[d] || std::abs(*ratio[d] - 1) > tau) break;
        n = d;
    }
    return n;
}

}  // namespace mosaic::spectral
