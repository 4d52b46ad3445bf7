#pragma once

// Forecast diagnostics: latitude-weighted scores, ensemble calibration,
// global-mean drift, and the aliasing experiment that compares a pointwise
// nonlinearity evaluated on a native mesh against the same on a coarser one.

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mosaic/geometry.hpp"
#include "mosaic/healpix.hpp"
#include "mosaic/spectral.hpp"
#include "mosaic/tensor.hpp"
#include "mosaic/training.hpp"

namespace mosaic::diag {

namespace detail {

inline void require_field(const Tensor<double>& f, const LatLonGrid& g, const char* what) {
    if (f.size() != g.size())
        throw DimensionError(std::string(what) + " " + shape_str(f.shape()) + " does not match the " +
                             std::to_string(g.height()) + "x" + std::to_string(g.width()) + " grid");
}

}  // namespace detail

// Channel c of an [H, W, C] tensor as an [H, W] field.
inline Tensor<double> channel(const Tensor<double>& x, std::size_t c) {
    if (x.rank() != 3 || c >= x.dim(2)) throw DimensionError("cannot take channel " + std::to_string(c) + " of " + shape_str(x.shape()));
    Tensor<double> f(Shape{x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = x[i * x.dim(2) + c];
    return f;
}

// omega_h-weighted area mean of an [H, W] field.
inline double weighted_mean(const Tensor<double>& f, const LatLonGrid& g) {
    detail::require_field(f, g, "field");
    const auto w = train::latitude_weights(g);
    double s = 0;
    for (std::size_t h = 0; h < g.height(); ++h)
        for (std::size_t k = 0; k < g.width(); ++k) s += w[h] * f[h * g.width() + k];
    return s / static_cast<double>(g.size());
}

inline double latitude_weighted_rmse(const Tensor<double>& pred, const Tensor<double>& truth, const LatLonGrid& g) {
    detail::require_field(pred, g, "prediction");
    detail::require_field(truth, g, "truth");
    Tensor<double> sq(Shape{g.height(), g.width()});
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = (pred[i] - truth[i]) * (pred[i] - truth[i]);
    return std::sqrt(weighted_mean(sq, g));
}

// Area-weighted global mean at each lead minus the initial value; frames is
// [S, H, W] with frame 0 the initial state.
inline std::vector<double> gmsp_drift(const Tensor<double>& frames, const LatLonGrid& g) {
    if (frames.rank() != 3) throw DimensionError("drift expects [S, H, W] frames, got " + shape_str(frames.shape()));
    const std::size_t n = g.size();
    std::vector<double> out;
    double first = 0;
    for (std::size_t s = 0; s < frames.dim(0); ++s) {
        Tensor<double> f(Shape{g.height(), g.width()});
        std::copy_n(frames.data() + s * n, n, f.data());
        const double m = weighted_mean(f, g);
        if (s == 0) first = m;
        out.push_back(m - first);
    }
    return out;
}

// ---- ensemble scores ----------------------------------------------------

struct LeadMetrics {
    double rmse = 0, nrmse = 0, crps = 0, spread = 0, ssr = 0;
};

// Accumulates squared errors, variances and CRPS over initial conditions
// for one variable at one lead time. Spread is the per-point unbiased
// member variance, area-weighted, averaged over cases, then square-rooted.
class EnsembleScore {
public:
    explicit EnsembleScore(LatLonGrid g) : grid_(g), w_(train::latitude_weights(g)) {}

    // members: one [H, W] field each; truth: [H, W].
    void add(const std::vector<Tensor<double>>& members, const Tensor<double>& truth) {
        const std::size_t N = members.size();
        if (N == 0) throw ConfigError("ensemble has no members");
        detail::require_field(truth, grid_, "truth");
        for (const auto& m : members) detail::require_field(m, grid_, "member");
        double mse = 0, var = 0, crps = 0;
        std::vector<double> ens(N);
        const std::size_t W = grid_.width();
        for (std::size_t i = 0; i < grid_.size(); ++i) {
            const double w = w_[i / W];
            double mean = 0;
            for (std::size_t n = 0; n < N; ++n) mean += (ens[n] = members[n][i]);
            mean /= static_cast<double>(N);
            mse += w * (mean - truth[i]) * (mean - truth[i]);
            if (N >= 2) {
                double v = 0;
                for (double e : ens) v += (e - mean) * (e - mean);
                var += w * v / static_cast<double>(N - 1);
                crps += w * train::fair_crps(ens, truth[i]);
            }
        }
        const double area = static_cast<double>(grid_.size());
        mse_ += mse / area;
        var_ += var / area;
        crps_ += crps / area;
        members_ = N;
        ++cases_;
    }

    std::size_t cases() const { return cases_; }

    // Probabilistic scores need two or more members; with `probabilistic`
    // off a single-member run reports RMSE only.
    LeadMetrics result(double clim_std = 1.0, bool probabilistic = true) const {
        if (cases_ == 0) throw ConfigError("no forecasts accumulated");
        if (probabilistic && members_ < 2) throw ConfigError("CRPS and spread need at least two ensemble members");
        LeadMetrics m;
        const double c = static_cast<double>(cases_);
        m.rmse = std::sqrt(mse_ / c);
        m.nrmse = m.rmse / clim_std;
        if (members_ >= 2) {
            m.crps = crps_ / c;
            m.spread = std::sqrt(var_ / c);
            m.ssr = m.rmse > 0 ? m.spread / m.rmse : 0.0;
        } else {
            m.crps = m.spread = m.ssr = std::nan("");
        }
        return m;
    }

    // Pools squared errors and variances across scores (e.g. leads and
    // variables) before taking the ratio.
    static double pooled_ssr(const std::vector<EnsembleScore>& scores) {
        double var = 0, mse = 0;
        for (const auto& s : scores) {
            var += s.var_ / static_cast<double>(s.cases_);
            mse += s.mse_ / static_cast<double>(s.cases_);
        }
        return mse > 0 ? std::sqrt(var / mse) : 0.0;
    }

private:
    LatLonGrid grid_;
    std::vector<double> w_;
    double mse_ = 0, var_ = 0, crps_ = 0;
    std::size_t members_ = 0, cases_ = 0;
};

// ---- aliasing -----------------------------------------------------------

// Frequency that f appears at after sampling a ring with m points.
inline std::size_t folded_frequency(std::size_t f, std::size_t m) {
    const std::size_t r = f % m;
    return std::min(r, m - r);
}

// DFT power at frequencies 0..m/2 of g(cos(k1 t) + cos(k2 t)) sampled at m
// points of a ring.
inline std::vector<double> ring_power(std::size_t m, std::size_t k1, std::size_t k2,
                                      const std::function<double(double)>& g) {
    std::vector<double> x(m);
    for (std::size_t j = 0; j < m; ++j) {
        const double t = 2 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(m);
        x[j] = g(std::cos(static_cast<double>(k1) * t) + std::cos(static_cast<double>(k2) * t));
    }
    std::vector<double> p(m / 2 + 1);
    for (std::size_t f = 0; f <= m / 2; ++f) {
        std::complex<double> s = 0;
        for (std::size_t j = 0; j < m; ++j)
            s += x[j] * std::polar(1.0, -2 * std::numbers::pi * static_cast<double>(f * j) / static_cast<double>(m));
        p[f] = std::norm(s / static_cast<double>(m));
    }
    return p;
}

// Band-limited projection between the equiangular grid and a HEALPix mesh:
// fields are carried as harmonic coefficients up to l_max; evaluation at
// pixel centres is exact, analysis uses the equal-area quadrature
// (1/Npix) sum_p f(p) Y*(p).
class MeshProjector {
public:
    MeshProjector(std::size_t nside, std::size_t l_max) : mesh_(nside), l_max_(l_max) {
        const std::size_t n = mesh_.npix();
        p_.reserve(n);
        for (const auto& a : mesh_.angles()) p_.push_back(spectral::legendre_table(l_max, std::sin(a.lat)));
    }

    std::size_t l_max() const { return l_max_; }
    const healpix::HealpixMesh& mesh() const { return mesh_; }

    std::vector<double> evaluate(const spectral::Coefficients& c) const {
        std::vector<double> v(mesh_.npix());
        const std::size_t L = std::min(l_max_, c.n_max);
        for (std::size_t p = 0; p < v.size(); ++p) {
            const double lon = mesh_.angles()[p].lon;
            double s = 0;
            for (std::size_t m = 0; m <= L; ++m) {
                std::complex<double> ring = 0;
                for (std::size_t n = m; n <= L; ++n) ring += c(n, m) * p_[p][spectral::Coefficients::index(n, m)];
                const double e = (ring * std::polar(1.0, static_cast<double>(m) * lon)).real();
                s += m == 0 ? e : 2 * e;
            }
            v[p] = s;
        }
        return v;
    }

    spectral::Coefficients analyze(const std::vector<double>& v) const {
        spectral::Coefficients c(l_max_);
        const double inv = 1.0 / static_cast<double>(v.size());
        for (std::size_t p = 0; p < v.size(); ++p) {
            const double lon = mesh_.angles()[p].lon;
            for (std::size_t m = 0; m <= l_max_; ++m) {
                const std::complex<double> e = v[p] * inv * std::polar(1.0, -static_cast<double>(m) * lon);
                for (std::size_t n = m; n <= l_max_; ++n) c(n, m) += e * p_[p][spectral::Coefficients::index(n, m)];
            }
        }
        return c;
    }

private:
    healpix::HealpixMesh mesh_;
    std::size_t l_max_;
    std::vector<std::vector<double>> p_;
};

inline spectral::Coefficients truncate(const spectral::Coefficients& c, std::size_t l_max) {
    spectral::Coefficients out(std::min(l_max, c.n_max));
    for (std::size_t n = 0; n <= out.n_max; ++n)
        for (std::size_t m = 0; m <= n; ++m) out(n, m) = c(n, m);
    return out;
}

struct AliasingResult {
    std::vector<std::optional<double>> native_ratio, coarse_ratio;  // per degree, vs the alias-free reference
    std::size_t band_lo = 0, band_hi = 0;                           // default aliased band

    // Coarse over native mean ratio on degrees lo..hi; degrees missing from
    // either pipeline are skipped.
    double excess(std::size_t lo, std::size_t hi) const {
        double a = 0, b = 0;
        std::size_t count = 0;
        for (std::size_t n = lo; n <= hi && n < coarse_ratio.size(); ++n) {
            if (!native_ratio[n] || !coarse_ratio[n]) continue;
            a += *coarse_ratio[n];
            b += *native_ratio[n];
            ++count;
        }
        if (count == 0) throw ConfigError("no reference power in degrees " + std::to_string(lo) + ".." + std::to_string(hi));
        return a / b;
    }

    double excess() const { return excess(band_lo, band_hi); }
};

struct AliasingOptions {
    std::size_t lmax_per_nside = 3;  // resolved degree of a mesh is this times nside, minus one
    double band_start = 0.5;         // aliased band: degrees above this fraction of the coarse l_max
};

// Signal coefficients -> band-limit to the mesh -> evaluate at pixel centres
// -> pointwise g -> analyse back on the mesh. Each pipeline is compared with
// the same band-limited input passed through g on the fine source grid, where
// the products are resolved, so any ratio above one is power folded back from
// degrees the mesh cannot carry. Spectra are averaged over the signal set
// before dividing.
inline AliasingResult aliasing_demo(const std::vector<spectral::Coefficients>& signals, const LatLonGrid& source,
                                    std::size_t native_nside, std::size_t coarse_nside,
                                    const std::function<double(double)>& g, const AliasingOptions& opt = {}) {
    if (signals.empty()) throw ConfigError("aliasing demo needs at least one signal");
    if (coarse_nside >= native_nside) throw ConfigError("coarse nside must be below the native nside");
    healpix::require_nside(coarse_nside);
    healpix::require_nside(native_nside);
    const std::size_t l_native = opt.lmax_per_nside * native_nside - 1;
    const std::size_t l_coarse = opt.lmax_per_nside * coarse_nside - 1;
    const std::size_t n_src = std::min(source.height(), source.width() / 2) - 1;
    if (2 * l_native > n_src)
        throw ConfigError("source grid cannot resolve the squared native band (needs degree " +
                          std::to_string(2 * l_native) + ")");
    const spectral::SphericalTransform st(source.height(), source.width(), n_src);

    auto run = [&](std::size_t nside, std::size_t l_max) {
        const MeshProjector proj(nside, l_max);
        std::vector<double> pm(l_max + 1, 0.0), pr(l_max + 1, 0.0);
        for (const auto& signal : signals) {
            const auto input = truncate(signal, l_max);
            Tensor<double> ref = st.synthesize(input);
            for (auto& v : ref.values()) v = g(v);
            const auto a = spectral::SphericalTransform::power(st.analyze(ref));
            auto v = proj.evaluate(input);
            for (auto& x : v) x = g(x);
            const auto b = spectral::SphericalTransform::power(proj.analyze(v));
            for (std::size_t n = 0; n <= l_max; ++n) {
                pr[n] += a[n];
                pm[n] += b[n];
            }
        }
        double total = 0;
        for (double v : pr) total += v;
        std::vector<std::optional<double>> out(l_max + 1);
        for (std::size_t n = 0; n <= l_max; ++n)
            if (pr[n] > 1e-20 * total) out[n] = pm[n] / pr[n];
        return out;
    };

    AliasingResult r;
    r.native_ratio = run(native_nside, l_native);
    r.coarse_ratio = run(coarse_nside, l_coarse);
    r.band_lo = static_cast<std::size_t>(std::floor(opt.band_start * static_cast<double>(l_coarse))) + 1;
    r.band_hi = l_coarse;
    return r;
}

inline AliasingResult aliasing_demo(const spectral::Coefficients& signal, const LatLonGrid& source,
                                    std::size_t native_nside, std::size_t coarse_nside,
                                    const std::function<double(double)>& g, const AliasingOptions& opt = {}) {
    return aliasing_demo(std::vector<spectral::Coefficients>{signal}, source, native_nside, coarse_nside, g, opt);
}

// Random test signals with coefficient std n^-slope on degrees 1..band.
inline std::vector<spectral::Coefficients> red_signals(std::size_t count, std::size_t band, double slope,
                                                       std::uint64_t seed) {
    std::vector<spectral::Coefficients> out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        spectral::Coefficients c(band);
        for (std::size_t n = 1; n <= band; ++n) {
            const double a = std::pow(static_cast<double>(n), -slope);
            c(n, 0) = a * nd(rng);
            for (std::size_t m = 1; m <= n; ++m) {
                const double re = nd(rng), im = nd(rng);
                c(n, m) = a * std::complex<double>(re, im) / std::sqrt(2.0);
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace mosaic::diag
