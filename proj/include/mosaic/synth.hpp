#pragma once

// Synthetic training data: each channel is a band-limited random field on
// the sphere whose harmonic coefficients follow an AR(1) process and rotate
// eastward about the polar axis every step. Channel 0 behaves like sea-level
// pressure (hPa scale, conserved global mean); the others carry a fixed
// climatological latitude pattern. Static fields are a smooth orography and
// the unit-sphere coordinates of every grid point.

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mosaic/config.hpp"
#include "mosaic/geometry.hpp"
#include "mosaic/msgt.hpp"
#include "mosaic/normalize.hpp"
#include "mosaic/spectral.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic::synth {

struct SynthConfig {
    std::size_t grid_h = 32;
    std::size_t grid_w = 64;
    std::size_t channels = 3;
    std::size_t steps = 400;
    std::size_t band_limit = 12;
    double ar = 0.95;
    double rotation_deg = 7.5;  // channel c turns (1 + c/2) times this per step
    double spectral_slope = 1.5;
    std::size_t day_period = 4;
    std::size_t year_period = 146;
    std::uint64_t seed = 0;

    void validate() const {
        if (grid_h < 2 || grid_w < 4) throw ConfigError("synthetic grid must be at least 2 x 4");
        if (channels == 0 || steps == 0) throw ConfigError("channels and steps must be positive");
        if (band_limit == 0 || band_limit + 1 > std::min(grid_h, grid_w / 2))
            throw ConfigError("band_limit must be between 1 and min(H, W/2) - 1");
        if (!(ar >= 0 && ar < 1)) throw ConfigError("ar must lie in [0, 1)");
        if (day_period == 0 || year_period == 0) throw ConfigError("time periods must be positive");
    }

    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("grid_h", std::to_string(grid_h));
        kv.set("grid_w", std::to_string(grid_w));
        kv.set("channels", std::to_string(channels));
        kv.set("steps", std::to_string(steps));
        kv.set("band_limit", std::to_string(band_limit));
        kv.set("ar", format_real(ar));
        kv.set("rotation_deg", format_real(rotation_deg));
        kv.set("spectral_slope", format_real(spectral_slope));
        kv.set("day_period", std::to_string(day_period));
        kv.set("year_period", std::to_string(year_period));
        kv.set("seed", std::to_string(seed));
        return kv;
    }

    static SynthConfig from_kv(const KeyValues& kv) { return from_kv(kv, SynthConfig()); }

    static SynthConfig from_kv(const KeyValues& kv, SynthConfig c) {
        c.grid_h = kv.size_value("grid_h", c.grid_h);
        c.grid_w = kv.size_value("grid_w", c.grid_w);
        c.channels = kv.size_value("channels", c.channels);
        c.steps = kv.size_value("steps", c.steps);
        c.band_limit = kv.size_value("band_limit", c.band_limit);
        c.ar = kv.real("ar", c.ar);
        c.rotation_deg = kv.real("rotation_deg", c.rotation_deg);
        c.spectral_slope = kv.real("spectral_slope", c.spectral_slope);
        c.day_period = kv.size_value("day_period", c.day_period);
        c.year_period = kv.size_value("year_period", c.year_period);
        c.seed = kv.size_value("seed", c.seed);
        c.validate();
        return c;
    }

    static std::string format_real(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
};

// sin/cos of the day phase and the year phase at step t.
inline Tensor<double> time_features(std::size_t t, std::size_t day_period, std::size_t year_period) {
    const double d = 2 * std::numbers::pi * static_cast<double>(t % day_period) / static_cast<double>(day_period);
    const double y = 2 * std::numbers::pi * static_cast<double>(t % year_period) / static_cast<double>(year_period);
    return Tensor<double>(Shape{4}, AlignedVector<double>{std::sin(d), std::cos(d), std::sin(y), std::cos(y)});
}

inline constexpr double kPressureMean = 1013.0;  // hPa
inline constexpr double kPressureScale = 10.0;   // hPa per unit anomaly

struct Dataset {
    SynthConfig config;
    Tensor<double> fields;   // [steps, H, W, C] physical units
    Tensor<double> statics;  // [H, W, 4], orography standardised

    std::size_t steps() const { return fields.dim(0); }
    std::size_t channels() const { return fields.dim(3); }
    LatLonGrid grid() const { return {fields.dim(1), fields.dim(2)}; }

    Tensor<double> frame(std::size_t t) const {
        const std::size_t n = fields.size() / steps();
        Tensor<double> f(Shape{fields.dim(1), fields.dim(2), fields.dim(3)});
        std::copy_n(fields.data() + t * n, n, f.data());
        return f;
    }

    Tensor<double> time(std::size_t t) const { return time_features(t, config.day_period, config.year_period); }
};

namespace detail {

// Per-degree coefficient std so that the anomaly has unit area-mean variance.
inline std::vector<double> degree_std(const SynthConfig& c) {
    std::vector<double> s(c.band_limit + 1, 0.0);
    double total = 0;
    for (std::size_t n = 1; n <= c.band_limit; ++n) {
        s[n] = std::pow(static_cast<double>(n), -c.spectral_slope);
        total += static_cast<double>(2 * n + 1) * s[n] * s[n];
    }
    for (auto& v : s) v /= std::sqrt(total);
    return s;
}

inline void draw(spectral::Coefficients& a, const std::vector<double>& sd, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t n = 1; n <= a.n_max; ++n) {
        a(n, 0) += scale * sd[n] * nd(rng);
        for (std::size_t m = 1; m <= n; ++m) {
            const double re = nd(rng), im = nd(rng);
            a(n, m) += scale * sd[n] * std::complex<double>(re, im) / std::sqrt(2.0);
        }
    }
}

}  // namespace detail

inline Dataset generate(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t H = cfg.grid_h, W = cfg.grid_w, C = cfg.channels, L = cfg.band_limit;
    const spectral::SphericalTransform st(H, W, L);
    const auto sd = detail::degree_std(cfg);
    const double innov = std::sqrt(1 - cfg.ar * cfg.ar);
    const LatLonGrid grid(H, W);

    Dataset ds;
    ds.config = cfg;
    ds.fields = Tensor<double>(Shape{cfg.steps, H, W, C});

    for (std::size_t c = 0; c < C; ++c) {
        std::mt19937_64 rng(mix_seed(cfg.seed, 1000 + c));
        spectral::Coefficients a(L);
        detail::draw(a, sd, 1.0, rng);
        const double omega = cfg.rotation_deg * std::numbers::pi / 180.0 * (1.0 + 0.5 * static_cast<double>(c));
        for (std::size_t t = 0; t < cfg.steps; ++t) {
            if (t > 0) {
                for (std::size_t n = 1; n <= L; ++n)
                    for (std::size_t m = 0; m <= n; ++m)
                        a(n, m) *= cfg.ar * std::polar(1.0, -static_cast<double>(m) * omega);
                detail::draw(a, sd, innov, rng);
            }
            const Tensor<double> anomaly = st.synthesize(a);
            for (std::size_t j = 0; j < H; ++j) {
                const double lat = grid.lat(j);
                for (std::size_t k = 0; k < W; ++k) {
                    double v = anomaly.at(j, k);
                    if (c == 0)
                        v = kPressureMean + kPressureScale * v;
                    else
                        v = 10.0 * static_cast<double>(c) + 4.0 * std::cos(2 * lat) + 2.0 * v;
                    ds.fields[((t * H + j) * W + k) * C + c] = v;
                }
            }
        }
    }

    // Orography: one more band-limited draw, standardised.
    std::mt19937_64 rng(mix_seed(cfg.seed, 7));
    spectral::Coefficients oro(L);
    detail::draw(oro, sd, 1.0, rng);
    const Tensor<double> o = st.synthesize(oro);
    double mean = 0, sq = 0;
    for (double v : o.values()) mean += v;
    mean /= static_cast<double>(o.size());
    for (double v : o.values()) sq += (v - mean) * (v - mean);
    const double sdv = std::sqrt(sq / static_cast<double>(o.size()));
    ds.statics = Tensor<double>(Shape{H, W, 4});
    for (std::size_t i = 0; i < H * W; ++i) {
        const Vec3 p = grid.point(i);
        ds.statics[i * 4 + 0] = (o[i] - mean) / sdv;
        ds.statics[i * 4 + 1] = p.x;
        ds.statics[i * 4 + 2] = p.y;
        ds.statics[i * 4 + 3] = p.z;
    }
    return ds;
}

// Directory layout: synth.cfg, statics.msgt, stats.msgt (per-channel
// climatology over all steps, [2, C]) and state_NNNNN.msgt per step.
inline std::string state_name(std::size_t t) {
    std::string s = std::to_string(t);
    return "state_" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s + ".msgt";
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io::IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    io::write_file(dir / "synth.cfg", ds.config.to_kv().text());
    io::save_msgt(dir / "statics.msgt", ds.statics);
    io::save_msgt(dir / "stats.msgt", train::NormStats::from_frames(ds.fields, ds.steps()).to_tensor());
    for (std::size_t t = 0; t < ds.steps(); ++t) io::save_msgt(dir / state_name(t), ds.frame(t));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    ds.config = SynthConfig::from_kv(KeyValues::load(dir / "synth.cfg"));
    ds.statics = io::load_msgt<double>(dir / "statics.msgt");
    const std::size_t H = ds.config.grid_h, W = ds.config.grid_w, C = ds.config.channels;
    std::size_t steps = 0;
    while (std::filesystem::exists(dir / state_name(steps))) ++steps;
    if (steps == 0) throw io::IoError("dataset " + dir.string() + " has no state files");
    ds.fields = Tensor<double>(Shape{steps, H, W, C});
    for (std::size_t t = 0; t < steps; ++t) {
        const auto f = io::load_msgt<double>(dir / state_name(t));
        if (f.shape() != Shape{H, W, C})
            throw io::IoError(state_name(t) + " has shape " + shape_str(f.shape()) + ", expected " +
                              shape_str({H, W, C}));
        std::copy_n(f.data(), f.size(), ds.fields.data() + t * f.size());
    }
    ds.config.steps = steps;
    return ds;
}

}  // namespace mosaic::synth
