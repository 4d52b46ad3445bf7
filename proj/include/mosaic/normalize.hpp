#pragma once

// Per-channel standardisation statistics accumulated with Welford's online
// update over every grid point of every frame.

#include <cmath>
#include <cstddef>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic::train {

class Welford {
public:
    explicit Welford(std::size_t channels = 0) : n_(channels, 0.0), mean_(channels, 0.0), m2_(channels, 0.0) {}

    void add(std::size_t c, double x) {
        n_[c] += 1;
        const double d = x - mean_[c];
        mean_[c] += d / n_[c];
        m2_[c] += d * (x - mean_[c]);
    }

    // Rows of a [..., C] tensor.
    void add_frame(const Tensor<double>& f) {
        const std::size_t C = mean_.size();
        if (f.shape().back() != C) throw DimensionError("frame channels do not match the accumulator");
        for (std::size_t i = 0; i < f.size(); ++i) add(i % C, f[i]);
    }

    std::size_t channels() const { return mean_.size(); }
    double mean(std::size_t c) const { return mean_[c]; }
    double variance(std::size_t c) const { return n_[c] > 0 ? m2_[c] / n_[c] : 0.0; }

private:
    std::vector<double> n_, mean_, m2_;
};

struct NormStats {
    std::vector<double> mean, std;

    std::size_t channels() const { return mean.size(); }

    // Frames [S, H, W, C]; only the first `count` frames contribute.
    static NormStats from_frames(const Tensor<double>& frames, std::size_t count) {
        const std::size_t C = frames.shape().back();
        const std::size_t per = frames.size() / frames.dim(0);
        if (count == 0 || count > frames.dim(0)) throw DimensionError("statistics need 1..S frames");
        Welford w(C);
        for (std::size_t i = 0; i < count * per; ++i) w.add(i % C, frames[i]);
        NormStats s;
        for (std::size_t c = 0; c < C; ++c) {
            s.mean.push_back(w.mean(c));
            // a constant channel keeps unit scale
            const double sd = std::sqrt(w.variance(c));
            s.std.push_back(sd > 1e-12 ? sd : 1.0);
        }
        return s;
    }

    template <class T>
    Tensor<T> normalize(const Tensor<double>& x) const {
        require(x);
        Tensor<T> out(x.shape());
        const std::size_t C = channels();
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>((x[i] - mean[i % C]) / std[i % C]);
        return out;
    }

    template <class T>
    Tensor<double> denormalize(const Tensor<T>& x) const {
        require(x);
        Tensor<double> out(x.shape());
        const std::size_t C = channels();
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(x[i]) * std[i % C] + mean[i % C];
        return out;
    }

    // [2, C]: row 0 means, row 1 stds.
    Tensor<double> to_tensor() const {
        Tensor<double> t(Shape{2, channels()});
        for (std::size_t c = 0; c < channels(); ++c) {
            t.at(0, c) = mean[c];
            t.at(1, c) = std[c];
        }
        return t;
    }

    static NormStats from_tensor(const Tensor<double>& t) {
        if (t.rank() != 2 || t.dim(0) != 2) throw DimensionError("stats tensor must be [2, C]");
        NormStats s;
        for (std::size_t c = 0; c < t.dim(1); ++c) {
            s.mean.push_back(t.at(0, c));
            s.std.push_back(t.at(1, c));
            if (!(s.std.back() > 0)) throw NumericError("channel standard deviation must be positive");
        }
        return s;
    }

private:
    template <class T>
    void require(const Tensor<T>& x) const {
        if (x.empty() || x.shape().back() != channels())
            throw DimensionError("tensor " + shape_str(x.shape()) + " does not end in " + std::to_string(channels()) +
                                 " channels");
    }
};

}  // namespace mosaic::train
