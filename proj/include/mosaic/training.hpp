#pragma once

// Ensemble training with the fair CRPS: loss weights, the Muon optimiser,
// gradient clipping, the cosine schedule, single-step and rollout training
// steps (pushforward: only the last step is differentiated) and ensemble
// generation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "mosaic/config.hpp"
#include "mosaic/geometry.hpp"
#include "mosaic/model.hpp"
#include "mosaic/normalize.hpp"
#include "mosaic/parallel.hpp"
#include "mosaic/params.hpp"
#include "mosaic/synth.hpp"
#include "mosaic/tape.hpp"

namespace mosaic::train {

// ---- loss ---------------------------------------------------------------

inline constexpr double kReferencePressure = 463.46;  // hPa

inline double pressure_level_weight(double p_hpa) { return p_hpa / kReferencePressure; }

// cos(lat_h) / mean_h cos(lat_h), one value per grid row.
inline std::vector<double> latitude_weights(const LatLonGrid& grid) {
    std::vector<double> w(grid.height());
    double mean = 0;
    for (std::size_t h = 0; h < grid.height(); ++h) mean += (w[h] = std::cos(grid.lat(h)));
    mean /= static_cast<double>(grid.height());
    for (auto& v : w) v /= mean;
    return w;
}

struct LossWeights {
    std::vector<double> alpha;  // per channel
    std::vector<double> omega;  // per latitude row

    static LossWeights for_grid(const LatLonGrid& grid, std::vector<double> alpha) {
        return {std::move(alpha), latitude_weights(grid)};
    }

    // alpha_c * omega_h broadcast to [H, W, C].
    template <class T>
    Tensor<T> table(std::size_t width) const {
        const std::size_t H = omega.size(), C = alpha.size();
        Tensor<T> t(Shape{H, width, C});
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < width; ++w)
                for (std::size_t c = 0; c < C; ++c) t[(h * width + w) * C + c] = static_cast<T>(alpha[c] * omega[h]);
        return t;
    }
};

// (1/N) sum |x_n - y| - 1/(2N(N-1)) sum_{n,n'} |x_n - x_n'|
inline double fair_crps(std::span<const double> ens, double y) {
    const std::size_t N = ens.size();
    if (N < 2) throw ConfigError("fair CRPS needs at least two ensemble members");
    double skill = 0, spread = 0;
    for (std::size_t i = 0; i < N; ++i) {
        skill += std::abs(ens[i] - y);
        for (std::size_t j = 0; j < N; ++j) spread += std::abs(ens[i] - ens[j]);
    }
    const double n = static_cast<double>(N);
    return skill / n - spread / (2 * n * (n - 1));
}

// Mean over all points of weights * fair CRPS; members share truth's shape.
template <class T>
Var<T> weighted_fair_crps(const std::vector<Var<T>>& members, const Tensor<T>& truth, const Tensor<T>& weights) {
    const std::size_t N = members.size();
    if (N < 2) throw ConfigError("fair CRPS needs at least two ensemble members");
    for (const auto& m : members) m.value().require_same(truth, "fair CRPS member vs truth");
    truth.require_same(weights, "fair CRPS weights");
    const std::size_t P = truth.size();
    const T n = static_cast<T>(N);
    const T inv_pairs = T{1} / (n * (n - 1));
    double total = 0;
    for (std::size_t i = 0; i < P; ++i) {
        double skill = 0, spread = 0;
        for (std::size_t a = 0; a < N; ++a) {
            const double xa = members[a].value()[i];
            skill += std::abs(xa - truth[i]);
            for (std::size_t b = a + 1; b < N; ++b) spread += std::abs(xa - members[b].value()[i]);
        }
        total += weights[i] * (skill / N - spread * inv_pairs);
    }
    Tape<T>* tape = members[0].tape;
    return tape->record(Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(P))), members,
                        [members, truth, weights, N, P, n, inv_pairs](Tape<T>& t, const Tensor<T>& g) {
                            const T scale = g[0] / static_cast<T>(P);
                            for (std::size_t a = 0; a < N; ++a) {
                                T* ga = t.grad_buffer(members[a]);
                                if (!ga) continue;
                                const auto& xa = members[a].value();
                                for (std::size_t i = 0; i < P; ++i) {
                                    T s = 0;
                                    for (std::size_t b = 0; b < N; ++b) {
                                        if (b == a) continue;
                                        const T d = xa[i] - members[b].value()[i];
                                        s += static_cast<T>((d > 0) - (d < 0));
                                    }
                                    const T e = xa[i] - truth[i];
                                    const T sg = static_cast<T>((e > 0) - (e < 0));
                                    ga[i] += scale * weights[i] * (sg / n - s * inv_pairs);
                                }
                            }
                        });
}

// ---- optimiser ----------------------------------------------------------

enum class Orthogonalizer { newton, quintic };

inline Orthogonalizer parse_orthogonalizer(const std::string& s) {
    if (s == "newton") return Orthogonalizer::newton;
    if (s == "quintic") return Orthogonalizer::quintic;
    throw ConfigError("unknown orthogonalizer '" + s + "' (newton, quintic)");
}

inline const char* orthogonalizer_name(Orthogonalizer o) { return o == Orthogonalizer::newton ? "newton" : "quintic"; }

namespace detail {

using Mat = Eigen::MatrixXd;

// Muon's quintic iteration X <- aX + b(XX^T)X + c(XX^T)^2 X on G/||G||_F.
inline Mat quintic_polar(Mat x, std::size_t steps) {
    constexpr double a = 3.4445, b = -4.7750, c = 2.0315;
    const bool wide = x.rows() <= x.cols();
    if (!wide) x.transposeInPlace();
    x /= x.norm() + 1e-7;
    for (std::size_t i = 0; i < steps; ++i) {
        const Mat A = x * x.transpose();
        const Mat B = b * A + c * A * A;
        x = a * x + B * x;
    }
    if (!wide) x.transposeInPlace();
    return x;
}

// Scaled Newton iteration X <- (zeta X + X^{-T} / zeta) / 2 on the R factor
// of a thin QR, with the (1, inf)-norm scaling. Returns false when R is
// numerically singular.
inline bool newton_polar(const Mat& g, std::size_t steps, Mat& out) {
    const bool tall = g.rows() >= g.cols();
    const Mat a = tall ? g : Mat(g.transpose());
    const Eigen::Index n = a.cols();
    Eigen::HouseholderQR<Mat> qr(a);
    const Mat q = qr.householderQ() * Mat::Identity(a.rows(), n);
    Mat x = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
    const double dmax = x.diagonal().cwiseAbs().maxCoeff();
    if (!(dmax > 0) || x.diagonal().cwiseAbs().minCoeff() <= 1e-10 * dmax) return false;
    auto norm1 = [](const Mat& m) { return m.cwiseAbs().colwise().sum().maxCoeff(); };
    auto norminf = [](const Mat& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); };
    for (std::size_t i = 0; i < steps; ++i) {
        const Mat y = x.inverse();
        const double zeta = std::pow(norm1(y) * norminf(y) / (norm1(x) * norminf(x)), 0.25);
        x = 0.5 * (zeta * x + y.transpose() / zeta);
    }
    out = q * x;
    if (!tall) out.transposeInPlace();
    return out.allFinite();
}

}  // namespace detail

// Approximate U V^T for G = U S V^T. Zero G maps to zero. The Newton variant
// falls back to the quintic iteration for rank-deficient input.
inline Tensor<double> orthogonalize(const Tensor<double>& g, std::size_t steps = 5,
                                    Orthogonalizer method = Orthogonalizer::newton) {
    if (g.rank() != 2) throw DimensionError("orthogonalize expects a matrix, got " + shape_str(g.shape()));
    const auto rows = static_cast<Eigen::Index>(g.dim(0)), cols = static_cast<Eigen::Index>(g.dim(1));
    detail::Mat m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        g.data(), rows, cols);
    Tensor<double> out(g.shape());
    if (m.norm() == 0) return out;
    detail::Mat r;
    if (method == Orthogonalizer::quintic || !detail::newton_polar(m, steps, r)) r = detail::quintic_polar(m, steps);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data(), rows, cols) = r;
    return out;
}

struct MuonConfig {
    double beta = 0.95;
    bool nesterov = true;
    std::size_t ns_steps = 5;
    double weight_decay = 1e-2;
    // Orthogonalised updates are scaled by update_scale * sqrt(max(m, n)).
    double update_scale = 0.2;
    Orthogonalizer method = Orthogonalizer::newton;
};

template <class T>
class Muon {
public:
    explicit Muon(MuonConfig cfg = {}) : cfg_(cfg) {}

    const MuonConfig& config() const { return cfg_; }
    const ParamStore<T>& momentum() const { return buf_; }

    // Matrices get the orthogonalised momentum plus decoupled weight decay;
    // vectors take the plain momentum step.
    void step(ParamStore<T>& params, const ParamStore<T>& grads, double lr) {
        for (auto& [name, p] : params) {
            auto g = grads.find(name);
            if (g == grads.end()) throw ConfigError("missing gradient for " + name);
            g->second.require_same(p, ("gradient of " + name).c_str());
            auto [it, fresh] = buf_.try_emplace(name, Tensor<T>(p.shape()));
            Tensor<T>& m = it->second;
            Tensor<double> u(p.shape());
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = static_cast<T>(cfg_.beta) * m[i] + g->second[i];
                u[i] = cfg_.nesterov ? g->second[i] + cfg_.beta * m[i] : m[i];
            }
            if (p.rank() == 2) {
                const Tensor<double> o = orthogonalize(u, cfg_.ns_steps, cfg_.method);
                const double s = cfg_.update_scale * std::sqrt(static_cast<double>(std::max(p.dim(0), p.dim(1))));
                const double decay = 1 - lr * cfg_.weight_decay;
                for (std::size_t i = 0; i < p.size(); ++i)
                    p[i] = static_cast<T>(decay * p[i] - lr * s * o[i]);
            } else {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<T>(p[i] - lr * u[i]);
            }
        }
    }

private:
    MuonConfig cfg_;
    ParamStore<T> buf_;
};

// Rescales the gradients in place when their global norm exceeds max_norm;
// returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& grads, double max_norm) {
    double ss = 0;
    for (const auto& [name, g] : grads)
        for (T v : g.values()) ss += static_cast<double>(v) * v;
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, g] : grads) g *= s;
    }
    return norm;
}

// Linear warmup, then cosine decay from lr_max to lr_min at `total`.
inline double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min, std::size_t warmup = 0) {
    if (step < warmup) return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup) return lr_min;
    const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + std::cos(std::numbers::pi * t));
}

// ---- data ---------------------------------------------------------------

template <class T>
struct Sample {
    model::ModelInput<T> input;           // history ending at t0, time of t0 + 1
    std::vector<Tensor<T>> targets;       // normalised frames t0+1 .. t0+horizon
    std::vector<Tensor<T>> target_times;  // time features of those frames
};

// Normalised windows over a synthetic dataset. The first `train_end` frames
// form the training split; the rest is validation.
template <class T>
class WindowedData {
public:
    WindowedData(const synth::Dataset& ds, std::size_t history, double train_fraction)
        : ds_(&ds), history_(history) {
        if (history == 0) throw ConfigError("history must be positive");
        train_end_ = static_cast<std::size_t>(train_fraction * static_cast<double>(ds.steps()));
        if (train_end_ < history + 1 || train_end_ > ds.steps())
            throw ConfigError("training split of " + std::to_string(train_end_) + " frames is too short for history " +
                              std::to_string(history));
        stats_ = NormStats::from_frames(ds.fields, train_end_);
        frames_ = stats_.normalize<T>(ds.fields);
        statics_ = cast(ds.statics);
    }

    const NormStats& stats() const { return stats_; }
    const synth::Dataset& dataset() const { return *ds_; }
    std::size_t history() const { return history_; }
    std::size_t train_end() const { return train_end_; }

    Tensor<T> frame(std::size_t t) const {
        const std::size_t n = frames_.size() / frames_.dim(0);
        Tensor<T> f(Shape{frames_.dim(1), frames_.dim(2), frames_.dim(3)});
        std::copy_n(frames_.data() + t * n, n, f.data());
        return f;
    }

    Tensor<T> time(std::size_t t) const { return cast(ds_->time(t)); }
    const Tensor<T>& statics() const { return statics_; }

    // Valid t0 for a window with `horizon` targets: [history-1, end-horizon).
    std::vector<std::size_t> origins(bool validation, std::size_t horizon) const {
        const std::size_t lo = validation ? std::max(train_end_, history_ - 1) : history_ - 1;
        const std::size_t hi = validation ? ds_->steps() : train_end_;
        std::vector<std::size_t> out;
        for (std::size_t t = lo; t + horizon < hi; ++t) out.push_back(t);
        return out;
    }

    Sample<T> sample(std::size_t t0, std::size_t horizon) const {
        if (t0 + 1 < history_ || t0 + horizon >= ds_->steps())
            throw DimensionError("window at " + std::to_string(t0) + " leaves the dataset");
        const std::size_t n = frames_.size() / frames_.dim(0);
        Sample<T> s;
        s.input.history = Tensor<T>(Shape{history_, frames_.dim(1), frames_.dim(2), frames_.dim(3)});
        std::copy_n(frames_.data() + (t0 + 1 - history_) * n, history_ * n, s.input.history.data());
        s.input.statics = statics_;
        s.input.time = time(t0 + 1);
        for (std::size_t k = 1; k <= horizon; ++k) {
            s.targets.push_back(frame(t0 + k));
            s.target_times.push_back(time(t0 + k));
        }
        return s;
    }

private:
    static Tensor<T> cast(const Tensor<double>& x) {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(x[i]);
        return out;
    }

    const synth::Dataset* ds_;
    std::size_t history_;
    std::size_t train_end_ = 0;
    NormStats stats_;
    Tensor<T> frames_;
    Tensor<T> statics_;
};

// Drops the oldest history frame and appends `pred`.
template <class T>
model::ModelInput<T> advance(const model::ModelInput<T>& in, const Tensor<T>& pred, Tensor<T> next_time) {
    model::ModelInput<T> out{Tensor<T>(in.history.shape()), in.statics, std::move(next_time)};
    const std::size_t n = pred.size(), T_ = in.history.dim(0);
    if (in.history.size() != T_ * n) throw DimensionError("prediction does not match a history frame");
    std::copy(in.history.data() + n, in.history.data() + T_ * n, out.history.data());
    std::copy_n(pred.data(), n, out.history.data() + (T_ - 1) * n);
    return out;
}

// z ~ N(0, I), fixed by (seed, member, step).
template <class T>
Tensor<T> sample_noise(std::size_t dim, std::uint64_t seed, std::uint64_t member, std::uint64_t step) {
    std::mt19937_64 rng(mix_seed(mix_seed(seed, member), step));
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor<T> z(Shape{dim});
    for (auto& v : z.values()) v = static_cast<T>(nd(rng));
    return z;
}

// ---- training steps -----------------------------------------------------

template <class T>
struct RolloutResult {
    double loss = 0;
    ParamStore<T> grads;                 // empty when evaluated without gradients
    std::vector<Tensor<T>> predictions;  // member predictions at the last step
    std::size_t tape_nodes = 0;          // size of the largest tape built
};

// Loss at rollout step k for `members` ensemble members. The first k-1
// steps run on throw-away tapes without recorded operations; only step k is
// differentiated.
template <class T>
RolloutResult<T> rollout_loss(const model::Model<T>& net, const ParamStore<T>& params, const Sample<T>& s,
                              std::size_t k, std::size_t members, std::uint64_t noise_seed, const Tensor<T>& weights,
                              bool with_grad) {
    if (k == 0 || k > s.targets.size()) throw ConfigError("rollout length must be between 1 and the sample horizon");
    const std::size_t zdim = net.config().noise_dim;
    RolloutResult<T> res;
    std::vector<model::ModelInput<T>> states(members, s.input);
    for (std::size_t step = 1; step < k; ++step)
        for (std::size_t m = 0; m < members; ++m) {
            Tape<T> scratch;
            ParamBinding<T> p(scratch, params, false);
            const Tensor<T> pred = net.forward(p, states[m], sample_noise<T>(zdim, noise_seed, m, step)).value();
            res.tape_nodes = std::max(res.tape_nodes, scratch.size());
            states[m] = advance(states[m], pred, s.target_times[step]);
        }
    Tape<T> tape;
    ParamBinding<T> p(tape, params, with_grad);
    std::vector<Var<T>> preds;
    for (std::size_t m = 0; m < members; ++m) preds.push_back(net.forward(p, states[m], sample_noise<T>(zdim, noise_seed, m, k)));
    Var<T> loss = weighted_fair_crps(preds, s.targets[k - 1], weights);
    res.loss = static_cast<double>(loss.value()[0]);
    for (const auto& v : preds) res.predictions.push_back(v.value());
    if (with_grad) {
        tape.backward(loss);
        res.grads = p.grads();
    }
    res.tape_nodes = std::max(res.tape_nodes, tape.size());
    return res;
}

struct TrainConfig {
    std::size_t steps = 2000;
    double lr_max = 1e-3;
    double lr_min = 1e-6;
    std::size_t warmup = 0;
    std::size_t ensemble = 2;
    double clip = 1.0;
    std::size_t batch = 1;
    std::size_t rollout = 1;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    MuonConfig muon;

    void validate() const {
        if (ensemble < 2) throw ConfigError("training ensemble needs at least two members");
        if (batch == 0 || rollout == 0) throw ConfigError("batch and rollout must be positive");
        if (!(lr_max >= 0 && lr_min >= 0)) throw ConfigError("learning rates must be non-negative");
        if (!(clip > 0)) throw ConfigError("clip norm must be positive");
        if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train_fraction must lie in (0, 1)");
    }

    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("steps", std::to_string(steps));
        kv.set("lr_max", synth::SynthConfig::format_real(lr_max));
        kv.set("lr_min", synth::SynthConfig::format_real(lr_min));
        kv.set("warmup", std::to_string(warmup));
        kv.set("ensemble", std::to_string(ensemble));
        kv.set("clip", synth::SynthConfig::format_real(clip));
        kv.set("batch", std::to_string(batch));
        kv.set("rollout", std::to_string(rollout));
        kv.set("train_fraction", synth::SynthConfig::format_real(train_fraction));
        kv.set("seed", std::to_string(seed));
        kv.set("muon_beta", synth::SynthConfig::format_real(muon.beta));
        kv.set("muon_nesterov", muon.nesterov ? "true" : "false");
        kv.set("muon_steps", std::to_string(muon.ns_steps));
        kv.set("weight_decay", synth::SynthConfig::format_real(muon.weight_decay));
        kv.set("muon_scale", synth::SynthConfig::format_real(muon.update_scale));
        kv.set("orthogonalizer", orthogonalizer_name(muon.method));
        return kv;
    }

    static TrainConfig from_kv(const KeyValues& kv) { return from_kv(kv, TrainConfig()); }

    static TrainConfig from_kv(const KeyValues& kv, TrainConfig c) {
        c.steps = kv.size_value("steps", c.steps);
        c.lr_max = kv.real("lr_max", c.lr_max);
        c.lr_min = kv.real("lr_min", c.lr_min);
        c.warmup = kv.size_value("warmup", c.warmup);
        c.ensemble = kv.size_value("ensemble", c.ensemble);
        c.clip = kv.real("clip", c.clip);
        c.batch = kv.size_value("batch", c.batch);
        c.rollout = kv.size_value("rollout", c.rollout);
        c.train_fraction = kv.real("train_fraction", c.train_fraction);
        c.seed = kv.size_value("seed", c.seed);
        c.muon.beta = kv.real("muon_beta", c.muon.beta);
        c.muon.nesterov = kv.flag("muon_nesterov", c.muon.nesterov);
        c.muon.ns_steps = kv.size_value("muon_steps", c.muon.ns_steps);
        c.muon.weight_decay = kv.real("weight_decay", c.muon.weight_decay);
        c.muon.update_scale = kv.real("muon_scale", c.muon.update_scale);
        if (kv.has("orthogonalizer")) c.muon.method = parse_orthogonalizer(kv.str("orthogonalizer", ""));
        c.validate();
        return c;
    }
};

struct StepLog {
    std::size_t step = 0;
    double loss = 0;
    double grad_norm = 0;
    double lr = 0;
    std::size_t tape_nodes = 0;
};

// One optimiser step on a batch of samples at rollout length k.
template <class T>
StepLog train_step(const model::Model<T>& net, ParamStore<T>& params, Muon<T>& opt, std::span<const Sample<T>> batch,
                   std::size_t step, const TrainConfig& cfg, const Tensor<T>& weights) {
    StepLog log;
    log.step = step;
    ParamStore<T> grads;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        auto r = rollout_loss(net, params, batch[b], cfg.rollout, cfg.ensemble,
                              mix_seed(mix_seed(cfg.seed, step), b), weights, true);
        if (!std::isfinite(r.loss))
            throw NumericError("non-finite loss at step " + std::to_string(step) + " (sample " + std::to_string(b) + ")");
        log.loss += r.loss / static_cast<double>(batch.size());
        log.tape_nodes = std::max(log.tape_nodes, r.tape_nodes);
        const T inv = T{1} / static_cast<T>(batch.size());
        for (auto& [name, g] : r.grads) {
            g *= inv;
            auto [it, fresh] = grads.try_emplace(name, std::move(g));
            if (!fresh) it->second += g;
        }
    }
    log.grad_norm = clip_grad_norm(grads, cfg.clip);
    if (!std::isfinite(log.grad_norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    log.lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min, cfg.warmup);
    opt.step(params, grads, log.lr);
    return log;
}

// Mean weighted fair CRPS over validation windows, with fixed noise seeds.
template <class T>
double validation_loss(const model::Model<T>& net, const ParamStore<T>& params, const WindowedData<T>& data,
                       const Tensor<T>& weights, std::size_t members, std::size_t max_windows, std::uint64_t seed,
                       std::size_t rollout = 1) {
    auto origins = data.origins(true, rollout);
    if (origins.empty()) throw ConfigError("validation split is too short");
    const std::size_t stride = std::max<std::size_t>(1, origins.size() / std::max<std::size_t>(1, max_windows));
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < origins.size() && count < max_windows; i += stride, ++count) {
        auto r = rollout_loss(net, params, data.sample(origins[i], rollout), rollout, members, mix_seed(seed, i),
                              weights, false);
        total += r.loss;
    }
    return total / static_cast<double>(count);
}

// Full training loop; `on_step` sees every step's log.
template <class T>
void train(const model::Model<T>& net, ParamStore<T>& params, const WindowedData<T>& data, const TrainConfig& cfg,
           const Tensor<T>& weights, const std::function<void(const StepLog&)>& on_step = {}) {
    cfg.validate();
    Muon<T> opt(cfg.muon);
    const auto origins = data.origins(false, cfg.rollout);
    if (origins.empty()) throw ConfigError("training split is too short for the rollout length");
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::mt19937_64 rng(mix_seed(cfg.seed ^ 0x5eedull, step));
        std::uniform_int_distribution<std::size_t> pick(0, origins.size() - 1);
        std::vector<Sample<T>> batch;
        for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(data.sample(origins[pick(rng)], cfg.rollout));
        const StepLog log = train_step<T>(net, params, opt, batch, step, cfg, weights);
        if (on_step) on_step(log);
    }
}

// ---- ensembles ----------------------------------------------------------

template <class T>
struct EnsembleForecast {
    Tensor<T> states;  // [members, steps, H, W, C], normalised

    std::size_t members() const { return states.dim(0); }
    std::size_t steps() const { return states.dim(1); }

    Tensor<T> at(std::size_t member, std::size_t step) const {
        Tensor<T> f(Shape{states.dim(2), states.dim(3), states.dim(4)});
        std::copy_n(states.data() + (member * steps() + step) * f.size(), f.size(), f.data());
        return f;
    }
};

// Members share the initial condition and draw a fresh z every step.
// time_at(s) gives the time features of lead s (1-based).
template <class T>
EnsembleForecast<T> generate_ensemble(const model::Model<T>& net, const ParamStore<T>& params,
                                      const model::ModelInput<T>& initial,
                                      const std::type_identity_t<std::function<Tensor<T>(std::size_t)>>& time_at, std::size_t members,
                                      std::size_t steps, std::uint64_t seed) {
    if (members == 0 || steps == 0) throw ConfigError("ensemble needs at least one member and one step");
    const auto& c = net.config();
    EnsembleForecast<T> out{Tensor<T>(Shape{members, steps, c.grid_h, c.grid_w, c.dyn_channels})};
    const std::size_t frame = c.grid_points() * c.dyn_channels;
    parallel_for(members, [&](std::size_t m) {
        model::ModelInput<T> state = initial;
        state.time = time_at(1);
        for (std::size_t s = 1; s <= steps; ++s) {
            Tape<T> tape;
            ParamBinding<T> p(tape, params, false);
            const Tensor<T> pred = net.forward(p, state, sample_noise<T>(c.noise_dim, seed, m, s)).value();
            std::copy_n(pred.data(), frame, out.states.data() + (m * steps + s - 1) * frame);
            if (s < steps) state = advance(state, pred, time_at(s + 1));
        }
    });
    return out;
}

}  // namespace mosaic::train
