#pragma once

// Named parameter tensors and their binding onto a gradient tape.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mosaic/config.hpp"
#include "mosaic/msgt.hpp"
#include "mosaic/tape.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic {

// Ordered by name, so iteration (and every reduction over parameters) is
// deterministic.
template <class T>
using ParamStore = std::map<std::string, Tensor<T>>;

struct ParamSpec {
    std::string name;
    Shape shape;
    double stddev;  // 0 for zero-initialised tensors
};

// sigma = (1 / sqrt(d_in)) * min(1, sqrt(d_out / d_in))
inline double linear_init_std(std::size_t d_in, std::size_t d_out) {
    const double in = static_cast<double>(d_in), out = static_cast<double>(d_out);
    return (1.0 / std::sqrt(in)) * std::min(1.0, std::sqrt(out / in));
}

// Each tensor draws from its own stream keyed by (seed, name), so adding a
// parameter never changes the others.
template <class T>
ParamStore<T> sample_params(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
    ParamStore<T> store;
    for (const auto& s : specs) {
        Tensor<T> t(s.shape);
        if (s.stddev > 0) {
            std::mt19937_64 rng(mix_seed(seed, fnv1a(s.name)));
            std::normal_distribution<double> nd(0.0, s.stddev);
            for (auto& v : t.values()) v = static_cast<T>(nd(rng));
        }
        if (!store.emplace(s.name, std::move(t)).second) throw ConfigError("duplicate parameter name " + s.name);
    }
    return store;
}

template <class T>
class ParamBinding {
public:
    ParamBinding(Tape<T>& tape, const ParamStore<T>& store, bool requires_grad)
        : tape_(tape), store_(store), grad_(requires_grad) {}

    Var<T> operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        auto p = store_.find(name);
        if (p == store_.end()) throw ConfigError("unknown parameter " + name);
        Var<T> v = tape_.leaf(p->second, grad_);
        bound_.emplace(name, v);
        return v;
    }

    // Uses an existing tape variable for `name` instead of a fresh leaf.
    void attach(const std::string& name, Var<T> v) {
        if (!store_.count(name)) throw ConfigError("unknown parameter " + name);
        bound_[name] = v;
    }

    Tape<T>& tape() { return tape_; }
    const std::map<std::string, Var<T>>& bound() const { return bound_; }

    // Gradients of every parameter; zeros for ones the loss never touched.
    ParamStore<T> grads() const {
        ParamStore<T> out;
        for (const auto& [name, t] : store_) {
            auto it = bound_.find(name);
            out.emplace(name, it == bound_.end() ? Tensor<T>(t.shape(), T{0}) : tape_.grad(it->second));
        }
        return out;
    }

private:
    Tape<T>& tape_;
    const ParamStore<T>& store_;
    bool grad_;
    std::map<std::string, Var<T>> bound_;
};

template <class T>
std::size_t param_count(const ParamStore<T>& store) {
    std::size_t n = 0;
    for (const auto& [name, t] : store) n += t.size();
    return n;
}

}  // namespace mosaic
