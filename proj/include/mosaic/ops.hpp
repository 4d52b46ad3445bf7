#pragma once

// Differentiable tensor operations recorded on a Tape. Each op computes its
// forward value eagerly and registers a hand-derived backward rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mosaic/linalg.hpp"
#include "mosaic/tape.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic {

inline constexpr double kRmsNormEps = 1e-6;

namespace detail {

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape r;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) r.push_back(s[i]);
    if (r.empty()) r.push_back(1);
    return r;
}

template <class T>
T silu(T x) {
    return x / (T{1} + std::exp(-x));
}

template <class T>
T sigmoid(T x) {
    if (x >= 0) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <class T>
void require_matrix(const Tensor<T>& a, const char* what) {
    if (a.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& A = a.value();
    const auto& B = b.value();
    detail::require_matrix(A, "matmul");
    detail::require_matrix(B, "matmul");
    if (A.dim(1) != B.dim(0))
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor<T> out(Shape{m, n});
    linalg::gemm(A.data(), B.data(), out.data(), m, n, k);
    return a.tape->record(std::move(out), {a, b}, [a, b, m, n, k](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a)) linalg::gemm(g.data(), b.value().data(), ga, m, k, n, false, true, T{1}, T{1});
        if (T* gb = t.grad_buffer(b)) linalg::gemm(a.value().data(), g.data(), gb, k, n, m, true, false, T{1}, T{1});
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    a.value().require_same(b.value(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    a.value().require_same(b.value(), "sub");
    Tensor<T> out = a.value();
    const auto& B = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(a, g);
        if (T* gb = t.grad_buffer(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    a.value().require_same(b.value(), "mul");
    const auto& A = a.value();
    const auto& B = b.value();
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        const auto& A = a.value();
        const auto& B = b.value();
        if (T* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        if (T* gb = t.grad_buffer(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    out *= s;
    return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

// Adds a length-n bias to every row of a [..., n] tensor.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    const auto& A = a.value();
    const auto& B = bias.value();
    const std::size_t n = A.shape().back();
    if (B.size() != n)
        throw DimensionError("add_bias: bias " + shape_str(B.shape()) + " does not broadcast onto " + shape_str(A.shape()));
    Tensor<T> out = A;
    const std::size_t rows = A.size() / n;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += B[j];
    return a.tape->record(std::move(out), {a, bias}, [a, bias, rows, n](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(a, g);
        if (T* gb = t.grad_buffer(bias))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    long double s = 0;
    for (auto v : a.value().values()) s += v;
    return a.tape->record(Tensor<T>::scalar(static_cast<T>(s)), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a)) {
            const std::size_t n = a.value().size();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
        }
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> sum_axis(Var<T> a, std::size_t axis) {
    const auto& A = a.value();
    const auto sp = detail::split_axis(A.shape(), axis);
    Tensor<T> out(detail::drop_axis(A.shape(), axis));
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += A[(o * sp.len + l) * sp.inner + i];
    return a.tape->record(std::move(out), {a}, [a, sp](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a))
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t l = 0; l < sp.len; ++l)
                    for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
    });
}

template <class T>
Var<T> mean_axis(Var<T> a, std::size_t axis) {
    const auto n = a.value().dim(axis);
    return scale(sum_axis(a, axis), T{1} / static_cast<T>(n));
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    Shape shape = parts[0].value().shape();
    std::vector<std::size_t> lens;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const auto& s = p.value().shape();
        if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != shape[i])
                throw DimensionError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(shape));
        lens.push_back(s.at(axis));
        total += s[axis];
    }
    shape[axis] = total;
    const auto sp = detail::split_axis(shape, axis);
    Tensor<T> out(shape);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& P = parts[p].value();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(P.data() + o * lens[p] * sp.inner, lens[p] * sp.inner,
                        out.data() + (o * total + off) * sp.inner);
        off += lens[p];
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    return parts[0].tape->record(std::move(out), std::span<const Var<T>>(inputs),
                                 [inputs, lens, sp, total](Tape<T>& t, const Tensor<T>& g) {
                                     std::size_t off = 0;
                                     for (std::size_t p = 0; p < inputs.size(); ++p) {
                                         if (T* gp = t.grad_buffer(inputs[p]))
                                             for (std::size_t o = 0; o < sp.outer; ++o)
                                                 for (std::size_t i = 0; i < lens[p] * sp.inner; ++i)
                                                     gp[o * lens[p] * sp.inner + i] += g[(o * total + off) * sp.inner + i];
                                         off += lens[p];
                                     }
                                 });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
    return concat(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}

template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& A = a.value();
    if (begin >= end || end > A.shape().at(axis))
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                             shape_str(A.shape()));
    const auto sp = detail::split_axis(A.shape(), axis);
    Shape shape = A.shape();
    shape[axis] = end - begin;
    const std::size_t w = end - begin;
    Tensor<T> out(shape);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(A.data() + (o * sp.len + begin) * sp.inner, w * sp.inner, out.data() + o * w * sp.inner);
    return a.tape->record(std::move(out), {a}, [a, sp, begin, w](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a))
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < w * sp.inner; ++i) ga[(o * sp.len + begin) * sp.inner + i] += g[o * w * sp.inner + i];
    });
}

// Rows of `a` (leading axis) picked by index; repeated indices accumulate.
template <class T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
    const auto& A = a.value();
    const std::size_t rows = A.dim(0);
    const std::size_t w = A.size() / rows;
    Shape shape = A.shape();
    shape[0] = index.size();
    Tensor<T> out(shape);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= rows) throw DimensionError("gather_rows: index " + std::to_string(index[r]) + " out of range");
        std::copy_n(A.data() + index[r] * w, w, out.data() + r * w);
    }
    return a.tape->record(std::move(out), {a}, [a, index = std::move(index), w](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a))
            for (std::size_t r = 0; r < index.size(); ++r)
                for (std::size_t j = 0; j < w; ++j) ga[index[r] * w + j] += g[r * w + j];
    });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <class T>
Var<T> transpose(Var<T> a) {
    const auto& A = a.value();
    detail::require_matrix(A, "transpose");
    const std::size_t r = A.dim(0), c = A.dim(1);
    Tensor<T> out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
    return a.tape->record(std::move(out), {a}, [a, r, c](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

template <class T>
Var<T> silu(Var<T> a) {
    const auto& A = a.value();
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = detail::silu(A[i]);
    return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a)) {
            const auto& A = a.value();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T s = detail::sigmoid(A[i]);
                ga[i] += g[i] * s * (T{1} + A[i] * (T{1} - s));
            }
        }
    });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
    const auto& A = a.value();
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = detail::sigmoid(A[i]);
    const std::size_t out_id = a.tape->size();
    return a.tape->record(std::move(out), {a}, [a, out_id](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a)) {
            const auto& S = t.value(Var<T>{&t, out_id});
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * S[i] * (T{1} - S[i]);
        }
    });
}

// Subgradient 0 at the kink.
template <class T>
Var<T> abs(Var<T> a) {
    const auto& A = a.value();
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = std::abs(A[i]);
    return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        if (T* ga = t.grad_buffer(a)) {
            const auto& A = a.value();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * static_cast<T>((A[i] > 0) - (A[i] < 0));
        }
    });
}

template <class T>
Tensor<T> softmax_values(const Tensor<T>& A, std::size_t axis) {
    const auto sp = detail::split_axis(A.shape(), axis);
    Tensor<T> out(A.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, A[base + l * sp.inner]);
            T s = 0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                const T e = std::exp(A[base + l * sp.inner] - mx);
                out[base + l * sp.inner] = e;
                s += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= s;
        }
    return out;
}

template <class T>
Var<T> softmax(Var<T> a, std::size_t axis) {
    Tensor<T> out = softmax_values(a.value(), axis);
    const auto sp = detail::split_axis(out.shape(), axis);
    const std::size_t out_id = a.tape->size();
    return a.tape->record(std::move(out), {a}, [a, sp, out_id](Tape<T>& t, const Tensor<T>& g) {
        T* ga = t.grad_buffer(a);
        if (!ga) return;
        const auto& S = t.value(Var<T>{&t, out_id});
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                T dot = 0;
                for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * S[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t j = base + l * sp.inner;
                    ga[j] += S[j] * (g[j] - dot);
                }
            }
    });
}

// y = x / sqrt(mean(x^2) + eps) over the last axis, no affine parameters.
template <class T>
Var<T> rmsnorm(Var<T> a, T eps = static_cast<T>(kRmsNormEps)) {
    const auto& A = a.value();
    const std::size_t n = A.shape().back();
    const std::size_t rows = A.size() / n;
    Tensor<T> out(A.shape());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += A[r * n + j] * A[r * n + j];
        inv[r] = T{1} / std::sqrt(ss / static_cast<T>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = A[r * n + j] * inv[r];
    }
    return a.tape->record(std::move(out), {a}, [a, n, rows, inv = std::move(inv)](Tape<T>& t, const Tensor<T>& g) {
        T* ga = t.grad_buffer(a);
        if (!ga) return;
        const auto& A = a.value();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * A[r * n + j];
            const T c = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r * n + j] * inv[r] - c * A[r * n + j];
        }
    });
}

// Noise-conditioned SwiGLU: (silu(x Wg + z_bias) * (x Wv)) Wout. z_bias is a
// single row broadcast over all tokens, or one row per token.
template <class T>
Var<T> swiglu_gated(Var<T> x, Var<T> z_bias, Var<T> w_gate, Var<T> w_value, Var<T> w_out) {
    const std::size_t hidden = w_gate.value().dim(1);
    if (w_value.value().dim(1) != hidden || w_out.value().dim(0) != hidden)
        throw DimensionError("swiglu_gated: hidden widths disagree (" + shape_str(w_gate.shape()) + ", " +
                             shape_str(w_value.shape()) + ", " + shape_str(w_out.shape()) + ")");
    Var<T> pre = matmul(x, w_gate);
    if (z_bias.value().size() == hidden)
        pre = add_bias(pre, z_bias);
    else
        pre = add(pre, z_bias);
    return matmul(mul(silu(pre), matmul(x, w_value)), w_out);
}

}  // namespace mosaic
