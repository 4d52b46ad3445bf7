#pragma once

// Thin GEMM layer over Eigen maps. Every dense product in the library goes
// through here so the kernels never touch Eigen types directly.

#include <cstddef>

#include <Eigen/Core>

namespace mosaic::linalg {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// C[m,n] = alpha * op(A) * op(B) + beta * C, all row-major and contiguous.
// op(A) is [m,k]; A is stored [m,k] or, when trans_a, [k,m].
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
          bool trans_a = false, bool trans_b = false, T alpha = T{1}, T beta = T{0}) {
    using Idx = Eigen::Index;
    MapMat<T> C(c, static_cast<Idx>(m), static_cast<Idx>(n));
    if (beta == T{0})
        C.setZero();
    else if (beta != T{1})
        C *= beta;
    const Idx M = static_cast<Idx>(m), N = static_cast<Idx>(n), K = static_cast<Idx>(k);
    if (!trans_a && !trans_b)
        C.noalias() += alpha * (CMapMat<T>(a, M, K) * CMapMat<T>(b, K, N));
    else if (!trans_a && trans_b)
        C.noalias() += alpha * (CMapMat<T>(a, M, K) * CMapMat<T>(b, N, K).transpose());
    else if (trans_a && !trans_b)
        C.noalias() += alpha * (CMapMat<T>(a, K, M).transpose() * CMapMat<T>(b, K, N));
    else
        C.noalias() += alpha * (CMapMat<T>(a, K, M).transpose() * CMapMat<T>(b, N, K).transpose());
}

}  // namespace mosaic::linalg
