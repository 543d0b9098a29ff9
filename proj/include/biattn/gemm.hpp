#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace biattn::detail {

// C[p x s] += A[p x r] * B[r x s], all row-major and contiguous.
inline void gemm_nn_acc(const double* a, const double* b, double* c, std::size_t p, std::size_t r,
                        std::size_t s) {
    constexpr std::size_t kColBlock = 256;
    for (std::size_t j0 = 0; j0 < s; j0 += kColBlock) {
        const std::size_t jn = std::min(kColBlock, s - j0);
        std::size_t i = 0;
        for (; i + 4 <= p; i += 4) {
            double* c0 = c + (i + 0) * s + j0;
            double* c1 = c + (i + 1) * s + j0;
            double* c2 = c + (i + 2) * s + j0;
            double* c3 = c + (i + 3) * s + j0;
            const double* a0 = a + (i + 0) * r;
            const double* a1 = a + (i + 1) * r;
            const double* a2 = a + (i + 2) * r;
            const double* a3 = a + (i + 3) * r;
            for (std::size_t k = 0; k < r; ++k) {
                const double* bk = b + k * s + j0;
                const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
                for (std::size_t j = 0; j < jn; ++j) {
                    const double bv = bk[j];
                    c0[j] += v0 * bv;
                    c1[j] += v1 * bv;
                    c2[j] += v2 * bv;
                    c3[j] += v3 * bv;
                }
            }
        }
        for (; i < p; ++i) {
            double* ci = c + i * s + j0;
            const double* ai = a + i * r;
            for (std::size_t k = 0; k < r; ++k) {
                const double* bk = b + k * s + j0;
                const double v = ai[k];
                for (std::size_t j = 0; j < jn; ++j) ci[j] += v * bk[j];
            }
        }
    }
}

// dst[cols x rows] = src[rows x cols]^T
inline void transpose_into(const double* src, double* dst, std::size_t rows, std::size_t cols) {
    constexpr std::size_t kTile = 32;
    for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
        const std::size_t in = std::min(rows, i0 + kTile);
        for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
            const std::size_t jn = std::min(cols, j0 + kTile);
            for (std::size_t i = i0; i < in; ++i) {
                for (std::size_t j = j0; j < jn; ++j) dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
}

/// C[p x s] += op(A) * op(B) where op(A) is p x r and op(B) is r x s.
/// A transposed operand is stored as r x p (resp. s x r) and packed before the
/// product, so the inner loop always runs over contiguous columns of C.
inline void gemm_acc(const double* a, bool trans_a, const double* b, bool trans_b, double* c,
                     std::size_t p, std::size_t r, std::size_t s) {
    std::vector<double> pa, pb;
    if (trans_a) {
        pa.resize(p * r);
        transpose_into(a, pa.data(), r, p);
        a = pa.data();
    }
    if (trans_b) {
        pb.resize(r * s);
        transpose_into(b, pb.data(), s, r);
        b = pb.data();
    }
    gemm_nn_acc(a, b, c, p, r, s);
}

}  // namespace biattn::detail
