#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace biasnet::detail {

/// C[M,N] += A[M,K] * B[K,N], all row-major with explicit leading dimensions.
///
/// Every output element is accumulated in strictly ascending k order starting
/// from its incoming value, so the result is bitwise identical to the naive
/// triple loop `for k: c += a[i][k] * b[k][j]`. The blocking only changes
/// which elements are in flight at once.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
              std::size_t ldb, T* C, std::size_t ldc)
{
    constexpr std::size_t MR = 4;
    constexpr std::size_t NR = 64 / sizeof(T);

    using Vec [[gnu::vector_size(64)]] = T;
    static_assert(sizeof(Vec) / sizeof(T) == NR);

    std::size_t j0 = 0;
    auto block_rows = [&]<std::size_t R>(std::size_t i0) {
        Vec acc[R];
        for (std::size_t r = 0; r < R; ++r) std::memcpy(&acc[r], C + (i0 + r) * ldc + j0, sizeof(Vec));
        const T* a0 = A + i0 * lda;
        for (std::size_t k = 0; k < K; ++k) {
            Vec b;
            std::memcpy(&b, B + k * ldb + j0, sizeof(Vec));
            for (std::size_t r = 0; r < R; ++r) acc[r] += a0[r * lda + k] * b;
        }
        for (std::size_t r = 0; r < R; ++r) std::memcpy(C + (i0 + r) * ldc + j0, &acc[r], sizeof(Vec));
    };
    for (; j0 + NR <= N; j0 += NR) {
        std::size_t i0 = 0;
        for (; i0 + MR <= M; i0 += MR) block_rows.template operator()<MR>(i0);
        for (; i0 < M; ++i0) block_rows.template operator()<1>(i0);
    }
    if (j0 < N) {
        const std::size_t rem = N - j0;
        for (std::size_t i = 0; i < M; ++i) {
            T acc[NR];
            for (std::size_t c = 0; c < rem; ++c) acc[c] = C[i * ldc + j0 + c];
            for (std::size_t k = 0; k < K; ++k) {
                const T a = A[i * lda + k];
                const T* b = B + k * ldb + j0;
                for (std::size_t c = 0; c < rem; ++c) acc[c] += a * b[c];
            }
            for (std::size_t c = 0; c < rem; ++c) C[i * ldc + j0 + c] = acc[c];
        }
    }
}

/// C[M,N] += A[M,K] * B[N,K]^T: row-by-row dot products, both operands
/// contiguous along k. Summation order is lane-blocked, not ascending.
template <typename T>
void gemm_abt_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
                  std::size_t ldb, T* C, std::size_t ldc)
{
    constexpr std::size_t L = 64 / sizeof(T);
    constexpr std::size_t RB = 4;
    using Vec [[gnu::vector_size(64)]] = T;
    const std::size_t kv = K - K % L;

    auto tile = [&]<std::size_t RA, std::size_t RBn>(std::size_t i0, std::size_t j0) {
        Vec acc[RA][RBn] = {};
        for (std::size_t k = 0; k < kv; k += L) {
            Vec a[RA], b[RBn];
            for (std::size_t r = 0; r < RA; ++r) std::memcpy(&a[r], A + (i0 + r) * lda + k, sizeof(Vec));
            for (std::size_t c = 0; c < RBn; ++c) std::memcpy(&b[c], B + (j0 + c) * ldb + k, sizeof(Vec));
            for (std::size_t r = 0; r < RA; ++r)
                for (std::size_t c = 0; c < RBn; ++c) acc[r][c] += a[r] * b[c];
        }
        for (std::size_t r = 0; r < RA; ++r)
            for (std::size_t c = 0; c < RBn; ++c) {
                T s{0};
                for (std::size_t l = 0; l < L; ++l) s += acc[r][c][l];
                for (std::size_t k = kv; k < K; ++k) s += A[(i0 + r) * lda + k] * B[(j0 + c) * ldb + k];
                C[(i0 + r) * ldc + j0 + c] += s;
            }
    };

    std::size_t i0 = 0;
    for (; i0 + RB <= M; i0 += RB) {
        std::size_t j0 = 0;
        for (; j0 + RB <= N; j0 += RB) tile.template operator()<RB, RB>(i0, j0);
        for (; j0 < N; ++j0) tile.template operator()<RB, 1>(i0, j0);
    }
    for (; i0 < M; ++i0)
        for (std::size_t j0 = 0; j0 < N; ++j0) tile.template operator()<1, 1>(i0, j0);
}

/// out[cols, rows] = in[rows, cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out)
{
    constexpr std::size_t B = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += B)
        for (std::size_t c0 = 0; c0 < cols; c0 += B) {
            const std::size_t r1 = std::min(rows, r0 + B), c1 = std::min(cols, c0 + B);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
        }
}

} // namespace biasnet::detail
