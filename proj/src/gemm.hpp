// SPDX-License-Identifier: Apache-2.0
//
// Row-major single-precision GEMM kernels used by matmul and conv2d. All of
// them accumulate into C. Tiles and reduction order are fixed, so results
// are reproducible run to run.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>

namespace akt::detail {

// 16-lane float vector (GCC/Clang extension); lowered to whatever SIMD width
// the target offers.
using Lanes = float __attribute__((vector_size(64)));
inline constexpr std::size_t kLanes = 16;
inline constexpr std::size_t kTileRows = 8;

inline Lanes load_lanes(const float* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store_lanes(float* p, Lanes v) { std::memcpy(p, &v, sizeof v); }

// C[MR x 16] += op(A)[MR x k] * B[k x 16], accumulators held in registers.
template <std::size_t MR>
inline void gemm_tile(std::size_t k, const float* a, std::size_t a_rs, std::size_t a_cs,
                      const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  Lanes acc[MR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const Lanes bv = load_lanes(b + p * ldb);
    for (std::size_t r = 0; r < MR; ++r) acc[r] += a[r * a_rs + p * a_cs] * bv;
  }
  for (std::size_t r = 0; r < MR; ++r) store_lanes(c + r * ldc, load_lanes(c + r * ldc) + acc[r]);
}

/// C[m x n] += op(A) * B[k x n], where op(A)[i][p] = a[i * a_rs + p * a_cs].
inline void gemm_strided_a(std::size_t m, std::size_t n, std::size_t k, const float* a,
                           std::size_t a_rs, std::size_t a_cs, const float* b, float* c) {
  std::size_t j0 = 0;
  for (; j0 + kLanes <= n; j0 += kLanes) {
    std::size_t i0 = 0;
    for (; i0 + kTileRows <= m; i0 += kTileRows) {
      gemm_tile<kTileRows>(k, a + i0 * a_rs, a_rs, a_cs, b + j0, n, c + i0 * n + j0, n);
    }
    for (; i0 < m; ++i0) gemm_tile<1>(k, a + i0 * a_rs, a_rs, a_cs, b + j0, n, c + i0 * n + j0, n);
  }
  if (j0 == n) return;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * a_rs + p * a_cs];
      for (std::size_t j = j0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
    }
  }
}

/// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
                    float* c) {
  gemm_strided_a(m, n, k, a, k, 1, b, c);
}

/// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
                    float* c) {
  gemm_strided_a(m, n, k, a, 1, m, b, c);
}

/// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
                    float* c) {
  constexpr std::size_t TI = 4, TJ = 4, L = kLanes;
  for (std::size_t i0 = 0; i0 < m; i0 += TI) {
    const std::size_t ti = std::min(TI, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += TJ) {
      const std::size_t tj = std::min(TJ, n - j0);
      float acc[TI][TJ][L] = {};
      std::size_t p = 0;
      if (ti == TI && tj == TJ) {
        for (; p + L <= k; p += L) {
          for (std::size_t r = 0; r < TI; ++r) {
            const float* ar = a + (i0 + r) * k + p;
            for (std::size_t s = 0; s < TJ; ++s) {
              const float* bs = b + (j0 + s) * k + p;
              for (std::size_t l = 0; l < L; ++l) acc[r][s][l] += ar[l] * bs[l];
            }
          }
        }
      } else {
        for (; p + L <= k; p += L) {
          for (std::size_t r = 0; r < ti; ++r) {
            const float* ar = a + (i0 + r) * k + p;
            for (std::size_t s = 0; s < tj; ++s) {
              const float* bs = b + (j0 + s) * k + p;
              for (std::size_t l = 0; l < L; ++l) acc[r][s][l] += ar[l] * bs[l];
            }
          }
        }
      }
      for (std::size_t r = 0; r < ti; ++r) {
        for (std::size_t s = 0; s < tj; ++s) {
          float total = 0.0f;
          for (std::size_t q = p; q < k; ++q) total += a[(i0 + r) * k + q] * b[(j0 + s) * k + q];
          for (std::size_t l = 0; l < L; ++l) total += acc[r][s][l];
          c[(i0 + r) * n + j0 + s] += total;
        }
      }
    }
  }
}

}  // namespace akt::detail
