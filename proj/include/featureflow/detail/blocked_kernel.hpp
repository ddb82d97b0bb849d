#pragma once

// Tiled A * B^T over row-major operands with f64 accumulation. Row blocks of A
// are distributed across OpenMP threads; each thread owns its packing buffers
// and hands finished tiles to a callback, so results for a given A row are
// always produced by one thread in increasing column order.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#include "featureflow/linalg.hpp"

namespace featureflow::detail {

struct TileShape {
  std::size_t rows = 96;  // A rows per tile (rounded up to kMr)
  std::size_t cols = 480;  // B rows per tile (rounded up to kNr)
  std::size_t depth = 256;  // shared-dimension panel
};

inline constexpr std::size_t kMr = 4;
inline constexpr std::size_t kNr = 24;

#if defined(__GNUC__)
typedef double v8d __attribute__((vector_size(64)));

inline void micro_kernel(std::size_t kc, const double* ap, const double* bp, double* c, std::size_t ldc) {
  v8d acc[kMr][3] = {};
  for (std::size_t k = 0; k < kc; ++k) {
    v8d b0, b1, b2;
    std::memcpy(&b0, bp, sizeof b0);
    std::memcpy(&b1, bp + 8, sizeof b1);
    std::memcpy(&b2, bp + 16, sizeof b2);
    bp += kNr;
    for (std::size_t i = 0; i < kMr; ++i) {
      const double a = ap[i];
      const v8d av = {a, a, a, a, a, a, a, a};
      acc[i][0] += av * b0;
      acc[i][1] += av * b1;
      acc[i][2] += av * b2;
    }
    ap += kMr;
  }
  for (std::size_t i = 0; i < kMr; ++i) {
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t l = 0; l < 8; ++l) c[i * ldc + t * 8 + l] += acc[i][t][l];
    }
  }
}
#else
inline void micro_kernel(std::size_t kc, const double* ap, const double* bp, double* c, std::size_t ldc) {
  double acc[kMr][kNr] = {};
  for (std::size_t k = 0; k < kc; ++k) {
    for (std::size_t i = 0; i < kMr; ++i) {
      for (std::size_t j = 0; j < kNr; ++j) acc[i][j] += ap[i] * bp[j];
    }
    ap += kMr;
    bp += kNr;
  }
  for (std::size_t i = 0; i < kMr; ++i) {
    for (std::size_t j = 0; j < kNr; ++j) c[i * ldc + j] += acc[i][j];
  }
}
#endif

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

/// Calls fn(i0, j0, mi, nj, tile, ld) for every tile of a * b^T where
/// tile[r * ld + c] = dot(a.row(i0 + r), b.row(j0 + c)).
template <class T, class TileFn>
void for_each_tile(const Matrix<T>& a, const Matrix<T>& b, TileShape shape, TileFn&& fn) {
  const std::size_t M = a.rows();
  const std::size_t N = b.rows();
  const std::size_t K = a.cols();
  const std::size_t mc = round_up(std::max<std::size_t>(shape.rows, 1), kMr);
  const std::size_t nc = round_up(std::max<std::size_t>(shape.cols, 1), kNr);
  const std::size_t kcmax = std::max<std::size_t>(shape.depth, 1);
  const std::size_t blocks = (M + mc - 1) / mc;
  if (M == 0 || N == 0) return;

#pragma omp parallel
  {
    std::vector<double> apack(mc * kcmax), bpack(nc * kcmax), tile(mc * nc);
#pragma omp for schedule(dynamic)
    for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(blocks); ++blk) {
      const std::size_t i0 = static_cast<std::size_t>(blk) * mc;
      const std::size_t mi = std::min(mc, M - i0);
      const std::size_t mpad = round_up(mi, kMr);
      for (std::size_t j0 = 0; j0 < N; j0 += nc) {
        const std::size_t nj = std::min(nc, N - j0);
        const std::size_t npad = round_up(nj, kNr);
        std::fill(tile.begin(), tile.begin() + static_cast<std::ptrdiff_t>(mpad * nc), 0.0);
        for (std::size_t k0 = 0; k0 < K; k0 += kcmax) {
          const std::size_t kc = std::min(kcmax, K - k0);
          for (std::size_t jb = 0; jb < npad; jb += kNr) {
            double* dst = bpack.data() + jb * kc;
            for (std::size_t k = 0; k < kc; ++k) {
              for (std::size_t j = 0; j < kNr; ++j) {
                const std::size_t jj = jb + j;
                dst[k * kNr + j] = jj < nj ? static_cast<double>(b(j0 + jj, k0 + k)) : 0.0;
              }
            }
          }
          for (std::size_t ib = 0; ib < mpad; ib += kMr) {
            double* dst = apack.data() + ib * kc;
            for (std::size_t k = 0; k < kc; ++k) {
              for (std::size_t i = 0; i < kMr; ++i) {
                const std::size_t ii = ib + i;
                dst[k * kMr + i] = ii < mi ? static_cast<double>(a(i0 + ii, k0 + k)) : 0.0;
              }
            }
          }
          for (std::size_t ib = 0; ib < mpad; ib += kMr) {
            for (std::size_t jb = 0; jb < npad; jb += kNr) {
              micro_kernel(kc, apack.data() + ib * kc, bpack.data() + jb * kc, tile.data() + ib * nc + jb, nc);
            }
          }
        }
        fn(i0, j0, mi, nj, static_cast<const double*>(tile.data()), nc);
      }
    }
  }
}

}  // namespace featureflow::detail
