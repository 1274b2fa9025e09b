#include "moelab/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moelab::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = std::size_t{1} << 15;

bool go_parallel(std::size_t work) { return g_parallel.load(std::memory_order_relaxed) && work >= kParallelWork; }

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5)); }

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi * std::numbers::sqrt2 * 0.5);
  return cdf + x * pdf;
}

}  // namespace

void set_parallel(bool enabled) noexcept { g_parallel.store(enabled); }
bool parallel_enabled() noexcept { return g_parallel.load(); }

int max_threads() noexcept {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k * n), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* cp = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t n, std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b.data() + p * n;
      double acc = accumulate ? c[i * k + p] : 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
      c[i * k + p] = acc;
    }
  }
}

void gelu(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad_scalar(x[i]);
}

}  // namespace serial

namespace {

constexpr std::size_t kBlock = 4;

// c rows [i0, i1) of c = a * b (+c). Rows are processed four at a time so each
// b row is loaded once per block; every c element still sums over p in
// ascending order, matching the serial loop bit for bit.
void matmul_rows(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t i0,
                 std::size_t i1, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * n, c + (i + 1) * n, 0.0);
  }
  std::size_t i = i0;
  for (; i + kBlock <= i1; i += kBlock) {
    double* __restrict c0 = c + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a[i * k + p], x1 = a[(i + 1) * k + p], x2 = a[(i + 2) * k + p], x3 = a[(i + 3) * k + p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = bp[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < i1; ++i) {
    double* __restrict ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = a[i * k + p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

// Splits m rows into block-aligned chunks, one chunk per iteration.
template <class Fn>
void for_row_blocks(std::size_t m, std::size_t work, Fn&& fn) {
  const auto blocks = static_cast<std::ptrdiff_t>((m + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) if (go_parallel(work))
  for (std::ptrdiff_t bb = 0; bb < blocks; ++bb) {
    const std::size_t i0 = static_cast<std::size_t>(bb) * kBlock;
    fn(i0, std::min(m, i0 + kBlock));
  }
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  for_row_blocks(m, m * k * n, [&](std::size_t i0, std::size_t i1) {
    matmul_rows(a.data(), b.data(), c.data(), i0, i1, k, n, accumulate);
  });
}

void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate) {
  // Output rows p are independent; each sums over i in ascending order.
  const double* __restrict ap = a.data();
  const double* __restrict bp = b.data();
  double* __restrict cp = c.data();
  for_row_blocks(k, m * k * n, [&](std::size_t p0, std::size_t p1) {
    if (!accumulate) std::fill(cp + p0 * n, cp + p1 * n, 0.0);
    if (p1 - p0 == kBlock) {
      double* __restrict c0 = cp + p0 * n;
      double* __restrict c1 = c0 + n;
      double* __restrict c2 = c1 + n;
      double* __restrict c3 = c2 + n;
      for (std::size_t i = 0; i < m; ++i) {
        const double* __restrict ai = ap + i * k + p0;
        const double x0 = ai[0], x1 = ai[1], x2 = ai[2], x3 = ai[3];
        const double* __restrict bi = bp + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double bj = bi[j];
          c0[j] += x0 * bj;
          c1[j] += x1 * bj;
          c2[j] += x2 * bj;
          c3[j] += x3 * bj;
        }
      }
      return;
    }
    for (std::size_t p = p0; p < p1; ++p) {
      double* __restrict crow = cp + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double x = ap[i * k + p];
        const double* __restrict bi = bp + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += x * bi[j];
      }
    }
  });
}

void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t n, std::size_t k, bool accumulate) {
  // Transposing b turns the per-element dot product (sum over j ascending)
  // into the matmul accumulation order, which vectorizes across outputs.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  for_row_blocks(m, m * k * n, [&](std::size_t i0, std::size_t i1) {
    matmul_rows(a.data(), bt.data(), c.data(), i0, i1, n, k, accumulate);
  });
}

void gelu(std::span<const double> x, std::span<double> y) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static) if (go_parallel(x.size() * 16))
  for (std::ptrdiff_t i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = gelu_scalar(x[static_cast<std::size_t>(i)]);
}

void gelu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static) if (go_parallel(x.size() * 16))
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    dx[u] = dy[u] * gelu_grad_scalar(x[u]);
  }
}

}  // namespace moelab::kernels
