#pragma once

#include <cstddef>
#include <span>

// Dense kernels used by the model. Two implementations are kept:
//
//   kernels::serial::*  plain loops, the reference the tests compare against
//   kernels::*          OpenMP versions, parallel over independent outputs
//
// Every parallel kernel assigns each output element to exactly one thread and
// accumulates it in the same order as the serial loop, so results are
// bitwise identical to the reference for any thread count.

namespace moelab::kernels {

/// c[m x n] (+)= a[m x k] * b[k x n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);

/// c[k x n] (+)= a[m x k]^T * b[m x n]
void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate = false);

/// c[m x k] (+)= a[m x n] * b[k x n]^T
void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t n, std::size_t k, bool accumulate = false);

/// Exact (erf) GELU.
void gelu(std::span<const double> x, std::span<double> y);
/// dx = dy * gelu'(x)
void gelu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx);

/// Runtime switch for the OpenMP paths. On by default: the parallel kernels
/// reproduce the serial result bitwise.
void set_parallel(bool enabled) noexcept;
bool parallel_enabled() noexcept;
int max_threads() noexcept;

namespace serial {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);
void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate = false);
void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t n, std::size_t k, bool accumulate = false);
void gelu(std::span<const double> x, std::span<double> y);
void gelu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx);
}  // namespace serial

}  // namespace moelab::kernels
