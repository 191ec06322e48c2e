// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>

namespace loramerge::kernels {

// Data-parallel inner loops behind the matrix layer. Two implementations
// exist: a scalar reference and an AVX2 variant (NEON on aarch64). The
// variants are required to produce bit-identical results: every kernel
// accumulates per output element in the same order and none uses FMA
// contraction. Equivalence is enforced by tests, which lets dispatch stay a
// pure performance decision.
struct Ops {
    // c = a @ b with a: n x k, b: k x m, c: n x m (row-major, overwritten).
    void (*matmul_nn)(const double* a, const double* b, double* c,
                      std::size_t n, std::size_t k, std::size_t m);
    // out[i] = x[i] + y[i]
    void (*add)(const double* x, const double* y, double* out, std::size_t n);
    // out[i] = x[i] - y[i]
    void (*sub)(const double* x, const double* y, double* out, std::size_t n);
    // out[i] = x[i] * y[i]
    void (*hadamard)(const double* x, const double* y, double* out, std::size_t n);
    // out[i] = s * x[i]
    void (*scale)(const double* x, double s, double* out, std::size_t n);
    // y[i] += s * x[i]
    void (*axpy)(double s, const double* x, double* y, std::size_t n);

    std::string_view name;
};

const Ops& scalar_ops();
#if defined(__x86_64__) || defined(_M_X64)
const Ops& avx2_ops();
#endif
#if defined(__aarch64__)
const Ops& neon_ops();
#endif

// True when the running CPU supports the SIMD variant compiled in.
bool simd_supported();

// The variant selected at startup: the SIMD one when supported, unless the
// LORAMERGE_KERNELS environment variable ("scalar" / "simd") overrides it.
const Ops& active();

}  // namespace loramerge::kernels
