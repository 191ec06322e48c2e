// SPDX-License-Identifier: Apache-2.0
#include "loramerge/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cstring>

// 2-wide f64 NEON variant, same accumulation order and no-FMA rule as the
// scalar reference.

namespace loramerge::kernels {
namespace {

void matmul_nn_neon(const double* a, const double* b, double* c,
                    std::size_t n, std::size_t k, std::size_t m) {
    std::memset(c, 0, n * m * sizeof(double));
    const std::size_t m2 = m & ~std::size_t{1};
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;  // same skip rule as the scalar kernel
            const double* brow = b + kk * m;
            const float64x2_t av2 = vdupq_n_f64(av);
            std::size_t j = 0;
            for (; j < m2; j += 2) {
                const float64x2_t prod = vmulq_f64(av2, vld1q_f64(brow + j));
                vst1q_f64(crow + j, vaddq_f64(vld1q_f64(crow + j), prod));
            }
            for (; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

void add_neon(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(out + i, vaddq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
    for (; i < n; ++i) out[i] = x[i] + y[i];
}

void sub_neon(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(out + i, vsubq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
    for (; i < n; ++i) out[i] = x[i] - y[i];
}

void hadamard_neon(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(out + i, vmulq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
    for (; i < n; ++i) out[i] = x[i] * y[i];
}

void scale_neon(const double* x, double s, double* out, std::size_t n) {
    const float64x2_t s2 = vdupq_n_f64(s);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(s2, vld1q_f64(x + i)));
    for (; i < n; ++i) out[i] = s * x[i];
}

void axpy_neon(double s, const double* x, double* y, std::size_t n) {
    const float64x2_t s2 = vdupq_n_f64(s);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t prod = vmulq_f64(s2, vld1q_f64(x + i));
        vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), prod));
    }
    for (; i < n; ++i) y[i] += s * x[i];
}

}  // namespace

const Ops& neon_ops() {
    static const Ops ops{matmul_nn_neon, add_neon,   sub_neon,
                         hadamard_neon,  scale_neon, axpy_neon,
                         "neon"};
    return ops;
}

}  // namespace loramerge::kernels

#endif  // aarch64
