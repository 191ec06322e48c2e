// SPDX-License-Identifier: Apache-2.0
#include "loramerge/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cstring>

// Built with -mavx2 for this translation unit only; callers must check
// simd_supported() before dispatching here. Multiply and add stay separate
// (no FMA) so every lane reproduces the scalar kernel bit-for-bit.

namespace loramerge::kernels {
namespace {

// Output rows are accumulated in registers over 16-wide column tiles, with
// the k loop innermost in ascending order. Per output element the partial
// sums arrive in exactly the scalar kernel's order, so results stay
// bit-identical (the av == 0 skip matches too: it always removes a whole
// row-k term, never part of one).
void matmul_nn_avx2(const double* a, const double* b, double* c,
                    std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        std::size_t j = 0;
        for (; j + 16 <= m; j += 16) {
            __m256d acc0 = _mm256_setzero_pd();
            __m256d acc1 = _mm256_setzero_pd();
            __m256d acc2 = _mm256_setzero_pd();
            __m256d acc3 = _mm256_setzero_pd();
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                const __m256d av4 = _mm256_set1_pd(av);
                const double* brow = b + kk * m + j;
                acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(av4, _mm256_loadu_pd(brow)));
                acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(av4, _mm256_loadu_pd(brow + 4)));
                acc2 = _mm256_add_pd(acc2, _mm256_mul_pd(av4, _mm256_loadu_pd(brow + 8)));
                acc3 = _mm256_add_pd(acc3, _mm256_mul_pd(av4, _mm256_loadu_pd(brow + 12)));
            }
            _mm256_storeu_pd(crow + j, acc0);
            _mm256_storeu_pd(crow + j + 4, acc1);
            _mm256_storeu_pd(crow + j + 8, acc2);
            _mm256_storeu_pd(crow + j + 12, acc3);
        }
        for (; j + 4 <= m; j += 4) {
            __m256d acc = _mm256_setzero_pd();
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                acc = _mm256_add_pd(acc,
                                    _mm256_mul_pd(_mm256_set1_pd(av),
                                                  _mm256_loadu_pd(b + kk * m + j)));
            }
            _mm256_storeu_pd(crow + j, acc);
        }
        for (; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                acc += av * b[kk * m + j];
            }
            crow[j] = acc;
        }
    }
}

void add_avx2(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) out[i] = x[i] + y[i];
}

void sub_avx2(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) out[i] = x[i] - y[i];
}

void hadamard_avx2(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) out[i] = x[i] * y[i];
}

void scale_avx2(const double* x, double s, double* out, std::size_t n) {
    const __m256d s4 = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(s4, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) out[i] = s * x[i];
}

void axpy_avx2(double s, const double* x, double* y, std::size_t n) {
    const __m256d s4 = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d prod = _mm256_mul_pd(s4, _mm256_loadu_pd(x + i));
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
    }
    for (; i < n; ++i) y[i] += s * x[i];
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops ops{matmul_nn_avx2, add_avx2,   sub_avx2,
                         hadamard_avx2,  scale_avx2, axpy_avx2,
                         "avx2"};
    return ops;
}

}  // namespace loramerge::kernels

#endif  // x86_64
