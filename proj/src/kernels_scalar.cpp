// SPDX-License-Identifier: Apache-2.0
#include "loramerge/kernels.hpp"

#include <cstring>

namespace loramerge::kernels {
namespace {

// Reference kernels. matmul accumulates along k with j innermost so the SIMD
// variant (vectorized over j) visits every partial sum in the same order.
void matmul_nn_scalar(const double* a, const double* b, double* c,
                      std::size_t n, std::size_t k, std::size_t m) {
    std::memset(c, 0, n * m * sizeof(double));
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

void add_scalar(const double* x, const double* y, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub_scalar(const double* x, const double* y, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void hadamard_scalar(const double* x, const double* y, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void scale_scalar(const double* x, double s, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = s * x[i];
}

void axpy_scalar(double s, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops ops{matmul_nn_scalar, add_scalar,   sub_scalar,
                         hadamard_scalar,  scale_scalar, axpy_scalar,
                         "scalar"};
    return ops;
}

}  // namespace loramerge::kernels
