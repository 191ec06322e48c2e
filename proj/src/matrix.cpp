// SPDX-License-Identifier: Apache-2.0
#include "loramerge/matrix.hpp"

#include <cmath>

#include "loramerge/kernels.hpp"

namespace loramerge {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shapes " + a.shape() + " and " + b.shape() +
                             " do not match");
}

}  // namespace

bool Matrix::all_finite() const {
    for (const double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (const double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

double Matrix::frobenius_norm() const {
    double s = 0.0;
    for (const double v : data_) s += v * v;
    return std::sqrt(s);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: shapes " + a.shape() + " and " + b.shape() +
                             " are not conformable");
    Matrix c(a.rows(), b.cols());
    kernels::active().matmul_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: shapes " + a.shape() + " and " + b.shape() +
                             " are not conformable");
    return matmul(a, transpose(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw DimensionError("matmul_tn: shapes " + a.shape() + " and " + b.shape() +
                             " are not conformable");
    return matmul(transpose(a), b);
}

Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix c(a.rows(), a.cols());
    kernels::active().add(a.data(), b.data(), c.data(), a.size());
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix c(a.rows(), a.cols());
    kernels::active().sub(a.data(), b.data(), c.data(), a.size());
    return c;
}

Matrix scale(const Matrix& a, double s) {
    Matrix c(a.rows(), a.cols());
    kernels::active().scale(a.data(), s, c.data(), a.size());
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c(a.rows(), a.cols());
    kernels::active().hadamard(a.data(), b.data(), c.data(), a.size());
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

void axpy_into(Matrix& y, double s, const Matrix& x) {
    require_same_shape(y, x, "axpy");
    kernels::active().axpy(s, x.data(), y.data(), y.size());
}

double dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += pa[i] * pb[i];
    return s;
}

Matrix dense_op(DenseOpKind kind, const Matrix& a, const Matrix& b, double s) {
    switch (kind) {
        case DenseOpKind::matmul: return matmul(a, b);
        case DenseOpKind::add: return add(a, b);
        case DenseOpKind::scale: return scale(a, s);
        case DenseOpKind::hadamard: return hadamard(a, b);
        case DenseOpKind::transpose: return transpose(a);
    }
    throw ArgumentError("dense_op: unknown kind");
}

}  // namespace loramerge
