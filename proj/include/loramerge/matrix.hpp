// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "loramerge/errors.hpp"
#include "loramerge/rng.hpp"

namespace loramerge {

// Dense row-major matrix of 64-bit floats. Values are immutable once handed
// to another component; all dense operations return fresh matrices. Entries
// produced by internal arithmetic are unchecked -- finiteness of external
// input is enforced at the adapter-validation layer, which needs to see the
// bad values to report them.
class Matrix {
public:
    Matrix() : rows_(0), cols_(0) {}

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                                 " does not equal " + shape_string(rows_, cols_));
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

    static Matrix filled(std::size_t rows, std::size_t cols, double v) {
        Matrix m(rows, cols);
        for (auto& x : m.data_) x = v;
        return m;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix randn(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
        Matrix m(rows, cols);
        for (auto& x : m.data_) x = rng.normal(0.0, stddev);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<const double> values() const { return data_; }
    std::span<double> values() { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    static std::string shape_string(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

    bool all_finite() const;
    double max_abs() const;
    double frobenius_norm() const;

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    std::size_t rows_, cols_;
    std::vector<double> data_;
};

// Dense operations (pure; inputs never mutated).
Matrix matmul(const Matrix& a, const Matrix& b);     // a @ b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a @ b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T @ b
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// In-place accumulate: y += s * x. The one mutating helper; callers own y.
void axpy_into(Matrix& y, double s, const Matrix& x);

double dot(const Matrix& a, const Matrix& b);  // flattened inner product

enum class DenseOpKind { matmul, add, scale, hadamard, transpose };

// Uniform entry point mirroring the kind-dispatched surface; `s` is only
// read for scale, `b` is ignored for scale/transpose.
Matrix dense_op(DenseOpKind kind, const Matrix& a, const Matrix& b, double s = 0.0);

}  // namespace loramerge
