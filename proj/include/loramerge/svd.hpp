// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "loramerge/matrix.hpp"

namespace loramerge {

// Rank-q factorization m ~= U * diag(S) * V^T with orthonormal U (n x q) and
// V (m x q), singular values non-increasing. Sign convention: the first
// nonzero entry of each U column is non-negative.
struct SvdResult {
    Matrix u;
    std::vector<double> s;
    Matrix v;
};

// Best rank-q approximation in Frobenius norm. One-sided Jacobi applied on
// the side with fewer columns; rotations below 1e-12 count as converged,
// capped at 60 sweeps.
SvdResult truncated_svd(const Matrix& m, std::size_t q);

// U * diag(S) * V^T.
Matrix svd_reconstruct(const SvdResult& r);

}  // namespace loramerge
