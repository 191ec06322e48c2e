// SPDX-License-Identifier: Apache-2.0
#include "loramerge/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace loramerge {

namespace {

constexpr double kRotationTol = 1e-12;
constexpr int kMaxSweeps = 60;

struct JacobiFactors {
    Matrix w;  // rotated copy of the input, columns = u_j * sigma_j
    Matrix v;  // accumulated rotations
};

// One-sided Jacobi on the columns of a (rows >= cols assumed by caller for
// efficiency, not required for correctness).
JacobiFactors one_sided_jacobi(const Matrix& a) {
    const std::size_t n = a.rows(), m = a.cols();
    JacobiFactors f{a, Matrix::identity(m)};
    if (m < 2) return f;

    double worst = 0.0;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < m; ++p) {
            for (std::size_t q = p + 1; q < m; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double wp = f.w(i, p), wq = f.w(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if (app == 0.0 || aqq == 0.0) continue;
                const double off = std::fabs(apq) / std::sqrt(app * aqq);
                worst = std::max(worst, off);
                if (off <= kRotationTol) continue;

                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = std::copysign(1.0, zeta) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double wp = f.w(i, p), wq = f.w(i, q);
                    f.w(i, p) = cs * wp - sn * wq;
                    f.w(i, q) = sn * wp + cs * wq;
                }
                for (std::size_t i = 0; i < m; ++i) {
                    const double vp = f.v(i, p), vq = f.v(i, q);
                    f.v(i, p) = cs * vp - sn * vq;
                    f.v(i, q) = sn * vp + cs * vq;
                }
                rotated = true;
            }
        }
        if (!rotated) return f;
    }
    throw NumericError("svd: Jacobi sweeps did not converge (max off-diagonal " +
                       std::to_string(worst) + " after " + std::to_string(kMaxSweeps) +
                       " sweeps)");
}

// Orthonormal fill for U columns whose singular value vanished: canonical
// basis vectors orthogonalized against everything already placed.
void complete_column(Matrix& u, std::size_t col) {
    const std::size_t n = u.rows();
    for (std::size_t cand = 0; cand < n; ++cand) {
        std::vector<double> e(n, 0.0);
        e[cand] = 1.0;
        for (std::size_t j = 0; j < col; ++j) {
            double proj = 0.0;
            for (std::size_t i = 0; i < n; ++i) proj += e[i] * u(i, j);
            for (std::size_t i = 0; i < n; ++i) e[i] -= proj * u(i, j);
        }
        double norm = 0.0;
        for (const double x : e) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 1e-8) {
            for (std::size_t i = 0; i < n; ++i) u(i, col) = e[i] / norm;
            return;
        }
    }
    throw NumericError("svd: unable to complete orthonormal basis");
}

}  // namespace

SvdResult truncated_svd(const Matrix& m, std::size_t q) {
    const std::size_t mindim = std::min(m.rows(), m.cols());
    if (q < 1 || q > mindim)
        throw ArgumentError("truncated_svd: q=" + std::to_string(q) +
                            " out of range for shape " + m.shape());

    // Work on the side with fewer columns; transposing swaps U and V.
    const bool flipped = m.cols() > m.rows();
    const Matrix work = flipped ? transpose(m) : m;
    JacobiFactors f = one_sided_jacobi(work);

    const std::size_t cols = work.cols();
    std::vector<double> norms(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < work.rows(); ++i) s += f.w(i, j) * f.w(i, j);
        norms[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    Matrix u(work.rows(), q);
    Matrix v(cols, q);
    std::vector<double> s(q);
    for (std::size_t j = 0; j < q; ++j) {
        const std::size_t src = order[j];
        s[j] = norms[src];
        if (norms[src] > 0.0) {
            for (std::size_t i = 0; i < work.rows(); ++i) u(i, j) = f.w(i, src) / norms[src];
        } else {
            complete_column(u, j);
        }
        for (std::size_t i = 0; i < cols; ++i) v(i, j) = f.v(i, src);
    }

    SvdResult result =
        flipped ? SvdResult{std::move(v), std::move(s), std::move(u)}
                : SvdResult{std::move(u), std::move(s), std::move(v)};

    // Sign convention: first nonzero entry of each U column non-negative.
    for (std::size_t j = 0; j < q; ++j) {
        for (std::size_t i = 0; i < result.u.rows(); ++i) {
            const double x = result.u(i, j);
            if (x == 0.0) continue;
            if (x < 0.0) {
                for (std::size_t r = 0; r < result.u.rows(); ++r) result.u(r, j) = -result.u(r, j);
                for (std::size_t r = 0; r < result.v.rows(); ++r) result.v(r, j) = -result.v(r, j);
            }
            break;
        }
    }
    return result;
}

Matrix svd_reconstruct(const SvdResult& r) {
    Matrix us = r.u;
    for (std::size_t j = 0; j < r.s.size(); ++j)
        for (std::size_t i = 0; i < us.rows(); ++i) us(i, j) *= r.s[j];
    return matmul_nt(us, r.v);
}

}  // namespace loramerge
