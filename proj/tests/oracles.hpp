// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations, kept independent of the library code
// paths they are used to check.
#ifndef LENS_TESTS_ORACLES_HPP
#define LENS_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "lens/rng.hpp"
#include "lens/types.hpp"

namespace oracles {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
// eigenvalues in descending order with matching eigenvector columns.
inline std::pair<lens::Vecd, lens::Matd> jacobi_eigen_sym(lens::Matd a) {
    const lens::Index n = a.rows();
    lens::Matd v = lens::Matd::Identity(n, n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (lens::Index p = 0; p < n; ++p)
            for (lens::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-30) break;
        for (lens::Index p = 0; p < n; ++p) {
            for (lens::Index q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (lens::Index i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (lens::Index i = 0; i < n; ++i) {
                    const double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - s * aqi;
                    a(q, i) = s * api + c * aqi;
                }
                for (lens::Index i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    lens::Vecd evals(n);
    for (lens::Index i = 0; i < n; ++i) evals(i) = a(i, i);
    std::vector<lens::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](lens::Index x, lens::Index y) { return evals(x) > evals(y); });
    lens::Vecd sorted(n);
    lens::Matd vs(n, n);
    for (lens::Index i = 0; i < n; ++i) {
        sorted(i) = evals(order[static_cast<std::size_t>(i)]);
        vs.col(i) = v.col(order[static_cast<std::size_t>(i)]);
    }
    return {sorted, vs};
}

// Alternating least squares for min |M - m_a 1^T - m_s g^T|_F with
// span(m_a) perp span(m_s): fix m_a, solve the specific part by an SVD of
// the complement-projected residual; fix the specific part, solve m_a by
// least squares projected off span(m_s). Multiple random restarts, best
// residual returned.
inline double als_probe_residual(const lens::Matd& m, lens::Index r, int restarts,
                                 std::uint64_t seed) {
    const lens::Index d = m.rows();
    const lens::Index n_lang = m.cols();
    const lens::Vecd ones = lens::Vecd::Ones(n_lang);
    lens::Rng rng = lens::Rng::seeded(seed);
    double best = std::numeric_limits<double>::infinity();

    for (int start = 0; start < restarts; ++start) {
        lens::Vecd m_a(d);
        for (lens::Index i = 0; i < d; ++i) m_a(i) = rng.normal();
        m_a.normalize();
        m_a *= (m * ones / static_cast<double>(n_lang)).norm() + 1e-3;

        lens::Matd m_s = lens::Matd::Zero(d, r);
        lens::Matd g = lens::Matd::Zero(n_lang, r);
        double prev = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 2000; ++it) {
            // specific part given m_a
            lens::Matd x = m - m_a * ones.transpose();
            const double na = m_a.norm();
            if (na > 0) {
                const lens::Vecd u = m_a / na;
                x -= u * (u.transpose() * x);
            }
            Eigen::JacobiSVD<lens::Matd> svd_x(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
            m_s = svd_x.matrixU().leftCols(r);
            g = svd_x.matrixV().leftCols(r) *
                svd_x.singularValues().head(r).asDiagonal();
            // agnostic part given the specific factors
            lens::Vecd mean_col = (m - m_s * g.transpose()) * ones / static_cast<double>(n_lang);
            m_a = mean_col - m_s * (m_s.transpose() * mean_col);

            const double res = (m - m_a * ones.transpose() - m_s * g.transpose()).norm();
            if (std::abs(prev - res) < 1e-12) {
                prev = res;
                break;
            }
            prev = res;
        }
        best = std::min(best, prev);
    }
    return best;
}

// Central finite differences of a scalar function of a vector.
inline lens::Vecd fd_grad(const std::function<double(const lens::Vecd&)>& f,
                          const lens::Vecd& x, double h = 1e-5) {
    lens::Vecd g(x.size());
    lens::Vecd xp = x;
    for (lens::Index i = 0; i < x.size(); ++i) {
        const double orig = xp(i);
        xp(i) = orig + h;
        const double fp = f(xp);
        xp(i) = orig - h;
        const double fm = f(xp);
        xp(i) = orig;
        g(i) = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Random matrix with entries ~ N(0, 1).
inline lens::Matd random_matrix(lens::Index rows, lens::Index cols, lens::Rng& rng) {
    lens::Matd a(rows, cols);
    for (lens::Index i = 0; i < rows; ++i)
        for (lens::Index j = 0; j < cols; ++j) a(i, j) = rng.normal();
    return a;
}

// Random matrix with orthonormal columns (Gram-Schmidt on a Gaussian draw).
inline lens::Matd random_orthonormal(lens::Index rows, lens::Index cols, lens::Rng& rng) {
    lens::Matd a = random_matrix(rows, cols, rng);
    for (lens::Index j = 0; j < cols; ++j) {
        for (lens::Index k = 0; k < j; ++k) a.col(j) -= a.col(k).dot(a.col(j)) * a.col(k);
        a.col(j).normalize();
    }
    return a;
}

} // namespace oracles

#endif
