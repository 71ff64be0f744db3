// SPDX-License-Identifier: Apache-2.0
#ifndef LENS_LINALG_HPP
#define LENS_LINALG_HPP

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "lens/error.hpp"
#include "lens/types.hpp"

namespace lens {

template <class Scalar>
struct SvdResult {
    Mat<Scalar> u; // columns orthonormal
    Vec<Scalar> s; // nonincreasing, nonnegative
    Mat<Scalar> v; // columns orthonormal
};

namespace detail {

// Deterministic sign convention: the largest-magnitude entry of each left
// singular vector is made positive (first index wins on ties). The paired
// right singular vector is flipped with it so u*diag(s)*v^T is unchanged.
template <class Scalar>
void fix_singular_vector_signs(Mat<Scalar>& u, Mat<Scalar>& v) {
    for (Index j = 0; j < u.cols(); ++j) {
        Index imax = 0;
        Scalar amax = Scalar(0);
        for (Index i = 0; i < u.rows(); ++i) {
            const Scalar a = std::abs(u(i, j));
            if (a > amax) {
                amax = a;
                imax = i;
            }
        }
        if (u(imax, j) < Scalar(0)) {
            u.col(j) = -u.col(j);
            if (j < v.cols()) v.col(j) = -v.col(j);
        }
    }
}

} // namespace detail

// Thin SVD: a = u * diag(s) * v^T with k = min(rows, cols) columns.
template <class Scalar>
SvdResult<Scalar> svd(const Mat<Scalar>& a) {
    if (a.rows() < 1 || a.cols() < 1)
        throw std::invalid_argument("svd: matrix must be at least 1x1");
    if (!a.allFinite())
        throw std::invalid_argument("svd: input has non-finite entries");

    Eigen::JacobiSVD<Mat<Scalar>> solver(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (solver.info() != Eigen::Success)
        throw numeric_error("svd: iteration did not converge");

    SvdResult<Scalar> out{solver.matrixU(), solver.singularValues(), solver.matrixV()};
    if (!out.u.allFinite() || !out.s.allFinite() || !out.v.allFinite())
        throw numeric_error("svd: non-finite factor produced");
    detail::fix_singular_vector_signs(out.u, out.v);
    return out;
}

// Best rank-r approximation factors (Eckart-Young truncation of the thin SVD).
template <class Scalar>
SvdResult<Scalar> top_r_svd(const Mat<Scalar>& a, Index r) {
    const Index k = std::min(a.rows(), a.cols());
    if (r < 1 || r > k)
        throw std::invalid_argument("top_r_svd: rank out of range [1, min(rows, cols)]");
    SvdResult<Scalar> full = svd(a);
    SvdResult<Scalar> out;
    out.u = full.u.leftCols(r);
    out.s = full.s.head(r);
    out.v = full.v.leftCols(r);
    return out;
}

// Moore-Penrose pseudoinverse. tol < 0 selects max(rows, cols) * eps * s_max.
template <class Scalar>
Mat<Scalar> pinv(const Mat<Scalar>& a, Scalar tol = Scalar(-1)) {
    SvdResult<Scalar> f = svd(a);
    const Scalar smax = f.s.size() > 0 ? f.s(0) : Scalar(0);
    if (tol < Scalar(0))
        tol = static_cast<Scalar>(std::max(a.rows(), a.cols())) *
              std::numeric_limits<Scalar>::epsilon() * smax;
    Vec<Scalar> sinv = Vec<Scalar>::Zero(f.s.size());
    for (Index i = 0; i < f.s.size(); ++i)
        if (f.s(i) > tol) sinv(i) = Scalar(1) / f.s(i);
    return f.v * sinv.asDiagonal() * f.u.transpose();
}

// Coordinates of mean-centered points on the top-2 principal directions.
// Orientation is fixed by making the largest-magnitude loading of each
// direction positive. A degenerate cloud maps to all-zero coordinates.
template <class Scalar>
std::vector<std::pair<Scalar, Scalar>> pca_2d(const std::vector<Vec<Scalar>>& points) {
    if (points.size() < 3)
        throw std::invalid_argument("pca_2d: need at least 3 points");
    const Index d = points[0].size();
    for (const auto& p : points)
        if (p.size() != d)
            throw std::invalid_argument("pca_2d: inconsistent point dimensions");

    const Index n = static_cast<Index>(points.size());
    std::vector<std::pair<Scalar, Scalar>> coords(points.size(), {Scalar(0), Scalar(0)});
    bool identical = true;
    for (const auto& p : points)
        if (!(p.array() == points[0].array()).all()) {
            identical = false;
            break;
        }
    if (identical) return coords; // degenerate cloud maps to the origin exactly

    Mat<Scalar> x(n, d);
    for (Index i = 0; i < n; ++i) x.row(i) = points[static_cast<std::size_t>(i)].transpose();
    const Vec<Scalar> mean = x.colwise().mean().transpose();
    x.rowwise() -= mean.transpose();

    Eigen::JacobiSVD<Mat<Scalar>> solver(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (solver.info() != Eigen::Success)
        throw numeric_error("pca_2d: svd did not converge");
    Mat<Scalar> v = solver.matrixV();
    Vec<Scalar> s = solver.singularValues();

    // Drop directions with (numerically) zero variance so a rank-1 cloud
    // yields exactly pc2 = 0.
    const Scalar cutoff = static_cast<Scalar>(std::max(n, d)) *
                          std::numeric_limits<Scalar>::epsilon() * s(0);
    const Index ncomp = std::min<Index>(2, v.cols());
    for (Index c = 0; c < ncomp; ++c) {
        if (s(c) <= cutoff) break;
        Vec<Scalar> dir = v.col(c);
        Index imax = 0;
        for (Index i = 1; i < dir.size(); ++i)
            if (std::abs(dir(i)) > std::abs(dir(imax))) imax = i;
        if (dir(imax) < Scalar(0)) dir = -dir;
        for (Index i = 0; i < n; ++i) {
            const Scalar coord = x.row(i) * dir;
            if (c == 0)
                coords[static_cast<std::size_t>(i)].first = coord;
            else
                coords[static_cast<std::size_t>(i)].second = coord;
        }
    }
    return coords;
}

} // namespace lens

#endif
