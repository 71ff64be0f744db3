// SPDX-License-Identifier: Apache-2.0
#ifndef LENS_TYPES_HPP
#define LENS_TYPES_HPP

#include <Eigen/Dense>

namespace lens {

using Index = Eigen::Index;

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Vecd = Vec<double>;
using Matf = Mat<float>;
using Vecf = Vec<float>;

template <class Scalar>
bool all_finite(const Mat<Scalar>& a) {
    return a.allFinite();
}

template <class Scalar>
bool all_finite(const Vec<Scalar>& v) {
    return v.allFinite();
}

// Contiguous inclusive range of layer indices.
struct LayerRange {
    int first = 0;
    int last = 0;

    int count() const { return last - first + 1; }
    bool contains(int layer) const { return layer >= first && layer <= last; }
    bool empty() const { return last < first; }
};

} // namespace lens

#endif
