// SPDX-License-Identifier: Apache-2.0
#ifndef LENS_ERROR_HPP
#define LENS_ERROR_HPP

#include <stdexcept>
#include <string>

namespace lens {

/// Numerical routine failed (non-convergence, invariant violated at runtime).
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

/// File or stream level failure: bad magic, truncation, non-finite payload.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace lens

#endif
