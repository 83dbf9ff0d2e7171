#pragma once

#include <algorithm>
#include <cmath>

#include "codequant/linalg.hpp"

namespace testing_util {

inline double rel_err(double a, double b) {
    const double d = std::max(std::abs(a), std::abs(b));
    return d == 0.0 ? 0.0 : std::abs(a - b) / d;
}

// Relative error of two vectors, normalized by the larger norm.
template <class V>
double vec_rel_err(const V& a, const V& b) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0.0 ? std::sqrt(num) : std::sqrt(num) / scale;
}

inline double mat_rel_err(const codequant::Matrix& a, const codequant::Matrix& b) {
    const double s = std::max(codequant::frobenius(a), codequant::frobenius(b));
    return s == 0.0 ? 0.0 : codequant::frobenius_distance(a, b) / s;
}

}  // namespace testing_util
