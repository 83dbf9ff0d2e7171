#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "codequant/error.hpp"
#include "codequant/parallel.hpp"

namespace codequant {

// Dense row-major matrix. T is float or double.
template <typename T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("matrix data length does not match rows x cols");
    }
    BasicMatrix(std::initializer_list<std::initializer_list<T>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : init) {
            if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static BasicMatrix identity(std::size_t n) {
        BasicMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    bool same_shape(const BasicMatrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const noexcept {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    BasicMatrix<T> out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    const std::size_t inner = a.cols();
    // Each output element accumulates over the inner index in ascending order.
    parallel_for(
        a.rows(),
        [&](std::size_t r0, std::size_t r1) {
            for (std::size_t i = r0; i < r1; ++i) {
                T* o = out.row(i).data();
                const T* ar = a.row(i).data();
                for (std::size_t k = 0; k < inner; ++k) {
                    const T av = ar[k];
                    const T* br = b.row(k).data();
                    for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
                }
            }
        },
        8);
    return out;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
    BasicMatrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// aᵀ·b
template <typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    return matmul(transpose(a), b);
}

template <typename T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    BasicMatrix<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

template <typename T>
BasicMatrix<T> sub(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
    BasicMatrix<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

template <typename T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T s) {
    BasicMatrix<T> out = a;
    for (auto& v : out.data()) v *= s;
    return out;
}

template <typename T>
T frobenius(const BasicMatrix<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v * v;
    return std::sqrt(acc);
}

template <typename T>
T squared_frobenius(const BasicMatrix<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v * v;
    return acc;
}

// ‖a − b‖_F without allocating the difference.
template <typename T>
T frobenius_distance(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("frobenius_distance: shape mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

// Gauss-Jordan elimination with partial pivoting.
template <typename T>
BasicMatrix<T> inverse(const BasicMatrix<T>& a) {
    if (a.rows() != a.cols()) throw ShapeError("inverse: matrix is not square");
    const std::size_t n = a.rows();
    BasicMatrix<T> work = a;
    BasicMatrix<T> inv = BasicMatrix<T>::identity(n);
    T max_abs = 0;
    for (T v : a.data()) max_abs = std::max(max_abs, std::abs(v));
    const T tiny = static_cast<T>(n) * std::numeric_limits<T>::epsilon() * max_abs;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(work(r, col)) > std::abs(work(piv, col))) piv = r;
        if (!(std::abs(work(piv, col)) > tiny)) throw NumericError("inverse: matrix is singular to working precision");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(work(piv, j), work(col, j));
                std::swap(inv(piv, j), inv(col, j));
            }
        }
        const T p = work(col, col);
        for (std::size_t j = 0; j < n; ++j) {
            work(col, j) /= p;
            inv(col, j) /= p;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const T f = work(r, col);
            if (f == T(0)) continue;
            for (std::size_t j = 0; j < n; ++j) {
                work(r, j) -= f * work(col, j);
                inv(r, j) -= f * inv(col, j);
            }
        }
    }
    return inv;
}

template <typename To, typename From>
BasicMatrix<To> cast(const BasicMatrix<From>& a) {
    BasicMatrix<To> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = static_cast<To>(a.data()[i]);
    return out;
}

// Deterministic generator: a 64-bit Mersenne Twister seeded through SplitMix64.
// Substreams are keyed by (purpose tag, index) so that draws for one purpose
// never shift when another purpose consumes more or fewer numbers.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }

    Rng substream(std::string_view tag, std::uint64_t index = 0) const;

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    // Standard normal via Box-Muller; the spare value is cached.
    double normal();
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);

// Haar-like random orthogonal matrix: Gram-Schmidt on a Gaussian draw, with the
// triangular factor's diagonal kept positive so the result is a pure function
// of the draw.
Matrix random_orthogonal(std::size_t d, Rng& rng);

// ‖aᵀa − I‖_F.
double orthogonality_error(const Matrix& a);

}  // namespace codequant
