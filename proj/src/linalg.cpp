#include "codequant/linalg.hpp"

#include <numbers>

namespace codequant {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

namespace {
std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::substream(std::string_view tag, std::uint64_t index) const {
    const std::uint64_t k = splitmix64(seed_ ^ splitmix64(fnv1a(tag)) ^ splitmix64(index + 0x5851f42d4c957f2dULL));
    return Rng(k);
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) return 0;
    // Rejection sampling keeps the draw unbiased and platform independent.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % n);
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = stddev * rng.normal();
    return m;
}

Matrix random_orthogonal(std::size_t d, Rng& rng) {
    if (d == 0) throw ShapeError("random_orthogonal: dimension must be at least 1");
    Matrix g = gaussian_matrix(d, d, rng);
    // Orthonormalize columns; two Gram-Schmidt passes per column.
    Matrix q(d, d);
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < d; ++i) v[i] = g(i, j);
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += q(i, k) * v[i];
                for (std::size_t i = 0; i < d; ++i) v[i] -= dot * q(i, k);
            }
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (!(norm > 0.0)) throw NumericError("random_orthogonal: degenerate Gaussian draw");
        for (std::size_t i = 0; i < d; ++i) q(i, j) = v[i] / norm;
    }
    return q;
}

double orthogonality_error(const Matrix& a) {
    const Matrix gram = matmul(transpose(a), a);
    return frobenius_distance(gram, Matrix::identity(a.cols()));
}

}  // namespace codequant
