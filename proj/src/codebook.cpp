#include "codequant/codebook.hpp"

#include <string>

namespace codequant {

Codebook::Codebook(std::size_t rows_, std::size_t cols_, std::size_t group_, std::size_t k_)
    : rows(rows_), cols(cols_), group(group_), k(k_) {
    if (k == 0 || k > 16) throw ShapeError("codebook: K must be in 1..16");
    if (group != 0 && (cols % group) != 0)
        throw ShapeError("codebook: group size " + std::to_string(group) + " does not divide " + std::to_string(cols));
    centroids.assign(rows * n_groups() * k, 0.0);
    ids.assign(rows * cols, 0);
}

void Codebook::validate() const {
    if (k == 0 || k > 16) throw ShapeError("codebook: K must be in 1..16");
    if (group != 0 && cols % group != 0) throw ShapeError("codebook: group does not divide cols");
    if (centroids.size() != rows * n_groups() * k) throw ShapeError("codebook: centroid tensor size mismatch");
    if (ids.size() != rows * cols) throw ShapeError("codebook: id tensor size mismatch");
    for (auto a : ids)
        if (a >= k) throw ShapeError("codebook: assignment id " + std::to_string(a) + " >= K");
}

Matrix reconstruct(const Codebook& cb) {
    Matrix w(cb.rows, cb.cols);
    const std::size_t g = cb.group_size();
    for (std::size_t i = 0; i < cb.rows; ++i)
        for (std::size_t j = 0; j < cb.cols; ++j) w(i, j) = cb.centroid(i, j / g, cb.id(i, j));
    return w;
}

void round_centroids_to_float(Codebook& cb) {
    for (auto& c : cb.centroids) c = static_cast<double>(static_cast<float>(c));
}

}  // namespace codequant
