#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "codequant/linalg.hpp"

namespace codequant {

// Row-wise codebook over an output-row-major weight matrix: every output row i
// owns K centroids per group of input columns, and every weight stores the id
// of one of them. group == 0 means the whole row is one group (embedding-wise).
struct Codebook {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group = 0;
    std::size_t k = 16;
    std::vector<double> centroids;    // [rows][n_groups][k]
    std::vector<std::uint8_t> ids;    // [rows][cols]

    Codebook() = default;
    Codebook(std::size_t rows, std::size_t cols, std::size_t group, std::size_t k);

    std::size_t group_size() const noexcept { return group == 0 ? cols : group; }
    std::size_t n_groups() const noexcept { return cols / group_size(); }

    double& centroid(std::size_t i, std::size_t grp, std::size_t c) noexcept {
        return centroids[(i * n_groups() + grp) * k + c];
    }
    double centroid(std::size_t i, std::size_t grp, std::size_t c) const noexcept {
        return centroids[(i * n_groups() + grp) * k + c];
    }
    std::uint8_t& id(std::size_t i, std::size_t j) noexcept { return ids[i * cols + j]; }
    std::uint8_t id(std::size_t i, std::size_t j) const noexcept { return ids[i * cols + j]; }

    // Checks id range and array sizes; throws ShapeError.
    void validate() const;
};

// W_c[i, j] = C[i, group(j), A[i, j]]
Matrix reconstruct(const Codebook& cb);

// Rounds every centroid to single precision so the in-memory codebook matches
// what the container stores.
void round_centroids_to_float(Codebook& cb);

}  // namespace codequant
