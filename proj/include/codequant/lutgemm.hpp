#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "codequant/codebook.hpp"
#include "codequant/linalg.hpp"
#include "codequant/quant.hpp"

namespace codequant {

inline constexpr std::size_t kLutCentroids = 16;
inline constexpr std::size_t kLutCodes = 16;

// Clustered weights in kernel layout: output-row-major, 16 float centroids per
// (row, group), ids packed two per byte over the flattened [rows][cols] array.
struct PackedClusteredWeights {
    std::size_t rows = 0;  // d_out
    std::size_t cols = 0;  // d_in
    std::size_t group = 0; // 0 = whole row
    std::vector<float> centroids;     // [rows][n_groups][16]
    std::vector<std::uint8_t> packed; // ceil(rows*cols/2) bytes

    std::size_t group_size() const noexcept { return group == 0 ? cols : group; }
    std::size_t n_groups() const noexcept { return cols / group_size(); }
    std::vector<std::uint8_t> row_ids(std::size_t i) const;
};

// Codebooks with fewer than 16 centroids are padded with zeros.
PackedClusteredWeights pack_codebook(const Codebook& cb);

// table[c][a] = centroid_c · (a − 8), one float multiply each.
using LutTile = std::array<std::array<float, kLutCodes>, kLutCentroids>;
LutTile build_lut(const float* centroids);

struct LutGemmOptions {
    std::size_t token_block = 64;
};

// y[t,i] = s_t · Σ_groups Σ_j table(i,group)[A[i,j]][q[t,j]+8], float accumulation
// in ascending group then column order. Needs 4-bit activations.
MatrixF lut_gemm(const QuantizedActivations& qa, const PackedClusteredWeights& pw, const LutGemmOptions& opts = {});

// Same sum with the centroid looked up and multiplied per element. Accepts any
// activation width.
MatrixF reference_gemm(const QuantizedActivations& qa, const PackedClusteredWeights& pw);

struct BenchShape {
    std::size_t n = 0, d_in = 0, d_out = 0, group = 0;
};

struct BenchRow {
    std::string kernel;
    BenchShape shape;
    double median_ns = 0.0;
    double gops = 0.0;
};

std::vector<BenchRow> bench_gemm(const std::vector<BenchShape>& shapes, std::size_t repeats, std::uint64_t seed = 0);
std::string bench_report(const std::vector<BenchRow>& rows);

}  // namespace codequant
