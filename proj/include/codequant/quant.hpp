#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "codequant/linalg.hpp"

namespace codequant {

// Symmetric signed grid [-2^(b-1), 2^(b-1)-1]. group == 0 means whole row
// (per-token for activations, embedding-wise for weights).
struct QuantSpec {
    int bits = 4;
    std::size_t group = 0;
};

constexpr int quant_max(int bits) { return (1 << (bits - 1)) - 1; }
constexpr int quant_min(int bits) { return -(1 << (bits - 1)); }

void validate_bits(int bits);

// Scale for a block whose largest magnitude is max_abs. Zero blocks get scale 1.
// The returned scale s satisfies (qmax*s)/qmax == s in double arithmetic, which
// makes fake quantization exactly idempotent.
double symmetric_scale(double max_abs, int bits);

struct QuantizedActivations {
    BasicMatrix<std::int32_t> q;
    std::vector<double> scales;  // one per token row
    int bits = 4;
};

QuantizedActivations quantize_activations(const Matrix& x, int bits);
Matrix dequantize(const QuantizedActivations& qa);
Matrix fake_quant(const Matrix& x, int bits);

// Per-output-row, per-group RTN. The matrix is laid out output-row-major:
// row i holds the input-dimension weights of output channel i.
struct RtnWeights {
    BasicMatrix<std::int32_t> q;
    Matrix scales;  // rows x n_groups
    std::size_t group = 0;
    int bits = 4;

    std::size_t group_size() const { return group == 0 ? q.cols() : group; }
};

RtnWeights quantize_weights_rtn(const Matrix& w, const QuantSpec& spec);
Matrix dequantize(const RtnWeights& rw);

// Two 4-bit ids per byte, element 2i in the low nibble.
std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> ids);
std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count);

}  // namespace codequant
