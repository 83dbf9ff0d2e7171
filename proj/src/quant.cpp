#include "codequant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace codequant {

void validate_bits(int bits) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8)
        throw ConfigError("quantization bits must be one of 2, 3, 4, 8 (got " + std::to_string(bits) + ")");
}

double symmetric_scale(double max_abs, int bits) {
    if (!(max_abs > 0.0)) return 1.0;
    const double qmax = quant_max(bits);
    double s = max_abs / qmax;
    while ((qmax * s) / qmax != s) s = std::nextafter(s, HUGE_VAL);
    return s;
}

namespace {

std::int32_t quantize_value(double x, double s, int bits) {
    const double r = std::round(x / s);  // half away from zero
    return static_cast<std::int32_t>(std::clamp(r, static_cast<double>(quant_min(bits)),
                                                static_cast<double>(quant_max(bits))));
}

}  // namespace

QuantizedActivations quantize_activations(const Matrix& x, int bits) {
    validate_bits(bits);
    if (!x.all_finite()) throw NumericError("quantize_activations: non-finite input");
    QuantizedActivations qa;
    qa.bits = bits;
    qa.q = BasicMatrix<std::int32_t>(x.rows(), x.cols());
    qa.scales.resize(x.rows());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto row = x.row(t);
        double m = 0.0;
        for (double v : row) m = std::max(m, std::abs(v));
        const double s = symmetric_scale(m, bits);
        qa.scales[t] = s;
        auto qrow = qa.q.row(t);
        for (std::size_t j = 0; j < row.size(); ++j) qrow[j] = quantize_value(row[j], s, bits);
    }
    return qa;
}

Matrix dequantize(const QuantizedActivations& qa) {
    Matrix out(qa.q.rows(), qa.q.cols());
    for (std::size_t t = 0; t < out.rows(); ++t) {
        const double s = qa.scales[t];
        for (std::size_t j = 0; j < out.cols(); ++j) out(t, j) = s * static_cast<double>(qa.q(t, j));
    }
    return out;
}

Matrix fake_quant(const Matrix& x, int bits) { return dequantize(quantize_activations(x, bits)); }

RtnWeights quantize_weights_rtn(const Matrix& w, const QuantSpec& spec) {
    validate_bits(spec.bits);
    const std::size_t g = spec.group == 0 ? w.cols() : spec.group;
    if (g == 0 || w.cols() % g != 0)
        throw ShapeError("quantize_weights_rtn: group size " + std::to_string(g) + " does not divide " +
                         std::to_string(w.cols()));
    if (!w.all_finite()) throw NumericError("quantize_weights_rtn: non-finite weights");
    RtnWeights rw;
    rw.bits = spec.bits;
    rw.group = spec.group;
    rw.q = BasicMatrix<std::int32_t>(w.rows(), w.cols());
    const std::size_t n_groups = w.cols() / g;
    rw.scales = Matrix(w.rows(), n_groups);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t grp = 0; grp < n_groups; ++grp) {
            double m = 0.0;
            for (std::size_t j = grp * g; j < (grp + 1) * g; ++j) m = std::max(m, std::abs(w(i, j)));
            const double s = symmetric_scale(m, spec.bits);
            rw.scales(i, grp) = s;
            for (std::size_t j = grp * g; j < (grp + 1) * g; ++j) rw.q(i, j) = quantize_value(w(i, j), s, spec.bits);
        }
    }
    return rw;
}

Matrix dequantize(const RtnWeights& rw) {
    const std::size_t g = rw.group_size();
    Matrix out(rw.q.rows(), rw.q.cols());
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = rw.scales(i, j / g) * static_cast<double>(rw.q(i, j));
    return out;
}

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> ids) {
    std::vector<std::uint8_t> out((ids.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] > 15) throw std::out_of_range("pack_nibbles: id " + std::to_string(ids[i]) + " exceeds 15");
        out[i / 2] |= static_cast<std::uint8_t>((ids[i] & 0x0F) << ((i & 1) * 4));
    }
    return out;
}

std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
    if (packed.size() < (count + 1) / 2) throw FormatError("unpack_nibbles: packed buffer too short");
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<std::uint8_t>((packed[i / 2] >> ((i & 1) * 4)) & 0x0F);
    return out;
}

}  // namespace codequant
