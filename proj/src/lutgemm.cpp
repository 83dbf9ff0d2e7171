#include "codequant/lutgemm.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

#include "codequant/error.hpp"
#include "codequant/parallel.hpp"

namespace codequant {

namespace {

void check_dims(const QuantizedActivations& qa, const PackedClusteredWeights& pw) {
    if (qa.q.cols() != pw.cols)
        throw ShapeError("gemm: activations have " + std::to_string(qa.q.cols()) + " columns, weights expect " +
                         std::to_string(pw.cols));
    if (qa.scales.size() != qa.q.rows()) throw ShapeError("gemm: one scale per token row required");
    if (pw.cols == 0 || pw.cols % pw.group_size() != 0) throw ShapeError("gemm: group does not divide d_in");
    if (pw.centroids.size() != pw.rows * pw.n_groups() * kLutCentroids) throw ShapeError("gemm: centroid tensor size");
    if (pw.packed.size() != (pw.rows * pw.cols + 1) / 2) throw ShapeError("gemm: packed id size");
}

// Row ids of every output row, unpacked once.
std::vector<std::uint8_t> all_ids(const PackedClusteredWeights& pw) {
    return unpack_nibbles(pw.packed, pw.rows * pw.cols);
}

}  // namespace

std::vector<std::uint8_t> PackedClusteredWeights::row_ids(std::size_t i) const {
    std::vector<std::uint8_t> out(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t idx = i * cols + j;
        const std::uint8_t b = packed[idx / 2];
        out[j] = (idx % 2 == 0) ? (b & 0x0F) : (b >> 4);
    }
    return out;
}

PackedClusteredWeights pack_codebook(const Codebook& cb) {
    cb.validate();
    if (cb.k > kLutCentroids) throw ShapeError("pack_codebook: more than 16 centroids");
    PackedClusteredWeights pw;
    pw.rows = cb.rows;
    pw.cols = cb.cols;
    pw.group = cb.group;
    const std::size_t ng = cb.n_groups();
    pw.centroids.assign(cb.rows * ng * kLutCentroids, 0.0f);
    for (std::size_t i = 0; i < cb.rows; ++i)
        for (std::size_t g = 0; g < ng; ++g)
            for (std::size_t c = 0; c < cb.k; ++c)
                pw.centroids[(i * ng + g) * kLutCentroids + c] = static_cast<float>(cb.centroid(i, g, c));
    pw.packed = pack_nibbles(cb.ids);
    return pw;
}

LutTile build_lut(const float* centroids) {
    LutTile t{};
    for (std::size_t c = 0; c < kLutCentroids; ++c)
        for (std::size_t a = 0; a < kLutCodes; ++a) t[c][a] = centroids[c] * static_cast<float>(static_cast<int>(a) - 8);
    return t;
}

MatrixF lut_gemm(const QuantizedActivations& qa, const PackedClusteredWeights& pw, const LutGemmOptions& opts) {
    if (qa.bits != 4) throw ConfigError("lut_gemm: activations must be 4-bit");
    if (opts.token_block == 0) throw ConfigError("lut_gemm: token block must be positive");
    check_dims(qa, pw);
    const std::size_t n = qa.q.rows(), d_in = pw.cols, d_out = pw.rows;
    const std::size_t gs = pw.group_size(), ng = pw.n_groups();
    const std::vector<std::uint8_t> ids = all_ids(pw);
    // Table index of every activation: code + 8.
    std::vector<std::uint8_t> codes(n * d_in);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const int v = qa.q.data()[i];
        if (v < -8 || v > 7) throw ShapeError("lut_gemm: activation code out of 4-bit range");
        codes[i] = static_cast<std::uint8_t>(v + 8);
    }
    MatrixF y(n, d_out);
    const std::size_t row_block = 16;
    constexpr std::size_t kLanes = 8;
    const std::size_t t_blocks = (n + opts.token_block - 1) / opts.token_block;
    const std::size_t r_blocks = (d_out + row_block - 1) / row_block;
    parallel_for(t_blocks * r_blocks, [&](std::size_t begin, std::size_t end) {
        std::vector<float> acc(opts.token_block);
        for (std::size_t tile = begin; tile < end; ++tile) {
            const std::size_t t0 = (tile / r_blocks) * opts.token_block;
            const std::size_t t1 = std::min(n, t0 + opts.token_block);
            const std::size_t i0 = (tile % r_blocks) * row_block;
            const std::size_t i1 = std::min(d_out, i0 + row_block);
            for (std::size_t i = i0; i < i1; ++i) {
                std::fill(acc.begin(), acc.end(), 0.0f);
                const std::uint8_t* row = ids.data() + i * d_in;
                for (std::size_t g = 0; g < ng; ++g) {
                    const LutTile lut = build_lut(&pw.centroids[(i * ng + g) * kLutCentroids]);
                    const std::size_t j0 = g * gs, j1 = j0 + gs;
                    std::size_t t = t0;
                    // Eight tokens at a time: independent add chains, same per-token order.
                    for (; t + kLanes <= t1; t += kLanes) {
                        const std::uint8_t* a[kLanes];
                        float s[kLanes];
                        for (std::size_t u = 0; u < kLanes; ++u) {
                            a[u] = codes.data() + (t + u) * d_in;
                            s[u] = acc[t - t0 + u];
                        }
                        for (std::size_t j = j0; j < j1; ++j) {
                            const auto& sub = lut[row[j]];
                            for (std::size_t u = 0; u < kLanes; ++u) s[u] += sub[a[u][j]];
                        }
                        for (std::size_t u = 0; u < kLanes; ++u) acc[t - t0 + u] = s[u];
                    }
                    for (; t < t1; ++t) {
                        const std::uint8_t* a = codes.data() + t * d_in;
                        float s = acc[t - t0];
                        for (std::size_t j = j0; j < j1; ++j) s += lut[row[j]][a[j]];
                        acc[t - t0] = s;
                    }
                }
                for (std::size_t t = t0; t < t1; ++t) y(t, i) = static_cast<float>(qa.scales[t]) * acc[t - t0];
            }
        }
    });
    return y;
}

MatrixF reference_gemm(const QuantizedActivations& qa, const PackedClusteredWeights& pw) {
    check_dims(qa, pw);
    const std::size_t n = qa.q.rows(), d_in = pw.cols, d_out = pw.rows;
    const std::size_t gs = pw.group_size(), ng = pw.n_groups();
    const std::vector<std::uint8_t> ids = all_ids(pw);
    MatrixF y(n, d_out);
    parallel_for(n, [&](std::size_t t0, std::size_t t1) {
        for (std::size_t t = t0; t < t1; ++t) {
            const std::int32_t* a = &qa.q.data()[t * d_in];
            for (std::size_t i = 0; i < d_out; ++i) {
                const std::uint8_t* row = ids.data() + i * d_in;
                float s = 0.0f;
                for (std::size_t g = 0; g < ng; ++g) {
                    const float* c = &pw.centroids[(i * ng + g) * kLutCentroids];
                    for (std::size_t j = g * gs; j < (g + 1) * gs; ++j) s += c[row[j]] * static_cast<float>(a[j]);
                }
                y(t, i) = static_cast<float>(qa.scales[t]) * s;
            }
        }
    });
    return y;
}

namespace {

template <class F>
double median_ns(std::size_t repeats, F&& f) {
    std::vector<double> ns;
    for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        ns.push_back(std::max(1.0, std::chrono::duration<double, std::nano>(t1 - t0).count()));
    }
    std::sort(ns.begin(), ns.end());
    const std::size_t m = ns.size() / 2;
    return ns.size() % 2 ? ns[m] : 0.5 * (ns[m - 1] + ns[m]);
}

}  // namespace

std::vector<BenchRow> bench_gemm(const std::vector<BenchShape>& shapes, std::size_t repeats, std::uint64_t seed) {
    std::vector<BenchRow> rows;
    for (std::size_t si = 0; si < shapes.size(); ++si) {
        const BenchShape& s = shapes[si];
        Rng rng = Rng(seed).substream("bench", si);
        Codebook cb(s.d_out, s.d_in, s.group, kLutCentroids);
        for (auto& c : cb.centroids) c = static_cast<float>(0.1 * rng.normal());
        for (auto& id : cb.ids) id = static_cast<std::uint8_t>(rng.index(kLutCentroids));
        const PackedClusteredWeights pw = pack_codebook(cb);
        const QuantizedActivations qa = quantize_activations(gaussian_matrix(s.n, s.d_in, rng), 4);
        const MatrixF xf = cast<float>(dequantize(qa));
        const MatrixF wf = cast<float>(transpose(reconstruct(cb)));
        const double flops = 2.0 * static_cast<double>(s.n) * static_cast<double>(s.d_in) * static_cast<double>(s.d_out);
        volatile float sink = 0.0f;
        auto add = [&](const char* name, double ns) { rows.push_back({name, s, ns, flops / ns}); };
        add("lut", median_ns(repeats, [&] { sink = sink + lut_gemm(qa, pw)(0, 0); }));
        add("reference", median_ns(repeats, [&] { sink = sink + reference_gemm(qa, pw)(0, 0); }));
        add("fp32", median_ns(repeats, [&] { sink = sink + matmul(xf, wf)(0, 0); }));
    }
    return rows;
}

std::string bench_report(const std::vector<BenchRow>& rows) {
    std::string out = "kernel,N,d_in,d_out,g,median_ns,gops\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%.0f,%.6g\n", r.kernel.c_str(), r.shape.n, r.shape.d_in,
                      r.shape.d_out, r.shape.group == 0 ? r.shape.d_in : r.shape.group, r.median_ns, r.gops);
        out += buf;
    }
    return out;
}

}  // namespace codequant
