#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "codequant/aos.hpp"
#include "codequant/error.hpp"
#include "codequant/model.hpp"
#include "codequant/parallel.hpp"
#include "helpers.hpp"

using namespace codequant;
using testing_util::mat_rel_err;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 24;
    c.experts = 3;
    c.top_k = 2;
    c.layers = 2;
    c.seed = seed;
    return c;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Scalar-loop transformer step: one layer, one expert, top-1 routing.
Matrix scalar_step(const DecoderLayerWeights& L, const Matrix& x, std::size_t n_heads) {
    const std::size_t n = x.rows(), d = x.cols(), dh = d / n_heads, dff = L.experts[0].gate.cols();
    auto norm = [&](const std::vector<double>& row, const std::vector<double>& g) {
        double ms = 0.0;
        for (double v : row) ms += v * v;
        ms = std::sqrt(ms / static_cast<double>(d) + 1e-6);
        std::vector<double> out(d);
        for (std::size_t i = 0; i < d; ++i) out[i] = g[i] * row[i] / ms;
        return out;
    };
    auto vecmat = [](const std::vector<double>& v, const Matrix& w) {
        std::vector<double> out(w.cols(), 0.0);
        for (std::size_t j = 0; j < w.cols(); ++j)
            for (std::size_t i = 0; i < w.rows(); ++i) out[j] += v[i] * w(i, j);
        return out;
    };
    std::vector<std::vector<double>> h(n), q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
        h[t].assign(x.row(t).begin(), x.row(t).end());
        const auto u = norm(h[t], L.attn_norm);
        q[t] = vecmat(u, L.wq);
        k[t] = vecmat(u, L.wk);
        v[t] = vecmat(u, L.wv);
    }
    Matrix out(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> ctx(d, 0.0);
        for (std::size_t hd = 0; hd < n_heads; ++hd) {
            std::vector<double> s(t + 1);
            double mx = -1e300;
            for (std::size_t j = 0; j <= t; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += q[t][hd * dh + c] * k[j][hd * dh + c];
                s[j] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            for (std::size_t j = 0; j <= t; ++j)
                for (std::size_t c = 0; c < dh; ++c) ctx[hd * dh + c] += s[j] / z * v[j][hd * dh + c];
        }
        const auto attn = vecmat(ctx, L.wo);
        std::vector<double> h2(d);
        for (std::size_t i = 0; i < d; ++i) h2[i] = h[t][i] + attn[i];
        const auto m = norm(h2, L.mlp_norm);
        const auto a = vecmat(m, L.experts[0].gate), b = vecmat(m, L.experts[0].up);
        std::vector<double> hid(dff);
        for (std::size_t j = 0; j < dff; ++j) hid[j] = a[j] / (1.0 + std::exp(-a[j])) * b[j];
        const auto y = vecmat(hid, L.experts[0].down);
        for (std::size_t i = 0; i < d; ++i) out(t, i) = h2[i] + y[i];  // single expert: routing weight 1
    }
    return out;
}

}  // namespace

TEST_CASE("rmsnorm, silu, softmax") {
    CHECK(silu(0.0) == 0.0);
    const auto p = softmax(std::vector<double>{0.0, 0.0});
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 0.5);
    const auto big = softmax(std::vector<double>{1000.0, 1000.0, -1000.0});
    CHECK(big[0] == doctest::Approx(0.5));
    const std::vector<double> x{3, 4}, g{1, 1};
    const auto r = rmsnorm(x, g);
    CHECK(r[0] == doctest::Approx(3 / std::sqrt(12.5)).epsilon(1e-7));
    CHECK(r[1] == doctest::Approx(4 / std::sqrt(12.5)).epsilon(1e-7));
    const auto zero = rmsnorm(std::vector<double>{0, 0}, g);
    CHECK(zero[0] == 0.0);
}

TEST_CASE("top-k selection breaks ties by lower index") {
    CHECK(select_top_k(std::vector<double>{1, 3, 3, 2}, 2) == std::vector<std::uint32_t>{1, 2});
    CHECK(select_top_k(std::vector<double>{0, 0, 0}, 1) == std::vector<std::uint32_t>{0});
}

TEST_CASE("forward matches a scalar-loop oracle") {
    ModelConfig c;
    c.d_model = 4;
    c.n_heads = 2;
    c.d_ff = 6;
    c.experts = 1;
    c.top_k = 1;
    c.layers = 1;
    c.seed = 5;
    const ModelWeights w = generate_synthetic_model(c, {.outlier_channels = 1, .outlier_scale = 3.0});
    Rng rng(2);
    const Matrix x = gaussian_matrix(2, 4, rng);
    CHECK(mat_rel_err(forward(w, x).hidden, scalar_step(w.layers[0], x, 2)) < 1e-13);
}

TEST_CASE("zero layers is the identity") {
    ModelConfig c = small_config();
    c.layers = 0;
    const ModelWeights w = generate_synthetic_model(c);
    Rng rng(1);
    const Matrix x = gaussian_matrix(5, c.d_model, rng);
    CHECK(forward(w, x).hidden == x);
}

TEST_CASE("routing invariants and full-softmax degenerate case") {
    const ModelConfig c = small_config();
    const ModelWeights w = generate_synthetic_model(c);
    const Matrix x = generate_calibration(c, 40);
    const auto fr = forward(w, x, {.trace = true, .quant = std::nullopt});
    for (const auto& lt : fr.trace.layers) {
        CHECK(lt.input.rows() == 40);
        for (const auto& m : lt.site_inputs) CHECK(m.rows() == 40);
        for (std::size_t t = 0; t < 40; ++t) {
            CHECK(lt.selected[t].size() == c.top_k);
            double s = 0.0;
            for (std::size_t j = 0; j < c.top_k; ++j) {
                CHECK(lt.routing_weights(t, j) > 0.0);
                s += lt.routing_weights(t, j);
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }

    ModelConfig all = c;
    all.top_k = all.experts;
    const ModelWeights wa = generate_synthetic_model(all);
    const auto ta = forward(wa, x, {.trace = true, .quant = std::nullopt}).trace;
    for (const auto& lt : ta.layers)
        for (std::size_t t = 0; t < 40; ++t)
            for (std::size_t j = 0; j < all.top_k; ++j)
                CHECK(lt.routing_weights(t, j) == doctest::Approx(lt.router_probs(t, lt.selected[t][j])).epsilon(1e-12));
}

TEST_CASE("forward is bit-identical across worker counts") {
    const ModelConfig c = small_config(9);
    const ModelWeights w = generate_synthetic_model(c);
    const Matrix x = generate_calibration(c, 33);
    set_num_threads(1);
    const Matrix a = forward(w, x, {.trace = false, .quant = ActivationQuant{}}).hidden;
    set_num_threads(3);
    const Matrix b = forward(w, x, {.trace = false, .quant = ActivationQuant{}}).hidden;
    set_num_threads(1);
    CHECK(a == b);
}

TEST_CASE("forward reports non-finite values with layer and site") {
    const ModelConfig c = small_config();
    ModelWeights w = generate_synthetic_model(c);
    w.layers[1].wo(0, 0) = std::numeric_limits<double>::infinity();
    try {
        forward(w, generate_calibration(c, 4));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("layer 1") != std::string::npos);
        CHECK(msg.find("wo") != std::string::npos);
    }
    CHECK_THROWS_AS(forward(w, Matrix(3, c.d_model + 1)), ShapeError);
}

TEST_CASE("synthetic generation plants outlier columns") {
    ModelConfig c;
    c.seed = 3;
    const ModelWeights plain = generate_synthetic_model(c, {.outlier_channels = 4, .outlier_scale = 1.0});
    const ModelWeights w = generate_synthetic_model(c, {.outlier_channels = 4, .outlier_scale = 20.0});
    for (const auto& name : linear_weight_names(c)) {
        if (name.ends_with(".router")) continue;
        const Matrix& m = weight_by_name(w, name);
        std::vector<double> norms(m.cols(), 0.0);
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t j = 0; j < m.cols(); ++j) norms[j] += m(i, j) * m(i, j);
        for (auto& v : norms) v = std::sqrt(v);
        const double med = median(norms);
        const auto big = std::count_if(norms.begin(), norms.end(), [&](double v) { return v > 10.0 * med; });
        CHECK_MESSAGE(big == 4, name);
        for (double v : norms)
            if (v > 10.0 * med) CHECK(v / med == doctest::Approx(20.0).epsilon(0.35));

        // Weight std is 1/sqrt(d_model) before planting.
        const Matrix& p = weight_by_name(plain, name);
        CHECK(std::sqrt(squared_frobenius(p) / static_cast<double>(p.size())) ==
              doctest::Approx(1.0 / std::sqrt(64.0)).epsilon(0.1));
    }
    CHECK_THROWS_AS(generate_synthetic_model(c, {.outlier_channels = 64, .outlier_scale = 2.0}), ConfigError);
}

TEST_CASE("calibration data") {
    const ModelConfig c;
    CHECK(generate_calibration(c, 1).rows() == 1);
    const Matrix x = generate_calibration(c, c.calib_tokens);
    std::vector<double> mags;
    double mx = 0.0;
    for (double v : x.data()) {
        mags.push_back(std::abs(v));
        mx = std::max(mx, std::abs(v));
    }
    CHECK(mx / median(mags) > 20.0);

    const Matrix held = generate_calibration(c, c.calib_tokens, 1);
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t s = 0; s < held.rows(); ++s) {
            bool same = true;
            for (std::size_t j = 0; j < c.d_model && same; ++j) same = x(t, j) == held(s, j);
            CHECK_FALSE(same);
        }
    CHECK(generate_calibration(c, 16, 0) == generate_calibration(c, 16, 0));
}

TEST_CASE("rmsnorm commutes with rotations once gains are unit") {
    Rng rng(6);
    const Matrix r = random_orthogonal(64, rng);
    const std::vector<double> ones(64, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix x = gaussian_matrix(1, 64, rng, 3.0);
        const auto a = rmsnorm(matmul(x, r).row(0), ones);
        const Matrix b = matmul(Matrix(1, 64, rmsnorm(x.row(0), ones)), r);
        CHECK(mat_rel_err(Matrix(1, 64, a), b) < 1e-10);
    }
}

TEST_CASE("container round trip") {
    const ModelConfig c = small_config(4);
    const ModelWeights w = generate_synthetic_model(c);
    const std::string bytes = serialize_model(w);
    CHECK(bytes.substr(0, 4) == "CQM1");
    const ModelWeights back = deserialize_model(bytes);
    CHECK(serialize_model(back) == bytes);
    CHECK(back.config == w.config);
    CHECK(back.layers[1].experts[2].down == w.layers[1].experts[2].down);
    CHECK(serialize_model(generate_synthetic_model(c)) == bytes);

    const auto manifest = read_manifest(bytes);
    CHECK(manifest.version == 1);
    CHECK(std::is_sorted(manifest.tensors.begin(), manifest.tensors.end(),
                         [](const TensorInfo& a, const TensorInfo& b) { return a.name < b.name; }));
}

TEST_CASE("container errors") {
    const ModelConfig c = small_config(4);
    const std::string bytes = serialize_model(generate_synthetic_model(c));

    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_model(bad), FormatError);

    bad = bytes;
    bad[4] = 2;  // version
    CHECK_THROWS_AS(deserialize_model(bad), FormatError);

    CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() - 3)), FormatError);
    CHECK_THROWS_AS(deserialize_model(bytes + "x"), FormatError);

    // Claim one more layer than the body holds.
    bad = bytes;
    const auto pos = bad.find("model.layers = 2");
    REQUIRE(pos != std::string::npos);
    bad[pos + 15] = '3';
    try {
        deserialize_model(bad);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("layer2.") != std::string::npos);
    }
}

TEST_CASE("metadata stage flags") {
    ModelWeights w = generate_synthetic_model(small_config());
    CHECK_FALSE(w.has_stage("rotation"));
    w.mark_stage("rotation");
    CHECK(w.has_stage("rotation"));
    CHECK_THROWS_AS(w.mark_stage("rotation"), StageError);
}
