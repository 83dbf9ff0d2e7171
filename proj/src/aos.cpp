#include "codequant/aos.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace codequant {

Matrix skew_part(const Matrix& m) {
    if (m.rows() != m.cols()) throw ShapeError("skew_part: matrix is not square");
    Matrix s(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = 0.5 * (m(i, j) - m(j, i));
    return s;
}

namespace {

// Returns (I − S) and (I + S)^-1 for S = skew(M).
std::pair<Matrix, Matrix> cayley_factors(const Matrix& m) {
    if (!m.all_finite()) throw NumericError("cayley: non-finite parameter");
    const Matrix s = skew_part(m);
    const std::size_t d = s.rows();
    Matrix minus = Matrix::identity(d);
    Matrix plus = Matrix::identity(d);
    for (std::size_t i = 0; i < s.size(); ++i) {
        minus.data()[i] -= s.data()[i];
        plus.data()[i] += s.data()[i];
    }
    return {std::move(minus), inverse(plus)};
}

double determinant(Matrix a) {
    const std::size_t n = a.rows();
    double det = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (a(piv, col) == 0.0) return 0.0;
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(piv, j), a(col, j));
            det = -det;
        }
        det *= a(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            for (std::size_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
        }
    }
    return det;
}

}  // namespace

Matrix cayley(const Matrix& m) {
    auto [minus, plus_inv] = cayley_factors(m);
    return matmul(minus, plus_inv);
}

Matrix RotationParams::skew() const { return skew_part(m); }
Matrix RotationParams::rotation() const { return cayley(m); }

double aos_loss(const Matrix& rotation, const Matrix& x, int bits) {
    if (x.cols() != rotation.rows()) throw ShapeError("aos_loss: activation width does not match rotation");
    const Matrix xr = matmul(x, rotation);
    const Matrix q = fake_quant(xr, bits);
    const double d = frobenius_distance(xr, q);
    return d * d;
}

Matrix cayley_backward(const Matrix& m, const Matrix& grad_r) {
    // dR = −(I + R)·dS·(I + S)^-1, so ∂f/∂S = −(I + R)ᵀ·G·(I + S)^-ᵀ and
    // ∂f/∂M is the skew part of that.
    auto [minus, plus_inv] = cayley_factors(m);
    Matrix r = matmul(minus, plus_inv);
    for (std::size_t i = 0; i < r.rows(); ++i) r(i, i) += 1.0;
    const Matrix gs = scale(matmul(matmul(transpose(r), grad_r), transpose(plus_inv)), -1.0);
    return skew_part(gs);
}

Matrix cayley_target_grad(const Matrix& m, const Matrix& x, const Matrix& target) {
    if (x.cols() != m.rows()) throw ShapeError("aos gradient: activation width does not match parameter");
    const Matrix r = cayley(m);
    const Matrix resid = sub(matmul(x, r), target);
    const Matrix grad_r = scale(matmul_tn(x, resid), 2.0);
    return cayley_backward(m, grad_r);
}

Matrix aos_grad(const Matrix& m, const Matrix& x, int bits) {
    if (x.cols() != m.rows()) throw ShapeError("aos_grad: activation width does not match parameter");
    const Matrix target = fake_quant(matmul(x, cayley(m)), bits);
    return cayley_target_grad(m, x, target);
}

namespace {

struct RowScale {
    std::size_t argmax = 0;
    double max_abs = 0.0;
};

std::vector<RowScale> row_scales(const Matrix& xr) {
    std::vector<RowScale> out(xr.rows());
    for (std::size_t t = 0; t < xr.rows(); ++t) {
        auto row = xr.row(t);
        for (std::size_t j = 0; j < row.size(); ++j)
            if (std::abs(row[j]) > out[t].max_abs) out[t] = {j, std::abs(row[j])};
    }
    return out;
}

}  // namespace

std::vector<double> aos_scale_weights(const Matrix& rotation, const Matrix& x, int bits) {
    const Matrix xr = matmul(x, rotation);
    const auto qa = quantize_activations(xr, bits);
    const Matrix q = dequantize(qa);
    std::vector<double> c(xr.rows(), 0.0);
    for (std::size_t t = 0; t < xr.rows(); ++t) {
        double e2 = 0.0;
        for (std::size_t j = 0; j < xr.cols(); ++j) {
            const double e = xr(t, j) - q(t, j);
            e2 += e * e;
        }
        c[t] = e2 / (qa.scales[t] * qa.scales[t]);
    }
    return c;
}

double aos_scale_surrogate(const Matrix& rotation, const Matrix& x, int bits, const std::vector<double>& weights) {
    const Matrix xr = matmul(x, rotation);
    const double qmax = quant_max(bits);
    double acc = 0.0;
    const auto rs = row_scales(xr);
    for (std::size_t t = 0; t < xr.rows(); ++t) {
        const double s = rs[t].max_abs / qmax;
        acc += weights[t] * s * s;
    }
    return acc;
}

Matrix aos_grad_scale(const Matrix& m, const Matrix& x, int bits) {
    if (x.cols() != m.rows()) throw ShapeError("aos_grad_scale: activation width does not match parameter");
    validate_bits(bits);
    const Matrix r = cayley(m);
    const Matrix xr = matmul(x, r);
    const auto qa = quantize_activations(xr, bits);
    const double qmax = quant_max(bits);
    const auto rs = row_scales(xr);
    // ∂L/∂s_t = 2‖e_t‖²/s_t and ∂s_t/∂(XR)[t, m_t] = sign/qmax: one entry per row.
    Matrix grad_r(r.rows(), r.cols());
    for (std::size_t t = 0; t < xr.rows(); ++t) {
        if (rs[t].max_abs == 0.0) continue;
        double e2 = 0.0;
        for (std::size_t j = 0; j < xr.cols(); ++j) {
            const double e = xr(t, j) - qa.scales[t] * qa.q(t, j);
            e2 += e * e;
        }
        const double s = rs[t].max_abs / qmax;
        const double sign = xr(t, rs[t].argmax) < 0.0 ? -1.0 : 1.0;
        const double g = 2.0 * e2 / (qa.scales[t] * qa.scales[t]) * s * sign / qmax;
        const std::size_t col = rs[t].argmax;
        for (std::size_t i = 0; i < x.cols(); ++i) grad_r(i, col) += x(t, i) * g;
    }
    return cayley_backward(m, grad_r);
}

Matrix cayley_inverse(const Matrix& rotation) {
    const std::size_t d = rotation.rows();
    Matrix minus = Matrix::identity(d);
    Matrix plus = Matrix::identity(d);
    for (std::size_t i = 0; i < rotation.size(); ++i) {
        minus.data()[i] -= rotation.data()[i];
        plus.data()[i] += rotation.data()[i];
    }
    return matmul(minus, inverse(plus));
}

Matrix random_rotation(std::size_t d, Rng& rng) {
    Matrix r = random_orthogonal(d, rng);
    if (determinant(r) < 0.0)
        for (std::size_t i = 0; i < d; ++i) r(i, 0) = -r(i, 0);
    return r;
}

Matrix initial_parameters(std::size_t d, const AOSConfig& cfg) {
    if (cfg.init == RotationInit::identity) return Matrix(d, d);
    Rng rng = Rng(cfg.seed).substream("aos.init");
    return cayley_inverse(random_rotation(d, rng));
}

AOSResult optimize_rotation(const Matrix& x_calib, const AOSConfig& cfg) {
    if (x_calib.rows() == 0 || x_calib.cols() == 0) throw ShapeError("optimize_rotation: empty calibration set");
    if (!(cfg.step > 0.0)) throw ConfigError("aos.step must be positive");
    validate_bits(cfg.bits);
    const std::size_t d = x_calib.cols();
    Matrix m = initial_parameters(d, cfg);
    AOSResult result;
    result.params.m = m;
    result.rotation = cayley(m);
    double best = aos_loss(result.rotation, x_calib, cfg.bits);
    result.losses.push_back(best);
    Matrix velocity(d, d);
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        // Per-row mean objective: the step does not depend on the calibration size.
        const Matrix g = aos_grad_scale(m, x_calib, cfg.bits);
        const double inv_rows = 1.0 / static_cast<double>(x_calib.rows());
        for (std::size_t i = 0; i < velocity.size(); ++i) {
            velocity.data()[i] = cfg.momentum * velocity.data()[i] + inv_rows * g.data()[i];
            m.data()[i] -= cfg.step * velocity.data()[i];
        }
        if (!m.all_finite()) throw NumericError("optimize_rotation: parameters diverged at iteration " + std::to_string(it));
        Matrix r = cayley(m);
        const double loss = aos_loss(r, x_calib, cfg.bits);
        if (!std::isfinite(loss)) throw NumericError("optimize_rotation: loss diverged at iteration " + std::to_string(it));
        result.losses.push_back(loss);
        if (loss < best) {
            best = loss;
            result.params.m = m;
            result.rotation = std::move(r);
            result.best_iteration = it;
        }
    }
    return result;
}

Matrix residual_site_activations(const ModelWeights& w, const Matrix& x) {
    const auto fr = forward(w, x, ForwardOptions{.trace = true, .quant = std::nullopt});
    const std::size_t n = x.rows();
    Matrix out(2 * n * w.config.layers, w.config.d_model);
    std::size_t r = 0;
    for (const auto& lt : fr.trace.layers) {
        for (const Matrix* src : {&lt.site_input(Site::q), &lt.site_input(Site::router)}) {
            for (std::size_t t = 0; t < n; ++t, ++r) std::copy(src->row(t).begin(), src->row(t).end(), out.row(r).begin());
        }
    }
    return out;
}

ModelWeights fold_norm_gains(const ModelWeights& w) {
    if (!w.codebooks.empty() || !w.rtn.empty()) throw StageError("fold_norm_gains: model weights are already compressed");
    ModelWeights out = w;
    out.mark_stage("norm_gains");
    auto absorb = [](Matrix& m, const std::vector<double>& gains) {
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (auto& v : m.row(r)) v *= gains[r];
    };
    for (auto& L : out.layers) {
        absorb(L.wq, L.attn_norm);
        absorb(L.wk, L.attn_norm);
        absorb(L.wv, L.attn_norm);
        absorb(L.router, L.mlp_norm);
        for (auto& e : L.experts) {
            absorb(e.gate, L.mlp_norm);
            absorb(e.up, L.mlp_norm);
        }
        std::fill(L.attn_norm.begin(), L.attn_norm.end(), 1.0);
        std::fill(L.mlp_norm.begin(), L.mlp_norm.end(), 1.0);
    }
    return out;
}

ModelWeights fold_rotation(const ModelWeights& w, const Matrix& rotation) {
    const std::size_t d = w.config.d_model;
    if (rotation.rows() != d || rotation.cols() != d) throw ShapeError("fold_rotation: rotation must be d_model x d_model");
    if (!w.codebooks.empty() || !w.rtn.empty()) throw StageError("fold_rotation: model weights are already compressed");
    auto unit_gains = [](const std::vector<double>& g) {
        for (double v : g)
            if (v != 1.0) return false;
        return true;
    };
    for (const auto& L : w.layers)
        if (!unit_gains(L.attn_norm) || !unit_gains(L.mlp_norm))
            throw StageError("fold_rotation: norm gains must be folded first");
    const double err = orthogonality_error(rotation);
    if (!(err < 1e-8)) throw NumericError("fold_rotation: rotation is not orthogonal (‖RᵀR − I‖ = " + std::to_string(err) + ")");
    ModelWeights out = w;
    out.mark_stage("rotation");
    const Matrix rt = transpose(rotation);
    for (auto& L : out.layers) {
        L.wq = matmul(rt, L.wq);
        L.wk = matmul(rt, L.wk);
        L.wv = matmul(rt, L.wv);
        L.wo = matmul(L.wo, rotation);
        L.router = matmul(rt, L.router);
        for (auto& e : L.experts) {
            e.gate = matmul(rt, e.gate);
            e.up = matmul(rt, e.up);
            e.down = matmul(e.down, rotation);
        }
    }
    out.rotation = rotation;
    return out;
}

}  // namespace codequant
