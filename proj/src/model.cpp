#include "codequant/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

namespace codequant {

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("model config: " + msg);
    };
    require(d_model >= 1 && n_heads >= 1 && d_ff >= 1 && experts >= 1 && top_k >= 1 && calib_tokens >= 1,
            "all counts must be at least 1");
    require(top_k <= experts, "top_k must not exceed the expert count");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
}

std::string_view site_name(Site s) {
    switch (s) {
        case Site::q: return "wq";
        case Site::k: return "wk";
        case Site::v: return "wv";
        case Site::out: return "wo";
        case Site::router: return "router";
        case Site::gate: return "gate";
        case Site::up: return "up";
        case Site::down: return "down";
    }
    return "?";
}

bool ModelWeights::has_stage(std::string_view stage) const {
    auto it = metadata.find("stage." + std::string(stage));
    return it != metadata.end() && it->second == "1";
}

void ModelWeights::mark_stage(std::string_view stage) {
    if (has_stage(stage)) throw StageError("stage '" + std::string(stage) + "' has already been applied");
    metadata["stage." + std::string(stage)] = "1";
}

std::string layer_tensor_name(std::size_t layer, std::string_view site) {
    return "layer" + std::to_string(layer) + "." + std::string(site);
}

std::string expert_tensor_name(std::size_t layer, std::size_t expert, std::string_view site) {
    return "layer" + std::to_string(layer) + ".expert" + std::to_string(expert) + "." + std::string(site);
}

std::vector<std::string> linear_weight_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (const char* s : {"wq", "wk", "wv", "wo", "router"}) names.push_back(layer_tensor_name(l, s));
        for (std::size_t e = 0; e < cfg.experts; ++e)
            for (const char* s : {"gate", "up", "down"}) names.push_back(expert_tensor_name(l, e, s));
    }
    return names;
}

namespace {

template <typename W, typename M>
M& weight_lookup(W& w, std::string_view name) {
    auto fail = [&]() -> M& { throw std::out_of_range("unknown weight tensor '" + std::string(name) + "'"); };
    if (name.substr(0, 5) != "layer") return fail();
    const auto dot = name.find('.');
    if (dot == std::string_view::npos) return fail();
    std::size_t layer = 0;
    try {
        layer = std::stoul(std::string(name.substr(5, dot - 5)));
    } catch (const std::exception&) {
        return fail();
    }
    if (layer >= w.layers.size()) return fail();
    auto& L = w.layers[layer];
    auto rest = name.substr(dot + 1);
    if (rest == "wq") return L.wq;
    if (rest == "wk") return L.wk;
    if (rest == "wv") return L.wv;
    if (rest == "wo") return L.wo;
    if (rest == "router") return L.router;
    if (rest.substr(0, 6) == "expert") {
        const auto dot2 = rest.find('.');
        if (dot2 == std::string_view::npos) return fail();
        std::size_t e = 0;
        try {
            e = std::stoul(std::string(rest.substr(6, dot2 - 6)));
        } catch (const std::exception&) {
            return fail();
        }
        if (e >= L.experts.size()) return fail();
        auto site = rest.substr(dot2 + 1);
        if (site == "gate") return L.experts[e].gate;
        if (site == "up") return L.experts[e].up;
        if (site == "down") return L.experts[e].down;
    }
    return fail();
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    count = std::min(count, n);
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Matrix planted_matrix(std::size_t rows, std::size_t cols, double stddev, const Rng& root, const std::string& name,
                      const SyntheticOptions& opts, bool plant) {
    Rng rng = root.substream(name);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = round_to_float(stddev * rng.normal());
    if (plant && opts.outlier_scale != 1.0 && opts.outlier_channels > 0) {
        Rng pick = root.substream(name + ".outliers");
        for (std::size_t c : choose_distinct(cols, opts.outlier_channels, pick))
            for (std::size_t r = 0; r < rows; ++r) m(r, c) = round_to_float(m(r, c) * opts.outlier_scale);
    }
    return m;
}

}  // namespace

Matrix& weight_by_name(ModelWeights& w, std::string_view name) {
    return weight_lookup<ModelWeights, Matrix>(w, name);
}

const Matrix& weight_by_name(const ModelWeights& w, std::string_view name) {
    return weight_lookup<const ModelWeights, const Matrix>(w, name);
}

ModelWeights generate_synthetic_model(const ModelConfig& cfg, const SyntheticOptions& opts) {
    cfg.validate();
    if (opts.outlier_channels >= cfg.d_model)
        throw ConfigError("outlier_channels must be smaller than d_model");
    if (!(opts.outlier_scale > 0.0) || !std::isfinite(opts.outlier_scale))
        throw ConfigError("outlier_scale must be positive and finite");
    ModelWeights w;
    w.config = cfg;
    const Rng root(cfg.seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const std::size_t d = cfg.d_model;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        DecoderLayerWeights L;
        Rng gains = root.substream("norm", l);
        L.attn_norm.resize(d);
        L.mlp_norm.resize(d);
        for (auto& a : L.attn_norm) a = round_to_float(0.75 + 0.5 * gains.uniform());
        for (auto& a : L.mlp_norm) a = round_to_float(0.75 + 0.5 * gains.uniform());
        L.wq = planted_matrix(d, d, stddev, root, layer_tensor_name(l, "wq"), opts, true);
        L.wk = planted_matrix(d, d, stddev, root, layer_tensor_name(l, "wk"), opts, true);
        L.wv = planted_matrix(d, d, stddev, root, layer_tensor_name(l, "wv"), opts, true);
        L.wo = planted_matrix(d, d, stddev, root, layer_tensor_name(l, "wo"), opts, true);
        L.router = planted_matrix(d, cfg.experts, stddev, root, layer_tensor_name(l, "router"), opts, false);
        for (std::size_t e = 0; e < cfg.experts; ++e) {
            ExpertWeights ex;
            ex.gate = planted_matrix(d, cfg.d_ff, stddev, root, expert_tensor_name(l, e, "gate"), opts, true);
            ex.up = planted_matrix(d, cfg.d_ff, stddev, root, expert_tensor_name(l, e, "up"), opts, true);
            ex.down = planted_matrix(cfg.d_ff, d, stddev, root, expert_tensor_name(l, e, "down"), opts, true);
            L.experts.push_back(std::move(ex));
        }
        w.layers.push_back(std::move(L));
    }
    w.metadata["provenance"] = "synthetic";
    w.metadata["synthetic.outlier_channels"] = std::to_string(opts.outlier_channels);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", opts.outlier_scale);
    w.metadata["synthetic.outlier_scale"] = buf;
    return w;
}

Matrix generate_calibration(const ModelConfig& cfg, std::size_t n_tokens, std::uint64_t split,
                            const CalibrationOptions& opts) {
    cfg.validate();
    if (n_tokens == 0) throw ConfigError("calibration needs at least one token");
    const Rng root(cfg.seed);
    Rng channel_rng = root.substream("calib.channels");
    const auto hot = choose_distinct(cfg.d_model, opts.hot_channels, channel_rng);
    Rng rng = root.substream("calib.tokens", split);
    Matrix x(n_tokens, cfg.d_model);
    for (auto& v : x.data()) v = rng.normal();
    for (std::size_t t = 0; t < n_tokens; ++t)
        for (std::size_t c : hot) x(t, c) *= opts.hot_channel_scale;
    std::size_t massive = static_cast<std::size_t>(std::llround(opts.massive_row_fraction * static_cast<double>(n_tokens)));
    if (massive == 0 && n_tokens >= 16 && opts.massive_row_fraction > 0.0) massive = 1;
    Rng row_rng = root.substream("calib.massive", split);
    for (std::size_t t : choose_distinct(n_tokens, massive, row_rng))
        for (std::size_t c = 0; c < cfg.d_model; ++c) x(t, c) *= opts.massive_row_scale;
    return x;
}

std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gains) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gains[i] * (x[i] * inv);
    return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

std::vector<double> softmax(std::span<const double> v) {
    std::vector<double> out(v.size());
    if (v.empty()) return out;
    const double m = *std::max_element(v.begin(), v.end());
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        z += out[i];
    }
    for (auto& p : out) p /= z;
    return out;
}

std::vector<std::uint32_t> select_top_k(std::span<const double> logits, std::size_t top_k) {
    std::vector<std::uint32_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), 0U);
    std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b]; });
    idx.resize(std::min(top_k, idx.size()));
    return idx;
}

namespace {

Matrix normalize_rows(const Matrix& h, const std::vector<double>& gains) {
    Matrix out(h.rows(), h.cols());
    for (std::size_t t = 0; t < h.rows(); ++t) {
        auto r = rmsnorm(h.row(t), gains);
        std::copy(r.begin(), r.end(), out.row(t).begin());
    }
    return out;
}

Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads) {
    const std::size_t n = q.rows();
    const std::size_t dh = q.cols() / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix ctx(n, q.cols());
    parallel_for(
        n,
        [&](std::size_t t0, std::size_t t1) {
            std::vector<double> scores;
            for (std::size_t t = t0; t < t1; ++t) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t off = h * dh;
                    scores.assign(t + 1, 0.0);
                    for (std::size_t s = 0; s <= t; ++s) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) dot += q(t, off + c) * k(s, off + c);
                        scores[s] = dot * inv_sqrt;
                    }
                    const auto p = softmax(scores);
                    for (std::size_t s = 0; s <= t; ++s)
                        for (std::size_t c = 0; c < dh; ++c) ctx(t, off + c) += p[s] * v(s, off + c);
                }
            }
        },
        4);
    return ctx;
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
    return out;
}

void check_finite(const Matrix& m, std::size_t layer, const char* site) {
    if (!m.all_finite())
        throw NumericError("forward: non-finite values at layer " + std::to_string(layer) + " site " + site);
}

}  // namespace

ForwardResult forward(const ModelWeights& w, const Matrix& x, const ForwardOptions& opts) {
    const ModelConfig& cfg = w.config;
    if (x.cols() != cfg.d_model)
        throw ShapeError("forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(cfg.d_model));
    if (w.layers.size() != cfg.layers) throw ShapeError("forward: layer count disagrees with config");
    const std::size_t n = x.rows();
    ForwardResult result;
    Matrix h = x;
    auto site_in = [&](Site s, const Matrix& m) -> Matrix {
        if (opts.quant && opts.quant->sites.contains(s)) return fake_quant(m, opts.quant->bits);
        return m;
    };
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const DecoderLayerWeights& L = w.layers[l];
        LayerTrace lt;
        if (opts.trace) lt.input = h;

        const Matrix u = normalize_rows(h, L.attn_norm);
        Matrix xq = site_in(Site::q, u);
        Matrix xk = site_in(Site::k, u);
        Matrix xv = site_in(Site::v, u);
        const Matrix ctx = causal_attention(matmul(xq, L.wq), matmul(xk, L.wk), matmul(xv, L.wv), cfg.n_heads);
        Matrix xo = site_in(Site::out, ctx);
        const Matrix attn = matmul(xo, L.wo);
        check_finite(attn, l, "wo");
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attn.data()[i];

        const Matrix v = normalize_rows(h, L.mlp_norm);
        Matrix xr = site_in(Site::router, v);
        Matrix logits = matmul(xr, L.router);
        check_finite(logits, l, "router");
        Matrix probs(n, cfg.experts);
        Matrix weights(n, cfg.top_k);
        std::vector<std::vector<std::uint32_t>> selected(n);
        std::vector<std::vector<std::size_t>> routed_tokens(cfg.experts);
        std::vector<std::vector<double>> routed_weights(cfg.experts);
        for (std::size_t t = 0; t < n; ++t) {
            const auto p = softmax(logits.row(t));
            std::copy(p.begin(), p.end(), probs.row(t).begin());
            selected[t] = select_top_k(logits.row(t), cfg.top_k);
            std::vector<double> sel_logits;
            for (auto e : selected[t]) sel_logits.push_back(logits(t, e));
            const auto rw = softmax(sel_logits);
            for (std::size_t j = 0; j < rw.size(); ++j) {
                weights(t, j) = rw[j];
                routed_tokens[selected[t][j]].push_back(t);
                routed_weights[selected[t][j]].push_back(rw[j]);
            }
        }

        Matrix xg = site_in(Site::gate, v);
        Matrix xu = site_in(Site::up, v);
        Matrix moe(n, cfg.d_model);
        if (opts.trace) lt.expert_hidden.assign(cfg.experts, Matrix(n, cfg.d_ff));
        // Experts in ascending index order, so every token's sum has a fixed order.
        for (std::size_t e = 0; e < cfg.experts; ++e) {
            const auto& toks = routed_tokens[e];
            if (toks.empty()) continue;
            const ExpertWeights& ex = L.experts[e];
            const Matrix a = matmul(gather_rows(xg, toks), ex.gate);
            const Matrix b = matmul(gather_rows(xu, toks), ex.up);
            Matrix hid(toks.size(), cfg.d_ff);
            for (std::size_t i = 0; i < hid.size(); ++i) hid.data()[i] = silu(a.data()[i]) * b.data()[i];
            Matrix hq = site_in(Site::down, hid);
            const Matrix o = matmul(hq, ex.down);
            for (std::size_t r = 0; r < toks.size(); ++r) {
                const double wt = routed_weights[e][r];
                auto dst = moe.row(toks[r]);
                auto src = o.row(r);
                for (std::size_t c = 0; c < cfg.d_model; ++c) dst[c] += wt * src[c];
                if (opts.trace) std::copy(hq.row(r).begin(), hq.row(r).end(), lt.expert_hidden[e].row(toks[r]).begin());
            }
        }
        check_finite(moe, l, "moe");
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += moe.data()[i];

        if (opts.trace) {
            lt.site_inputs[static_cast<std::size_t>(Site::q)] = std::move(xq);
            lt.site_inputs[static_cast<std::size_t>(Site::k)] = std::move(xk);
            lt.site_inputs[static_cast<std::size_t>(Site::v)] = std::move(xv);
            lt.site_inputs[static_cast<std::size_t>(Site::out)] = std::move(xo);
            lt.site_inputs[static_cast<std::size_t>(Site::router)] = std::move(xr);
            lt.site_inputs[static_cast<std::size_t>(Site::gate)] = std::move(xg);
            lt.site_inputs[static_cast<std::size_t>(Site::up)] = std::move(xu);
            lt.router_logits = std::move(logits);
            lt.router_probs = std::move(probs);
            lt.selected = std::move(selected);
            lt.routing_weights = std::move(weights);
            lt.moe_out = std::move(moe);
            lt.output = h;
            result.trace.layers.push_back(std::move(lt));
        }
    }
    if (opts.trace) result.trace.final_hidden = h;
    result.hidden = std::move(h);
    return result;
}

}  // namespace codequant
