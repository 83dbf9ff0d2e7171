#include "codequant/accf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "codequant/error.hpp"
#include "codequant/parallel.hpp"
#include "codequant/quant.hpp"

namespace codequant {

namespace {

std::size_t nearest(const double* c, std::size_t k, double x) {
    std::size_t best = 0;
    double bd = std::abs(c[0] - x);
    for (std::size_t j = 1; j < k; ++j) {
        const double d = std::abs(c[j] - x);
        if (d < bd) {
            bd = d;
            best = j;
        }
    }
    return best;
}

// 1-D k-means++ and Lloyd on one group of points. The points are sorted first,
// so the result depends only on the multiset of values, not their order.
void kmeans_1d(const std::vector<double>& raw, std::size_t k, Rng& rng, std::size_t max_iters, double tol,
               double* centroids, std::uint8_t* out_ids) {
    const std::size_t n = raw.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return raw[a] < raw[b]; });
    std::vector<double> pts(n);
    for (std::size_t i = 0; i < n; ++i) pts[i] = raw[perm[i]];
    std::vector<std::uint8_t> ids(n);
    centroids[0] = pts[rng.index(n)];
    std::vector<double> d2(n);
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < c; ++j) best = std::min(best, (pts[i] - centroids[j]) * (pts[i] - centroids[j]));
            d2[i] = best;
            total += best;
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (u < acc && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
            while (d2[pick] == 0.0) --pick;  // only reachable through rounding at the tail
        } else {
            pick = rng.index(n);
        }
        centroids[c] = pts[pick];
    }

    std::vector<double> sum(k);
    std::vector<std::size_t> count(k);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < max_iters; ++it) {
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            ids[i] = static_cast<std::uint8_t>(nearest(centroids, k, pts[i]));
            obj += (pts[i] - centroids[ids[i]]) * (pts[i] - centroids[ids[i]]);
        }
        if (obj == 0.0 || (std::isfinite(prev) && prev - obj <= tol * prev)) break;
        prev = obj;

        std::fill(sum.begin(), sum.end(), 0.0);
        std::fill(count.begin(), count.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            sum[ids[i]] += pts[i];
            ++count[ids[i]];
        }
        std::vector<bool> taken(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] > 0) {
                centroids[c] = sum[c] / static_cast<double>(count[c]);
                continue;
            }
            // Empty cluster: move it onto the point worst served by its centroid.
            std::size_t far = n;
            double fd = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = std::abs(pts[i] - centroids[ids[i]]);
                if (!taken[i] && d > fd) {
                    fd = d;
                    far = i;
                }
            }
            if (far < n) {
                taken[far] = true;
                centroids[c] = pts[far];
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) out_ids[perm[i]] = static_cast<std::uint8_t>(nearest(centroids, k, pts[i]));
}

double rms(const Matrix& w) {
    return std::sqrt(squared_frobenius(w) / static_cast<double>(std::max<std::size_t>(w.size(), 1)));
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Tokens routed to each expert and their routing weights, in token order.
struct Routing {
    std::vector<std::vector<std::size_t>> tokens;
    std::vector<std::vector<double>> weights;
};

Routing routing_of(const MoEBlockCalib& c, std::size_t experts) {
    Routing r;
    r.tokens.resize(experts);
    r.weights.resize(experts);
    for (std::size_t t = 0; t < c.selected.size(); ++t)
        for (std::size_t j = 0; j < c.selected[t].size(); ++j) {
            const auto e = c.selected[t][j];
            if (e >= experts) throw ShapeError("accf: selected expert out of range");
            r.tokens[e].push_back(t);
            r.weights[e].push_back(c.routing_weights(t, j));
        }
    return r;
}

struct ExpertForward {
    Matrix xs, a, b, hidden, out;
};

ExpertForward expert_forward(const Matrix& xs, const Matrix& gate, const Matrix& up, const Matrix& down) {
    ExpertForward f;
    f.xs = xs;
    f.a = matmul(xs, gate);
    f.b = matmul(xs, up);
    f.hidden = Matrix(f.a.rows(), f.a.cols());
    for (std::size_t i = 0; i < f.a.size(); ++i) f.hidden.data()[i] = silu(f.a.data()[i]) * f.b.data()[i];
    f.out = matmul(f.hidden, down);
    return f;
}

// Routed weighted sum, experts in ascending order as in forward().
Matrix moe_prediction(const MoEBlockCalib& calib, const Routing& routing, const std::vector<ExpertForward>& fw) {
    Matrix pred(calib.x_tilde.rows(), calib.x_tilde.cols());
    for (std::size_t e = 0; e < fw.size(); ++e)
        for (std::size_t r = 0; r < routing.tokens[e].size(); ++r) {
            auto dst = pred.row(routing.tokens[e][r]);
            auto src = fw[e].out.row(r);
            const double wt = routing.weights[e][r];
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += wt * src[c];
        }
    return pred;
}

std::vector<ExpertForward> forward_experts(const MoEBlockCalib& calib, const Routing& routing,
                                           const std::vector<ExpertCodebooks>& cbs) {
    std::vector<ExpertForward> fw(cbs.size());
    for (std::size_t e = 0; e < cbs.size(); ++e)
        fw[e] = expert_forward(gather_rows(calib.x_tilde, routing.tokens[e]), dense_weight(cbs[e].gate),
                               dense_weight(cbs[e].up), dense_weight(cbs[e].down));
    return fw;
}

void check_codebook_shape(const Codebook& cb, const Matrix& w, const std::string& what) {
    if (cb.rows != w.cols() || cb.cols != w.rows())
        throw ShapeError(what + ": codebook shape does not match the weight");
}

}  // namespace

Codebook kmeans_init(const Matrix& w_rows, std::size_t group, std::size_t k, const Rng& rng, std::size_t max_iters,
                     double tol) {
    Codebook cb(w_rows.rows(), w_rows.cols(), group, k);
    const std::size_t gs = cb.group_size(), ng = cb.n_groups();
    parallel_for(w_rows.rows() * ng, [&](std::size_t begin, std::size_t end) {
        std::vector<double> pts(gs);
        std::vector<std::uint8_t> ids(gs);
        for (std::size_t task = begin; task < end; ++task) {
            const std::size_t i = task / ng, grp = task % ng;
            for (std::size_t j = 0; j < gs; ++j) pts[j] = w_rows(i, grp * gs + j);
            Rng local = rng.substream("kmeans", task);
            kmeans_1d(pts, k, local, max_iters, tol, &cb.centroid(i, grp, 0), ids.data());
            for (std::size_t j = 0; j < gs; ++j) cb.id(i, grp * gs + j) = ids[j];
        }
    });
    return cb;
}

double codebook_error(const Matrix& w_rows, const Codebook& cb) {
    const double d = frobenius_distance(w_rows, reconstruct(cb));
    return d * d;
}

Matrix dense_weight(const Codebook& cb) { return transpose(reconstruct(cb)); }

double accf_loss_local(const Matrix& x, const Matrix& x_tilde, const Matrix& w, const Codebook& cb) {
    check_codebook_shape(cb, w, "accf_loss_local");
    const double d = frobenius_distance(matmul(x, w), matmul(x_tilde, dense_weight(cb)));
    return d * d;
}

std::vector<double> centroid_gradient(const Codebook& cb, const Matrix& grad_dense) {
    if (grad_dense.rows() != cb.cols || grad_dense.cols() != cb.rows)
        throw ShapeError("centroid_gradient: gradient shape does not match the codebook");
    std::vector<double> g(cb.centroids.size(), 0.0);
    const std::size_t gs = cb.group_size(), ng = cb.n_groups();
    for (std::size_t i = 0; i < cb.rows; ++i)
        for (std::size_t j = 0; j < cb.cols; ++j) g[(i * ng + j / gs) * cb.k + cb.id(i, j)] += grad_dense(j, i);
    return g;
}

std::vector<double> accf_grad_local(const Matrix& x, const Matrix& x_tilde, const Matrix& w, const Codebook& cb) {
    check_codebook_shape(cb, w, "accf_grad_local");
    // ∇W_c = 2·X̃ᵀ(X̃·W_c − X·W)
    const Matrix resid = sub(matmul(x_tilde, dense_weight(cb)), matmul(x, w));
    return centroid_gradient(cb, scale(matmul_tn(x_tilde, resid), 2.0));
}

double mean_kl(const Matrix& probs_quant, const Matrix& probs_ref) {
    if (probs_quant.rows() != probs_ref.rows() || probs_quant.cols() != probs_ref.cols())
        throw ShapeError("mean_kl: probability matrices differ in shape");
    if (probs_quant.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t t = 0; t < probs_quant.rows(); ++t) {
        double sq = 0.0, sr = 0.0, kl = 0.0;
        for (std::size_t e = 0; e < probs_quant.cols(); ++e) {
            const double p = probs_quant(t, e), q = probs_ref(t, e);
            if (p < 0.0 || q < 0.0) throw NumericError("mean_kl: negative probability in row " + std::to_string(t));
            sq += p;
            sr += q;
            if (p > 0.0) kl += p * std::log(p / q);
        }
        if (std::abs(sq - 1.0) > 1e-6 || std::abs(sr - 1.0) > 1e-6)
            throw NumericError("mean_kl: row " + std::to_string(t) + " is not normalized");
        total += kl;
    }
    return total / static_cast<double>(probs_quant.rows());
}

double accf_loss_moe(const MoEBlockCalib& calib, const std::vector<ExpertCodebooks>& cbs, double lambda) {
    const Routing routing = routing_of(calib, cbs.size());
    const Matrix pred = moe_prediction(calib, routing, forward_experts(calib, routing, cbs));
    const double d = frobenius_distance(calib.y, pred);
    return d * d + lambda * mean_kl(calib.probs_quant, calib.probs_ref);
}

std::vector<std::array<std::vector<double>, 3>> accf_grad_moe(const MoEBlockCalib& calib,
                                                              const std::vector<ExpertCodebooks>& cbs) {
    // The KL term depends only on X̃ and the router, so it contributes nothing here.
    const Routing routing = routing_of(calib, cbs.size());
    const auto fw = forward_experts(calib, routing, cbs);
    const Matrix resid = sub(moe_prediction(calib, routing, fw), calib.y);
    std::vector<std::array<std::vector<double>, 3>> grads(cbs.size());
    for (std::size_t e = 0; e < cbs.size(); ++e) {
        const auto& toks = routing.tokens[e];
        const ExpertForward& f = fw[e];
        Matrix d_out(toks.size(), resid.cols());
        for (std::size_t r = 0; r < toks.size(); ++r)
            for (std::size_t c = 0; c < resid.cols(); ++c) d_out(r, c) = 2.0 * routing.weights[e][r] * resid(toks[r], c);
        const Matrix d_hidden = matmul(d_out, transpose(dense_weight(cbs[e].down)));
        Matrix d_a(f.a.rows(), f.a.cols()), d_b(f.a.rows(), f.a.cols());
        for (std::size_t i = 0; i < f.a.size(); ++i) {
            const double a = f.a.data()[i], s = sigmoid(a);
            d_a.data()[i] = d_hidden.data()[i] * f.b.data()[i] * s * (1.0 + a * (1.0 - s));
            d_b.data()[i] = d_hidden.data()[i] * silu(a);
        }
        grads[e][0] = centroid_gradient(cbs[e].gate, matmul_tn(f.xs, d_a));
        grads[e][1] = centroid_gradient(cbs[e].up, matmul_tn(f.xs, d_b));
        grads[e][2] = centroid_gradient(cbs[e].down, matmul_tn(f.hidden, d_out));
    }
    return grads;
}

AssignmentScales assignment_scales(const Matrix& x_tilde, const Matrix& x) {
    if (x_tilde.rows() != x.rows() || x_tilde.cols() != x.cols())
        throw ShapeError("assignment_scales: activation shapes differ");
    AssignmentScales s;
    s.d1.assign(x.cols(), 0.0);
    s.d2.assign(x.cols(), 0.0);
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t j = 0; j < x.cols(); ++j) {
            s.d1[j] += x_tilde(t, j) * x_tilde(t, j);
            s.d2[j] += x_tilde(t, j) * x(t, j);
        }
    return s;
}

void reassign(const Matrix& w_rows, Codebook& cb, const AssignmentScales& scales) {
    if (w_rows.rows() != cb.rows || w_rows.cols() != cb.cols) throw ShapeError("reassign: weight shape differs from codebook");
    if (scales.d1.size() != cb.cols || scales.d2.size() != cb.cols) throw ShapeError("reassign: scale length differs");
    const std::size_t gs = cb.group_size();
    for (std::size_t i = 0; i < cb.rows; ++i)
        for (std::size_t j = 0; j < cb.cols; ++j) {
            const double* c = &cb.centroid(i, j / gs, 0);
            const double w = w_rows(i, j);
            const double d1 = scales.d1[j], d2 = scales.d2[j];
            if (d1 == 0.0) {
                cb.id(i, j) = static_cast<std::uint8_t>(nearest(c, cb.k, w));
                continue;
            }
            std::size_t best = 0;
            double bp = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < cb.k; ++k) {
                const double e = d1 * c[k] - d2 * w;
                if (e * e < bp) {
                    bp = e * e;
                    best = k;
                }
            }
            cb.id(i, j) = static_cast<std::uint8_t>(best);
        }
}

void centroid_step(Codebook& cb, const std::vector<double>& grad, AdamState& st, double lr, double beta1,
                   double beta2) {
    if (grad.size() != cb.centroids.size()) throw ShapeError("centroid_step: gradient length differs");
    if (st.m.empty()) {
        st.m.assign(grad.size(), 0.0);
        st.v.assign(grad.size(), 0.0);
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < grad.size(); ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mh = st.m[i] / c1, vh = st.v[i] / c2;
        if (mh != 0.0) cb.centroids[i] -= lr * mh / (std::sqrt(vh) + 1e-300);
    }
}

Codebook calibrate_site(const std::string& name, const Matrix& w, const Matrix& x, const Matrix& x_tilde,
                        const ACCFConfig& cfg, SiteCalibResult* report) {
    const Matrix w_rows = transpose(w);
    Codebook cb = kmeans_init(w_rows, cfg.group, cfg.k, Rng(cfg.seed).substream(name), cfg.kmeans_iters, cfg.kmeans_tol);
    const AssignmentScales scales = assignment_scales(x_tilde, x);
    const double lr = cfg.step * rms(w);
    SiteCalibResult res;
    res.name = name;
    res.losses.push_back(accf_loss_local(x, x_tilde, w, cb));
    Codebook best = cb;
    AdamState adam;
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        centroid_step(cb, accf_grad_local(x, x_tilde, w, cb), adam, lr, cfg.beta1, cfg.beta2);
        if (cfg.reassign_every > 0 && (it % cfg.reassign_every == 0 || it == cfg.iterations)) reassign(w_rows, cb, scales);
        const double loss = accf_loss_local(x, x_tilde, w, cb);
        if (!std::isfinite(loss))
            throw NumericError("accf: non-finite loss at iteration " + std::to_string(it) + " of " + name);
        res.losses.push_back(loss);
        if (loss < res.losses[res.best_iteration]) {
            res.best_iteration = it;
            best = cb;
        }
    }
    if (report) *report = std::move(res);
    return best;
}

std::vector<ExpertCodebooks> calibrate_moe_block(const std::string& name, const DecoderLayerWeights& layer,
                                                 const Matrix& x, const MoEBlockCalib& calib,
                                                 const ACCFConfig& cfg, const std::optional<ActivationQuant>& quant,
                                                 SiteCalibResult* report) {
    const std::size_t n_exp = layer.experts.size();
    const Routing routing = routing_of(calib, n_exp);
    std::vector<ExpertCodebooks> cbs(n_exp);
    std::vector<std::array<Matrix, 3>> w_rows(n_exp);
    std::vector<std::array<double, 3>> lr(n_exp);
    std::vector<AssignmentScales> in_scales(n_exp);
    std::vector<Matrix> clean_hidden(n_exp);
    const Rng base(cfg.seed);
    for (std::size_t e = 0; e < n_exp; ++e) {
        const ExpertWeights& ex = layer.experts[e];
        const std::string en = name + ".expert" + std::to_string(e);
        w_rows[e] = {transpose(ex.gate), transpose(ex.up), transpose(ex.down)};
        cbs[e].gate = kmeans_init(w_rows[e][0], cfg.group, cfg.k, base.substream(en + ".gate"), cfg.kmeans_iters, cfg.kmeans_tol);
        cbs[e].up = kmeans_init(w_rows[e][1], cfg.group, cfg.k, base.substream(en + ".up"), cfg.kmeans_iters, cfg.kmeans_tol);
        cbs[e].down = kmeans_init(w_rows[e][2], cfg.group, cfg.k, base.substream(en + ".down"), cfg.kmeans_iters, cfg.kmeans_tol);
        lr[e] = {cfg.step * rms(ex.gate), cfg.step * rms(ex.up), cfg.step * rms(ex.down)};
        const Matrix xs = gather_rows(x, routing.tokens[e]);
        in_scales[e] = assignment_scales(gather_rows(calib.x_tilde, routing.tokens[e]), xs);
        clean_hidden[e] = expert_forward(xs, ex.gate, ex.up, ex.down).hidden;
    }

    auto reassign_all = [&]() {
        for (std::size_t e = 0; e < n_exp; ++e) {
            reassign(w_rows[e][0], cbs[e].gate, in_scales[e]);
            reassign(w_rows[e][1], cbs[e].up, in_scales[e]);
        }
        // The down projection sees the hidden state of the updated gate/up.
        const auto fw = forward_experts(calib, routing, cbs);
        for (std::size_t e = 0; e < n_exp; ++e) {
            Matrix ht = fw[e].hidden;
            if (quant && quant->sites.contains(Site::down)) ht = fake_quant(ht, quant->bits);
            reassign(w_rows[e][2], cbs[e].down, assignment_scales(ht, clean_hidden[e]));
        }
    };

    SiteCalibResult res;
    res.name = name;
    res.losses.push_back(accf_loss_moe(calib, cbs, cfg.lambda));
    std::vector<ExpertCodebooks> best = cbs;
    std::vector<std::array<AdamState, 3>> adam(n_exp);
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        const auto grads = accf_grad_moe(calib, cbs);
        for (std::size_t e = 0; e < n_exp; ++e) {
            centroid_step(cbs[e].gate, grads[e][0], adam[e][0], lr[e][0], cfg.beta1, cfg.beta2);
            centroid_step(cbs[e].up, grads[e][1], adam[e][1], lr[e][1], cfg.beta1, cfg.beta2);
            centroid_step(cbs[e].down, grads[e][2], adam[e][2], lr[e][2], cfg.beta1, cfg.beta2);
        }
        if (cfg.reassign_every > 0 && (it % cfg.reassign_every == 0 || it == cfg.iterations)) reassign_all();
        const double loss = accf_loss_moe(calib, cbs, cfg.lambda);
        if (!std::isfinite(loss))
            throw NumericError("accf: non-finite loss at iteration " + std::to_string(it) + " of " + name);
        res.losses.push_back(loss);
        if (loss < res.losses[res.best_iteration]) {
            res.best_iteration = it;
            best = cbs;
        }
    }
    if (report) *report = std::move(res);
    return best;
}

namespace {

void install(ModelWeights& w, const std::string& name, Codebook cb) {
    round_centroids_to_float(cb);
    weight_by_name(w, name) = dense_weight(cb);
    w.codebooks[name] = std::move(cb);
}

void check_clusterable(const ModelWeights& w, const ACCFConfig& cfg) {
    if (w.has_stage("accf")) throw StageError("accf: model is already clustered");
    if (!w.codebooks.empty() || !w.rtn.empty()) throw StageError("accf: model is already compressed");
    if (cfg.k == 0 || cfg.k > 16) throw ConfigError("accf: centroid count must be in 1..16");
    const ModelConfig& mc = w.config;
    if (cfg.group != 0 && (mc.d_model % cfg.group != 0 || mc.d_ff % cfg.group != 0))
        throw ConfigError("accf: group size " + std::to_string(cfg.group) + " does not divide d_model and d_ff");
}

}  // namespace

ModelWeights calibrate_model(const ModelWeights& w, const Matrix& x, const ACCFConfig& cfg,
                             const std::optional<ActivationQuant>& quant, CalibrationReport* report) {
    check_clusterable(w, cfg);
    const ModelConfig& mc = w.config;
    const ActivationTrace ref = forward(w, x, {.trace = true, .quant = std::nullopt}).trace;
    ModelWeights cur = w;
    CalibrationReport rep;
    auto quant_trace = [&](std::size_t l) {
        return std::move(forward(cur, x, {.trace = true, .quant = quant}).trace.layers[l]);
    };
    for (std::size_t l = 0; l < mc.layers; ++l) {
        const LayerTrace& rl = ref.layers[l];
        // q, k and v read the same input and do not feed each other.
        LayerTrace qt = quant_trace(l);
        std::vector<std::pair<std::string, Codebook>> qkv;
        for (Site s : {Site::q, Site::k, Site::v}) {
            const std::string name = layer_tensor_name(l, site_name(s));
            SiteCalibResult r;
            qkv.emplace_back(name, calibrate_site(name, weight_by_name(w, name), rl.site_input(s), qt.site_input(s), cfg, &r));
            rep.sites.push_back(std::move(r));
        }
        for (auto& [name, cb] : qkv) install(cur, name, std::move(cb));

        qt = quant_trace(l);
        {
            const std::string name = layer_tensor_name(l, site_name(Site::out));
            SiteCalibResult r;
            Codebook cb = calibrate_site(name, weight_by_name(w, name), rl.site_input(Site::out), qt.site_input(Site::out), cfg, &r);
            rep.sites.push_back(std::move(r));
            install(cur, name, std::move(cb));
        }

        qt = quant_trace(l);
        MoEBlockCalib calib;
        calib.x_tilde = qt.site_input(Site::gate);
        calib.y = rl.moe_out;
        calib.probs_ref = rl.router_probs;
        calib.probs_quant = qt.router_probs;
        calib.selected = qt.selected;
        calib.routing_weights = qt.routing_weights;
        const std::string block = "layer" + std::to_string(l) + ".moe";
        SiteCalibResult r;
        auto cbs = calibrate_moe_block(block, w.layers[l], rl.site_input(Site::gate), calib, cfg, quant, &r);
        rep.sites.push_back(std::move(r));
        for (std::size_t e = 0; e < mc.experts; ++e) {
            install(cur, expert_tensor_name(l, e, "gate"), std::move(cbs[e].gate));
            install(cur, expert_tensor_name(l, e, "up"), std::move(cbs[e].up));
            install(cur, expert_tensor_name(l, e, "down"), std::move(cbs[e].down));
        }
    }
    cur.mark_stage("accf");
    if (report) *report = std::move(rep);
    return cur;
}

ModelWeights kmeans_model(const ModelWeights& w, const ACCFConfig& cfg) {
    check_clusterable(w, cfg);
    ModelWeights cur = w;
    const Rng base(cfg.seed);
    for (const auto& name : linear_weight_names(w.config)) {
        if (name.ends_with(".router")) continue;
        // Same substream tags as calibrate_model, so this is its starting point.
        std::string tag = name;
        if (name.find(".expert") != std::string::npos) {
            const auto dot = name.find('.');
            tag = name.substr(0, dot) + ".moe" + name.substr(dot);
        }
        const Matrix& dense = weight_by_name(w, name);
        install(cur, name, kmeans_init(transpose(dense), cfg.group, cfg.k, base.substream(tag), cfg.kmeans_iters, cfg.kmeans_tol));
    }
    cur.mark_stage("kmeans");
    return cur;
}

}  // namespace codequant
