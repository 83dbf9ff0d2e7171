#include "codequant/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "codequant/error.hpp"
#include "codequant/quant.hpp"

namespace codequant {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

PipelineMode to_mode(const std::string& v) {
    if (v == "codequant") return PipelineMode::codequant;
    if (v == "rtn") return PipelineMode::rtn;
    if (v == "random-rot-rtn") return PipelineMode::random_rot_rtn;
    if (v == "kmeans-only") return PipelineMode::kmeans_only;
    throw ConfigError("unknown mode '" + v + "'");
}

std::vector<std::uint64_t> to_list(const std::string& key, const std::string& v) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_u64(key, trim(item)));
    if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
    return out;
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"seed", [](auto& c, auto& k, auto& v) { c.model.seed = to_u64(k, v); }},
        {"model.d_model", [](auto& c, auto& k, auto& v) { c.model.d_model = to_u64(k, v); }},
        {"model.n_heads", [](auto& c, auto& k, auto& v) { c.model.n_heads = to_u64(k, v); }},
        {"model.d_ff", [](auto& c, auto& k, auto& v) { c.model.d_ff = to_u64(k, v); }},
        {"model.experts", [](auto& c, auto& k, auto& v) { c.model.experts = to_u64(k, v); }},
        {"model.top_k", [](auto& c, auto& k, auto& v) { c.model.top_k = to_u64(k, v); }},
        {"model.layers", [](auto& c, auto& k, auto& v) { c.model.layers = to_u64(k, v); }},
        {"model.calib_tokens", [](auto& c, auto& k, auto& v) { c.model.calib_tokens = to_u64(k, v); }},
        {"model.outlier_channels", [](auto& c, auto& k, auto& v) { c.synthetic.outlier_channels = to_u64(k, v); }},
        {"model.outlier_scale", [](auto& c, auto& k, auto& v) { c.synthetic.outlier_scale = to_double(k, v); }},
        {"mode", [](auto& c, auto&, auto& v) { c.mode = to_mode(v); }},
        {"granularity",
         [](auto& c, auto&, auto& v) {
             if (v == "embedding-wise") c.granularity = Granularity::embedding_wise;
             else if (v == "block-wise") c.granularity = Granularity::block_wise;
             else throw ConfigError("unknown granularity '" + v + "'");
         }},
        {"group", [](auto& c, auto& k, auto& v) { c.group = to_u64(k, v); }},
        {"abits", [](auto& c, auto& k, auto& v) { c.abits = static_cast<int>(to_u64(k, v)); }},
        {"k", [](auto& c, auto& k, auto& v) { c.k = to_u64(k, v); }},
        {"wbits", [](auto& c, auto& k, auto& v) { c.wbits = static_cast<int>(to_u64(k, v)); }},
        {"aos.iterations", [](auto& c, auto& k, auto& v) { c.aos.iterations = to_u64(k, v); }},
        {"aos.calib_tokens", [](auto& c, auto& k, auto& v) { c.aos.calib_tokens = to_u64(k, v); }},
        {"aos.step", [](auto& c, auto& k, auto& v) { c.aos.step = to_double(k, v); }},
        {"aos.momentum", [](auto& c, auto& k, auto& v) { c.aos.momentum = to_double(k, v); }},
        {"aos.init",
         [](auto& c, auto&, auto& v) {
             if (v == "random") c.aos.init = RotationInit::random;
             else if (v == "identity") c.aos.init = RotationInit::identity;
             else throw ConfigError("unknown aos.init '" + v + "'");
         }},
        {"pog.enabled", [](auto& c, auto& k, auto& v) { c.pog_enabled = to_bool(k, v); }},
        {"pog.g", [](auto& c, auto& k, auto& v) { c.pog_g = to_u64(k, v); }},
        {"pog.g_s", [](auto& c, auto& k, auto& v) { c.pog_gs = to_u64(k, v); }},
        {"accf.iterations", [](auto& c, auto& k, auto& v) { c.accf.iterations = to_u64(k, v); }},
        {"accf.calib_tokens", [](auto& c, auto& k, auto& v) { c.accf.calib_tokens = to_u64(k, v); }},
        {"accf.lambda", [](auto& c, auto& k, auto& v) { c.accf.lambda = to_double(k, v); }},
        {"accf.step", [](auto& c, auto& k, auto& v) { c.accf.step = to_double(k, v); }},
        {"accf.reassign_every", [](auto& c, auto& k, auto& v) { c.accf.reassign_every = to_u64(k, v); }},
        {"eval.tokens", [](auto& c, auto& k, auto& v) { c.eval_tokens = to_u64(k, v); }},
        {"eval.seeds", [](auto& c, auto& k, auto& v) { c.eval_splits = to_list(k, v); }},
    };
    return table;
}

Matrix model_rotation(const ModelWeights& w) {
    return w.rotation ? *w.rotation : Matrix::identity(w.config.d_model);
}

ModelWeights rtn_model(const ModelWeights& w, const PipelineConfig& cfg) {
    ModelWeights out = w;
    const QuantSpec spec{cfg.weight_bits(), cfg.weight_group()};
    for (const auto& name : linear_weight_names(w.config)) {
        if (name.ends_with(".router")) continue;
        RtnWeights rw = quantize_weights_rtn(transpose(weight_by_name(w, name)), spec);
        for (double& s : rw.scales.data()) s = static_cast<float>(s);
        weight_by_name(out, name) = transpose(dequantize(rw));
        out.rtn[name] = std::move(rw);
    }
    out.mark_stage("rtn");
    return out;
}

Matrix aos_heldout_activations(const ModelWeights& w, const PipelineConfig& cfg) {
    return residual_site_activations(w, generate_calibration(cfg.model, cfg.aos.calib_tokens, 1));
}

}  // namespace

std::string_view mode_name(PipelineMode m) {
    switch (m) {
        case PipelineMode::codequant: return "codequant";
        case PipelineMode::rtn: return "rtn";
        case PipelineMode::random_rot_rtn: return "random-rot-rtn";
        case PipelineMode::kmeans_only: return "kmeans-only";
    }
    return "?";
}

int PipelineConfig::weight_bits() const {
    if (wbits != 0) return wbits;
    int b = 0;
    while ((std::size_t{1} << b) < k) ++b;
    return b;
}

std::size_t PipelineConfig::pog_subgroup() const {
    if (pog_gs != 0) return pog_gs;
    return std::max<std::size_t>(pog_group() / 8, 1);
}

void PipelineConfig::validate() const {
    try {
        model.validate();
    } catch (const ShapeError& e) {
        throw ConfigError(e.what());
    }
    if (synthetic.outlier_channels >= model.d_model) throw ConfigError("model.outlier_channels must be below d_model");
    if (abits != 4 && abits != 8) throw ConfigError("abits must be 4 or 8");
    if (k != 4 && k != 8 && k != 16) throw ConfigError("k must be 4, 8 or 16");
    validate_bits(weight_bits());
    if (granularity == Granularity::block_wise) {
        if (group == 0 || model.d_model % group != 0 || model.d_ff % group != 0)
            throw ConfigError("group " + std::to_string(group) + " must divide d_model and d_ff");
    }
    if (pog_enabled) {
        if (granularity != Granularity::block_wise) throw ConfigError("pog.enabled requires block-wise granularity");
        const std::size_t g = pog_group(), gs = pog_subgroup();
        if (g % gs != 0) throw ConfigError("pog.g_s must divide pog.g");
        if (model.d_ff % g != 0 || model.d_head() % g != 0)
            throw ConfigError("pog.g must divide d_ff and d_head");
    }
    if (aos.calib_tokens == 0 || accf.calib_tokens == 0 || eval_tokens == 0)
        throw ConfigError("token counts must be positive");
    if (!(aos.step > 0.0) || aos.momentum < 0.0 || aos.momentum >= 1.0) throw ConfigError("aos.step/aos.momentum out of range");
    if (!(accf.step > 0.0)) throw ConfigError("accf.step must be positive");
    if (accf.lambda < 0.0) throw ConfigError("accf.lambda must be non-negative");
    std::set<std::uint64_t> seen;
    for (auto s : eval_splits) {
        if (s == 0) throw ConfigError("eval.seeds must not contain 0, the calibration split");
        if (!seen.insert(s).second) throw ConfigError("eval.seeds has a duplicate entry");
    }
}

std::string PipelineConfig::to_text() const {
    std::map<std::string, std::string> kv;
    kv["seed"] = std::to_string(model.seed);
    kv["model.d_model"] = std::to_string(model.d_model);
    kv["model.n_heads"] = std::to_string(model.n_heads);
    kv["model.d_ff"] = std::to_string(model.d_ff);
    kv["model.experts"] = std::to_string(model.experts);
    kv["model.top_k"] = std::to_string(model.top_k);
    kv["model.layers"] = std::to_string(model.layers);
    kv["model.calib_tokens"] = std::to_string(model.calib_tokens);
    kv["model.outlier_channels"] = std::to_string(synthetic.outlier_channels);
    kv["model.outlier_scale"] = fmt(synthetic.outlier_scale);
    kv["mode"] = std::string(mode_name(mode));
    kv["granularity"] = granularity == Granularity::block_wise ? "block-wise" : "embedding-wise";
    kv["group"] = std::to_string(group);
    kv["abits"] = std::to_string(abits);
    kv["k"] = std::to_string(k);
    kv["wbits"] = std::to_string(weight_bits());
    kv["aos.iterations"] = std::to_string(aos.iterations);
    kv["aos.calib_tokens"] = std::to_string(aos.calib_tokens);
    kv["aos.step"] = fmt(aos.step);
    kv["aos.momentum"] = fmt(aos.momentum);
    kv["aos.init"] = aos.init == RotationInit::random ? "random" : "identity";
    kv["pog.enabled"] = pog_enabled ? "true" : "false";
    kv["pog.g"] = std::to_string(pog_group());
    kv["pog.g_s"] = std::to_string(pog_subgroup());
    kv["accf.iterations"] = std::to_string(accf.iterations);
    kv["accf.calib_tokens"] = std::to_string(accf.calib_tokens);
    kv["accf.lambda"] = fmt(accf.lambda);
    kv["accf.step"] = fmt(accf.step);
    kv["accf.reassign_every"] = std::to_string(accf.reassign_every);
    kv["eval.tokens"] = std::to_string(eval_tokens);
    std::string splits;
    for (auto s : eval_splits) splits += (splits.empty() ? "" : ",") + std::to_string(s);
    kv["eval.seeds"] = splits;
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

PipelineConfig parse_pipeline_config(const std::string& text) {
    PipelineConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(lineno));
        if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' is set twice");
        it->second(cfg, key, value);
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_pipeline_config(ss.str());
}

std::vector<double> router_change_rate(const ActivationTrace& ref, const ActivationTrace& quant, std::size_t top_k) {
    if (ref.layers.size() != quant.layers.size()) throw ShapeError("router_change_rate: traces differ in layer count");
    if (top_k == 0) throw ConfigError("router_change_rate: top_k must be positive");
    std::vector<double> rates;
    for (std::size_t l = 0; l < ref.layers.size(); ++l) {
        const auto& a = ref.layers[l].selected;
        const auto& b = quant.layers[l].selected;
        if (a.size() != b.size()) throw ShapeError("router_change_rate: traces differ in token count");
        double total = 0.0;
        for (std::size_t t = 0; t < a.size(); ++t) {
            std::size_t missing = 0;
            for (auto e : a[t])
                if (std::find(b[t].begin(), b[t].end(), e) == b[t].end()) ++missing;
            total += static_cast<double>(missing) / static_cast<double>(top_k);
        }
        rates.push_back(a.empty() ? 0.0 : total / static_cast<double>(a.size()));
    }
    return rates;
}

double relative_error(const Matrix& ref, const Matrix& approx) {
    const double denom = frobenius(ref);
    const double num = frobenius_distance(ref, approx);
    if (denom == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / denom;
}

std::vector<double> layer_output_error(const ActivationTrace& ref, const ActivationTrace& quant) {
    if (ref.layers.size() != quant.layers.size()) throw ShapeError("layer_output_error: traces differ in layer count");
    std::vector<double> out;
    for (std::size_t l = 0; l < ref.layers.size(); ++l) out.push_back(relative_error(ref.layers[l].output, quant.layers[l].output));
    return out;
}

SplitEval evaluate(const ModelWeights& original, const ModelWeights& compressed, const Matrix& x, int abits) {
    const Matrix r = model_rotation(compressed);
    ActivationTrace ref = forward(original, x, {.trace = true, .quant = std::nullopt}).trace;
    // Compare in the rotated frame.
    for (auto& lt : ref.layers) lt.output = matmul(lt.output, r);
    ref.final_hidden = matmul(ref.final_hidden, r);
    const ActivationTrace q =
        forward(compressed, matmul(x, r), {.trace = true, .quant = ActivationQuant{abits, SiteMask::all()}}).trace;
    SplitEval ev;
    ev.layer_error = layer_output_error(ref, q);
    ev.final_error = relative_error(ref.final_hidden, q.final_hidden);
    ev.router_change = router_change_rate(ref, q, original.config.top_k);
    double s = 0.0;
    for (double v : ev.router_change) s += v;
    ev.mean_router_change = ev.router_change.empty() ? 0.0 : s / static_cast<double>(ev.router_change.size());
    return ev;
}

ModelWeights compress_model(const ModelWeights& original, const PipelineConfig& cfg, EvalReport& report) {
    cfg.validate();
    ModelWeights w = fold_norm_gains(original);
    const Rng root(cfg.model.seed);
    switch (cfg.mode) {
        case PipelineMode::rtn: return rtn_model(w, cfg);
        case PipelineMode::random_rot_rtn: {
            Rng rng = root.substream("baseline.rotation");
            return rtn_model(fold_rotation(w, random_rotation(cfg.model.d_model, rng)), cfg);
        }
        case PipelineMode::codequant:
        case PipelineMode::kmeans_only: break;
    }

    AOSConfig aos = cfg.aos;
    aos.bits = cfg.abits;
    aos.seed = cfg.model.seed;
    const Matrix acts = residual_site_activations(w, generate_calibration(cfg.model, aos.calib_tokens, 0));
    const AOSResult rot = optimize_rotation(acts, aos);
    report.aos_losses = rot.losses;
    report.aos_best_iteration = rot.best_iteration;
    const Matrix held = aos_heldout_activations(w, cfg);
    report.aos_heldout_before = aos_loss(cayley(initial_parameters(cfg.model.d_model, aos)), held, cfg.abits);
    report.aos_heldout_after = aos_loss(rot.rotation, held, cfg.abits);
    w = fold_rotation(w, rot.rotation);

    if (cfg.pog_enabled) {
        for (const auto& layer : w.layers)
            report.pog_plans.push_back(plan_layer_pog(layer, cfg.model.n_heads, cfg.pog_group(), cfg.pog_subgroup()));
        w = fold_pog(w, report.pog_plans);
    }

    ACCFConfig accf = cfg.accf;
    accf.k = cfg.k;
    accf.group = cfg.weight_group();
    accf.seed = cfg.model.seed;
    if (cfg.mode == PipelineMode::kmeans_only) return kmeans_model(w, accf);
    const Matrix xc = matmul(generate_calibration(cfg.model, accf.calib_tokens, 0), rot.rotation);
    return calibrate_model(w, xc, accf, ActivationQuant{cfg.abits, SiteMask::all()}, &report.calibration);
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    const ModelWeights original = generate_synthetic_model(cfg.model, cfg.synthetic);
    PipelineResult res;
    res.report.config = cfg;
    ModelWeights compressed = compress_model(original, cfg, res.report);
    compressed.metadata["pipeline.mode"] = std::string(mode_name(cfg.mode));
    // Evaluate exactly what the container holds.
    res.model = deserialize_model(serialize_model(compressed));
    for (auto split : cfg.eval_splits) {
        SplitEval ev = evaluate(original, res.model, generate_calibration(cfg.model, cfg.eval_tokens, split), cfg.abits);
        ev.split = split;
        res.report.evals.push_back(std::move(ev));
    }
    return res;
}

double EvalReport::final_error() const {
    double s = 0.0;
    for (const auto& e : evals) s += e.final_error;
    return evals.empty() ? 0.0 : s / static_cast<double>(evals.size());
}

double EvalReport::mean_router_change() const {
    double s = 0.0;
    for (const auto& e : evals) s += e.mean_router_change;
    return evals.empty() ? 0.0 : s / static_cast<double>(evals.size());
}

std::string EvalReport::to_text() const {
    std::ostringstream o;
    o << "[config]\n" << config.to_text();
    if (!aos_losses.empty()) {
        o << "\n[aos]\n";
        o << "loss_before = " << fmt(aos_losses.front()) << "\n";
        o << "loss_after = " << fmt(aos_losses.at(aos_best_iteration)) << "\n";
        o << "best_iteration = " << aos_best_iteration << "\n";
        o << "heldout_before = " << fmt(aos_heldout_before) << "\n";
        o << "heldout_after = " << fmt(aos_heldout_after) << "\n";
        o << "iter,loss\n";
        for (std::size_t i = 0; i < aos_losses.size(); ++i) o << i << "," << fmt(aos_losses[i]) << "\n";
    }
    if (!pog_plans.empty()) {
        auto join = [](const std::vector<std::size_t>& v) {
            std::string s;
            for (auto i : v) s += (s.empty() ? "" : " ") + std::to_string(i);
            return s;
        };
        o << "\n[pog.experts]\nlayer,expert,pi\n";
        for (std::size_t l = 0; l < pog_plans.size(); ++l)
            for (std::size_t e = 0; e < pog_plans[l].experts.size(); ++e) o << l << "," << e << "," << join(pog_plans[l].experts[e].order) << "\n";
        o << "\n[pog.heads]\nlayer,head,pi\n";
        for (std::size_t l = 0; l < pog_plans.size(); ++l)
            for (std::size_t h = 0; h < pog_plans[l].heads.size(); ++h) o << l << "," << h << "," << join(pog_plans[l].heads[h].order) << "\n";
    }
    if (!calibration.sites.empty()) {
        o << "\n[accf]\nsite,initial_loss,best_loss,best_iteration\n";
        for (const auto& s : calibration.sites)
            o << s.name << "," << fmt(s.initial_loss()) << "," << fmt(s.best_loss()) << "," << s.best_iteration << "\n";
        o << "\n[accf.trajectory]\nsite,iter,loss\n";
        for (const auto& s : calibration.sites)
            for (std::size_t i = 0; i < s.losses.size(); ++i) o << s.name << "," << i << "," << fmt(s.losses[i]) << "\n";
    }
    o << "\n[eval]\nsplit,layer,output_error,router_change\n";
    for (const auto& e : evals)
        for (std::size_t l = 0; l < e.layer_error.size(); ++l)
            o << e.split << "," << l << "," << fmt(e.layer_error[l]) << "," << fmt(e.router_change[l]) << "\n";
    o << "\n[eval.final]\nsplit,final_error,mean_router_change\n";
    for (const auto& e : evals) o << e.split << "," << fmt(e.final_error) << "," << fmt(e.mean_router_change) << "\n";
    o << "\n[summary]\n";
    o << "final_error = " << fmt(final_error()) << "\n";
    o << "mean_router_change = " << fmt(mean_router_change()) << "\n";
    return o.str();
}

}  // namespace codequant
