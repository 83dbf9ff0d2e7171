#include "codequant/pog.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "codequant/error.hpp"

namespace codequant {

namespace {

// Stable argsort; ties keep the lower index first.
std::vector<std::size_t> argsort_desc(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    return idx;
}

std::vector<std::size_t> argsort_asc(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return idx;
}

void check_sizes(std::size_t dim, std::size_t group, std::size_t subgroup) {
    if (group == 0 || subgroup == 0) throw ConfigError("pog: group sizes must be positive");
    if (group % subgroup != 0)
        throw ShapeError("pog: subgroup size " + std::to_string(subgroup) + " does not divide group size " +
                         std::to_string(group));
    if (dim % group != 0)
        throw ShapeError("pog: group size " + std::to_string(group) + " does not divide dimension " +
                         std::to_string(dim));
}

}  // namespace

SubgroupStats subgroup_stats(const Matrix& w, std::size_t subgroup) {
    const std::size_t rows = w.rows(), cols = w.cols();
    if (subgroup == 0 || cols % subgroup != 0) throw ShapeError("subgroup_stats: subgroup size does not divide columns");
    SubgroupStats st;
    st.column_mean_abs.assign(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) st.column_mean_abs[j] += std::abs(w(r, j));
    for (double& s : st.column_mean_abs) s /= static_cast<double>(rows);

    const auto sorted = argsort_desc(st.column_mean_abs);
    const std::size_t ns = cols / subgroup;
    st.members.resize(ns);
    st.spread.assign(ns, 0.0);
    for (std::size_t i = 0; i < ns; ++i) {
        auto& g = st.members[i];
        g.assign(sorted.begin() + static_cast<std::ptrdiff_t>(i * subgroup),
                 sorted.begin() + static_cast<std::ptrdiff_t>((i + 1) * subgroup));
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            double mean = 0.0;
            for (auto j : g) mean += w(r, j);
            mean /= static_cast<double>(subgroup);
            double var = 0.0;
            for (auto j : g) var += (w(r, j) - mean) * (w(r, j) - mean);
            acc += std::sqrt(var / static_cast<double>(subgroup));
        }
        st.spread[i] = acc / static_cast<double>(rows);
    }
    return st;
}

std::vector<std::size_t> pog_subgroup_order(const std::vector<double>& spread, std::size_t per_group) {
    const std::size_t ns = spread.size();
    if (per_group == 0 || ns % per_group != 0) throw ShapeError("pog: subgroups do not fill whole groups");
    const std::size_t ng = ns / per_group;
    const auto desc = argsort_desc(spread);
    // The low list is the ascending order over the subgroups not already taken
    // as group leaders. Without ties this equals the first N_g(n-1) entries of
    // the ascending argsort; with ties it keeps the result a bijection.
    std::vector<bool> leader(ns, false);
    for (std::size_t i = 0; i < ng; ++i) leader[desc[i]] = true;
    std::vector<std::size_t> low;
    for (auto id : argsort_asc(spread))
        if (!leader[id]) low.push_back(id);

    std::vector<std::size_t> out;
    out.reserve(ns);
    const std::size_t fill = per_group - 1;
    for (std::size_t i = 0; i < ng; ++i) {
        out.push_back(desc[i]);
        for (std::size_t k = 0; k < fill; ++k) out.push_back(low[i * fill + k]);
    }
    return out;
}

PermutationPlan pog_order(const Matrix& w, std::size_t group, std::size_t subgroup) {
    check_sizes(w.cols(), group, subgroup);
    const SubgroupStats st = subgroup_stats(w, subgroup);
    PermutationPlan plan;
    plan.group = group;
    plan.subgroup = subgroup;
    plan.order.reserve(w.cols());
    for (auto id : pog_subgroup_order(st.spread, group / subgroup))
        plan.order.insert(plan.order.end(), st.members[id].begin(), st.members[id].end());
    return plan;
}

bool is_permutation(const std::vector<std::size_t>& order) {
    std::vector<bool> seen(order.size(), false);
    for (auto i : order) {
        if (i >= order.size() || seen[i]) return false;
        seen[i] = true;
    }
    return true;
}

Matrix permutation_matrix(const std::vector<std::size_t>& order) {
    if (!is_permutation(order)) throw ShapeError("permutation_matrix: order is not a bijection");
    Matrix p(order.size(), order.size());
    for (std::size_t j = 0; j < order.size(); ++j) p(order[j], j) = 1.0;
    return p;
}

Matrix permute_columns(const Matrix& w, const std::vector<std::size_t>& order) {
    if (order.size() != w.cols() || !is_permutation(order)) throw ShapeError("permute_columns: bad order");
    Matrix out(w.rows(), w.cols());
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t j = 0; j < w.cols(); ++j) out(r, j) = w(r, order[j]);
    return out;
}

Matrix permute_rows(const Matrix& w, const std::vector<std::size_t>& order) {
    if (order.size() != w.rows() || !is_permutation(order)) throw ShapeError("permute_rows: bad order");
    Matrix out(w.rows(), w.cols());
    for (std::size_t r = 0; r < w.rows(); ++r) std::copy(w.row(order[r]).begin(), w.row(order[r]).end(), out.row(r).begin());
    return out;
}

double grouping_variance(const Matrix& w, std::size_t group) {
    if (group == 0 || w.cols() % group != 0) throw ShapeError("grouping_variance: group does not divide columns");
    double total = 0.0;
    for (std::size_t g0 = 0; g0 < w.cols(); g0 += group) {
        double acc = 0.0;
        for (std::size_t r = 0; r < w.rows(); ++r) {
            double mean = 0.0;
            for (std::size_t j = g0; j < g0 + group; ++j) mean += w(r, j);
            mean /= static_cast<double>(group);
            double var = 0.0;
            for (std::size_t j = g0; j < g0 + group; ++j) var += (w(r, j) - mean) * (w(r, j) - mean);
            acc += var / static_cast<double>(group);
        }
        total += acc / static_cast<double>(w.rows());
    }
    return total;
}

LayerPlans plan_layer_pog(const DecoderLayerWeights& layer, std::size_t n_heads, std::size_t group,
                          std::size_t subgroup) {
    LayerPlans plans;
    for (const auto& ex : layer.experts) plans.experts.push_back(pog_order(transpose(ex.down), group, subgroup));

    const std::size_t d = layer.wo.rows();
    if (n_heads == 0 || d % n_heads != 0) throw ShapeError("plan_layer_pog: heads do not divide d_model");
    const std::size_t dh = d / n_heads;
    const Matrix wo_t = transpose(layer.wo);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Matrix slice(wo_t.rows(), dh);
        for (std::size_t r = 0; r < wo_t.rows(); ++r)
            for (std::size_t j = 0; j < dh; ++j) slice(r, j) = wo_t(r, h * dh + j);
        plans.heads.push_back(pog_order(slice, group, subgroup));
    }
    return plans;
}

ModelWeights fold_pog(const ModelWeights& w, const std::vector<LayerPlans>& plans) {
    if (w.has_stage("pog")) throw StageError("fold_pog: permutation already folded");
    if (!w.codebooks.empty() || !w.rtn.empty()) throw StageError("fold_pog: model is already compressed");
    const ModelConfig& cfg = w.config;
    if (plans.size() != cfg.layers) throw ShapeError("fold_pog: one plan set per layer required");
    const std::size_t dh = cfg.d_head();
    ModelWeights out = w;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerPlans& lp = plans[l];
        DecoderLayerWeights& L = out.layers[l];
        if (lp.experts.size() != cfg.experts || lp.heads.size() != cfg.n_heads)
            throw ShapeError("fold_pog: plan count mismatch in layer " + std::to_string(l));
        for (std::size_t e = 0; e < cfg.experts; ++e) {
            const auto& ord = lp.experts[e].order;
            if (ord.size() != cfg.d_ff) throw ShapeError("fold_pog: expert plan does not span d_ff");
            L.experts[e].gate = permute_columns(L.experts[e].gate, ord);
            L.experts[e].up = permute_columns(L.experts[e].up, ord);
            L.experts[e].down = permute_rows(L.experts[e].down, ord);
        }
        const Matrix wv = L.wv, wo = L.wo;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const auto& ord = lp.heads[h].order;
            if (ord.size() != dh || !is_permutation(ord)) throw ShapeError("fold_pog: head plan does not span d_head");
            for (std::size_t j = 0; j < dh; ++j) {
                for (std::size_t r = 0; r < wv.rows(); ++r) L.wv(r, h * dh + j) = wv(r, h * dh + ord[j]);
                std::copy(wo.row(h * dh + ord[j]).begin(), wo.row(h * dh + ord[j]).end(), L.wo.row(h * dh + j).begin());
            }
        }
    }
    out.mark_stage("pog");
    return out;
}

}  // namespace codequant
