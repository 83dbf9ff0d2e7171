#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "codequant/linalg.hpp"
#include "codequant/model.hpp"

namespace codequant {

// Column order for one permuted dimension. Column j of the permuted matrix is
// column order[j] of the original.
struct PermutationPlan {
    std::vector<std::size_t> order;
    std::size_t group = 0;
    std::size_t subgroup = 0;

    std::size_t size() const noexcept { return order.size(); }
    std::size_t n_groups() const noexcept { return order.size() / group; }
    std::size_t n_subgroups() const noexcept { return order.size() / subgroup; }
};

struct SubgroupStats {
    std::vector<double> column_mean_abs;            // s_j
    std::vector<std::vector<std::size_t>> members;  // G_i, columns in sorted-s order
    std::vector<double> spread;                     // v_i
};

SubgroupStats subgroup_stats(const Matrix& w, std::size_t subgroup);

// Subgroup visiting order: one high-spread subgroup, then n-1 low-spread ones,
// repeated per clustering group.
std::vector<std::size_t> pog_subgroup_order(const std::vector<double>& spread, std::size_t per_group);

PermutationPlan pog_order(const Matrix& w, std::size_t group, std::size_t subgroup);

// P(order[j], j) = 1, so (W·P)[:, j] = W[:, order[j]].
Matrix permutation_matrix(const std::vector<std::size_t>& order);
bool is_permutation(const std::vector<std::size_t>& order);

Matrix permute_columns(const Matrix& w, const std::vector<std::size_t>& order);
Matrix permute_rows(const Matrix& w, const std::vector<std::size_t>& order);

// Σ over groups of the mean over rows of the within-group variance of the row.
double grouping_variance(const Matrix& w, std::size_t group);

struct LayerPlans {
    std::vector<PermutationPlan> experts;  // over d_ff
    std::vector<PermutationPlan> heads;    // over d_head, head-local
};

LayerPlans plan_layer_pog(const DecoderLayerWeights& layer, std::size_t n_heads, std::size_t group,
                          std::size_t subgroup);

ModelWeights fold_pog(const ModelWeights& w, const std::vector<LayerPlans>& plans);

}  // namespace codequant
