#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "codequant/accf.hpp"
#include "codequant/aos.hpp"
#include "codequant/error.hpp"
#include "codequant/pog.hpp"
#include "helpers.hpp"

using namespace codequant;
using testing_util::mat_rel_err;

namespace {

// Rows of 8 columns: two same-sign high-spread pairs (20/16 and -14/-10) and
// two flat low-magnitude pairs, laid out so the high pairs share a group.
Matrix two_scale_instance(std::size_t rows, std::uint64_t seed) {
    Rng rng(seed);
    Matrix w(rows, 8);
    const double base[8] = {20, 16, -14, -10, 0.1, 0.1, 0.1, 0.1};
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < 8; ++j) w(r, j) = base[j] + (j < 4 ? 0.5 : 0.001) * rng.normal();
    return w;
}

std::vector<std::size_t> random_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> o(n);
    std::iota(o.begin(), o.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(o[i - 1], o[rng.index(i)]);
    return o;
}

std::vector<std::size_t> identity_order(std::size_t n) {
    std::vector<std::size_t> o(n);
    std::iota(o.begin(), o.end(), std::size_t{0});
    return o;
}

}  // namespace

TEST_CASE("permutation matrix") {
    CHECK(permutation_matrix(identity_order(4)) == Matrix::identity(4));
    const Matrix p = permutation_matrix({1, 2, 0});
    CHECK(p == Matrix{{0, 0, 1}, {1, 0, 0}, {0, 1, 0}});
    CHECK(matmul(transpose(p), p) == Matrix::identity(3));

    Rng rng(2);
    const Matrix w = gaussian_matrix(3, 3, rng);
    CHECK(permute_columns(w, {1, 2, 0}) == matmul(w, p));
    CHECK(permute_rows(w, {1, 2, 0}) == matmul(transpose(p), w));
    CHECK_THROWS_AS(permutation_matrix({0, 0, 1}), ShapeError);
    CHECK_FALSE(is_permutation({0, 3, 1}));
}

TEST_CASE("subgroup ordering partitions subgroups") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t per = 1 + rng.index(6), ng = 1 + rng.index(6);
        std::vector<double> spread(per * ng);
        // Coarse values so ties are common.
        for (auto& v : spread) v = static_cast<double>(rng.index(4));
        const auto order = pog_subgroup_order(spread, per);
        CHECK(is_permutation(order));
        // Each group leads with one of the N_g largest spreads.
        std::vector<double> sorted = spread;
        std::sort(sorted.rbegin(), sorted.rend());
        for (std::size_t g = 0; g < ng; ++g) {
            CHECK(spread[order[g * per]] >= sorted[ng - 1]);
            for (std::size_t k = 1; k < per; ++k) CHECK(spread[order[g * per + k]] <= sorted[ng - 1]);
        }
    }
    CHECK(pog_subgroup_order({5, 1, 9, 0}, 2) == std::vector<std::size_t>{2, 3, 0, 1});
    CHECK_THROWS_AS(pog_subgroup_order({1, 2, 3}, 2), ShapeError);
}

TEST_CASE("pog_order is a bijection on random shapes") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t gs = 1 + rng.index(4), per = 1 + rng.index(4), ng = 1 + rng.index(4);
        const Matrix w = gaussian_matrix(1 + rng.index(5), gs * per * ng, rng);
        const PermutationPlan plan = pog_order(w, gs * per, gs);
        CHECK(plan.size() == w.cols());
        CHECK(is_permutation(plan.order));
        CHECK(plan.n_subgroups() == per * ng);
    }
    CHECK_THROWS_AS(pog_order(Matrix(2, 12), 8, 2), ShapeError);
    CHECK_THROWS_AS(pog_order(Matrix(2, 12), 6, 4), ShapeError);
}

TEST_CASE("degenerate statistics") {
    // Equal spreads: leaders are subgroups 0 and 1, the rest follow in index order.
    const Matrix w(3, 8, 1.0);
    CHECK(pog_order(w, 4, 2).order == std::vector<std::size_t>{0, 1, 4, 5, 2, 3, 6, 7});
}

TEST_CASE("planted high-spread subgroups are split across groups") {
    const Matrix w = two_scale_instance(32, 1);
    const PermutationPlan plan = pog_order(w, 4, 2);
    const SubgroupStats st = subgroup_stats(w, 2);
    CHECK(st.members[0] == std::vector<std::size_t>{0, 1});
    CHECK(st.members[1] == std::vector<std::size_t>{2, 3});
    for (double v : st.spread) CHECK(v >= 0.0);

    // Recompute each output subgroup's spread: one high subgroup per group.
    const Matrix pw = permute_columns(w, plan.order);
    std::vector<double> in_order(4);
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t a = plan.order[2 * s], b = plan.order[2 * s + 1];
        double acc = 0.0;
        for (std::size_t r = 0; r < w.rows(); ++r) acc += std::abs(w(r, a) - w(r, b)) / 2.0;
        in_order[s] = acc / static_cast<double>(w.rows());
    }
    CHECK(((in_order[0] > 1.0) + (in_order[1] > 1.0)) == 1);
    CHECK(((in_order[2] > 1.0) + (in_order[3] > 1.0)) == 1);

    CHECK(grouping_variance(pw, 4) < grouping_variance(w, 4));
}

TEST_CASE("grouping variance by hand") {
    // Row variances: group {1,3} -> 1, group {0,0} -> 0.
    const Matrix w{{1, 3, 0, 0}, {2, 4, 5, 5}};
    CHECK(grouping_variance(w, 2) == 1.0);
    CHECK(grouping_variance(w, 4) == 1.5);
    CHECK_THROWS_AS(grouping_variance(w, 3), ShapeError);
}

TEST_CASE("embedding-wise k-means ignores the permutation") {
    Rng rng(12);
    const Matrix w = gaussian_matrix(8, 64, rng);
    const auto order = random_order(64, rng);
    const Matrix pw = permute_columns(w, order);
    const Codebook a = kmeans_init(w, 0, 16, Rng(3), 25, 1e-6);
    const Codebook b = kmeans_init(pw, 0, 16, Rng(3), 25, 1e-6);
    CHECK(testing_util::rel_err(codebook_error(w, a), codebook_error(pw, b)) < 1e-12);
    CHECK(a.centroids == b.centroids);
}

TEST_CASE("layer plans") {
    ModelConfig c;
    c.seed = 7;
    const ModelWeights w = generate_synthetic_model(c);
    const LayerPlans lp = plan_layer_pog(w.layers[0], c.n_heads, 16, 2);
    CHECK(lp.experts.size() == c.experts);
    CHECK(lp.heads.size() == c.n_heads);
    for (const auto& p : lp.experts) CHECK((p.size() == c.d_ff && is_permutation(p.order)));
    for (const auto& p : lp.heads) CHECK((p.size() == c.d_head() && is_permutation(p.order)));
    CHECK(plan_layer_pog(w.layers[0], c.n_heads, 16, 2).experts[2].order == lp.experts[2].order);

    const LayerPlans one = plan_layer_pog(w.layers[0], 1, 16, 2);
    REQUIRE(one.heads.size() == 1);
    CHECK(one.heads[0].size() == c.d_model);
    CHECK_THROWS_AS(plan_layer_pog(w.layers[0], c.n_heads, 24, 2), ShapeError);
}

TEST_CASE("fold_pog preserves the forward pass") {
    ModelConfig c;
    c.seed = 8;
    const ModelWeights w = generate_synthetic_model(c);
    const Matrix x = generate_calibration(c, 64);
    const Matrix ref = forward(w, x).hidden;

    Rng rng(1);
    std::vector<LayerPlans> random_plans(c.layers), identity(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) {
        for (std::size_t e = 0; e < c.experts; ++e) {
            random_plans[l].experts.push_back({random_order(c.d_ff, rng), 16, 2});
            identity[l].experts.push_back({identity_order(c.d_ff), 16, 2});
        }
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            random_plans[l].heads.push_back({random_order(c.d_head(), rng), 16, 2});
            identity[l].heads.push_back({identity_order(c.d_head()), 16, 2});
        }
    }
    const ModelWeights same = fold_pog(w, identity);
    CHECK(same.layers[1].experts[0].gate == w.layers[1].experts[0].gate);
    CHECK(same.layers[1].wo == w.layers[1].wo);

    const ModelWeights folded = fold_pog(w, random_plans);
    CHECK(folded.has_stage("pog"));
    CHECK(mat_rel_err(forward(folded, x).hidden, ref) < 1e-9);
    CHECK_THROWS_AS(fold_pog(folded, random_plans), StageError);

    std::vector<LayerPlans> planned;
    for (const auto& L : w.layers) planned.push_back(plan_layer_pog(L, c.n_heads, 16, 2));
    CHECK(mat_rel_err(forward(fold_pog(w, planned), x).hidden, ref) < 1e-9);

    // Permuting gate without up breaks the elementwise product.
    ModelWeights broken = folded;
    for (std::size_t l = 0; l < c.layers; ++l)
        for (std::size_t e = 0; e < c.experts; ++e) broken.layers[l].experts[e].up = w.layers[l].experts[e].up;
    CHECK(mat_rel_err(forward(broken, x).hidden, ref) > 1e-3);

    std::vector<LayerPlans> short_plans(random_plans.begin(), random_plans.begin() + 1);
    CHECK_THROWS_AS(fold_pog(w, short_plans), ShapeError);
}
