#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "codequant/codebook.hpp"
#include "codequant/linalg.hpp"
#include "codequant/model.hpp"

namespace codequant {

struct ACCFConfig {
    std::size_t iterations = 64;
    std::size_t calib_tokens = 512;
    double lambda = 1.0;
    // Adam learning rate in units of the site's weight RMS.
    double step = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t reassign_every = 1;
    std::size_t k = 16;
    std::size_t group = 0;  // 0 = whole row
    std::size_t kmeans_iters = 25;
    double kmeans_tol = 1e-6;
    std::uint64_t seed = 0;
};

// Row-wise 1-D k-means on an output-row-major matrix (rows = output channels).
// Every (row, group) draws from its own substream of `rng`.
Codebook kmeans_init(const Matrix& w_rows, std::size_t group, std::size_t k, const Rng& rng,
                     std::size_t max_iters = 25, double tol = 1e-6);

// ‖W − reconstruct(cb)‖² for an output-row-major W.
double codebook_error(const Matrix& w_rows, const Codebook& cb);

// Dense x·W weight represented by a codebook over its transpose.
Matrix dense_weight(const Codebook& cb);

// ‖X·W − X̃·W_c‖² with W dense (d_in x d_out).
double accf_loss_local(const Matrix& x, const Matrix& x_tilde, const Matrix& w, const Codebook& cb);

// Sums a gradient with respect to the dense W_c (d_in x d_out) into the
// centroid slots it is assigned to. Result is laid out like cb.centroids.
std::vector<double> centroid_gradient(const Codebook& cb, const Matrix& grad_dense);

std::vector<double> accf_grad_local(const Matrix& x, const Matrix& x_tilde, const Matrix& w, const Codebook& cb);

// Calibration data for one MoE block. Selection and routing weights come from
// the quantized-upstream trace and are held fixed.
struct MoEBlockCalib {
    Matrix x_tilde;       // N x d_model, input of gate/up
    Matrix y;             // reference routed sum from the full-precision model
    Matrix probs_ref;     // Π
    Matrix probs_quant;   // Π̃
    std::vector<std::vector<std::uint32_t>> selected;
    Matrix routing_weights;
};

struct ExpertCodebooks {
    Codebook gate, up, down;
};

// Mean over tokens of KL(p_quant ‖ p_ref). Throws NumericError when a row is
// not a probability vector.
double mean_kl(const Matrix& probs_quant, const Matrix& probs_ref);

double accf_loss_moe(const MoEBlockCalib& calib, const std::vector<ExpertCodebooks>& cbs, double lambda);

// Centroid gradients of accf_loss_moe, per expert: gate, up, down.
std::vector<std::array<std::vector<double>, 3>> accf_grad_moe(const MoEBlockCalib& calib,
                                                              const std::vector<ExpertCodebooks>& cbs);

struct AssignmentScales {
    std::vector<double> d1;  // Σ_t X̃[t,j]²
    std::vector<double> d2;  // Σ_t X̃[t,j]·X[t,j]
};

AssignmentScales assignment_scales(const Matrix& x_tilde, const Matrix& x);

// A[i,j] = argmin_k (D1_j·C[i,grp,k] − D2_j·W[i,j])², ties to the lower k.
// Columns with D1_j == 0 fall back to the nearest centroid.
void reassign(const Matrix& w_rows, Codebook& cb, const AssignmentScales& scales);

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
};

// One Adam step on the centroids with assignments fixed.
void centroid_step(Codebook& cb, const std::vector<double>& grad, AdamState& state, double lr, double beta1,
                   double beta2);

struct SiteCalibResult {
    std::string name;
    std::vector<double> losses;  // losses[0] is the k-means initialization
    std::size_t best_iteration = 0;

    double initial_loss() const { return losses.front(); }
    double best_loss() const { return losses.at(best_iteration); }
};

// Local-objective calibration of one site. Returns the lowest-loss iterate.
Codebook calibrate_site(const std::string& name, const Matrix& w, const Matrix& x, const Matrix& x_tilde,
                        const ACCFConfig& cfg, SiteCalibResult* report = nullptr);

// Joint calibration of all experts' gate/up/down against the MoE objective.
// `layer` holds the unclustered weights, `x` the clean gate/up input.
std::vector<ExpertCodebooks> calibrate_moe_block(const std::string& name, const DecoderLayerWeights& layer,
                                                 const Matrix& x, const MoEBlockCalib& calib,
                                                 const ACCFConfig& cfg, const std::optional<ActivationQuant>& quant,
                                                 SiteCalibResult* report = nullptr);

struct CalibrationReport {
    std::vector<SiteCalibResult> sites;
};

// Clusters every linear weight except the router, front to back. `x` is the
// calibration input in the model's frame.
ModelWeights calibrate_model(const ModelWeights& w, const Matrix& x, const ACCFConfig& cfg,
                             const std::optional<ActivationQuant>& quant, CalibrationReport* report = nullptr);

// k-means codebooks for the same sites, no fine-tuning.
ModelWeights kmeans_model(const ModelWeights& w, const ACCFConfig& cfg);

}  // namespace codequant
