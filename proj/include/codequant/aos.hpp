#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "codequant/linalg.hpp"
#include "codequant/model.hpp"

namespace codequant {

// Cayley parameterization: S = (M - Mᵀ)/2, R = (I - S)(I + S)^-1.
struct RotationParams {
    Matrix m;

    Matrix skew() const;
    Matrix rotation() const;
};

enum class RotationInit { identity, random };

struct AOSConfig {
    std::size_t iterations = 128;
    std::size_t calib_tokens = 1024;
    int bits = 4;
    double step = 0.5;  // on the per-row mean gradient of RMS-normalized rows
    double momentum = 0.9;
    RotationInit init = RotationInit::random;
    std::uint64_t seed = 0;
};

Matrix skew_part(const Matrix& m);
Matrix cayley(const Matrix& m);

// ‖XR − Q(XR)‖²_F with per-token symmetric quantization.
double aos_loss(const Matrix& rotation, const Matrix& x, int bits);

// Gradient with respect to M of f(M) = ‖X·cayley(M) − T‖²_F for a fixed target T.
Matrix cayley_target_grad(const Matrix& m, const Matrix& x, const Matrix& target);

// Chain rule through the Cayley map: given ∂f/∂R, returns ∂f/∂M.
Matrix cayley_backward(const Matrix& m, const Matrix& grad_r);

// Gradient of the rotated-activation quantization loss with the quantized
// tensor held at its current value: T = Q(X·cayley(M)).
Matrix aos_grad(const Matrix& m, const Matrix& x, int bits);

// Gradient used by the optimizer: rounding is passed straight through, so the
// only path left runs through each token's dynamic scale s_t = max|x_t|/qmax.
// Equals the exact gradient of Σ_t c_t·s_t(X·cayley(M))² with
// c_t = ‖x_t − Q(x_t)‖²/s_t² held at its current value.
Matrix aos_grad_scale(const Matrix& m, const Matrix& x, int bits);

// The surrogate whose gradient aos_grad_scale returns, for fixed weights c_t.
double aos_scale_surrogate(const Matrix& rotation, const Matrix& x, int bits, const std::vector<double>& weights);
std::vector<double> aos_scale_weights(const Matrix& rotation, const Matrix& x, int bits);

// Parameter M whose Cayley image is the given rotation. The rotation must have
// determinant +1 and no eigenvalue at -1.
Matrix cayley_inverse(const Matrix& rotation);

// Random orthogonal matrix with determinant +1.
Matrix random_rotation(std::size_t d, Rng& rng);

// Starting M for the configured initialization.
Matrix initial_parameters(std::size_t d, const AOSConfig& cfg);

struct AOSResult {
    RotationParams params;   // lowest-loss iterate
    Matrix rotation;         // cayley(params.m)
    std::vector<double> losses;  // losses[0] is the initialization
    std::size_t best_iteration = 0;
};

// Momentum descent on M over the full calibration batch. Returns the iterate
// with the lowest recorded loss. Throws NumericError naming the iteration when
// the loss becomes non-finite.
AOSResult optimize_rotation(const Matrix& x_calib, const AOSConfig& cfg);

// Rows of the normalized activations that feed the residual-stream sites
// (attention input and MoE input of every layer), stacked layer by layer.
Matrix residual_site_activations(const ModelWeights& w, const Matrix& x);

// Absorbs the RMSNorm gains into the linears that consume the normed stream.
ModelWeights fold_norm_gains(const ModelWeights& w);

// Folds a residual-stream rotation: inputs-side weights become RᵀW and
// output-side weights become WR. The folded model maps XR to H·R.
ModelWeights fold_rotation(const ModelWeights& w, const Matrix& rotation);

}  // namespace codequant
