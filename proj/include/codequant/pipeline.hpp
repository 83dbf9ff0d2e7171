#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "codequant/accf.hpp"
#include "codequant/aos.hpp"
#include "codequant/model.hpp"
#include "codequant/pog.hpp"

namespace codequant {

enum class PipelineMode { codequant, rtn, random_rot_rtn, kmeans_only };
enum class Granularity { embedding_wise, block_wise };

std::string_view mode_name(PipelineMode m);

struct PipelineConfig {
    ModelConfig model;
    SyntheticOptions synthetic;
    PipelineMode mode = PipelineMode::codequant;
    Granularity granularity = Granularity::block_wise;
    std::size_t group = 16;
    int abits = 4;
    std::size_t k = 16;
    int wbits = 0;  // RTN weight bits; 0 = log2(k)
    AOSConfig aos;
    bool pog_enabled = false;
    std::size_t pog_g = 0;    // 0 = group
    std::size_t pog_gs = 0;   // 0 = pog group / 8
    ACCFConfig accf;
    std::size_t eval_tokens = 256;
    std::vector<std::uint64_t> eval_splits = {1};

    std::size_t weight_group() const { return granularity == Granularity::embedding_wise ? 0 : group; }
    int weight_bits() const;
    std::size_t pog_group() const { return pog_g == 0 ? group : pog_g; }
    std::size_t pog_subgroup() const;

    // Throws ConfigError.
    void validate() const;
    // Sorted `key = value` lines covering every field.
    std::string to_text() const;
};

// Flat `key = value` text; '#' starts a comment. Unknown keys are errors.
PipelineConfig parse_pipeline_config(const std::string& text);
PipelineConfig load_pipeline_config(const std::string& path);

// |TopK_ref \ TopK_quant| / top_k averaged over tokens, one entry per layer.
std::vector<double> router_change_rate(const ActivationTrace& ref, const ActivationTrace& quant, std::size_t top_k);

double relative_error(const Matrix& ref, const Matrix& approx);
// Per-layer ‖out_q − out_ref‖/‖out_ref‖.
std::vector<double> layer_output_error(const ActivationTrace& ref, const ActivationTrace& quant);

struct SplitEval {
    std::uint64_t split = 0;
    std::vector<double> layer_error;
    double final_error = 0.0;
    std::vector<double> router_change;
    double mean_router_change = 0.0;
};

struct EvalReport {
    PipelineConfig config;
    std::vector<double> aos_losses;
    std::size_t aos_best_iteration = 0;
    double aos_heldout_before = 0.0;
    double aos_heldout_after = 0.0;
    std::vector<LayerPlans> pog_plans;
    CalibrationReport calibration;
    std::vector<SplitEval> evals;

    double final_error() const;
    double mean_router_change() const;
    std::string to_text() const;
};

struct PipelineResult {
    ModelWeights model;
    EvalReport report;
};

// Stages for the configured mode, from the synthetic model of cfg.model.
ModelWeights compress_model(const ModelWeights& original, const PipelineConfig& cfg, EvalReport& report);

// Held-out evaluation of a compressed model against the full-precision one.
// The compressed model is fed X·R when it carries a rotation.
SplitEval evaluate(const ModelWeights& original, const ModelWeights& compressed, const Matrix& x, int abits);

PipelineResult run_pipeline(const PipelineConfig& cfg);

}  // namespace codequant
