#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "codequant/codebook.hpp"
#include "codequant/linalg.hpp"
#include "codequant/quant.hpp"

namespace codequant {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 2;
    std::size_t d_ff = 128;
    std::size_t experts = 4;
    std::size_t top_k = 2;
    std::size_t layers = 2;
    std::size_t calib_tokens = 512;
    std::uint64_t seed = 0;

    std::size_t d_head() const { return d_model / n_heads; }
    // Throws ConfigError on inconsistent dimensions.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Linear sites of a decoder layer, in forward order.
enum class Site : std::uint8_t { q, k, v, out, router, gate, up, down };
inline constexpr std::array<Site, 8> kAllSites = {Site::q,      Site::k,    Site::v,  Site::out,
                                                   Site::router, Site::gate, Site::up, Site::down};
std::string_view site_name(Site s);

class SiteMask {
public:
    constexpr SiteMask() = default;
    static constexpr SiteMask all() { return SiteMask(0xFF); }
    static constexpr SiteMask none() { return SiteMask(0); }
    constexpr bool contains(Site s) const { return (bits_ >> static_cast<int>(s)) & 1U; }
    constexpr SiteMask with(Site s) const { return SiteMask(static_cast<std::uint8_t>(bits_ | (1U << static_cast<int>(s)))); }
    constexpr SiteMask without(Site s) const { return SiteMask(static_cast<std::uint8_t>(bits_ & ~(1U << static_cast<int>(s)))); }

private:
    constexpr explicit SiteMask(std::uint8_t b) : bits_(b) {}
    std::uint8_t bits_ = 0;
};

// Per-token fake quantization applied to the input of every listed site.
struct ActivationQuant {
    int bits = 4;
    SiteMask sites = SiteMask::all();
};

struct ExpertWeights {
    Matrix gate;  // d_model x d_ff
    Matrix up;    // d_model x d_ff
    Matrix down;  // d_ff x d_model
};

// All linear weights use the x·W convention: rows index the input dimension.
struct DecoderLayerWeights {
    std::vector<double> attn_norm;
    std::vector<double> mlp_norm;
    Matrix wq, wk, wv, wo;  // d_model x d_model
    Matrix router;          // d_model x experts
    std::vector<ExpertWeights> experts;
};

struct ModelWeights {
    ModelConfig config;
    std::vector<DecoderLayerWeights> layers;
    std::map<std::string, std::string> metadata;
    // Compressed forms, keyed by tensor name ("layer0.wq", "layer1.expert2.down").
    // Codebooks and RTN grids are laid out output-row-major (the transpose of
    // the dense weight); the dense weight is always kept equal to their
    // reconstruction.
    std::map<std::string, Codebook> codebooks;
    std::map<std::string, RtnWeights> rtn;
    // Residual-stream rotation folded into the weights, if any.
    std::optional<Matrix> rotation;

    bool has_stage(std::string_view stage) const;
    // Throws StageError when the stage is already recorded.
    void mark_stage(std::string_view stage);
};

std::string layer_tensor_name(std::size_t layer, std::string_view site);
std::string expert_tensor_name(std::size_t layer, std::size_t expert, std::string_view site);

// Names of every linear weight in forward order (router included).
std::vector<std::string> linear_weight_names(const ModelConfig& cfg);
Matrix& weight_by_name(ModelWeights& w, std::string_view name);
const Matrix& weight_by_name(const ModelWeights& w, std::string_view name);

struct SyntheticOptions {
    std::size_t outlier_channels = 4;
    double outlier_scale = 5.0;
};

// Gaussian weights with std 1/sqrt(d_model), rounded to single precision, with
// `outlier_channels` columns of every attention and expert matrix scaled by
// `outlier_scale`. The router is left unplanted. Scales much above 5 make the
// two-layer stack chaotic under 4-bit activations; see README.
ModelWeights generate_synthetic_model(const ModelConfig& cfg, const SyntheticOptions& opts = {});

struct CalibrationOptions {
    std::size_t hot_channels = 4;
    double hot_channel_scale = 10.0;
    double massive_row_fraction = 0.02;
    double massive_row_scale = 50.0;
};

// Residual-stream inputs: Gaussian base, a fixed set of high-magnitude channels
// (drawn from cfg.seed, so shared by every split) and a few massive rows.
// `split` selects an independent token stream: 0 = calibration, 1 = held-out.
Matrix generate_calibration(const ModelConfig& cfg, std::size_t n_tokens, std::uint64_t split = 0,
                            const CalibrationOptions& opts = {});

inline constexpr double kRmsNormEps = 1e-6;

std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gains);
double silu(double x);
std::vector<double> softmax(std::span<const double> v);

struct LayerTrace {
    Matrix input;
    // Matrix fed to each site (after fake quantization when enabled); the down
    // site is traced per expert in expert_hidden.
    std::array<Matrix, 7> site_inputs;
    Matrix router_logits;  // N x E
    Matrix router_probs;   // full softmax over all experts
    std::vector<std::vector<std::uint32_t>> selected;  // per token, by descending logit
    Matrix routing_weights;                            // N x top_k, aligned with selected
    std::vector<Matrix> expert_hidden;                 // N x d_ff per expert; zero rows if unrouted
    Matrix moe_out;                                    // routed weighted sum, before the residual add
    Matrix output;

    const Matrix& site_input(Site s) const { return site_inputs.at(static_cast<std::size_t>(s)); }
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;
    Matrix final_hidden;
};

struct ForwardOptions {
    bool trace = false;
    std::optional<ActivationQuant> quant;
};

struct ForwardResult {
    Matrix hidden;
    ActivationTrace trace;  // empty unless requested
};

ForwardResult forward(const ModelWeights& w, const Matrix& x, const ForwardOptions& opts = {});

// Top-k expert selection by logit, ties to the lower index. Returns ids in
// descending-logit order.
std::vector<std::uint32_t> select_top_k(std::span<const double> logits, std::size_t top_k);

// Binary container.
std::string serialize_model(const ModelWeights& w);
ModelWeights deserialize_model(std::string_view bytes);
void save_model(const ModelWeights& w, const std::string& path);
ModelWeights load_model(const std::string& path);

struct TensorInfo {
    std::string name;
    std::uint8_t dtype = 0;
    std::vector<std::uint64_t> dims;
    std::uint64_t payload_bytes = 0;
};
struct ContainerManifest {
    std::uint32_t version = 0;
    std::string config_text;
    std::vector<TensorInfo> tensors;
};
ContainerManifest read_manifest(std::string_view bytes);

}  // namespace codequant
