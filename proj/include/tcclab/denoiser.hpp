#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "tcclab/matrix.hpp"

namespace tcclab {

enum class ModuleKind : std::uint8_t { Attention = 0, Mlp = 1 };

// One cacheable module instance: (reverse denoising step, layer, module).
struct SiteId {
    int step_index = 0;  // reverse index, T_steps-1 ... 0
    int layer = 0;
    ModuleKind kind = ModuleKind::Attention;
    auto operator<=>(const SiteId&) const = default;
};

// Module output before its residual addition, as consumed by the forward pass.
struct SiteTap {
    SiteId site;
    Matrix value;
};

struct DenoiserConfig {
    std::size_t d_model = 32;
    std::size_t n_layers = 6;
    std::size_t n_tokens = 16;
    std::size_t n_heads = 4;  // must divide d_model
    std::size_t d_mlp = 64;
    std::size_t n_conditions = 8;
    std::uint64_t weight_seed = 0x7cc5eedULL;

    bool operator==(const DenoiserConfig&) const = default;
};

struct LatentState {
    Matrix x;  // n_tokens x d_model
    int condition_id = 0;
};

struct ForwardResult {
    Matrix eps_pred;  // n_tokens x d_model
    std::vector<SiteTap> taps;
};

// Supplies the value consumed at a site, given the incoming residual stream.
// Used by cache-side runs to substitute (possibly calibrated) cached outputs;
// a null provider means "compute every module fresh".
using SiteValueProvider = std::function<Matrix(const SiteId&, const Matrix& incoming)>;

// Deterministic toy diffusion transformer: pre-norm self-attention and
// two-layer GELU MLP blocks over a fixed token grid, with additive timestep
// and condition embeddings injected before block 0. All weights are drawn
// uniformly from [-1/sqrt(d_model), +1/sqrt(d_model)] out of
// SeededRng(weight_seed) in one documented order, so construction is bitwise
// reproducible.
class Denoiser {
public:
    explicit Denoiser(const DenoiserConfig& cfg);

    const DenoiserConfig& config() const { return cfg_; }

    // Full forward pass. `overrides` (optional) maps sites of THIS step to
    // values consumed in place of the fresh module computation; a key with a
    // different step_index or an out-of-range layer throws "site/step
    // mismatch". Taps report the value actually consumed (fresh or
    // overridden) at each requested site of this step.
    ForwardResult forward(const LatentState& state, int step_index,
                          const std::map<SiteId, Matrix>* overrides = nullptr,
                          const std::vector<SiteId>* tap_request = nullptr) const;

    // General form: the provider decides what each site consumes.
    ForwardResult forward_with_provider(const LatentState& state, int step_index,
                                        const SiteValueProvider* provider,
                                        const std::vector<SiteId>* tap_request) const;

    // Fresh module computation at one site given the incoming residual
    // stream (pre-norm input). This is the exact function the forward pass
    // itself uses, so externally computed fresh values are bitwise identical
    // to internal ones.
    Matrix module_output(std::size_t layer, ModuleKind kind, const Matrix& h_in) const;

private:
    struct LayerWeights {
        Matrix wq, wk, wv, wo;      // d_model x d_model
        Matrix w1;                  // d_model x d_mlp
        std::vector<double> b1;     // d_mlp
        Matrix w2;                  // d_mlp x d_model
        std::vector<double> b2;     // d_model
    };

    Matrix attention(const LayerWeights& lw, const Matrix& x) const;
    Matrix mlp(const LayerWeights& lw, const Matrix& x) const;
    std::vector<double> timestep_embedding(int step_index) const;

    DenoiserConfig cfg_;
    Matrix cond_embed_;  // n_conditions x d_model
    Matrix time_proj_;   // d_model x d_model, applied to the sinusoidal features
    Matrix out_proj_;    // d_model x d_model, final eps head
    std::vector<LayerWeights> layers_;
};

Denoiser build_denoiser(const DenoiserConfig& cfg);

// All (layer, module) sites of one step in forward order: layer ascending,
// attention before MLP.
std::vector<SiteId> all_sites_of_step(int step_index, std::size_t n_layers);

}  // namespace tcclab
