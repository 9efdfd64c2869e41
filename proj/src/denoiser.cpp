#include "tcclab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tcclab/rng.hpp"

namespace tcclab {

namespace {

void validate_config(const DenoiserConfig& cfg) {
    if (cfg.d_model == 0 || cfg.n_layers == 0 || cfg.n_tokens == 0 || cfg.n_heads == 0 ||
        cfg.d_mlp == 0 || cfg.n_conditions == 0) {
        throw std::invalid_argument("denoiser config: all dimensions must be positive");
    }
    if (cfg.d_model % cfg.n_heads != 0) {
        throw std::invalid_argument("denoiser config: d_model must be divisible by n_heads");
    }
}

Matrix draw_matrix(SeededRng& rng, std::size_t rows, std::size_t cols, double bound) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.next_uniform(-bound, bound);
    return m;
}

std::vector<double> draw_vector(SeededRng& rng, std::size_t n, double bound) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_uniform(-bound, bound);
    return v;
}

// Per-row layer norm without learned affine parameters.
Matrix layer_norm(const Matrix& x) {
    const double eps = 1e-5;
    Matrix out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < x.cols; ++c) mean += x(r, c);
        mean /= static_cast<double>(x.cols);
        double var = 0.0;
        for (std::size_t c = 0; c < x.cols; ++c) {
            const double d = x(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(x.cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < x.cols; ++c) out(r, c) = (x(r, c) - mean) * inv;
    }
    return out;
}

double gelu(double x) {
    // tanh approximation
    const double k = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
    validate_config(cfg);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    SeededRng rng(cfg.weight_seed);

    // fixed draw order: condition table, time projection, output head, then
    // per layer wq, wk, wv, wo, w1, b1, w2, b2
    cond_embed_ = draw_matrix(rng, cfg.n_conditions, cfg.d_model, bound);
    time_proj_ = draw_matrix(rng, cfg.d_model, cfg.d_model, bound);
    out_proj_ = draw_matrix(rng, cfg.d_model, cfg.d_model, bound);
    layers_.reserve(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = draw_matrix(rng, cfg.d_model, cfg.d_model, bound);
        lw.wk = draw_matrix(rng, cfg.d_model, cfg.d_model, bound);
        lw.wv = draw_matrix(rng, cfg.d_model, cfg.d_model, bound);
        lw.wo = draw_matrix(rng, cfg.d_model, cfg.d_model, bound);
        lw.w1 = draw_matrix(rng, cfg.d_model, cfg.d_mlp, bound);
        lw.b1 = draw_vector(rng, cfg.d_mlp, bound);
        lw.w2 = draw_matrix(rng, cfg.d_mlp, cfg.d_model, bound);
        lw.b2 = draw_vector(rng, cfg.d_model, bound);
        layers_.push_back(std::move(lw));
    }
}

Denoiser build_denoiser(const DenoiserConfig& cfg) { return Denoiser(cfg); }

std::vector<double> Denoiser::timestep_embedding(int step_index) const {
    // sinusoidal features of the reverse step index (the step's time
    // variable), mapped through the seeded linear projection
    const std::size_t d = cfg_.d_model;
    std::vector<double> feat(d, 0.0);
    const double t = static_cast<double>(step_index);
    for (std::size_t i = 0; 2 * i < d; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(2 * i) / static_cast<double>(d));
        feat[2 * i] = std::sin(t * freq);
        if (2 * i + 1 < d) feat[2 * i + 1] = std::cos(t * freq);
    }
    std::vector<double> emb(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += feat[k] * time_proj_(k, j);
        emb[j] = acc;
    }
    return emb;
}

Matrix Denoiser::attention(const LayerWeights& lw, const Matrix& x_in) const {
    const std::size_t t = cfg_.n_tokens;
    const std::size_t d = cfg_.d_model;
    const std::size_t heads = cfg_.n_heads;
    const std::size_t dh = d / heads;

    const Matrix x = layer_norm(x_in);
    const Matrix q = matmul(x, lw.wq);
    const Matrix k = matmul(x, lw.wk);
    const Matrix v = matmul(x, lw.wv);

    Matrix concat(t, d, 0.0);
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < t; ++i) {
            // one softmax row over all keys, with max subtraction
            std::vector<double> scores(t, 0.0);
            double row_max = -1e300;
            for (std::size_t j = 0; j < t; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += q(i, off + c) * k(j, off + c);
                scores[j] = acc * inv_scale;
                row_max = std::max(row_max, scores[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < t; ++j) {
                scores[j] = std::exp(scores[j] - row_max);
                denom += scores[j];
            }
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < t; ++j) acc += scores[j] * v(j, off + c);
                concat(i, off + c) = acc / denom;
            }
        }
    }
    return matmul(concat, lw.wo);
}

Matrix Denoiser::mlp(const LayerWeights& lw, const Matrix& x_in) const {
    const Matrix x = layer_norm(x_in);
    Matrix hidden = matmul(x, lw.w1);
    for (std::size_t r = 0; r < hidden.rows; ++r) {
        for (std::size_t c = 0; c < hidden.cols; ++c) hidden(r, c) = gelu(hidden(r, c) + lw.b1[c]);
    }
    Matrix out = matmul(hidden, lw.w2);
    for (std::size_t r = 0; r < out.rows; ++r) {
        for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += lw.b2[c];
    }
    return out;
}

Matrix Denoiser::module_output(std::size_t layer, ModuleKind kind, const Matrix& h_in) const {
    if (layer >= cfg_.n_layers) throw std::invalid_argument("module_output: layer out of range");
    if (h_in.rows != cfg_.n_tokens || h_in.cols != cfg_.d_model) {
        throw std::invalid_argument("module_output: shape mismatch");
    }
    return kind == ModuleKind::Attention ? attention(layers_[layer], h_in) : mlp(layers_[layer], h_in);
}

ForwardResult Denoiser::forward_with_provider(const LatentState& state, int step_index,
                                              const SiteValueProvider* provider,
                                              const std::vector<SiteId>* tap_request) const {
    if (state.x.rows != cfg_.n_tokens || state.x.cols != cfg_.d_model) {
        throw std::invalid_argument("forward: latent shape mismatch");
    }
    if (state.condition_id < 0 || static_cast<std::size_t>(state.condition_id) >= cfg_.n_conditions) {
        throw std::invalid_argument("forward: condition out of range");
    }
    if (!state.x.all_finite()) throw std::invalid_argument("forward: non-finite latent");

    ForwardResult result;
    const auto tapped = [&](const SiteId& site) {
        if (tap_request == nullptr) return false;
        return std::find(tap_request->begin(), tap_request->end(), site) != tap_request->end();
    };

    Matrix h = state.x;
    const std::vector<double> t_emb = timestep_embedding(step_index);
    for (std::size_t r = 0; r < h.rows; ++r) {
        for (std::size_t c = 0; c < h.cols; ++c) {
            h(r, c) += t_emb[c] + cond_embed_(static_cast<std::size_t>(state.condition_id), c);
        }
    }

    for (std::size_t layer = 0; layer < cfg_.n_layers; ++layer) {
        for (ModuleKind kind : {ModuleKind::Attention, ModuleKind::Mlp}) {
            const SiteId site{step_index, static_cast<int>(layer), kind};
            Matrix consumed = provider != nullptr ? (*provider)(site, h) : module_output(layer, kind, h);
            if (consumed.rows != cfg_.n_tokens || consumed.cols != cfg_.d_model) {
                throw std::invalid_argument("forward: provided site value has wrong shape");
            }
            if (tapped(site)) result.taps.push_back({site, consumed});
            h = h + consumed;
        }
    }
    result.eps_pred = matmul(h, out_proj_);
    return result;
}

ForwardResult Denoiser::forward(const LatentState& state, int step_index,
                                const std::map<SiteId, Matrix>* overrides,
                                const std::vector<SiteId>* tap_request) const {
    if (overrides != nullptr) {
        for (const auto& [site, value] : *overrides) {
            if (site.step_index != step_index || site.layer < 0 ||
                static_cast<std::size_t>(site.layer) >= cfg_.n_layers) {
                throw std::invalid_argument("forward: site/step mismatch");
            }
            if (value.rows != cfg_.n_tokens || value.cols != cfg_.d_model) {
                throw std::invalid_argument("forward: override shape mismatch");
            }
        }
    }
    if (overrides == nullptr || overrides->empty()) {
        return forward_with_provider(state, step_index, nullptr, tap_request);
    }
    const SiteValueProvider provider = [&](const SiteId& site, const Matrix& incoming) {
        const auto it = overrides->find(site);
        if (it != overrides->end()) return it->second;
        return module_output(static_cast<std::size_t>(site.layer), site.kind, incoming);
    };
    return forward_with_provider(state, step_index, &provider, tap_request);
}

std::vector<SiteId> all_sites_of_step(int step_index, std::size_t n_layers) {
    std::vector<SiteId> sites;
    sites.reserve(n_layers * 2);
    for (std::size_t l = 0; l < n_layers; ++l) {
        sites.push_back({step_index, static_cast<int>(l), ModuleKind::Attention});
        sites.push_back({step_index, static_cast<int>(l), ModuleKind::Mlp});
    }
    return sites;
}

}  // namespace tcclab
