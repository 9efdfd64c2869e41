#include "tcclab/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace tcclab {

NoiseSchedule build_schedule(std::size_t t_train, double beta_start, double beta_end,
                             std::size_t n_steps) {
    if (t_train == 0) throw std::invalid_argument("schedule: t_train must be positive");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start < beta_end)) {
        throw std::invalid_argument("schedule: betas must satisfy 0 < beta_start < beta_end < 1");
    }
    if (n_steps == 0 || n_steps > t_train) {
        throw std::invalid_argument("schedule: n_steps must be in [1, t_train]");
    }

    NoiseSchedule s;
    s.t_train = t_train;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.alpha_bar.resize(t_train);
    double acc = 1.0;
    for (std::size_t i = 0; i < t_train; ++i) {
        const double beta =
            t_train == 1 ? beta_start
                         : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                            static_cast<double>(t_train - 1);
        acc *= 1.0 - beta;
        s.alpha_bar[i] = acc;
    }

    // evenly spaced training indices over [0, t_train-1], visited from the
    // largest; spacing >= 1 keeps rounded values distinct
    s.sample_steps.resize(n_steps);
    if (n_steps == 1) {
        s.sample_steps[0] = t_train - 1;
    } else {
        for (std::size_t j = 0; j < n_steps; ++j) {
            const double pos = static_cast<double>(n_steps - 1 - j) *
                               static_cast<double>(t_train - 1) / static_cast<double>(n_steps - 1);
            s.sample_steps[j] = static_cast<std::size_t>(std::llround(pos));
        }
    }
    return s;
}

Matrix ddim_step(const Matrix& x_t, const Matrix& eps_pred, double abar_t, double abar_prev) {
    if (!x_t.same_shape(eps_pred)) throw std::invalid_argument("ddim_step: shape mismatch");
    if (!(abar_t > 0.0) || abar_t > 1.0 || !(abar_prev > 0.0) || abar_prev > 1.0) {
        throw std::invalid_argument("ddim_step: cumulative alphas must lie in (0, 1]");
    }
    if (!x_t.all_finite() || !eps_pred.all_finite()) {
        throw std::invalid_argument("ddim_step: non-finite input");
    }

    const double sqrt_abar_t = std::sqrt(abar_t);
    const double sqrt_one_minus_t = std::sqrt(1.0 - abar_t);
    const double sqrt_abar_prev = std::sqrt(abar_prev);
    const double sqrt_one_minus_prev = std::sqrt(1.0 - abar_prev);

    Matrix out(x_t.rows, x_t.cols);
    for (std::size_t i = 0; i < x_t.data.size(); ++i) {
        const double x0_hat = (x_t.data[i] - sqrt_one_minus_t * eps_pred.data[i]) / sqrt_abar_t;
        out.data[i] = sqrt_abar_prev * x0_hat + sqrt_one_minus_prev * eps_pred.data[i];
    }
    return out;
}

LatentState init_latent(SeededRng& rng, const DenoiserConfig& cfg, int condition_id) {
    if (condition_id < 0 || static_cast<std::size_t>(condition_id) >= cfg.n_conditions) {
        throw std::invalid_argument("init_latent: condition out of range");
    }
    LatentState state;
    state.condition_id = condition_id;
    state.x = Matrix(cfg.n_tokens, cfg.d_model);
    for (std::size_t i = 0; i < state.x.data.size(); ++i) state.x.data[i] = rng.next_normal();
    return state;
}

}  // namespace tcclab
