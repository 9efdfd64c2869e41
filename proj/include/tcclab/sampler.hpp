#pragma once

#include <cstddef>
#include <vector>

#include "tcclab/denoiser.hpp"
#include "tcclab/matrix.hpp"
#include "tcclab/rng.hpp"

namespace tcclab {

// Linear-beta diffusion schedule plus the strictly decreasing list of training
// timesteps visited during sampling. sample_steps[0] is the largest training
// index (visited first); the position p entry is the step with reverse step
// index n_steps()-1-p.
struct NoiseSchedule {
    std::size_t t_train = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> alpha_bar;          // length t_train, strictly decreasing
    std::vector<std::size_t> sample_steps;  // strictly decreasing, includes t_train-1

    std::size_t n_steps() const { return sample_steps.size(); }

    // cumulative alpha at sampling position p (0 = first reverse step)
    double abar_at(std::size_t pos) const { return alpha_bar[sample_steps[pos]]; }

    // cumulative alpha of the step after position p; 1.0 past the end (the
    // final update maps straight to the x0 estimate)
    double abar_after(std::size_t pos) const {
        return pos + 1 < sample_steps.size() ? alpha_bar[sample_steps[pos + 1]] : 1.0;
    }
};

NoiseSchedule build_schedule(std::size_t t_train, double beta_start, double beta_end,
                             std::size_t n_steps);

// Deterministic DDIM update (eta = 0), elementwise:
//   x0_hat  = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
//   x_prev  = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps
Matrix ddim_step(const Matrix& x_t, const Matrix& eps_pred, double abar_t, double abar_prev);

// Standard normal latent of the model's token grid, drawn row by row.
LatentState init_latent(SeededRng& rng, const DenoiserConfig& cfg, int condition_id);

}  // namespace tcclab
