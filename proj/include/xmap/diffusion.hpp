#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xmap/mapper.hpp"
#include "xmap/rng.hpp"
#include "xmap/tensor.hpp"

namespace xmap::diffusion {

// Cumulative signal-retention coefficients of the forward process.
// alpha_bar has T+1 entries (index 0..T, alpha_bar[0] == 1 exactly);
// beta[t] for t in 1..T is clipped to <= 0.999 and alpha_bar is rebuilt
// from the clipped betas, which keeps alpha_bar[T] strictly positive.
struct NoiseSchedule {
    int total_steps = 1000;
    double offset = 0.008;
    std::vector<double> alpha_bar; // T+1
    std::vector<double> beta;      // T+1, beta[0] unused

    double alpha_bar_at(int t) const;
};

NoiseSchedule cosine_schedule(int total_steps, double s = 0.008);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t in [1, T]
std::vector<double> q_sample(std::span<const double> x0, int t, std::span<const double> eps,
                             const NoiseSchedule& schedule);

struct SamplerConfig {
    int inference_steps = 200;
    double guidance_scale = 0.9;
    bool stochastic = false;      // ancestral noise on strided steps
    std::uint64_t seed = 0;
    bool renormalize = true;      // L2-normalize sampled embeddings

    void validate(const NoiseSchedule& schedule) const;
};

// Per-batch training draws: timestep (schedule step in [1, T]), noise, and
// the classifier-free-guidance condition dropout mask.
struct BatchDraws {
    std::vector<int> timesteps;
    ad::Tensor eps;
    std::vector<std::uint8_t> drop;
};

BatchDraws draw_batch(int batch, int dim, const NoiseSchedule& schedule, double drop_rate,
                      rng::Stream& stream);

// Training objective graph: mean over the batch of the squared L2 distance
// between the clean target and the model's x0 prediction.
ad::Value diffusion_loss_graph(ad::Tape& tape, model::ParamBinding& bind,
                               const model::MapperConfig& config, const BatchDraws& draws,
                               const ad::Tensor& targets, const ad::Tensor& conds,
                               const NoiseSchedule& schedule);

// Draws one batch worth of (t, eps, dropout) and evaluates the objective.
double diffusion_loss(const model::MapperParams& params, const model::MapperConfig& config,
                      const ad::Tensor& conds, const ad::Tensor& targets,
                      const NoiseSchedule& schedule, double drop_rate, rng::Stream& stream);

// x0-space classifier-free guidance: null + w * (cond - null).
std::vector<double> guided_combine(std::span<const double> pred_cond,
                                   std::span<const double> pred_null, double w);

ad::Tensor guided_predict_batch(const model::MapperParams& params,
                                const model::MapperConfig& config, const ad::Tensor& x_t, int t,
                                const ad::Tensor& conds, double w);

std::vector<double> guided_predict(const model::MapperParams& params,
                                   const model::MapperConfig& config,
                                   std::span<const double> x_t, int t,
                                   std::span<const double> cond, double w);

// One strided DDIM-style update from (x_t, predicted x0) to x_{t_prev}.
// sigma = 0 gives the deterministic update; the final step (t_prev = 0)
// returns x0 exactly. z supplies the ancestral noise when sigma > 0.
std::vector<double> ddim_update(std::span<const double> x_t, std::span<const double> x0,
                                double alpha_bar_t, double alpha_bar_prev, double sigma,
                                std::span<const double> z);

std::vector<double> posterior_step(std::span<const double> x_t, std::span<const double> x0,
                                   int t, int t_prev, const NoiseSchedule& schedule,
                                   rng::Stream* stream, bool stochastic);

// Evenly strided descending timesteps tau_0 = T > ... > tau_S = 0.
std::vector<int> sampling_timesteps(int total_steps, int inference_steps);

// Reverse process: start from standard normal x_T and iterate guided
// prediction + posterior steps down the strided schedule. Each row of
// `conds` samples independently with its own stream derived from
// (config.seed, row), so results do not depend on batch composition.
ad::Tensor sample_batch(const model::MapperParams& params, const model::MapperConfig& config,
                        const ad::Tensor& conds, const NoiseSchedule& schedule,
                        const SamplerConfig& sampler);

std::vector<double> sample(const model::MapperParams& params, const model::MapperConfig& config,
                           std::span<const double> cond, const NoiseSchedule& schedule,
                           const SamplerConfig& sampler);

} // namespace xmap::diffusion
