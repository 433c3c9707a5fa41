#include "xmap/diffusion.hpp"

#include <cmath>

#include "xmap/embedding_io.hpp"

namespace xmap::diffusion {

namespace {

constexpr double kBetaMax = 0.999;

std::vector<int> table_indices(int t, int batch) {
    // schedule step t in [1, T] looks up table row t-1
    return std::vector<int>(static_cast<std::size_t>(batch), t - 1);
}

} // namespace

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t < 0 || t >= static_cast<int>(alpha_bar.size())) {
        throw ContractError("schedule: index " + std::to_string(t) + " outside [0, " +
                            std::to_string(alpha_bar.size() - 1) + "]");
    }
    return alpha_bar[static_cast<std::size_t>(t)];
}

NoiseSchedule cosine_schedule(int total_steps, double s) {
    if (total_steps < 1) throw ContractError("cosine_schedule: total_steps must be >= 1");
    if (s <= 0.0) throw ContractError("cosine_schedule: offset s must be positive");

    NoiseSchedule sched;
    sched.total_steps = total_steps;
    sched.offset = s;

    auto f = [&](double t) {
        double a = ((t / total_steps + s) / (1.0 + s)) * (M_PI / 2.0);
        double c = std::cos(a);
        return c * c;
    };

    std::vector<double> raw(static_cast<std::size_t>(total_steps) + 1);
    double f0 = f(0.0);
    for (int t = 0; t <= total_steps; ++t) raw[static_cast<std::size_t>(t)] = f(t) / f0;

    sched.beta.assign(static_cast<std::size_t>(total_steps) + 1, 0.0);
    sched.alpha_bar.assign(static_cast<std::size_t>(total_steps) + 1, 1.0);
    for (int t = 1; t <= total_steps; ++t) {
        double b = 1.0 - raw[static_cast<std::size_t>(t)] / raw[static_cast<std::size_t>(t) - 1];
        b = std::min(b, kBetaMax);
        sched.beta[static_cast<std::size_t>(t)] = b;
        sched.alpha_bar[static_cast<std::size_t>(t)] =
            sched.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - b);
    }
    return sched;
}

std::vector<double> q_sample(std::span<const double> x0, int t, std::span<const double> eps,
                             const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.total_steps) {
        throw ContractError("q_sample: timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(schedule.total_steps) + "]");
    }
    if (x0.size() != eps.size()) {
        throw ShapeError("q_sample: x0 length " + std::to_string(x0.size()) +
                         " vs eps length " + std::to_string(eps.size()));
    }
    double ab = schedule.alpha_bar_at(t);
    double sa = std::sqrt(ab);
    double sn = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sn * eps[i];
    return out;
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
    if (inference_steps < 1 || inference_steps > schedule.total_steps) {
        throw ContractError("sampler: inference_steps " + std::to_string(inference_steps) +
                            " outside [1, " + std::to_string(schedule.total_steps) + "]");
    }
    if (guidance_scale < 0.0) throw ContractError("sampler: guidance scale must be >= 0");
}

BatchDraws draw_batch(int batch, int dim, const NoiseSchedule& schedule, double drop_rate,
                      rng::Stream& stream) {
    if (batch < 1) throw ContractError("draw_batch: empty batch");
    if (drop_rate < 0.0 || drop_rate >= 1.0) {
        throw ContractError("draw_batch: drop rate must lie in [0, 1)");
    }
    BatchDraws draws;
    draws.timesteps.resize(static_cast<std::size_t>(batch));
    draws.eps = ad::Tensor(batch, dim);
    draws.drop.resize(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        draws.timesteps[static_cast<std::size_t>(i)] =
            static_cast<int>(stream.uniform_int(1, schedule.total_steps));
        for (int j = 0; j < dim; ++j) draws.eps.at(i, j) = stream.normal();
        draws.drop[static_cast<std::size_t>(i)] = stream.bernoulli(drop_rate) ? 1 : 0;
    }
    return draws;
}

ad::Value diffusion_loss_graph(ad::Tape& tape, model::ParamBinding& bind,
                               const model::MapperConfig& config, const BatchDraws& draws,
                               const ad::Tensor& targets, const ad::Tensor& conds,
                               const NoiseSchedule& schedule) {
    const int batch = targets.rows();
    if (batch < 1) throw ContractError("diffusion_loss: empty batch");
    if (!targets.same_shape(conds)) {
        throw ShapeError("diffusion_loss: targets " + targets.shape_str() + " vs conditions " +
                         conds.shape_str());
    }

    ad::Tensor noisy(batch, targets.cols());
    std::vector<int> indices(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        int t = draws.timesteps[static_cast<std::size_t>(i)];
        double ab = schedule.alpha_bar_at(t);
        double sa = std::sqrt(ab);
        double sn = std::sqrt(1.0 - ab);
        for (int j = 0; j < targets.cols(); ++j) {
            noisy.at(i, j) = sa * targets.at(i, j) + sn * draws.eps.at(i, j);
        }
        indices[static_cast<std::size_t>(i)] = t - 1;
    }

    ad::Value pred = model::forward_diffusion(tape, bind, config, indices, tape.constant(noisy),
                                              tape.constant(conds), &draws.drop);
    ad::Value diff = tape.sub(pred, tape.constant(targets));
    return tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / batch);
}

double diffusion_loss(const model::MapperParams& params, const model::MapperConfig& config,
                      const ad::Tensor& conds, const ad::Tensor& targets,
                      const NoiseSchedule& schedule, double drop_rate, rng::Stream& stream) {
    BatchDraws draws = draw_batch(targets.rows(), targets.cols(), schedule, drop_rate, stream);
    ad::Tape tape;
    model::ParamBinding bind(tape, params);
    return tape.value(diffusion_loss_graph(tape, bind, config, draws, targets, conds, schedule)).item();
}

std::vector<double> guided_combine(std::span<const double> pred_cond,
                                   std::span<const double> pred_null, double w) {
    if (w < 0.0) throw ContractError("guided_combine: guidance scale must be >= 0");
    if (pred_cond.size() != pred_null.size()) {
        throw ShapeError("guided_combine: prediction lengths differ");
    }
    std::vector<double> out(pred_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = pred_null[i] + w * (pred_cond[i] - pred_null[i]);
    }
    return out;
}

ad::Tensor guided_predict_batch(const model::MapperParams& params,
                                const model::MapperConfig& config, const ad::Tensor& x_t, int t,
                                const ad::Tensor& conds, double w) {
    if (w < 0.0) throw ContractError("guided_predict: guidance scale must be >= 0");
    std::vector<int> idx = table_indices(t, x_t.rows());
    ad::Tensor cond_pred = model::predict_diffusion(params, config, idx, x_t, conds, false);
    if (w == 1.0) return cond_pred;
    ad::Tensor null_pred = model::predict_diffusion(params, config, idx, x_t, conds, true);
    ad::Tensor out(x_t.rows(), x_t.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = null_pred[i] + w * (cond_pred[i] - null_pred[i]);
    }
    return out;
}

std::vector<double> guided_predict(const model::MapperParams& params,
                                   const model::MapperConfig& config,
                                   std::span<const double> x_t, int t,
                                   std::span<const double> cond, double w) {
    ad::Tensor xt(1, static_cast<int>(x_t.size()), {x_t.begin(), x_t.end()});
    ad::Tensor c(1, static_cast<int>(cond.size()), {cond.begin(), cond.end()});
    ad::Tensor out = guided_predict_batch(params, config, xt, t, c, w);
    return out.data();
}

std::vector<double> ddim_update(std::span<const double> x_t, std::span<const double> x0,
                                double alpha_bar_t, double alpha_bar_prev, double sigma,
                                std::span<const double> z) {
    if (x_t.size() != x0.size()) throw ShapeError("ddim_update: x_t and x0 lengths differ");
    double sa_t = std::sqrt(alpha_bar_t);
    double sn_t = std::sqrt(1.0 - alpha_bar_t);
    double sa_p = std::sqrt(alpha_bar_prev);
    double dir = std::sqrt(std::max(0.0, 1.0 - alpha_bar_prev - sigma * sigma));
    std::vector<double> out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double eps_hat = (x_t[i] - sa_t * x0[i]) / sn_t;
        out[i] = sa_p * x0[i] + dir * eps_hat;
        if (sigma > 0.0) out[i] += sigma * z[i];
    }
    return out;
}

std::vector<double> posterior_step(std::span<const double> x_t, std::span<const double> x0,
                                   int t, int t_prev, const NoiseSchedule& schedule,
                                   rng::Stream* stream, bool stochastic) {
    if (t_prev < 0 || t_prev >= t || t > schedule.total_steps) {
        throw ContractError("posterior_step: need 0 <= t_prev < t <= T, got t=" + std::to_string(t) +
                            " t_prev=" + std::to_string(t_prev));
    }
    if (t_prev == 0) return {x0.begin(), x0.end()};

    double ab_t = schedule.alpha_bar_at(t);
    double ab_p = schedule.alpha_bar_at(t_prev);
    double sigma = 0.0;
    std::vector<double> z;
    if (stochastic) {
        sigma = std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
        if (stream == nullptr) {
            throw ContractError("posterior_step: stochastic update needs a random stream");
        }
        z.resize(x_t.size());
        for (double& v : z) v = stream->normal();
    }
    return ddim_update(x_t, x0, ab_t, ab_p, sigma, z);
}

std::vector<int> sampling_timesteps(int total_steps, int inference_steps) {
    if (inference_steps < 1 || inference_steps > total_steps) {
        throw ContractError("sampling_timesteps: inference_steps " + std::to_string(inference_steps) +
                            " outside [1, " + std::to_string(total_steps) + "]");
    }
    std::vector<int> ts(static_cast<std::size_t>(inference_steps) + 1);
    for (int i = 0; i <= inference_steps; ++i) {
        ts[static_cast<std::size_t>(i)] = static_cast<int>(
            std::llround(static_cast<double>(total_steps) *
                         static_cast<double>(inference_steps - i) / inference_steps));
    }
    return ts;
}

ad::Tensor sample_batch(const model::MapperParams& params, const model::MapperConfig& config,
                        const ad::Tensor& conds, const NoiseSchedule& schedule,
                        const SamplerConfig& sampler) {
    if (!model::is_diffusion(config.variant)) {
        throw ContractError("sample: variant " + model::to_string(config.variant) +
                            " is not a diffusion mapper");
    }
    sampler.validate(schedule);
    const int batch = conds.rows();
    const int dim = conds.cols();

    std::vector<rng::Stream> streams;
    streams.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        streams.emplace_back(rng::derive(sampler.seed, "sample", static_cast<std::uint64_t>(i)));
    }

    ad::Tensor x(batch, dim);
    for (int i = 0; i < batch; ++i) {
        for (int j = 0; j < dim; ++j) x.at(i, j) = streams[static_cast<std::size_t>(i)].normal();
    }

    std::vector<int> ts = sampling_timesteps(schedule.total_steps, sampler.inference_steps);
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        int t = ts[k];
        int t_prev = ts[k + 1];
        ad::Tensor x0 = guided_predict_batch(params, config, x, t, conds, sampler.guidance_scale);
        for (int i = 0; i < batch; ++i) {
            auto row = posterior_step({x.row_ptr(i), static_cast<std::size_t>(dim)},
                                      {x0.row_ptr(i), static_cast<std::size_t>(dim)}, t, t_prev,
                                      schedule, &streams[static_cast<std::size_t>(i)],
                                      sampler.stochastic);
            std::copy(row.begin(), row.end(), x.row_ptr(i));
        }
    }

    if (sampler.renormalize) {
        for (int i = 0; i < batch; ++i) {
            std::span<const double> row{x.row_ptr(i), static_cast<std::size_t>(dim)};
            double norm = io::l2_norm(row);
            if (norm > 1e-12) {
                for (int j = 0; j < dim; ++j) x.at(i, j) /= norm;
            }
        }
    }
    return x;
}

std::vector<double> sample(const model::MapperParams& params, const model::MapperConfig& config,
                           std::span<const double> cond, const NoiseSchedule& schedule,
                           const SamplerConfig& sampler) {
    ad::Tensor c(1, static_cast<int>(cond.size()), {cond.begin(), cond.end()});
    return sample_batch(params, config, c, schedule, sampler).data();
}

} // namespace xmap::diffusion
