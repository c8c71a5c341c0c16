#pragma once

// Toy-scale EDM denoiser training on synthetic conditional data.
//
// Objective: E[ lambda(sigma) |D(x0 + sigma eps; sigma, cond) - x0|^2 ] with
// ln sigma ~ N(p_mean, p_std^2) and lambda = (sigma^2 + sd^2) / (sigma sd)^2,
// optimised by Adam.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "flowgrad/core.hpp"
#include "flowgrad/mlp.hpp"

namespace flowgrad {

/// Scalar conditioner drawn uniformly from [lo, hi]; it shifts the data mean
/// by amplitude * sin(2 pi value / period).
struct ScalarFeature {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;
    Vec amplitude;
    double period = 365.0;
};

struct SyntheticTask {
    enum class Kind { gaussian, mixture };

    Kind kind = Kind::gaussian;
    Matrix mean_map;  // data_dim x cond_dim
    double data_std = 0.5;
    double cond_lo = -1.0;
    double cond_hi = 1.0;
    std::vector<ScalarFeature> scalars;
    // mixture: x ~ w N(mean + offset, s^2) + (1 - w) N(mean - offset, s^2)
    Vec mixture_offset;
    double mixture_weight = 0.5;
    std::size_t size = 4096;
    std::uint64_t seed = 0;

    std::size_t data_dim() const { return mean_map.rows; }
    std::size_t cond_dim() const { return mean_map.cols; }

    std::vector<std::string> scalar_names() const {
        std::vector<std::string> names;
        for (const auto& s : scalars) names.push_back(s.name);
        return names;
    }

    void validate() const {
        if (data_dim() == 0 || cond_dim() == 0) throw ConfigError("SyntheticTask: empty mean map");
        if (!(data_std > 0.0)) throw ConfigError("SyntheticTask: data_std must be > 0");
        if (!(cond_hi >= cond_lo)) throw ConfigError("SyntheticTask: conditioning box is empty");
        for (const auto& s : scalars) {
            if (!(s.hi >= s.lo)) throw ConfigError("SyntheticTask: scalar '" + s.name + "' range is empty");
            if (s.amplitude.size() != data_dim())
                throw ConfigError("SyntheticTask: scalar '" + s.name + "' amplitude must have data_dim entries");
            if (!(s.period > 0.0)) throw ConfigError("SyntheticTask: scalar period must be > 0");
        }
        if (kind == Kind::mixture) {
            if (!(mixture_weight > 0.0 && mixture_weight < 1.0))
                throw ConfigError("SyntheticTask: mixture weight must lie in (0, 1)");
            if (mixture_offset.size() != data_dim()) throw ConfigError("SyntheticTask: mixture offset size");
        }
    }

    /// Conditional mean of the (first-moment) law, excluding the mixture split.
    Vec mean(std::span<const double> c, std::span<const double> s) const {
        Vec mu = mean_map.apply(c);
        for (std::size_t k = 0; k < scalars.size(); ++k)
            axpy(std::sin(2.0 * std::numbers::pi * s[k] / scalars[k].period), scalars[k].amplitude, mu);
        return mu;
    }
};

struct Example {
    Vec x;
    Vec c;
    Vec scalars;
};

/// Deterministic in task.seed. Conditionings are uniform on the stated boxes.
inline std::vector<Example> generate_dataset(const SyntheticTask& task) {
    task.validate();
    NormalStream rng(task.seed);
    std::vector<Example> data;
    data.reserve(task.size);
    for (std::size_t n = 0; n < task.size; ++n) {
        Example ex;
        ex.c.resize(task.cond_dim());
        for (double& v : ex.c) v = task.cond_lo + (task.cond_hi - task.cond_lo) * rng.uniform();
        for (const auto& s : task.scalars) ex.scalars.push_back(s.lo + (s.hi - s.lo) * rng.uniform());
        ex.x = task.mean(ex.c, ex.scalars);
        if (task.kind == SyntheticTask::Kind::mixture) {
            const double sign = rng.uniform() < task.mixture_weight ? 1.0 : -1.0;
            axpy(sign, task.mixture_offset, ex.x);
        }
        for (double& v : ex.x) v += task.data_std * rng.normal();
        data.push_back(std::move(ex));
    }
    return data;
}

struct TrainConfig {
    std::vector<std::size_t> hidden{32, 32};
    std::size_t steps = 2000;
    std::size_t batch = 64;
    double learning_rate = 2e-3;
    double final_lr_fraction = 0.1;  // cosine decay floor
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double p_mean = -1.2;
    double p_std = 1.2;
    double sigma_data = 0.5;
    std::uint64_t init_seed = 1;
    std::uint64_t noise_seed = 2;
    std::size_t eval_size = 2048;

    void validate() const {
        if (hidden.size() > 3) throw ConfigError("TrainConfig: at most 3 hidden layers");
        for (auto w : hidden)
            if (w == 0 || w > 128) throw ConfigError("TrainConfig: hidden widths must lie in [1, 128]");
        if (batch == 0) throw ConfigError("TrainConfig: batch must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning rate must be > 0");
        if (!(sigma_data > 0.0) || !(p_std >= 0.0)) throw ConfigError("TrainConfig: invalid noise parameters");
    }
};

struct TrainResult {
    std::shared_ptr<const MlpDenoiser> denoiser;
    std::vector<double> loss_history;
    double eval_loss = 0.0;      // trained denoiser on the fixed evaluation draws
    double baseline_loss = 0.0;  // D(x) = x on the same draws
};

namespace detail {

inline double edm_weight(double sigma, double sigma_data) {
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data * sigma * sigma_data);
}

struct NoisyDraw {
    std::size_t index;
    double sigma;
    Vec eps;
};

inline NoisyDraw draw(NormalStream& rng, std::size_t n_data, std::size_t dim, const TrainConfig& cfg) {
    NoisyDraw d;
    d.index = std::min(static_cast<std::size_t>(rng.uniform() * static_cast<double>(n_data)), n_data - 1);
    d.sigma = std::exp(cfg.p_mean + cfg.p_std * rng.normal());
    d.eps.resize(dim);
    for (double& v : d.eps) v = rng.normal();
    return d;
}

inline Conditioning make_conditioning(const Example& ex, const MlpDenoiser& den) {
    std::vector<ScalarConditioner> s;
    for (std::size_t k = 0; k < ex.scalars.size(); ++k) s.push_back({den.descriptor().scalar_names[k], ex.scalars[k]});
    return Conditioning(StateVector(ex.c, den.descriptor().cond_shape), std::move(s));
}

}  // namespace detail

/// Mean weighted denoising loss of `den` (or of D(x) = x when den is null)
/// over fixed draws from `eval_seed`.
inline double denoising_loss(const MlpDenoiser* den, const std::vector<Example>& data, const TrainConfig& cfg,
                             std::uint64_t eval_seed, std::size_t n_draws) {
    NormalStream rng(eval_seed);
    const std::size_t dim = data.front().x.size();
    double total = 0.0;
    for (std::size_t n = 0; n < n_draws; ++n) {
        const auto d = detail::draw(rng, data.size(), dim, cfg);
        const auto& ex = data[d.index];
        Vec noisy = ex.x;
        axpy(d.sigma, d.eps, noisy);
        Vec pred = noisy;
        if (den) pred = den->denoise(noisy, d.sigma, detail::make_conditioning(ex, *den));
        double sq = 0.0;
        for (std::size_t i = 0; i < dim; ++i) sq += (pred[i] - ex.x[i]) * (pred[i] - ex.x[i]);
        total += detail::edm_weight(d.sigma, cfg.sigma_data) * sq / static_cast<double>(dim);
    }
    return total / static_cast<double>(n_draws);
}

inline TrainResult train(const SyntheticTask& task, const TrainConfig& cfg) {
    task.validate();
    cfg.validate();
    const auto data = generate_dataset(task);
    const std::size_t dim = task.data_dim();
    const std::size_t m = task.cond_dim();

    std::vector<std::size_t> widths{MlpDenoiser::input_width(dim, m, task.scalars.size())};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(dim);

    // Unit-scale first-layer response for the scalar inputs, whose natural
    // range (e.g. day of year) is far from unit scale.
    Vec centre(widths.front(), 0.0), spread(widths.front(), 1.0);
    for (std::size_t k = 0; k < task.scalars.size(); ++k) {
        const auto& s = task.scalars[k];
        centre[dim + 1 + m + k] = 0.5 * (s.lo + s.hi);
        spread[dim + 1 + m + k] = std::max(0.5 * (s.hi - s.lo), 1e-12);
    }
    Mlp net = Mlp::initialized(widths, cfg.init_seed, centre, spread);

    TrainResult result;
    const Shape state_shape{dim}, cond_shape{m};
    const auto names = task.scalar_names();

    Mlp::Gradients adam_m = net.zero_gradients(), adam_v = net.zero_gradients();
    NormalStream rng(cfg.noise_seed);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const MlpDenoiser den(net, state_shape, cond_shape, names, cfg.sigma_data);
        Mlp::Gradients grads = net.zero_gradients();
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto d = detail::draw(rng, data.size(), dim, cfg);
            const auto& ex = data[d.index];
            Vec noisy = ex.x;
            axpy(d.sigma, d.eps, noisy);
            const auto sc = EdmScalings::at(d.sigma, cfg.sigma_data);
            Mlp::Tape tape;
            const Vec f = net.forward(den.network_input(noisy, d.sigma, detail::make_conditioning(ex, den)), &tape);
            const double lambda = detail::edm_weight(d.sigma, cfg.sigma_data);
            const double norm = 1.0 / static_cast<double>(dim * cfg.batch);
            Vec cot(dim);
            for (std::size_t i = 0; i < dim; ++i) {
                const double r = sc.skip * noisy[i] + sc.out * f[i] - ex.x[i];
                loss += lambda * r * r * norm;
                cot[i] = 2.0 * lambda * r * sc.out * norm;
            }
            net.backward(tape, cot, &grads);
        }
        if (!std::isfinite(loss)) throw DivergenceError("train: non-finite loss", step);
        result.loss_history.push_back(loss);

        // Adam with bias correction and cosine-decayed step size.
        const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
        const double lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 *
                                                                           (1.0 + std::cos(std::numbers::pi * progress)));
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
        auto update = [&](Vec& p, const Vec& g, Vec& mo, Vec& ve) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                mo[i] = cfg.beta1 * mo[i] + (1.0 - cfg.beta1) * g[i];
                ve[i] = cfg.beta2 * ve[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (mo[i] / bc1) / (std::sqrt(ve[i] / bc2) + cfg.adam_eps);
            }
        };
        for (std::size_t l = 0; l < net.layers().size(); ++l) {
            update(net.layers()[l].weight.data, grads.layers[l].weight.data, adam_m.layers[l].weight.data,
                   adam_v.layers[l].weight.data);
            update(net.layers()[l].bias, grads.layers[l].bias, adam_m.layers[l].bias, adam_v.layers[l].bias);
        }
        if (!net.parameters_finite()) throw DivergenceError("train: non-finite parameters", step);
    }

    result.denoiser = std::make_shared<const MlpDenoiser>(std::move(net), state_shape, cond_shape, names, cfg.sigma_data);
    const std::uint64_t eval_seed = mix_seed(cfg.noise_seed, 0xE7A1);
    result.eval_loss = denoising_loss(result.denoiser.get(), data, cfg, eval_seed, cfg.eval_size);
    result.baseline_loss = denoising_loss(nullptr, data, cfg, eval_seed, cfg.eval_size);
    return result;
}

}  // namespace flowgrad
