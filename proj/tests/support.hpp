#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "flowgrad/core.hpp"
#include "flowgrad/training.hpp"
#include "flowgrad/velocity.hpp"

namespace flowgrad::test {

inline Vec random_vec(NormalStream& rng, std::size_t n) {
    Vec v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

inline Matrix random_matrix(NormalStream& rng, std::size_t rows, std::size_t cols) {
    return Matrix(rows, cols, random_vec(rng, rows * cols));
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double rel_gap(std::span<const double> a, std::span<const double> ref) {
    double num = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - ref[i]) * (a[i] - ref[i]);
    return std::sqrt(num) / norm(ref);
}

inline double rel_err(double a, double ref) { return std::abs(a - ref) / std::abs(ref); }

/// Relative gap of the dot-product test <a, J v> = <pullback(a), v> for a joint
/// random direction v = (dx, dc, ds). J v uses the five-point central stencil.
inline double dot_product_gap(const VelocityField& f, const Vec& x, double t, const Conditioning& cond,
                              std::uint64_t seed, double eps = 1e-3) {
    NormalStream rng(seed);
    const Vec a = random_vec(rng, x.size()), dx = random_vec(rng, x.size());
    const Vec dc = random_vec(rng, cond.c().size()), ds = random_vec(rng, cond.scalars().size());
    auto at = [&](double h) {
        Vec xh = x;
        axpy(h, dx, xh);
        return f.velocity(xh, t, cond.shifted(dc, ds, h));
    };
    const Vec p1 = at(eps), m1 = at(-eps), p2 = at(2.0 * eps), m2 = at(-2.0 * eps);
    Vec jv(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) jv[i] = (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * eps);
    const double lhs = dot(a, jv);
    const Pullback pb = f.pullback(a, x, t, cond);
    const double rhs = dot(pb.state, dx) + dot(pb.c, dc) + dot(pb.scalars, ds);
    // Cauchy-Schwarz scale, so a near-orthogonal cotangent does not inflate the gap.
    return std::abs(lhs - rhs) / std::max(std::abs(rhs), norm(a) * norm(jv));
}

/// The toy task of configs/train.json: 2-d Gaussian data, 3-d conditioning
/// and a day-of-year scalar.
inline SyntheticTask toy_task() {
    SyntheticTask task;
    task.mean_map = Matrix(2, 3, {0.8, -0.5, 0.3, 0.2, 0.6, -0.7});
    task.data_std = 0.5;
    task.scalars.push_back({"tau", 0.0, 120.0, {0.3, -0.2}, 365.0});
    task.size = 65536;
    task.seed = 3;
    return task;
}

inline TrainConfig toy_train_config() {
    TrainConfig cfg;
    cfg.hidden = {32, 32};
    cfg.steps = 6000;
    cfg.learning_rate = 5e-3;
    cfg.init_seed = 1;
    cfg.noise_seed = 2;
    return cfg;
}

/// Trained once per process.
inline std::shared_ptr<const MlpDenoiser> toy_denoiser() {
    static const auto den = train(toy_task(), toy_train_config()).denoiser;
    return den;
}

/// Small random (untrained) denoiser with one "tau" scalar input.
inline std::shared_ptr<const MlpDenoiser> random_denoiser(std::size_t dim, std::size_t cond, std::uint64_t seed,
                                                          std::vector<std::string> names = {"tau"}) {
    std::vector<std::size_t> widths{MlpDenoiser::input_width(dim, cond, names.size()), 16, 16, dim};
    return std::make_shared<MlpDenoiser>(Mlp::initialized(widths, seed), Shape{dim}, Shape{cond}, std::move(names));
}

}  // namespace flowgrad::test
