#pragma once

// Independent reference gradients: central differences through the full
// discrete sampler, and the closed-form endpoint map of Gaussian data.
// Nothing in the library depends on this header.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "flowgrad/core.hpp"
#include "flowgrad/quantities.hpp"
#include "flowgrad/sampler.hpp"
#include "flowgrad/velocity.hpp"

namespace flowgrad::oracle {

/// Perturbation of the conditioning: dc plus one delta per scalar conditioner.
struct Direction {
    Vec c;
    Vec scalars;
};

inline double sampled_quantity(const VelocityField& field, const QuantitySpec& q, const Conditioning& cond,
                               const StateVector& xi, const TimeGrid& grid, Solver solver) {
    return evaluate(q, sample(field, xi, cond, grid, solver, false).x0());
}

/// (q(cond + eps dir) - q(cond - eps dir)) / (2 eps) with xi held fixed.
inline double fd_directional(const VelocityField& field, const QuantitySpec& q, const Conditioning& cond,
                             const StateVector& xi, const Direction& dir, double eps, const TimeGrid& grid,
                             Solver solver) {
    if (!(eps > 0.0)) throw ConfigError("fd_directional: eps must be > 0");
    const double plus = sampled_quantity(field, q, cond.shifted(dir.c, dir.scalars, eps), xi, grid, solver);
    const double minus = sampled_quantity(field, q, cond.shifted(dir.c, dir.scalars, -eps), xi, grid, solver);
    return (plus - minus) / (2.0 * eps);
}

struct SweepPoint {
    double eps;
    double fd;
    double abs_error;
    double rel_error;
};

struct EpsSweep {
    std::vector<SweepPoint> points;  // eps decreasing
    SweepPoint best;
    double slope = std::numeric_limits<double>::quiet_NaN();  // log-log slope above the rounding floor
    std::size_t fitted_points = 0;
};

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

inline std::vector<double> default_eps_grid() { return {1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6}; }

/// Compares fd_directional against `reference` over an eps grid. The slope is
/// fitted over the leading run of eps values where the error keeps falling
/// and stays well above the rounding floor.
inline EpsSweep eps_sweep(const VelocityField& field, const QuantitySpec& q, const Conditioning& cond,
                          const StateVector& xi, const Direction& dir, double reference, const TimeGrid& grid,
                          Solver solver, std::vector<double> eps_values = default_eps_grid()) {
    std::sort(eps_values.begin(), eps_values.end(), std::greater<>());
    EpsSweep sweep;
    const double scale = std::max(std::abs(reference), std::numeric_limits<double>::min());
    for (double eps : eps_values) {
        const double fd = fd_directional(field, q, cond, xi, dir, eps, grid, solver);
        const double err = std::abs(fd - reference);
        sweep.points.push_back({eps, fd, err, err / scale});
    }
    sweep.best = *std::min_element(sweep.points.begin(), sweep.points.end(),
                                   [](const auto& a, const auto& b) { return a.abs_error < b.abs_error; });

    const double q0 = std::abs(sampled_quantity(field, q, cond, xi, grid, solver));
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < sweep.points.size(); ++i) {
        const auto& p = sweep.points[i];
        const double floor = 1e3 * std::numeric_limits<double>::epsilon() * std::max(q0, 1.0) / p.eps;
        if (p.abs_error <= floor || p.abs_error == 0.0) break;
        if (!xs.empty() && p.abs_error >= sweep.points[i - 1].abs_error) break;
        xs.push_back(p.eps);
        ys.push_back(p.abs_error);
    }
    sweep.fitted_points = xs.size();
    if (xs.size() >= 2) sweep.slope = loglog_slope(xs, ys);
    return sweep;
}

struct GaussianEndpoint {
    StateVector x0;
    Matrix dx0_dc;
};

/// Exact endpoint of dx/dt = t (x - M c) / (s^2 + t^2) from x(T) = T xi to t = 0:
///   x0 = M c + (T xi - M c) s / sqrt(s^2 + T^2),  dx0/dc = (1 - s / sqrt(s^2 + T^2)) M.
inline GaussianEndpoint gaussian_closed_form(const Matrix& mean_map, double s, double T, const StateVector& xi,
                                             const StateVector& c) {
    if (!(s > 0.0) || !(T > 0.0)) throw ConfigError("gaussian_closed_form: need s > 0 and T > 0");
    if (xi.size() != mean_map.rows || c.size() != mean_map.cols)
        throw ContractError("gaussian_closed_form: shapes do not match the mean map");
    const double keep = s / std::sqrt(s * s + T * T);
    const Vec mu = mean_map.apply(c.data());
    Vec x0(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) x0[i] = mu[i] + (T * xi[i] - mu[i]) * keep;
    Matrix j = mean_map;
    for (double& v : j.data) v *= 1.0 - keep;
    return {xi.with_data(std::move(x0)), std::move(j)};
}

}  // namespace flowgrad::oracle
