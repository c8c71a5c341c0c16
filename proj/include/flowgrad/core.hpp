#pragma once

// Shared value types for flowgrad: state vectors, conditioning, the EDM
// noise-level grid and the seeded Gaussian generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace flowgrad {

using Vec = std::vector<double>;
using Shape = std::vector<std::size_t>;

// ---------------------------------------------------------------------------
// Errors. Each maps onto one CLI exit code (see tools/flowgrad.cpp).

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid parameters or incompatible options.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain (e.g. t <= 0 for an EDM velocity).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Shape or naming mismatch between collaborating objects.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Query outside a tabulated range; no extrapolation is ever performed.
class RangeError : public Error {
public:
    using Error::Error;
};

/// A non-finite value appeared during integration or training.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

// ---------------------------------------------------------------------------
// Small dense helpers used across modules.

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec scaled(std::span<const double> x, double alpha) {
    Vec out(x.begin(), x.end());
    for (double& v : out) v *= alpha;
    return out;
}

inline bool all_finite(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Row-major dense matrix; only the products the fields need.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, Vec values = {}) : rows(r), cols(c), data(std::move(values)) {
        if (data.empty()) data.assign(r * c, 0.0);
        if (data.size() != r * c) throw ContractError("Matrix: value count does not match shape");
    }

    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }

    // y = A x
    Vec apply(std::span<const double> x) const {
        Vec y(rows, 0.0);
        for (std::size_t i = 0; i < rows; ++i) y[i] = dot(std::span(data).subspan(i * cols, cols), x);
        return y;
    }

    // y = A^T x
    Vec apply_transposed(std::span<const double> x) const {
        Vec y(cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i) axpy(x[i], std::span(data).subspan(i * cols, cols), y);
        return y;
    }

    bool operator==(const Matrix&) const = default;
};

// ---------------------------------------------------------------------------

/// Regular latitude-longitude layout for the trailing two dimensions of a
/// state. Latitudes are cell centres in degrees.
struct GridMeta {
    std::size_t n_lat = 0;
    std::size_t n_lon = 0;
    std::vector<double> latitudes;

    bool operator==(const GridMeta&) const = default;
};

/// Flat array of doubles with a shape and optional lat-lon metadata.
///
/// Invariants: entries finite, prod(shape) == size(), and when grid metadata
/// is present the state is a whole number of n_lat x n_lon fields (one per
/// channel) with strictly monotone latitudes inside [-90, 90].
class StateVector {
public:
    StateVector() = default;

    explicit StateVector(Vec data) : data_(std::move(data)), shape_{data_.size()} { validate(); }

    StateVector(Vec data, Shape shape, std::optional<GridMeta> grid = std::nullopt)
        : data_(std::move(data)), shape_(std::move(shape)), grid_(std::move(grid)) {
        validate();
    }

    static StateVector zeros(Shape shape, std::optional<GridMeta> grid = std::nullopt) {
        return StateVector(Vec(shape_size(shape), 0.0), std::move(shape), std::move(grid));
    }

    /// Same shape and metadata, new values.
    StateVector with_data(Vec data) const { return StateVector(std::move(data), shape_, grid_); }

    StateVector zeros_like() const { return with_data(Vec(data_.size(), 0.0)); }

    const Vec& data() const noexcept { return data_; }
    const Shape& shape() const noexcept { return shape_; }
    const std::optional<GridMeta>& grid() const noexcept { return grid_; }
    std::size_t size() const noexcept { return data_.size(); }
    double operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const StateVector& other) const { return shape_ == other.shape_; }

    bool operator==(const StateVector&) const = default;

private:
    void validate() const {
        if (shape_size(shape_) != data_.size())
            throw ContractError("StateVector: shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " entries");
        if (!all_finite(data_)) throw ContractError("StateVector: non-finite entry");
        if (!grid_) return;
        const auto cells = grid_->n_lat * grid_->n_lon;
        if (cells == 0 || data_.size() % cells != 0)
            throw ContractError("StateVector: grid " + std::to_string(grid_->n_lat) + "x" +
                                std::to_string(grid_->n_lon) + " does not tile " +
                                std::to_string(data_.size()) + " entries");
        if (shape_.size() < 2 || shape_[shape_.size() - 2] != grid_->n_lat ||
            shape_.back() != grid_->n_lon)
            throw ContractError("StateVector: trailing shape must be (n_lat, n_lon)");
        const auto& lat = grid_->latitudes;
        if (lat.size() != grid_->n_lat)
            throw ContractError("StateVector: latitude count differs from n_lat");
        for (double v : lat)
            if (!(v >= -90.0 && v <= 90.0)) throw ContractError("StateVector: latitude outside [-90, 90]");
        if (lat.size() > 1) {
            const bool up = lat[1] > lat[0];
            for (std::size_t i = 1; i < lat.size(); ++i)
                if (up ? !(lat[i] > lat[i - 1]) : !(lat[i] < lat[i - 1]))
                    throw ContractError("StateVector: latitudes not strictly monotone");
        }
    }

    Vec data_;
    Shape shape_{0};
    std::optional<GridMeta> grid_;
};

// ---------------------------------------------------------------------------

struct ScalarConditioner {
    std::string name;
    double value = 0.0;

    bool operator==(const ScalarConditioner&) const = default;
};

/// Vector conditioner c plus ordered, uniquely named scalar conditioners.
/// "tau" is the day of year plus day fraction and must be >= 0.
class Conditioning {
public:
    Conditioning() = default;

    explicit Conditioning(StateVector c, std::vector<ScalarConditioner> scalars = {})
        : c_(std::move(c)), scalars_(std::move(scalars)) {
        for (std::size_t i = 0; i < scalars_.size(); ++i) {
            if (!std::isfinite(scalars_[i].value))
                throw ContractError("Conditioning: scalar '" + scalars_[i].name + "' is not finite");
            for (std::size_t j = 0; j < i; ++j)
                if (scalars_[j].name == scalars_[i].name)
                    throw ContractError("Conditioning: duplicate scalar '" + scalars_[i].name + "'");
            if (scalars_[i].name == "tau" && scalars_[i].value < 0.0)
                throw ContractError("Conditioning: tau must be >= 0");
        }
    }

    const StateVector& c() const noexcept { return c_; }
    const std::vector<ScalarConditioner>& scalars() const noexcept { return scalars_; }

    std::vector<std::string> scalar_names() const {
        std::vector<std::string> names;
        for (const auto& s : scalars_) names.push_back(s.name);
        return names;
    }

    std::vector<double> scalar_values() const {
        std::vector<double> v;
        for (const auto& s : scalars_) v.push_back(s.value);
        return v;
    }

    std::optional<double> scalar(std::string_view name) const {
        for (const auto& s : scalars_)
            if (s.name == name) return s.value;
        return std::nullopt;
    }

    /// (c + alpha*dc, scalars + alpha*dscalars), same names and shape.
    Conditioning shifted(std::span<const double> dc, std::span<const double> dscalars,
                         double alpha = 1.0) const {
        if (dc.size() != c_.size() || dscalars.size() != scalars_.size())
            throw ContractError("Conditioning::shifted: delta size mismatch");
        Vec c = c_.data();
        axpy(alpha, dc, c);
        auto s = scalars_;
        for (std::size_t k = 0; k < s.size(); ++k) s[k].value += alpha * dscalars[k];
        return Conditioning(c_.with_data(std::move(c)), std::move(s));
    }

    bool operator==(const Conditioning&) const = default;

private:
    StateVector c_;
    std::vector<ScalarConditioner> scalars_;
};

// ---------------------------------------------------------------------------

/// Strictly decreasing noise levels t_0 = sigma_max > ... > t_N = 0.
struct TimeGrid {
    std::vector<double> levels;
    double rho = 7.0;
    double sigma_min = 0.002;
    double sigma_max = 80.0;

    std::size_t n_steps() const { return levels.empty() ? 0 : levels.size() - 1; }
    double t_max() const { return levels.front(); }
};

/// EDM rho-spaced levels: t_i = (smax^(1/rho) + i/(n-1) (smin^(1/rho) - smax^(1/rho)))^rho
/// for i < n, then t_n = 0. Endpoints are pinned exactly to sigma_max and sigma_min.
inline TimeGrid edm_time_grid(std::size_t n_steps, double sigma_min = 0.002, double sigma_max = 80.0,
                              double rho = 7.0) {
    if (n_steps < 1) throw ConfigError("edm_time_grid: n_steps must be >= 1");
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min) || !std::isfinite(sigma_max))
        throw ConfigError("edm_time_grid: need 0 < sigma_min < sigma_max");
    if (!(rho > 0.0) || !std::isfinite(rho)) throw ConfigError("edm_time_grid: rho must be > 0");

    TimeGrid grid{{}, rho, sigma_min, sigma_max};
    grid.levels.reserve(n_steps + 1);
    grid.levels.push_back(sigma_max);
    if (n_steps > 1) {
        const double hi = std::pow(sigma_max, 1.0 / rho);
        const double lo = std::pow(sigma_min, 1.0 / rho);
        for (std::size_t i = 1; i + 1 < n_steps; ++i) {
            const double frac = static_cast<double>(i) / static_cast<double>(n_steps - 1);
            grid.levels.push_back(std::pow(hi + frac * (lo - hi), rho));
        }
        grid.levels.push_back(sigma_min);
    }
    grid.levels.push_back(0.0);

    for (std::size_t i = 1; i < grid.levels.size(); ++i)
        if (!(grid.levels[i] < grid.levels[i - 1]))
            throw ConfigError("edm_time_grid: parameters produce a non-decreasing grid");
    return grid;
}

// ---------------------------------------------------------------------------
// Seeded Gaussian noise.
//
// Generator: std::mt19937_64 seeded with the 64-bit seed (its output sequence
// is fixed by the C++ standard). Each pair of draws u, v becomes two 53-bit
// uniforms U = (u>>11 + 1)/2^53 in (0, 1] and V = (v>>11)/2^53 in [0, 1), and
// Box-Muller emits r*cos(2 pi V) then r*sin(2 pi V) with r = sqrt(-2 ln U).

class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (cached_) {
            cached_ = false;
            return spare_;
        }
        const double u = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
        const double v = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u));
        const double theta = 2.0 * std::numbers::pi * v;
        spare_ = r * std::sin(theta);
        cached_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool cached_ = false;
};

inline StateVector gaussian_noise(const Shape& shape, std::uint64_t seed) {
    NormalStream rng(seed);
    Vec data(shape_size(shape));
    for (double& v : data) v = rng.normal();
    return StateVector(std::move(data), shape);
}

/// SplitMix64 finalizer; derives independent per-sample seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace flowgrad
