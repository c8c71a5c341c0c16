#pragma once

// Velocity fields u(x, t, cond) of the probability-flow ODE dX = u dt, with
// exact vector-Jacobian products against the state and the conditioning.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "flowgrad/core.hpp"

namespace flowgrad {

struct FieldDescriptor {
    std::string name;
    Shape state_shape;
    Shape cond_shape;
    std::vector<std::string> scalar_names;
};

/// Cotangent pulled back through one velocity evaluation:
/// state = a^T du/dx, c = a^T du/dc, scalars[k] = a^T du/ds_k.
struct Pullback {
    Vec state;
    Vec c;
    Vec scalars;
};

/// Interface for u(x, t, cond). Public entry points validate shapes and the
/// time domain, then dispatch to the implementation hooks.
class VelocityField {
public:
    virtual ~VelocityField() = default;

    virtual const FieldDescriptor& descriptor() const = 0;

    /// True when u and its Jacobians are finite at t = 0, which the
    /// recompute adjoint mode needs.
    virtual bool regular_at_zero() const { return false; }

    Vec velocity(std::span<const double> x, double t, const Conditioning& cond) const {
        check(x, t, cond);
        return velocity_impl(x, t, cond);
    }

    Pullback pullback(std::span<const double> a, std::span<const double> x, double t,
                      const Conditioning& cond) const {
        check(x, t, cond);
        if (a.size() != x.size()) throw ContractError(descriptor().name + ": cotangent size differs from state");
        return pullback_impl(a, x, t, cond);
    }

    std::size_t state_size() const { return shape_size(descriptor().state_shape); }

    void check_conditioning(const Conditioning& cond) const {
        const auto& d = descriptor();
        if (cond.c().shape() != d.cond_shape)
            throw ContractError(d.name + ": conditioning shape " + shape_string(cond.c().shape()) +
                                " differs from " + shape_string(d.cond_shape));
        if (cond.scalar_names() != d.scalar_names)
            throw ContractError(d.name + ": scalar conditioners do not match the field's inputs");
    }

protected:
    virtual Vec velocity_impl(std::span<const double> x, double t, const Conditioning& cond) const = 0;
    virtual Pullback pullback_impl(std::span<const double> a, std::span<const double> x, double t,
                                   const Conditioning& cond) const = 0;

private:
    void check(std::span<const double> x, double t, const Conditioning& cond) const {
        const auto& d = descriptor();
        if (!std::isfinite(t) || t < 0.0 || (t == 0.0 && !regular_at_zero()))
            throw DomainError(d.name + ": velocity undefined at t = " + std::to_string(t));
        if (x.size() != state_size())
            throw ContractError(d.name + ": state has " + std::to_string(x.size()) + " entries, expected " +
                                std::to_string(state_size()));
        check_conditioning(cond);
    }
};

// ---------------------------------------------------------------------------
// StateVector-level operations.

inline StateVector eval(const VelocityField& field, const StateVector& x, double t, const Conditioning& cond) {
    return x.with_data(field.velocity(x.data(), t, cond));
}

inline StateVector vjp_state(const VelocityField& field, const StateVector& a, const StateVector& x, double t,
                             const Conditioning& cond) {
    if (!a.same_shape(x)) throw ContractError("vjp_state: cotangent shape differs from state");
    return x.with_data(field.pullback(a.data(), x.data(), t, cond).state);
}

inline std::pair<StateVector, std::vector<double>> vjp_cond(const VelocityField& field, const StateVector& a,
                                                            const StateVector& x, double t,
                                                            const Conditioning& cond) {
    if (!a.same_shape(x)) throw ContractError("vjp_cond: cotangent shape differs from state");
    auto pb = field.pullback(a.data(), x.data(), t, cond);
    return {cond.c().with_data(std::move(pb.c)), std::move(pb.scalars)};
}

// ---------------------------------------------------------------------------

/// Probability-flow velocity of Gaussian data x ~ N(M c + B s, sigma^2 Id)
/// noised as x + t eps:  u = t (x - mean) / (sigma^2 + t^2).
/// B maps the scalar conditioners into the mean and may have zero columns.
class AnalyticGaussianField final : public VelocityField {
public:
    /// Empty shapes default to [rows] and [cols] of the mean map.
    AnalyticGaussianField(Matrix mean_map, double data_std, Matrix scalar_map = {},
                          std::vector<std::string> scalar_names = {}, Shape state_shape = {}, Shape cond_shape = {})
        : mean_map_(std::move(mean_map)), scalar_map_(std::move(scalar_map)), data_std_(data_std) {
        if (!(data_std_ > 0.0) || !std::isfinite(data_std_))
            throw ConfigError("AnalyticGaussianField: data std must be > 0");
        if (!all_finite(mean_map_.data) || !all_finite(scalar_map_.data))
            throw ConfigError("AnalyticGaussianField: non-finite coefficients");
        if (scalar_map_.rows == 0 && scalar_map_.cols == 0) scalar_map_ = Matrix(mean_map_.rows, scalar_names.size());
        if (scalar_map_.rows != mean_map_.rows || scalar_map_.cols != scalar_names.size())
            throw ConfigError("AnalyticGaussianField: scalar map must be data_dim x n_scalars");
        if (state_shape.empty()) state_shape = {mean_map_.rows};
        if (cond_shape.empty()) cond_shape = {mean_map_.cols};
        if (shape_size(state_shape) != mean_map_.rows || shape_size(cond_shape) != mean_map_.cols)
            throw ConfigError("AnalyticGaussianField: shapes do not match the mean map");
        desc_ = {"analytic_gaussian", std::move(state_shape), std::move(cond_shape), std::move(scalar_names)};
    }

    const FieldDescriptor& descriptor() const override { return desc_; }
    bool regular_at_zero() const override { return true; }

    const Matrix& mean_map() const { return mean_map_; }
    const Matrix& scalar_map() const { return scalar_map_; }
    double data_std() const { return data_std_; }

    Vec mean(const Conditioning& cond) const {
        Vec mu = mean_map_.apply(cond.c().data());
        axpy(1.0, scalar_map_.apply(cond.scalar_values()), mu);
        return mu;
    }

    /// du/dx = gain(t) Id
    double gain(double t) const { return t / (data_std_ * data_std_ + t * t); }

protected:
    Vec velocity_impl(std::span<const double> x, double t, const Conditioning& cond) const override {
        Vec u = mean(cond);
        const double k = gain(t);
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = k * (x[i] - u[i]);
        return u;
    }

    Pullback pullback_impl(std::span<const double> a, std::span<const double>, double t,
                           const Conditioning&) const override {
        const double k = gain(t);
        return {scaled(a, k), scaled(mean_map_.apply_transposed(a), -k),
                scaled(scalar_map_.apply_transposed(a), -k)};
    }

private:
    Matrix mean_map_;
    Matrix scalar_map_;
    double data_std_;
    FieldDescriptor desc_;
};

/// u = rate * x. Independent of the conditioning; rate 0 gives the identity flow.
class LinearField final : public VelocityField {
public:
    LinearField(double rate, Shape state_shape, Shape cond_shape, std::vector<std::string> scalar_names = {})
        : rate_(rate), desc_{"linear", std::move(state_shape), std::move(cond_shape), std::move(scalar_names)} {}

    const FieldDescriptor& descriptor() const override { return desc_; }
    bool regular_at_zero() const override { return true; }

protected:
    Vec velocity_impl(std::span<const double> x, double, const Conditioning&) const override {
        return scaled(x, rate_);
    }

    Pullback pullback_impl(std::span<const double> a, std::span<const double>, double,
                           const Conditioning& cond) const override {
        return {scaled(a, rate_), Vec(cond.c().size(), 0.0), Vec(cond.scalars().size(), 0.0)};
    }

private:
    double rate_;
    FieldDescriptor desc_;
};

// ---------------------------------------------------------------------------

/// A denoiser D(x; sigma, cond) predicting the clean sample.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual const FieldDescriptor& descriptor() const = 0;
    virtual Vec denoise(std::span<const double> x, double sigma, const Conditioning& cond) const = 0;
    /// a^T dD/dx, a^T dD/dc, a^T dD/ds_k.
    virtual Pullback pullback(std::span<const double> a, std::span<const double> x, double sigma,
                              const Conditioning& cond) const = 0;
};

/// EDM probability-flow velocity u = (x - D(x; t, cond)) / t.
/// Pullbacks chain through the wrapper: a^T du/dx = (a - a^T dD/dx) / t,
/// a^T du/dc = -a^T dD/dc / t.
class EdmFlowField final : public VelocityField {
public:
    explicit EdmFlowField(std::shared_ptr<const Denoiser> denoiser) : denoiser_(std::move(denoiser)) {
        if (!denoiser_) throw ConfigError("EdmFlowField: null denoiser");
        desc_ = denoiser_->descriptor();
        desc_.name = "edm(" + desc_.name + ")";
    }

    const FieldDescriptor& descriptor() const override { return desc_; }
    const Denoiser& denoiser() const { return *denoiser_; }

protected:
    Vec velocity_impl(std::span<const double> x, double t, const Conditioning& cond) const override {
        Vec u = denoiser_->denoise(x, t, cond);
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = (x[i] - u[i]) / t;
        return u;
    }

    Pullback pullback_impl(std::span<const double> a, std::span<const double> x, double t,
                           const Conditioning& cond) const override {
        Pullback pb = denoiser_->pullback(a, x, t, cond);
        for (std::size_t i = 0; i < pb.state.size(); ++i) pb.state[i] = (a[i] - pb.state[i]) / t;
        for (double& v : pb.c) v = -v / t;
        for (double& v : pb.scalars) v = -v / t;
        return pb;
    }

private:
    std::shared_ptr<const Denoiser> denoiser_;
    FieldDescriptor desc_;
};

}  // namespace flowgrad
