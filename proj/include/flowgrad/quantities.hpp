#pragma once

// Linear scalar functionals q(X_0) and their gradients, which seed the adjoint.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowgrad/core.hpp"

namespace flowgrad {

enum class QuantityKind { component, patch_mean, weighted_global_mean };

inline std::string_view to_string(QuantityKind k) {
    switch (k) {
        case QuantityKind::component: return "component";
        case QuantityKind::patch_mean: return "patch_mean";
        case QuantityKind::weighted_global_mean: return "weighted_global_mean";
    }
    return "?";
}

inline QuantityKind parse_quantity_kind(std::string_view s) {
    if (s == "component") return QuantityKind::component;
    if (s == "patch_mean") return QuantityKind::patch_mean;
    if (s == "weighted_global_mean") return QuantityKind::weighted_global_mean;
    throw ConfigError("unknown quantity kind '" + std::string(s) + "'");
}

/// Indices (index, mask) address cells inside one channel block. A state
/// with grid metadata has size / (n_lat * n_lon) channels; a state of rank
/// >= 3 without metadata uses shape[0] channels; otherwise there is one.
struct QuantitySpec {
    QuantityKind kind = QuantityKind::weighted_global_mean;
    std::size_t index = 0;
    std::vector<std::size_t> mask;
    bool latitude_weighted = false;
    std::size_t channel = 0;
};

namespace detail {

struct ChannelLayout {
    std::size_t channels;
    std::size_t block;
};

inline ChannelLayout channel_layout(const StateVector& x) {
    if (x.grid()) {
        const auto block = x.grid()->n_lat * x.grid()->n_lon;
        return {x.size() / block, block};
    }
    if (x.shape().size() >= 3 && x.shape()[0] > 0) return {x.shape()[0], x.size() / x.shape()[0]};
    return {1, x.size()};
}

}  // namespace detail

/// Raw (unnormalised) weights over the whole state.
inline Vec quantity_weights(const QuantitySpec& spec, const StateVector& x) {
    const auto layout = detail::channel_layout(x);
    if (spec.channel >= layout.channels)
        throw ContractError("quantity: channel " + std::to_string(spec.channel) + " out of range (" +
                            std::to_string(layout.channels) + " channels)");
    const std::size_t offset = spec.channel * layout.block;

    auto cell_weight = [&](std::size_t cell) {
        if (!spec.latitude_weighted) return 1.0;
        if (!x.grid()) throw ContractError("quantity: latitude weighting needs grid metadata");
        const std::size_t row = cell / x.grid()->n_lon;
        return std::cos(x.grid()->latitudes[row] * std::numbers::pi / 180.0);
    };

    Vec w(x.size(), 0.0);
    switch (spec.kind) {
        case QuantityKind::component:
            if (spec.index >= layout.block) throw ContractError("quantity: component index out of range");
            w[offset + spec.index] = 1.0;
            break;
        case QuantityKind::patch_mean:
            if (spec.mask.empty()) throw ContractError("quantity: empty patch mask");
            for (auto cell : spec.mask) {
                if (cell >= layout.block) throw ContractError("quantity: patch cell out of range");
                w[offset + cell] = cell_weight(cell);
            }
            break;
        case QuantityKind::weighted_global_mean:
            for (std::size_t cell = 0; cell < layout.block; ++cell) w[offset + cell] = cell_weight(cell);
            break;
    }
    double total = 0.0;
    for (double v : w) {
        if (v < 0.0) throw ContractError("quantity: negative weight");
        total += v;
    }
    if (!(total > 0.0)) throw ContractError("quantity: weights sum to zero");
    return w;
}

/// sum w_i x_i / sum w_i
inline double evaluate(const QuantitySpec& spec, const StateVector& x0) {
    const Vec w = quantity_weights(spec, x0);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        num += w[i] * x0[i];
        den += w[i];
    }
    return num / den;
}

/// dq/dX_0 = w / sum w; independent of x0 because every kind is linear.
inline StateVector gradient(const QuantitySpec& spec, const StateVector& x0) {
    Vec w = quantity_weights(spec, x0);
    double den = 0.0;
    for (double v : w) den += v;
    for (double& v : w) v /= den;
    return x0.with_data(std::move(w));
}

}  // namespace flowgrad
