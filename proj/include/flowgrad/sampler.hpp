#pragma once

// Deterministic probability-flow sampling from X_T = T xi down to X_0.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowgrad/core.hpp"
#include "flowgrad/velocity.hpp"

namespace flowgrad {

enum class Solver { euler, heun };

inline std::string_view to_string(Solver s) { return s == Solver::euler ? "euler" : "heun"; }

inline Solver parse_solver(std::string_view name) {
    if (name == "euler") return Solver::euler;
    if (name == "heun") return Solver::heun;
    throw ConfigError("unknown solver '" + std::string(name) + "' (expected euler|heun)");
}

struct Trajectory {
    TimeGrid grid;
    Solver solver = Solver::heun;
    Conditioning cond;
    Shape state_shape;
    std::optional<GridMeta> state_grid;
    Vec initial;                // X at t_0 = T
    Vec final_state;            // X at t_N = 0
    std::vector<Vec> states;    // X at every level when stored, else empty

    bool stored() const { return !states.empty(); }
    StateVector x0() const { return StateVector(final_state, state_shape, state_grid); }
    StateVector state(std::size_t level) const {
        if (!stored()) throw ContractError("Trajectory: intermediate states were not stored");
        return StateVector(states.at(level), state_shape, state_grid);
    }
};

/// One solver step from levels[i] to levels[i+1]. Heun falls back to Euler on
/// the step that ends at t = 0.
inline Vec solver_step(const VelocityField& field, std::span<const double> x, double t_from, double t_to,
                       const Conditioning& cond, Solver solver) {
    const double h = t_to - t_from;
    const Vec k1 = field.velocity(x, t_from, cond);
    Vec next(x.begin(), x.end());
    if (solver == Solver::euler || t_to == 0.0) {
        axpy(h, k1, next);
        return next;
    }
    Vec pred = next;
    axpy(h, k1, pred);
    const Vec k2 = field.velocity(pred, t_to, cond);
    axpy(0.5 * h, k1, next);
    axpy(0.5 * h, k2, next);
    return next;
}

inline Trajectory sample(const VelocityField& field, const StateVector& xi, const Conditioning& cond,
                         const TimeGrid& grid, Solver solver, bool store) {
    if (xi.shape() != field.descriptor().state_shape)
        throw ContractError("sample: noise shape " + shape_string(xi.shape()) + " differs from field state shape " +
                            shape_string(field.descriptor().state_shape));
    if (grid.levels.size() < 2) throw ConfigError("sample: grid needs at least one step");
    field.check_conditioning(cond);

    Trajectory traj{grid, solver, cond, xi.shape(), xi.grid(), scaled(xi.data(), grid.t_max()), {}, {}};
    Vec x = traj.initial;
    if (store) {
        traj.states.reserve(grid.levels.size());
        traj.states.push_back(x);
    }
    for (std::size_t i = 0; i + 1 < grid.levels.size(); ++i) {
        x = solver_step(field, x, grid.levels[i], grid.levels[i + 1], cond, solver);
        if (!all_finite(x)) throw DivergenceError("sample: non-finite state", i);
        if (store) traj.states.push_back(x);
    }
    traj.final_state = std::move(x);
    return traj;
}

}  // namespace flowgrad
