#pragma once

// Adjoint sensitivities of q(X_0) with respect to the conditioning.
//
// The continuous modes integrate, forward in t from 0 to T,
//
//   d/dt [X, a, w, v_k] = [u, -a du/dX, -a du/dc, -a du/ds_k]
//   [X, a, w, v](0)     = [X_0, dq/dX_0, 0, 0]
//
// so that dq/dc = w_T and dq/ds_k = (v_k)_T. discrete_adjoint instead
// reverse-differentiates the recorded solver steps exactly.

#include <atomic>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "flowgrad/core.hpp"
#include "flowgrad/quantities.hpp"
#include "flowgrad/sampler.hpp"
#include "flowgrad/velocity.hpp"

namespace flowgrad {

enum class AdjointMode { stored, recompute, discrete };

inline std::string_view to_string(AdjointMode m) {
    switch (m) {
        case AdjointMode::stored: return "stored";
        case AdjointMode::recompute: return "recompute";
        case AdjointMode::discrete: return "discrete";
    }
    return "?";
}

inline AdjointMode parse_mode(std::string_view s) {
    if (s == "stored") return AdjointMode::stored;
    if (s == "recompute") return AdjointMode::recompute;
    if (s == "discrete") return AdjointMode::discrete;
    throw ConfigError("unknown adjoint mode '" + std::string(s) + "' (expected stored|recompute|discrete)");
}

struct RunMetadata {
    std::uint64_t seed = 0;
    std::size_t n_steps = 0;
    double sigma_min = 0.0;
    double sigma_max = 0.0;
    double rho = 0.0;
    Solver solver = Solver::heun;
    AdjointMode mode = AdjointMode::stored;
    std::string field_id;
    std::string quantity;
};

struct SensitivityResult {
    StateVector dq_dc;
    std::vector<ScalarConditioner> dq_dscalar;
    std::optional<StateVector> dq_dxi;
    std::optional<double> q;
    RunMetadata meta;

    std::optional<double> scalar_gradient(std::string_view name) const {
        for (const auto& s : dq_dscalar)
            if (s.name == name) return s.value;
        return std::nullopt;
    }
};

struct AdjointOptions {
    AdjointMode mode = AdjointMode::stored;
    /// Step rule for the continuous modes; defaults to the trajectory's solver.
    std::optional<Solver> solver;
    /// Scalar conditioners that get an accumulator; nullopt tracks all of them.
    std::optional<std::vector<std::string>> tracked_scalars;
};

namespace detail {

// Gradient accumulators plus the bookkeeping to report them.
struct Accumulators {
    Vec w;
    Vec v;
    std::vector<bool> tracked;

    Accumulators(const Conditioning& cond, const std::optional<std::vector<std::string>>& names)
        : w(cond.c().size(), 0.0), v(cond.scalars().size(), 0.0), tracked(cond.scalars().size(), names == std::nullopt) {
        if (!names) return;
        for (const auto& n : *names) {
            bool found = false;
            for (std::size_t k = 0; k < cond.scalars().size(); ++k)
                if (cond.scalars()[k].name == n) tracked[k] = found = true;
            if (!found) throw ContractError("adjoint: cannot track unknown scalar '" + n + "'");
        }
    }

    // acc += alpha * pullback
    void add(double alpha, const Pullback& pb) {
        axpy(alpha, pb.c, w);
        for (std::size_t k = 0; k < v.size(); ++k)
            if (tracked[k]) v[k] += alpha * pb.scalars[k];
    }

    SensitivityResult finish(const Trajectory& traj) const {
        SensitivityResult r{traj.cond.c().with_data(w), {}, std::nullopt, std::nullopt, {}};
        for (std::size_t k = 0; k < v.size(); ++k)
            if (tracked[k]) r.dq_dscalar.push_back({traj.cond.scalars()[k].name, v[k]});
        return r;
    }
};

inline void check_finite(std::span<const double> a, std::span<const double> w, std::size_t step) {
    if (!all_finite(a) || !all_finite(w)) throw DivergenceError("adjoint: non-finite adjoint state", step);
}

inline void fill_metadata(SensitivityResult& r, const VelocityField& field, const Trajectory& traj, Solver solver,
                          AdjointMode mode) {
    r.meta.n_steps = traj.grid.n_steps();
    r.meta.sigma_min = traj.grid.sigma_min;
    r.meta.sigma_max = traj.grid.sigma_max;
    r.meta.rho = traj.grid.rho;
    r.meta.solver = solver;
    r.meta.mode = mode;
    r.meta.field_id = field.descriptor().name;
}

// Continuous adjoint reading X from the stored trajectory. The interval
// [0, t_{N-1}] takes one evaluation at t_{N-1}, mirroring the sampler's final
// Euler step, so the velocity is never touched at t = 0.
inline SensitivityResult continuous_stored(const VelocityField& field, const Trajectory& traj, Vec a, Solver solver,
                                           Accumulators acc) {
    const auto& t = traj.grid.levels;
    const auto& X = traj.states;
    const auto& cond = traj.cond;
    for (std::size_t i = t.size() - 1; i-- > 0;) {
        const double h = t[i] - t[i + 1];
        if (t[i + 1] == 0.0) {
            const Pullback pb = field.pullback(a, X[i], t[i], cond);
            acc.add(-h, pb);
            axpy(-h, pb.state, a);
        } else if (solver == Solver::euler) {
            const Pullback pb = field.pullback(a, X[i + 1], t[i + 1], cond);
            acc.add(-h, pb);
            axpy(-h, pb.state, a);
        } else {
            const Pullback pb1 = field.pullback(a, X[i + 1], t[i + 1], cond);
            Vec a_pred = a;
            axpy(-h, pb1.state, a_pred);
            const Pullback pb2 = field.pullback(a_pred, X[i], t[i], cond);
            acc.add(-0.5 * h, pb1);
            acc.add(-0.5 * h, pb2);
            axpy(-0.5 * h, pb1.state, a);
            axpy(-0.5 * h, pb2.state, a);
        }
        check_finite(a, acc.w, i);
    }
    auto r = acc.finish(traj);
    r.dq_dxi = StateVector(scaled(a, traj.grid.t_max()), traj.state_shape, traj.state_grid);
    return r;
}

// Continuous adjoint re-integrating X forward in t from X_0 alongside a, w, v.
inline SensitivityResult continuous_recompute(const VelocityField& field, const Trajectory& traj, Vec a,
                                              Solver solver, Accumulators acc) {
    const auto& t = traj.grid.levels;
    const auto& cond = traj.cond;
    Vec x = traj.final_state;
    for (std::size_t i = t.size() - 1; i-- > 0;) {
        const double h = t[i] - t[i + 1];
        const Vec u1 = field.velocity(x, t[i + 1], cond);
        const Pullback pb1 = field.pullback(a, x, t[i + 1], cond);
        if (solver == Solver::euler) {
            axpy(h, u1, x);
            acc.add(-h, pb1);
            axpy(-h, pb1.state, a);
        } else {
            Vec x_pred = x, a_pred = a;
            axpy(h, u1, x_pred);
            axpy(-h, pb1.state, a_pred);
            const Vec u2 = field.velocity(x_pred, t[i], cond);
            const Pullback pb2 = field.pullback(a_pred, x_pred, t[i], cond);
            axpy(0.5 * h, u1, x);
            axpy(0.5 * h, u2, x);
            acc.add(-0.5 * h, pb1);
            acc.add(-0.5 * h, pb2);
            axpy(-0.5 * h, pb1.state, a);
            axpy(-0.5 * h, pb2.state, a);
        }
        if (!all_finite(x)) throw DivergenceError("adjoint: non-finite recomputed state", i);
        check_finite(a, acc.w, i);
    }
    auto r = acc.finish(traj);
    r.dq_dxi = StateVector(scaled(a, traj.grid.t_max()), traj.state_shape, traj.state_grid);
    return r;
}

inline void check_seed(const VelocityField& field, const Trajectory& traj, const StateVector& dq_dx0) {
    if (dq_dx0.shape() != traj.state_shape || traj.state_shape != field.descriptor().state_shape)
        throw ContractError("adjoint: dq/dX_0 shape " + shape_string(dq_dx0.shape()) + " differs from state shape " +
                            shape_string(traj.state_shape));
    field.check_conditioning(traj.cond);
}

}  // namespace detail

/// Exact reverse-mode gradient of the recorded discrete sampler map
/// (xi, c, scalars) -> X_0, contracted with dq/dX_0.
inline SensitivityResult discrete_adjoint(const VelocityField& field, const Trajectory& traj,
                                          const StateVector& dq_dx0,
                                          const std::optional<std::vector<std::string>>& tracked_scalars = std::nullopt) {
    detail::check_seed(field, traj, dq_dx0);
    if (!traj.stored()) throw ContractError("discrete_adjoint: trajectory states were not stored");

    const auto& t = traj.grid.levels;
    const auto& X = traj.states;
    const auto& cond = traj.cond;
    detail::Accumulators acc(cond, tracked_scalars);
    Vec a = dq_dx0.data();

    for (std::size_t i = t.size() - 1; i-- > 0;) {
        const double h = t[i + 1] - t[i];
        if (traj.solver == Solver::euler || t[i + 1] == 0.0) {
            // x' = x + h u(x)
            const Pullback pb = field.pullback(a, X[i], t[i], cond);
            acc.add(h, pb);
            axpy(h, pb.state, a);
        } else {
            // x' = x + h/2 (k1 + k2),  k1 = u(x, t_i),  k2 = u(x + h k1, t_{i+1})
            Vec x_pred = X[i];
            axpy(h, field.velocity(X[i], t[i], cond), x_pred);
            const Vec k_bar = scaled(a, 0.5 * h);
            const Pullback pb2 = field.pullback(k_bar, x_pred, t[i + 1], cond);
            Vec k1_bar = k_bar;
            axpy(h, pb2.state, k1_bar);
            const Pullback pb1 = field.pullback(k1_bar, X[i], t[i], cond);
            acc.add(1.0, pb2);
            acc.add(1.0, pb1);
            axpy(1.0, pb2.state, a);
            axpy(1.0, pb1.state, a);
        }
        detail::check_finite(a, acc.w, i);
    }
    auto r = acc.finish(traj);
    r.dq_dxi = StateVector(scaled(a, traj.grid.t_max()), traj.state_shape, traj.state_grid);
    detail::fill_metadata(r, field, traj, traj.solver, AdjointMode::discrete);
    return r;
}

/// Adjoint sensitivities in any mode. Stored mode needs a stored trajectory;
/// recompute mode needs a field that is regular at t = 0.
inline SensitivityResult adjoint_solve(const VelocityField& field, const Trajectory& traj, const StateVector& dq_dx0,
                                       const AdjointOptions& opts = {}) {
    detail::check_seed(field, traj, dq_dx0);
    const Solver solver = opts.solver.value_or(traj.solver);
    SensitivityResult r;
    switch (opts.mode) {
        case AdjointMode::discrete:
            if (opts.solver && *opts.solver != traj.solver)
                throw ConfigError("adjoint_solve: discrete mode follows the trajectory's solver");
            return discrete_adjoint(field, traj, dq_dx0, opts.tracked_scalars);
        case AdjointMode::stored:
            if (!traj.stored()) throw ConfigError("adjoint_solve: stored mode needs a stored trajectory");
            r = detail::continuous_stored(field, traj, dq_dx0.data(), solver,
                                          detail::Accumulators(traj.cond, opts.tracked_scalars));
            break;
        case AdjointMode::recompute:
            if (!field.regular_at_zero())
                throw ConfigError("adjoint_solve: recompute mode needs a field regular at t = 0 (" +
                                  field.descriptor().name + " is not)");
            r = detail::continuous_recompute(field, traj, dq_dx0.data(), solver,
                                             detail::Accumulators(traj.cond, opts.tracked_scalars));
            break;
    }
    detail::fill_metadata(r, field, traj, solver, opts.mode);
    return r;
}

// ---------------------------------------------------------------------------
// Sample + quantity + adjoint in one call, and batch averaging.

struct SensitivityRequest {
    TimeGrid grid;
    Solver solver = Solver::heun;
    AdjointMode mode = AdjointMode::stored;
    std::optional<std::vector<std::string>> tracked_scalars;
    /// Lat-lon metadata attached to generated noise (needed by latitude-weighted quantities).
    std::optional<GridMeta> state_grid;
};

inline SensitivityResult compute_sensitivity(const VelocityField& field, const QuantitySpec& q_spec,
                                             const Conditioning& cond, const StateVector& xi,
                                             const SensitivityRequest& req) {
    const bool store = req.mode != AdjointMode::recompute;
    const Trajectory traj = sample(field, xi, cond, req.grid, req.solver, store);
    const StateVector x0 = traj.x0();
    const StateVector seed = gradient(q_spec, x0);
    SensitivityResult r = adjoint_solve(field, traj, seed, {req.mode, std::nullopt, req.tracked_scalars});
    r.q = evaluate(q_spec, x0);
    r.meta.quantity = std::string(to_string(q_spec.kind));
    return r;
}

struct SeedPolicy {
    enum class Kind { fixed, fresh };
    Kind kind = Kind::fresh;
    std::uint64_t seed = 0;

    /// Noise seed for sample k: the base seed itself when fixed, else a
    /// SplitMix64-derived stream per index.
    std::uint64_t for_sample(std::size_t k) const { return kind == Kind::fixed ? seed : mix_seed(seed, k); }
};

struct SampleOutcome {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    std::optional<SensitivityResult> result;
    std::string error;
};

struct BatchResult {
    std::optional<SensitivityResult> mean;
    std::vector<SampleOutcome> samples;
    std::map<long, SensitivityResult> group_means;
    std::map<long, std::size_t> group_counts;
    std::vector<std::size_t> failed;
};

namespace detail {

// Running mean m += (x - m) / n in a fixed index order: exact for a single
// sample and for identical samples, and independent of worker count.
struct RunningMean {
    std::size_t n = 0;
    Vec dc;
    Vec ds;
    double q = 0.0;
    std::optional<SensitivityResult> proto;

    void add(const SensitivityResult& r) {
        ++n;
        const double inv = 1.0 / static_cast<double>(n);
        if (!proto) {
            proto = r;
            dc = r.dq_dc.data();
            for (const auto& s : r.dq_dscalar) ds.push_back(s.value);
            q = r.q.value_or(0.0);
            return;
        }
        for (std::size_t i = 0; i < dc.size(); ++i) dc[i] += (r.dq_dc[i] - dc[i]) * inv;
        for (std::size_t k = 0; k < ds.size(); ++k) ds[k] += (r.dq_dscalar[k].value - ds[k]) * inv;
        q += (r.q.value_or(0.0) - q) * inv;
    }

    std::optional<SensitivityResult> result() const {
        if (!proto) return std::nullopt;
        SensitivityResult m = *proto;
        m.dq_dc = m.dq_dc.with_data(dc);
        for (std::size_t k = 0; k < ds.size(); ++k) m.dq_dscalar[k].value = ds[k];
        if (m.q) m.q = q;
        m.dq_dxi.reset();
        return m;
    }
};

}  // namespace detail

/// Runs sample + adjoint for every conditioning and averages dq/dc over the
/// samples that succeeded. Diverging samples are reported and excluded.
/// `groups`, when non-empty, assigns each conditioning a key for grouped means.
inline BatchResult batch_sensitivity(const VelocityField& field, const std::vector<Conditioning>& conds,
                                     const QuantitySpec& q_spec, const SeedPolicy& seeds,
                                     const SensitivityRequest& req, std::size_t parallel = 1,
                                     const std::vector<long>& groups = {}) {
    if (conds.empty()) throw ContractError("batch_sensitivity: empty conditioning list");
    if (!groups.empty() && groups.size() != conds.size())
        throw ContractError("batch_sensitivity: one group key per conditioning required");

    BatchResult out;
    out.samples.resize(conds.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr fatal;
    std::mutex fatal_mutex;

    auto worker = [&] {
        for (std::size_t k = next++; k < conds.size(); k = next++) {
            auto& slot = out.samples[k];
            slot.index = k;
            slot.seed = seeds.for_sample(k);
            try {
                const auto noise = gaussian_noise(field.descriptor().state_shape, slot.seed);
                const StateVector xi(noise.data(), noise.shape(), req.state_grid);
                slot.result = compute_sensitivity(field, q_spec, conds[k], xi, req);
                slot.result->meta.seed = slot.seed;
            } catch (const DivergenceError& e) {
                slot.error = e.what();
            } catch (...) {
                std::lock_guard lock(fatal_mutex);
                if (!fatal) fatal = std::current_exception();
            }
        }
    };

    const std::size_t n_workers = std::max<std::size_t>(1, std::min(parallel, conds.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (fatal) std::rethrow_exception(fatal);

    detail::RunningMean all;
    std::map<long, detail::RunningMean> grouped;
    for (const auto& s : out.samples) {
        if (!s.result) {
            out.failed.push_back(s.index);
            continue;
        }
        all.add(*s.result);
        if (!groups.empty()) grouped[groups[s.index]].add(*s.result);
    }
    out.mean = all.result();
    if (out.mean) out.mean->meta.seed = seeds.seed;
    for (const auto& [key, m] : grouped) {
        out.group_means.emplace(key, *m.result());
        out.group_counts[key] = m.n;
    }
    return out;
}

}  // namespace flowgrad
