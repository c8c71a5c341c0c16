#pragma once

// Gradient self-consistency harness: hold the noise fixed, walk the
// conditioning, and compare the sampler's own finite differences of q with
// the gradient-based linearisation
//
//   dq/dc . dc = <dq/dc, dc> + sum_k dq/ds_k ds_k
//
// summarised by RMSE = sqrt(mean_k (dq_k - linearised_k)^2).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowgrad/adjoint.hpp"
#include "flowgrad/core.hpp"
#include "flowgrad/quantities.hpp"
#include "flowgrad/sampler.hpp"

namespace flowgrad {

struct CheckRecord {
    std::size_t k = 0;
    double q = 0.0;
    double delta_q = 0.0;
    double linearized = 0.0;
    Vec delta_c;
    std::vector<ScalarConditioner> delta_scalars;

    double residual() const { return delta_q - linearized; }
};

inline double linearized_delta(const SensitivityResult& result, std::span<const double> delta_c,
                               const std::vector<ScalarConditioner>& delta_scalars) {
    if (delta_c.size() != result.dq_dc.size())
        throw ContractError("linearized_delta: delta_c has " + std::to_string(delta_c.size()) + " entries, expected " +
                            std::to_string(result.dq_dc.size()));
    double total = dot(result.dq_dc.data(), delta_c);
    for (const auto& d : delta_scalars) {
        const auto g = result.scalar_gradient(d.name);
        if (!g) throw ContractError("linearized_delta: no gradient for scalar '" + d.name + "'");
        total += *g * d.value;
    }
    return total;
}

inline double rmse(const std::vector<CheckRecord>& records) {
    if (records.empty()) throw ContractError("rmse: no records");
    double sum = 0.0;
    for (const auto& r : records) sum += r.residual() * r.residual();
    return std::sqrt(sum / static_cast<double>(records.size()));
}

/// Population standard deviation of delta_q.
inline double delta_q_std(const std::vector<CheckRecord>& records) {
    if (records.empty()) throw ContractError("delta_q_std: no records");
    double mean = 0.0;
    for (const auto& r : records) mean += r.delta_q;
    mean /= static_cast<double>(records.size());
    double var = 0.0;
    for (const auto& r : records) var += (r.delta_q - mean) * (r.delta_q - mean);
    return std::sqrt(var / static_cast<double>(records.size()));
}

/// RMSE / std(delta_q); 0 when both vanish, +inf when only the spread does.
inline double relative_rmse(const std::vector<CheckRecord>& records) {
    const double e = rmse(records);
    const double s = delta_q_std(records);
    if (s > 0.0) return e / s;
    return e == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
}

struct CheckReport {
    std::vector<CheckRecord> records;
    std::vector<SensitivityResult> gradients;  // one per series entry except the last
    double rmse = 0.0;
    double relative_rmse = 0.0;
};

/// Forward-difference check over a conditioning series with one fixed noise
/// sample. Record k linearises at entry k. With step_scale = alpha != 1 each
/// record's delta becomes alpha (entry_{k+1} - entry_k) about the same entry k,
/// which isolates the Taylor remainder for amplitude sweeps.
inline CheckReport run_check(const VelocityField& field, const QuantitySpec& q_spec,
                             const std::vector<Conditioning>& series, const StateVector& xi,
                             const SensitivityRequest& req, std::size_t parallel = 1, double step_scale = 1.0) {
    if (series.size() < 2) throw ContractError("run_check: need at least two conditionings");
    if (!(step_scale > 0.0)) throw ConfigError("run_check: step scale must be > 0");
    const std::size_t n = series.size();
    const bool scaled_steps = step_scale != 1.0;

    struct Step {
        Vec delta_c;
        std::vector<ScalarConditioner> delta_s;
        std::optional<Conditioning> end;  // only when the steps are rescaled
    };
    std::vector<Step> steps(n - 1);
    for (std::size_t k = 0; k + 1 < n; ++k) {
        const auto& s0 = series[k].scalars();
        const auto& s1 = series[k + 1].scalars();
        if (series[k].scalar_names() != series[k + 1].scalar_names())
            throw ContractError("run_check: scalar conditioners change along the series");
        Vec dc = series[k + 1].c().data();
        axpy(-1.0, series[k].c().data(), dc);
        Vec ds(s0.size());
        for (std::size_t j = 0; j < s0.size(); ++j) ds[j] = s1[j].value - s0[j].value;
        if (scaled_steps) {
            steps[k].end = series[k].shifted(dc, ds, step_scale);
            for (double& v : dc) v *= step_scale;
            for (double& v : ds) v *= step_scale;
        }
        steps[k].delta_c = std::move(dc);
        for (std::size_t j = 0; j < s0.size(); ++j) steps[k].delta_s.push_back({s0[j].name, ds[j]});
    }

    // Task j < n - 1: gradient and q at entry j. Task n - 1 + k: q at the end of
    // rescaled step k, or at the last entry when the steps are not rescaled.
    const std::size_t n_tasks = scaled_steps ? 2 * (n - 1) : n;
    std::vector<double> q_at(n_tasks);
    std::vector<std::optional<SensitivityResult>> grads(n - 1);
    std::atomic<std::size_t> next{0};
    std::exception_ptr fatal;
    std::mutex m;

    auto worker = [&] {
        for (std::size_t j = next++; j < n_tasks; j = next++) {
            try {
                if (j + 1 < n) {
                    grads[j] = compute_sensitivity(field, q_spec, series[j], xi, req);
                    q_at[j] = *grads[j]->q;
                } else {
                    const Conditioning& c = scaled_steps ? *steps[j - (n - 1)].end : series[n - 1];
                    q_at[j] = evaluate(q_spec, sample(field, xi, c, req.grid, req.solver, false).x0());
                }
            } catch (const DivergenceError& e) {
                std::lock_guard lock(m);
                if (!fatal)
                    fatal = std::make_exception_ptr(
                        DivergenceError("run_check: sample " + std::to_string(j) + ": " + e.what(), e.step()));
            } catch (...) {
                std::lock_guard lock(m);
                if (!fatal) fatal = std::current_exception();
            }
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(parallel, n_tasks));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (fatal) std::rethrow_exception(fatal);

    CheckReport report;
    for (std::size_t k = 0; k + 1 < n; ++k) {
        CheckRecord rec;
        rec.k = k;
        rec.q = q_at[k];
        rec.delta_q = (scaled_steps ? q_at[n - 1 + k] : q_at[k + 1]) - q_at[k];
        rec.delta_c = std::move(steps[k].delta_c);
        for (auto& d : steps[k].delta_s)
            if (grads[k]->scalar_gradient(d.name)) rec.delta_scalars.push_back(std::move(d));
        rec.linearized = linearized_delta(*grads[k], rec.delta_c, rec.delta_scalars);
        report.records.push_back(std::move(rec));
        report.gradients.push_back(std::move(*grads[k]));
    }
    report.rmse = rmse(report.records);
    report.relative_rmse = relative_rmse(report.records);
    return report;
}

/// dq/dc_total = w_T + v_T(tau) * dtau/dc.
inline StateVector total_derivative(const SensitivityResult& result, const StateVector& dtau_dc) {
    const auto v = result.scalar_gradient("tau");
    if (!v) throw ContractError("total_derivative: result carries no 'tau' gradient");
    if (!dtau_dc.same_shape(result.dq_dc)) throw ContractError("total_derivative: dtau/dc shape differs from c");
    Vec total = result.dq_dc.data();
    axpy(*v, dtau_dc.data(), total);
    return result.dq_dc.with_data(std::move(total));
}

}  // namespace flowgrad
