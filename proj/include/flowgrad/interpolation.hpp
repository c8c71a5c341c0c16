#pragma once

// Mid-month piecewise-linear conditioning c(tau), where tau is the day of the
// year plus the day fraction (tau = 1.5 is 1 January, 12:00 UTC).

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "flowgrad/core.hpp"

namespace flowgrad {

struct SeriesNode {
    double tau;
    StateVector c;
};

/// Nodes with strictly increasing tau, gaps below 31 days, one shape.
class ConditioningSeries {
public:
    explicit ConditioningSeries(std::vector<SeriesNode> nodes) : nodes_(std::move(nodes)) {
        if (nodes_.size() < 2) throw ContractError("ConditioningSeries: need at least two nodes");
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (!std::isfinite(nodes_[i].tau)) throw ContractError("ConditioningSeries: non-finite tau");
            if (!nodes_[i].c.same_shape(nodes_[0].c)) throw ContractError("ConditioningSeries: node shapes differ");
            if (i == 0) continue;
            const double prev = nodes_[i - 1].tau, cur = nodes_[i].tau;
            if (!(cur > prev)) throw ContractError("ConditioningSeries: tau must be strictly increasing");
            if (!(cur < prev + 31.0))
                throw ContractError("ConditioningSeries: node gap " + std::to_string(cur - prev) + " days is not < 31");
        }
    }

    const std::vector<SeriesNode>& nodes() const { return nodes_; }
    double first_tau() const { return nodes_.front().tau; }
    double last_tau() const { return nodes_.back().tau; }
    const Shape& shape() const { return nodes_.front().c.shape(); }

    /// Index i of the segment [tau_i, tau_{i+1}) holding tau; the last
    /// segment also owns tau_last.
    std::size_t segment(double tau) const {
        if (!(tau >= first_tau() && tau <= last_tau()))
            throw RangeError("ConditioningSeries: tau " + std::to_string(tau) + " outside [" +
                             std::to_string(first_tau()) + ", " + std::to_string(last_tau()) + "]");
        auto it = std::upper_bound(nodes_.begin(), nodes_.end(), tau,
                                   [](double v, const SeriesNode& n) { return v < n.tau; });
        const auto idx = static_cast<std::size_t>(it - nodes_.begin());
        return std::min(idx - 1, nodes_.size() - 2);
    }

private:
    std::vector<SeriesNode> nodes_;
};

/// c(tau) = c_i + (tau - tau_i) / (tau_{i+1} - tau_i) (c_{i+1} - c_i); node values are returned as stored.
inline StateVector interp(const ConditioningSeries& series, double tau) {
    const std::size_t i = series.segment(tau);
    const auto& lo = series.nodes()[i];
    const auto& hi = series.nodes()[i + 1];
    if (tau == lo.tau) return lo.c;
    if (tau == hi.tau) return hi.c;
    const double lambda = (tau - lo.tau) / (hi.tau - lo.tau);
    Vec c = lo.c.data();
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += lambda * (hi.c[j] - lo.c[j]);
    return lo.c.with_data(std::move(c));
}

/// Slope of the containing segment; at an interior node the right segment wins.
inline StateVector interp_derivative(const ConditioningSeries& series, double tau) {
    const std::size_t i = series.segment(tau);
    const auto& lo = series.nodes()[i];
    const auto& hi = series.nodes()[i + 1];
    const double gap = hi.tau - lo.tau;
    Vec slope(lo.c.size());
    for (std::size_t j = 0; j < slope.size(); ++j) slope[j] = (hi.c[j] - lo.c[j]) / gap;
    return lo.c.with_data(std::move(slope));
}

struct SeriesDelta {
    StateVector delta_c;
    double delta_tau;
};

/// Consecutive differences of (interp(tau), tau) along a non-decreasing tau list.
inline std::vector<SeriesDelta> series_deltas(const ConditioningSeries& series, const std::vector<double>& taus) {
    for (std::size_t k = 1; k < taus.size(); ++k)
        if (taus[k] < taus[k - 1]) throw ContractError("series_deltas: taus must be non-decreasing");
    std::vector<SeriesDelta> out;
    if (taus.empty()) return out;
    StateVector prev = interp(series, taus.front());
    for (std::size_t k = 1; k < taus.size(); ++k) {
        StateVector cur = interp(series, taus[k]);
        Vec d = cur.data();
        axpy(-1.0, prev.data(), d);
        out.push_back({cur.with_data(std::move(d)), taus[k] - taus[k - 1]});
        prev = std::move(cur);
    }
    return out;
}

/// Evaluation times start, start + cadence, ... up to and including end, with
/// the cadence given in hours and tau in days.
inline std::vector<double> cadence_taus(double start, double end, double cadence_hours) {
    if (!(cadence_hours > 0.0)) throw ConfigError("cadence must be > 0 hours");
    const double step = cadence_hours / 24.0;
    std::vector<double> taus;
    for (std::size_t k = 0;; ++k) {
        const double tau = start + static_cast<double>(k) * step;
        if (tau > end) break;
        taus.push_back(tau);
    }
    return taus;
}

}  // namespace flowgrad
