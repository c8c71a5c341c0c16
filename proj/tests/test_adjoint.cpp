#include <gtest/gtest.h>

#include <cmath>

#include "flowgrad/adjoint.hpp"
#include "flowgrad/oracle.hpp"
#include "support.hpp"

using namespace flowgrad;
using namespace flowgrad::test;

namespace {

/// Analytic field whose velocity blows up for conditionings with c[0] > 1.
class FragileField final : public VelocityField {
public:
    FragileField() : inner_(Matrix(2, 1, {1.0, -1.0}), 1.0) {}
    const FieldDescriptor& descriptor() const override { return inner_.descriptor(); }
    bool regular_at_zero() const override { return true; }

protected:
    Vec velocity_impl(std::span<const double> x, double t, const Conditioning& c) const override {
        if (c.c()[0] > 1.0) return Vec(x.size(), std::numeric_limits<double>::infinity());
        return inner_.velocity(x, t, c);
    }
    Pullback pullback_impl(std::span<const double> a, std::span<const double> x, double t,
                           const Conditioning& c) const override {
        return inner_.pullback(a, x, t, c);
    }

private:
    AnalyticGaussianField inner_;
};

const std::vector<AdjointMode> kAllModes{AdjointMode::stored, AdjointMode::recompute, AdjointMode::discrete};

}  // namespace

TEST(Adjoint, NoConditioningDependenceGivesExactZero) {
    const LinearField f(-0.3, {3}, {2}, {"tau"});
    const Conditioning cond(StateVector(Vec{0.5, -0.5}), {{"tau", 3.0}});
    const auto traj = sample(f, gaussian_noise({3}, 1), cond, edm_time_grid(16), Solver::heun, true);
    for (auto mode : kAllModes) {
        const auto r = adjoint_solve(f, traj, StateVector(Vec{1.0, 2.0, 3.0}), {mode});
        for (double v : r.dq_dc.data()) EXPECT_EQ(v, 0.0);
        EXPECT_EQ(r.dq_dscalar.at(0).value, 0.0);
    }
}

TEST(Adjoint, ZeroSeedGivesZeroGradients) {
    NormalStream rng(1);
    const AnalyticGaussianField f(random_matrix(rng, 3, 2), 1.0);
    const Conditioning cond(StateVector(random_vec(rng, 2)));
    const auto traj = sample(f, gaussian_noise({3}, 2), cond, edm_time_grid(16), Solver::heun, true);
    for (auto mode : kAllModes) {
        const auto r = adjoint_solve(f, traj, StateVector(Vec(3, 0.0)), {mode});
        for (double v : r.dq_dc.data()) EXPECT_EQ(v, 0.0);
        for (double v : r.dq_dxi->data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Adjoint, StoredModeMatchesClosedForm) {
    NormalStream rng(2);
    const Matrix m = random_matrix(rng, 4, 3);
    const AnalyticGaussianField f(m, 1.0);
    const Conditioning cond(StateVector(random_vec(rng, 3)));
    const auto xi = gaussian_noise({4}, 3);
    const Vec g = random_vec(rng, 4);
    const double gain = 1.0 - 1.0 / std::sqrt(1.0 + 6400.0);
    const Vec exact = scaled(m.apply_transposed(g), gain);
    double prev = 1.0;
    for (std::size_t n : {32, 128, 512}) {
        const auto traj = sample(f, xi, cond, edm_time_grid(n), Solver::heun, true);
        const auto r = adjoint_solve(f, traj, StateVector(g), {AdjointMode::stored});
        const double err = rel_gap(r.dq_dc.data(), exact);
        if (n == 128) {
            EXPECT_LT(err, 1e-3);
        } else if (n == 512) {
            EXPECT_LT(err, 1e-5);
        }
        EXPECT_LT(err, prev);
        prev = err;
    }
}

TEST(Adjoint, RecomputeModeMatchesClosedForm) {
    NormalStream rng(3);
    const Matrix m = random_matrix(rng, 4, 3);
    const AnalyticGaussianField f(m, 1.0);
    const Conditioning cond(StateVector(random_vec(rng, 3)));
    const Vec g = random_vec(rng, 4);
    const Vec exact = scaled(m.apply_transposed(g), 1.0 - 1.0 / std::sqrt(6401.0));
    const auto traj = sample(f, gaussian_noise({4}, 3), cond, edm_time_grid(128), Solver::heun, false);
    const auto r = adjoint_solve(f, traj, StateVector(g), {AdjointMode::recompute});
    EXPECT_LT(rel_gap(r.dq_dc.data(), exact), 1e-3);
}

TEST(Adjoint, DiscreteEulerOnLinearFieldIsProductOfStepFactors) {
    const LinearField f(-1.0, {1}, {1});
    const auto grid = edm_time_grid(12);
    const auto traj = sample(f, StateVector(Vec{0.4}), Conditioning(StateVector(Vec{0.0})), grid, Solver::euler, true);
    const auto r = discrete_adjoint(f, traj, StateVector(Vec{1.0}));
    // x_{i+1} = x_i + h_i u(x_i) = (1 - h_i) x_i with h_i = t_{i+1} - t_i.
    double a = 1.0;
    for (std::size_t i = grid.levels.size() - 1; i-- > 0;) a *= 1.0 - (grid.levels[i + 1] - grid.levels[i]);
    EXPECT_NEAR((*r.dq_dxi)[0], 80.0 * a, 1e-13 * 80.0 * a);
    EXPECT_EQ(r.dq_dc[0], 0.0);
}

TEST(Adjoint, DiscreteMatchesFiniteDifferences) {
    const EdmFlowField f(random_denoiser(3, 2, 5));
    const Conditioning cond(StateVector(Vec{0.3, -0.6}), {{"tau", 20.0}});
    const QuantitySpec q{};
    const auto xi = gaussian_noise({3}, 9);
    for (Solver s : {Solver::euler, Solver::heun}) {
        const auto grid = edm_time_grid(24);
        const auto r = compute_sensitivity(f, q, cond, xi, {grid, s, AdjointMode::discrete});
        NormalStream rng(4);
        for (int k = 0; k < 5; ++k) {
            const oracle::Direction dir{random_vec(rng, 2), random_vec(rng, 1)};
            const double ad = dot(r.dq_dc.data(), dir.c) + r.dq_dscalar[0].value * dir.scalars[0];
            const double fd = oracle::fd_directional(f, q, cond, xi, dir, 1e-5, grid, s);
            EXPECT_LT(rel_err(fd, ad), 1e-6);
        }
    }
}

TEST(Adjoint, DiscreteNoiseGradientMatchesFiniteDifferences) {
    const EdmFlowField f(random_denoiser(3, 2, 6));
    const Conditioning cond(StateVector(Vec{0.3, -0.6}), {{"tau", 20.0}});
    const QuantitySpec q{};
    const auto xi = gaussian_noise({3}, 9);
    const auto grid = edm_time_grid(16);
    const auto r = compute_sensitivity(f, q, cond, xi, {grid, Solver::heun, AdjointMode::discrete});
    const Vec d{0.3, -1.0, 0.5};
    const double eps = 1e-6;
    Vec xp = xi.data(), xm = xi.data();
    axpy(eps, d, xp);
    axpy(-eps, d, xm);
    const double fd = (oracle::sampled_quantity(f, q, cond, StateVector(xp), grid, Solver::heun) -
                       oracle::sampled_quantity(f, q, cond, StateVector(xm), grid, Solver::heun)) /
                      (2.0 * eps);
    EXPECT_LT(rel_err(fd, dot(r.dq_dxi->data(), d)), 1e-6);
}

TEST(Adjoint, SeedScalingIsExact) {
    const EdmFlowField f(random_denoiser(3, 2, 7));
    const Conditioning cond(StateVector(Vec{0.1, 0.9}), {{"tau", 2.0}});
    const auto traj = sample(f, gaussian_noise({3}, 1), cond, edm_time_grid(16), Solver::heun, true);
    const StateVector g(Vec{0.3, -0.2, 0.7});
    const auto r1 = discrete_adjoint(f, traj, g);
    const auto r4 = discrete_adjoint(f, traj, g.with_data(scaled(g.data(), 4.0)));
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(r4.dq_dc[i], 4.0 * r1.dq_dc[i]);
    EXPECT_EQ(r4.dq_dscalar[0].value, 4.0 * r1.dq_dscalar[0].value);
}

TEST(Adjoint, SuperpositionInSeedCotangent) {
    const EdmFlowField f(random_denoiser(3, 2, 8));
    const Conditioning cond(StateVector(Vec{0.1, 0.9}), {{"tau", 2.0}});
    const auto traj = sample(f, gaussian_noise({3}, 1), cond, edm_time_grid(16), Solver::heun, true);
    const Vec g1{0.3, -0.2, 0.7}, g2{-1.0, 0.4, 0.1};
    const double alpha = 0.37, beta = -1.9;
    Vec g = scaled(g1, alpha);
    axpy(beta, g2, g);
    for (auto mode : {AdjointMode::discrete, AdjointMode::stored}) {
        const auto r = adjoint_solve(f, traj, StateVector(g), {mode});
        const auto r1 = adjoint_solve(f, traj, StateVector(g1), {mode});
        const auto r2 = adjoint_solve(f, traj, StateVector(g2), {mode});
        for (std::size_t i = 0; i < 2; ++i) {
            const double lin = alpha * r1.dq_dc[i] + beta * r2.dq_dc[i];
            EXPECT_LE(std::abs(r.dq_dc[i] - lin), 1e-12 * std::max(1.0, std::abs(lin)));
        }
    }
}

TEST(Adjoint, StoredEqualsDiscreteOnAnalyticField) {
    // For u linear in x the stored-mode Heun rule coincides with the exact
    // reverse pass of the Heun sampler.
    NormalStream rng(5);
    const AnalyticGaussianField f(random_matrix(rng, 3, 2), 0.8);
    const Conditioning cond(StateVector(random_vec(rng, 2)));
    const auto traj = sample(f, gaussian_noise({3}, 1), cond, edm_time_grid(20), Solver::heun, true);
    const StateVector g(random_vec(rng, 3));
    const auto s = adjoint_solve(f, traj, g, {AdjointMode::stored});
    const auto d = adjoint_solve(f, traj, g, {AdjointMode::discrete});
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(s.dq_dc[i], d.dq_dc[i], 1e-13);
}

TEST(Adjoint, ContinuousConvergesToDiscrete) {
    const EdmFlowField f(random_denoiser(3, 2, 9));
    const Conditioning cond(StateVector(Vec{0.2, -0.1}), {{"tau", 50.0}});
    const auto xi = gaussian_noise({3}, 2);
    const QuantitySpec q{};
    std::vector<double> gaps;
    for (std::size_t n : {32, 64, 128, 256}) {
        const auto grid = edm_time_grid(n);
        const auto d = compute_sensitivity(f, q, cond, xi, {grid, Solver::heun, AdjointMode::discrete});
        const auto s = compute_sensitivity(f, q, cond, xi, {grid, Solver::heun, AdjointMode::stored});
        gaps.push_back(rel_gap(s.dq_dc.data(), d.dq_dc.data()));
    }
    for (std::size_t i = 1; i < gaps.size(); ++i) EXPECT_GE(std::log2(gaps[i - 1] / gaps[i]), 1.8);
}

TEST(Adjoint, ModeCompatibilityErrors) {
    const EdmFlowField edm(random_denoiser(2, 1, 1));
    const Conditioning cond(StateVector(Vec{0.0}), {{"tau", 1.0}});
    const auto stored = sample(edm, gaussian_noise({2}, 1), cond, edm_time_grid(4), Solver::heun, true);
    const auto bare = sample(edm, gaussian_noise({2}, 1), cond, edm_time_grid(4), Solver::heun, false);
    const StateVector g(Vec{1.0, 0.0});
    EXPECT_THROW(adjoint_solve(edm, stored, g, {AdjointMode::recompute}), ConfigError);
    EXPECT_THROW(adjoint_solve(edm, bare, g, {AdjointMode::stored}), ConfigError);
    EXPECT_THROW(discrete_adjoint(edm, bare, g), ContractError);
    EXPECT_THROW(adjoint_solve(edm, stored, g, {AdjointMode::discrete, Solver::euler}), ConfigError);
    EXPECT_THROW(adjoint_solve(edm, stored, StateVector(Vec{1.0}), {}), ContractError);
    EXPECT_THROW(adjoint_solve(edm, stored, g, {AdjointMode::stored, std::nullopt, std::vector<std::string>{"zeta"}}),
                 ContractError);
    EXPECT_THROW(parse_mode("adjoint"), ConfigError);
}

TEST(Adjoint, MetadataRecorded) {
    const LinearField f(-1.0, {2}, {1});
    const auto r = compute_sensitivity(f, QuantitySpec{}, Conditioning(StateVector(Vec{0.0})), gaussian_noise({2}, 1),
                                       {edm_time_grid(8), Solver::euler, AdjointMode::recompute});
    EXPECT_EQ(r.meta.n_steps, 8u);
    EXPECT_EQ(r.meta.solver, Solver::euler);
    EXPECT_EQ(r.meta.mode, AdjointMode::recompute);
    EXPECT_EQ(r.meta.field_id, "linear");
    EXPECT_EQ(r.meta.quantity, "weighted_global_mean");
}

TEST(Adjoint, TrackingScalarsLeavesConditioningGradientBitIdentical) {
    const EdmFlowField f(random_denoiser(3, 2, 10, {"tau", "zeta"}));
    const Conditioning cond(StateVector(Vec{0.2, -0.1}), {{"tau", 50.0}, {"zeta", 3600.0}});
    const auto traj = sample(f, gaussian_noise({3}, 2), cond, edm_time_grid(16), Solver::heun, true);
    const StateVector g(Vec{0.2, 0.5, 0.3});
    for (auto mode : {AdjointMode::stored, AdjointMode::discrete}) {
        const auto none = adjoint_solve(f, traj, g, {mode, std::nullopt, std::vector<std::string>{}});
        const auto tau = adjoint_solve(f, traj, g, {mode, std::nullopt, std::vector<std::string>{"tau"}});
        const auto all = adjoint_solve(f, traj, g, {mode});
        EXPECT_EQ(none.dq_dc, all.dq_dc);
        EXPECT_EQ(tau.dq_dc, all.dq_dc);
        EXPECT_TRUE(none.dq_dscalar.empty());
        ASSERT_EQ(tau.dq_dscalar.size(), 1u);
        EXPECT_EQ(tau.dq_dscalar[0].value, *all.scalar_gradient("tau"));
    }
}

TEST(Batch, SingleSampleMeanIsExact) {
    const EdmFlowField f(random_denoiser(3, 2, 11));
    const std::vector<Conditioning> conds{Conditioning(StateVector(Vec{0.2, 0.4}), {{"tau", 3.0}})};
    const SeedPolicy seeds{SeedPolicy::Kind::fresh, 5};
    const SensitivityRequest req{edm_time_grid(12), Solver::heun, AdjointMode::stored};
    const auto b = batch_sensitivity(f, conds, QuantitySpec{}, seeds, req);
    ASSERT_TRUE(b.mean);
    EXPECT_EQ(b.mean->dq_dc, b.samples[0].result->dq_dc);
    EXPECT_EQ(b.mean->dq_dscalar, b.samples[0].result->dq_dscalar);
    const auto direct = compute_sensitivity(f, QuantitySpec{}, conds[0], gaussian_noise({3}, seeds.for_sample(0)), req);
    EXPECT_EQ(b.mean->dq_dc, direct.dq_dc);
}

TEST(Batch, IdenticalInputsGiveIdenticalMean) {
    const EdmFlowField f(random_denoiser(3, 2, 12));
    const std::vector<Conditioning> conds(7, Conditioning(StateVector(Vec{0.2, 0.4}), {{"tau", 3.0}}));
    const auto b = batch_sensitivity(f, conds, QuantitySpec{}, {SeedPolicy::Kind::fixed, 9},
                                     {edm_time_grid(12), Solver::heun, AdjointMode::discrete});
    for (const auto& s : b.samples) EXPECT_EQ(b.mean->dq_dc, s.result->dq_dc);
}

TEST(Batch, AnalyticMeanMatchesClosedForm) {
    NormalStream rng(13);
    const Matrix m = random_matrix(rng, 4, 3);
    const AnalyticGaussianField f(m, 1.0);
    std::vector<Conditioning> conds;
    for (int k = 0; k < 24; ++k) conds.emplace_back(StateVector(random_vec(rng, 3)));
    const QuantitySpec q{QuantityKind::patch_mean, 0, {1, 3}};
    const auto b = batch_sensitivity(f, conds, q, {SeedPolicy::Kind::fresh, 1},
                                     {edm_time_grid(128), Solver::heun, AdjointMode::stored});
    const Vec g{0.0, 0.5, 0.0, 0.5};
    const Vec exact = scaled(m.apply_transposed(g), 1.0 - 1.0 / std::sqrt(6401.0));
    EXPECT_LT(rel_gap(b.mean->dq_dc.data(), exact), 1e-3);
}

TEST(Batch, ResultIndependentOfWorkerCount) {
    const EdmFlowField f(random_denoiser(3, 2, 14));
    NormalStream rng(14);
    std::vector<Conditioning> conds;
    for (int k = 0; k < 13; ++k) conds.emplace_back(StateVector(random_vec(rng, 2)), std::vector<ScalarConditioner>{{"tau", 10.0 * k}});
    std::vector<long> groups;
    for (int k = 0; k < 13; ++k) groups.push_back(k % 3);
    const SensitivityRequest req{edm_time_grid(10), Solver::heun, AdjointMode::stored};
    const auto one = batch_sensitivity(f, conds, QuantitySpec{}, {SeedPolicy::Kind::fresh, 3}, req, 1, groups);
    for (std::size_t workers : {2, 4, 16}) {
        const auto many = batch_sensitivity(f, conds, QuantitySpec{}, {SeedPolicy::Kind::fresh, 3}, req, workers, groups);
        EXPECT_EQ(one.mean->dq_dc, many.mean->dq_dc);
        EXPECT_EQ(one.mean->dq_dscalar, many.mean->dq_dscalar);
        for (const auto& [key, res] : one.group_means) EXPECT_EQ(res.dq_dc, many.group_means.at(key).dq_dc);
    }
    EXPECT_EQ(one.group_counts.at(0), 5u);
    EXPECT_EQ(one.group_counts.at(1), 4u);
}

TEST(Batch, DivergingSamplesAreExcluded) {
    const FragileField f;
    const std::vector<Conditioning> conds{Conditioning(StateVector(Vec{0.5})), Conditioning(StateVector(Vec{2.0})),
                                          Conditioning(StateVector(Vec{-0.5}))};
    const SensitivityRequest req{edm_time_grid(16), Solver::heun, AdjointMode::stored};
    const auto b = batch_sensitivity(f, conds, QuantitySpec{}, {SeedPolicy::Kind::fixed, 1}, req);
    EXPECT_EQ(b.failed, (std::vector<std::size_t>{1}));
    EXPECT_FALSE(b.samples[1].error.empty());
    ASSERT_TRUE(b.mean);
    Vec mean = b.samples[0].result->dq_dc.data();
    mean[0] += (b.samples[2].result->dq_dc[0] - mean[0]) / 2.0;
    EXPECT_EQ(b.mean->dq_dc.data(), mean);

    const std::vector<Conditioning> bad{Conditioning(StateVector(Vec{3.0}))};
    const auto none = batch_sensitivity(f, bad, QuantitySpec{}, {SeedPolicy::Kind::fixed, 1}, req);
    EXPECT_FALSE(none.mean);
    EXPECT_EQ(none.failed.size(), 1u);
}

TEST(Batch, InputErrors) {
    const LinearField f(0.0, {2}, {1});
    const SensitivityRequest req{edm_time_grid(4), Solver::heun, AdjointMode::stored};
    EXPECT_THROW(batch_sensitivity(f, {}, QuantitySpec{}, {}, req), ContractError);
    const std::vector<Conditioning> conds{Conditioning(StateVector(Vec{0.0}))};
    EXPECT_THROW(batch_sensitivity(f, conds, QuantitySpec{}, {}, req, 1, {1, 2}), ContractError);
    // Non-numerical errors are not swallowed as failed samples.
    const std::vector<Conditioning> wrong{Conditioning(StateVector(Vec{0.0, 1.0}))};
    EXPECT_THROW(batch_sensitivity(f, wrong, QuantitySpec{}, {}, req), ContractError);
}
