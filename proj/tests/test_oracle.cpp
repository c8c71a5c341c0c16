#include <gtest/gtest.h>

#include "flowgrad/adjoint.hpp"
#include "flowgrad/oracle.hpp"
#include "support.hpp"

using namespace flowgrad;
using namespace flowgrad::test;

namespace {

/// Classical RK4 on a uniform t grid from T down to 0 for dx/dt = t (x - mu) / (s^2 + t^2).
double dense_solve(double x_T, double mu, double s, double T, std::size_t n) {
    auto u = [&](double x, double t) { return t * (x - mu) / (s * s + t * t); };
    const double h = -T / static_cast<double>(n);
    double x = x_T;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = T + static_cast<double>(i) * h;
        const double k1 = u(x, t);
        const double k2 = u(x + 0.5 * h * k1, t + 0.5 * h);
        const double k3 = u(x + 0.5 * h * k2, t + 0.5 * h);
        const double k4 = u(x + h * k3, t + h);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return x;
}

}  // namespace

TEST(FdDirectional, ZeroDirectionGivesZero) {
    const EdmFlowField f(random_denoiser(3, 2, 1));
    const Conditioning cond(StateVector(Vec{0.3, 0.1}), {{"tau", 5.0}});
    const oracle::Direction dir{Vec{0.0, 0.0}, Vec{0.0}};
    EXPECT_EQ(oracle::fd_directional(f, QuantitySpec{}, cond, gaussian_noise({3}, 1), dir, 1e-5, edm_time_grid(8),
                                     Solver::heun),
              0.0);
}

TEST(FdDirectional, LinearFieldIndependentOfStep) {
    NormalStream rng(2);
    const AnalyticGaussianField f(random_matrix(rng, 3, 2), 1.0);
    const Conditioning cond(StateVector(random_vec(rng, 2)));
    const oracle::Direction dir{random_vec(rng, 2), {}};
    const auto xi = gaussian_noise({3}, 3);
    const auto grid = edm_time_grid(32);
    const double ref = oracle::fd_directional(f, QuantitySpec{}, cond, xi, dir, 1e-2, grid, Solver::heun);
    for (double eps : {3e-3, 1e-3, 1e-4, 1e-5, 1e-6})
        EXPECT_NEAR(oracle::fd_directional(f, QuantitySpec{}, cond, xi, dir, eps, grid, Solver::heun), ref,
                    1e-8 * std::abs(ref))
            << eps;
}

TEST(FdDirectional, AntisymmetricInDirection) {
    const EdmFlowField f(random_denoiser(3, 2, 4));
    const Conditioning cond(StateVector(Vec{0.3, 0.1}), {{"tau", 5.0}});
    const oracle::Direction dir{Vec{0.4, -1.0}, Vec{2.0}}, neg{Vec{-0.4, 1.0}, Vec{-2.0}};
    const auto xi = gaussian_noise({3}, 1);
    const auto grid = edm_time_grid(12);
    EXPECT_EQ(oracle::fd_directional(f, QuantitySpec{}, cond, xi, neg, 1e-4, grid, Solver::euler),
              -oracle::fd_directional(f, QuantitySpec{}, cond, xi, dir, 1e-4, grid, Solver::euler));
}

TEST(FdDirectional, RejectsNonPositiveStep) {
    const LinearField f(0.0, {1}, {1});
    EXPECT_THROW(oracle::fd_directional(f, QuantitySpec{}, Conditioning(StateVector(Vec{0.0})),
                                        StateVector(Vec{1.0}), {Vec{1.0}, {}}, 0.0, edm_time_grid(2), Solver::heun),
                 ConfigError);
}

TEST(FdDirectional, MlpSweepShowsSecondOrder) {
    const EdmFlowField f(toy_denoiser());
    const Conditioning cond(StateVector(Vec{0.2, -0.4, 0.5}), {{"tau", 60.0}});
    const auto xi = gaussian_noise({2}, 7);
    const auto grid = edm_time_grid(32);
    const QuantitySpec q{};
    const auto r = compute_sensitivity(f, q, cond, xi, {grid, Solver::heun, AdjointMode::discrete});
    const oracle::Direction dir{Vec{0.6, 0.3, -0.8}, Vec{4.0}};
    const double ref = dot(r.dq_dc.data(), dir.c) + r.dq_dscalar[0].value * dir.scalars[0];
    const auto sweep = oracle::eps_sweep(f, q, cond, xi, dir, ref, grid, Solver::heun);
    ASSERT_GE(sweep.fitted_points, 3u);
    EXPECT_NEAR(sweep.slope, 2.0, 0.3);
    EXPECT_LT(sweep.best.rel_error, 1e-6);
    for (std::size_t i = 1; i < sweep.points.size(); ++i) EXPECT_LT(sweep.points[i].eps, sweep.points[i - 1].eps);
}

TEST(LogLogSlope, RecoversPowerLaw) {
    EXPECT_NEAR(oracle::loglog_slope({1.0, 0.1, 0.01}, {3.0, 0.03, 0.0003}), 2.0, 1e-12);
}

TEST(ClosedForm, FixedPointOfTheFlow) {
    NormalStream rng(5);
    const Matrix m = random_matrix(rng, 3, 2);
    const StateVector c(random_vec(rng, 2));
    const StateVector xi(scaled(m.apply(c.data()), 1.0 / 80.0));
    const auto e = oracle::gaussian_closed_form(m, 0.7, 80.0, xi, c);
    const Vec mu = m.apply(c.data());
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(e.x0[i], mu[i], 1e-15 * (1.0 + std::abs(mu[i])));
}

TEST(ClosedForm, DeterministicDataLimit) {
    const Matrix m(2, 2, {1.0, 2.0, -3.0, 0.5});
    const StateVector c(Vec{0.3, -0.7});
    const auto e = oracle::gaussian_closed_form(m, 1e-12, 80.0, StateVector(Vec{0.4, 1.1}), c);
    const Vec mu = m.apply(c.data());
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(e.x0[i], mu[i], 1e-11);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(e.dx0_dc.data[k], m.data[k], 1e-12);
}

TEST(ClosedForm, HandValueAgreesWithDenseSolve) {
    // d(x - mu)/dt = t (x - mu) / (s^2 + t^2) integrates to (x - mu) proportional to sqrt(s^2 + t^2).
    const auto e = oracle::gaussian_closed_form(Matrix(1, 1, {1.0}), 1.0, 80.0, StateVector(Vec{0.0}),
                                                StateVector(Vec{2.0}));
    const double expected = 2.0 * (1.0 - 1.0 / std::sqrt(6401.0));
    EXPECT_NEAR(e.x0[0], expected, 1e-15);
    EXPECT_NEAR(e.x0[0], 1.97500, 5e-6);
    EXPECT_NEAR(dense_solve(0.0, 2.0, 1.0, 80.0, 4096), e.x0[0], 1e-8);
    EXPECT_NEAR(e.dx0_dc(0, 0), 1.0 - 1.0 / std::sqrt(6401.0), 1e-15);
}

TEST(ClosedForm, DenseSolveAcrossNoiseAndScale) {
    for (double s : {0.3, 1.0, 2.5})
        for (double xi : {-1.2, 0.0, 0.8}) {
            const auto e = oracle::gaussian_closed_form(Matrix(1, 1, {1.5}), s, 80.0, StateVector(Vec{xi}),
                                                        StateVector(Vec{-0.4}));
            EXPECT_NEAR(dense_solve(80.0 * xi, -0.6, s, 80.0, 4096), e.x0[0], 1e-7 * (1.0 + std::abs(e.x0[0])));
        }
}

TEST(ClosedForm, JacobianMatchesFiniteDifferencesOfSampler) {
    NormalStream rng(6);
    const Matrix m = random_matrix(rng, 3, 2);
    const AnalyticGaussianField f(m, 1.0);
    const Conditioning cond(StateVector(random_vec(rng, 2)));
    const auto xi = gaussian_noise({3}, 2);
    const auto e = oracle::gaussian_closed_form(m, 1.0, 80.0, xi, cond.c());
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            Vec dc(2, 0.0);
            dc[j] = 1.0;
            const double fd = oracle::fd_directional(f, {QuantityKind::component, i}, cond, xi, {dc, {}}, 1e-3,
                                                     edm_time_grid(256), Solver::heun);
            EXPECT_NEAR(fd, e.dx0_dc(i, j), 1e-3 * std::abs(e.dx0_dc(i, j)) + 1e-12);
        }
}

TEST(ClosedForm, Errors) {
    EXPECT_THROW(oracle::gaussian_closed_form(Matrix(1, 1, {1.0}), 0.0, 80.0, StateVector(Vec{0.0}),
                                              StateVector(Vec{0.0})),
                 ConfigError);
    EXPECT_THROW(oracle::gaussian_closed_form(Matrix(1, 1, {1.0}), 1.0, 80.0, StateVector(Vec{0.0, 1.0}),
                                              StateVector(Vec{0.0})),
                 ContractError);
}
