#include <gtest/gtest.h>

#include "flowgrad/quantities.hpp"
#include "support.hpp"

using namespace flowgrad;
using namespace flowgrad::test;

namespace {

StateVector two_row_grid(Vec values) {
    return StateVector(std::move(values), Shape{2, 1}, GridMeta{2, 1, {0.0, 60.0}});
}

}  // namespace

TEST(Quantity, PatchOverConstantField) {
    const StateVector x(Vec(6, 3.5), Shape{2, 3});
    const QuantitySpec q{QuantityKind::patch_mean, 0, {0, 1, 2, 3, 4, 5}};
    EXPECT_EQ(evaluate(q, x), 3.5);
}

TEST(Quantity, ComponentOnOneHot) {
    Vec v(5, 0.0);
    v[3] = 2.25;
    const QuantitySpec q{QuantityKind::component, 3};
    EXPECT_EQ(evaluate(q, StateVector(v)), 2.25);
    Vec expected(5, 0.0);
    expected[3] = 1.0;
    EXPECT_EQ(gradient(q, StateVector(v)).data(), expected);
}

TEST(Quantity, CosLatWeightedMean) {
    const QuantitySpec q{QuantityKind::weighted_global_mean, 0, {}, true};
    EXPECT_NEAR(evaluate(q, two_row_grid({1.0, 2.0})), 4.0 / 3.0, 1e-15);
    const QuantitySpec flat{QuantityKind::weighted_global_mean};
    EXPECT_EQ(evaluate(flat, two_row_grid({1.0, 2.0})), 1.5);
}

TEST(Quantity, PatchGradientIsUniformOnMask) {
    const QuantitySpec q{QuantityKind::patch_mean, 0, {1, 4, 5, 7}};
    const auto g = gradient(q, StateVector(Vec(8, 1.0)));
    EXPECT_EQ(g.data(), (Vec{0, 0.25, 0, 0, 0.25, 0.25, 0, 0.25}));
}

TEST(Quantity, GradientPredictsChangeExactly) {
    NormalStream rng(1);
    const GridMeta grid{3, 4, {-60.0, 0.0, 60.0}};
    const std::vector<QuantitySpec> specs{{QuantityKind::component, 5},
                                          {QuantityKind::patch_mean, 0, {0, 2, 3, 11}},
                                          {QuantityKind::weighted_global_mean, 0, {}, true},
                                          {QuantityKind::weighted_global_mean}};
    for (const auto& q : specs) {
        for (int trial = 0; trial < 20; ++trial) {
            const StateVector x(random_vec(rng, 12), Shape{3, 4}, grid);
            const Vec d = random_vec(rng, 12);
            Vec xd = x.data();
            axpy(1.0, d, xd);
            const double change = evaluate(q, x.with_data(xd)) - evaluate(q, x);
            EXPECT_NEAR(dot(gradient(q, x).data(), d), change, 1e-14 * (1.0 + std::abs(change)));
        }
    }
}

TEST(Quantity, LinearAndGradientConstant) {
    NormalStream rng(2);
    const GridMeta grid{2, 3, {-30.0, 30.0}};
    const QuantitySpec q{QuantityKind::weighted_global_mean, 0, {}, true};
    const StateVector x(random_vec(rng, 6), Shape{2, 3}, grid), y(random_vec(rng, 6), Shape{2, 3}, grid);
    const double alpha = 1.7, beta = -0.3;
    Vec z = scaled(x.data(), alpha);
    axpy(beta, y.data(), z);
    const double lhs = evaluate(q, x.with_data(z));
    const double rhs = alpha * evaluate(q, x) + beta * evaluate(q, y);
    EXPECT_NEAR(lhs, rhs, 1e-14 * (1.0 + std::abs(rhs)));
    EXPECT_EQ(gradient(q, x), gradient(q, y));
}

TEST(Quantity, ChannelSelection) {
    const GridMeta grid{2, 2, {-45.0, 45.0}};
    const StateVector x(Vec{1, 1, 1, 1, 5, 6, 7, 8}, Shape{2, 2, 2}, grid);
    EXPECT_EQ(evaluate({QuantityKind::weighted_global_mean, 0, {}, false, 1}, x), 6.5);
    EXPECT_EQ(evaluate({QuantityKind::component, 2, {}, false, 1}, x), 7.0);
    const auto g = gradient({QuantityKind::patch_mean, 0, {0, 3}, false, 1}, x);
    EXPECT_EQ(g.data(), (Vec{0, 0, 0, 0, 0.5, 0, 0, 0.5}));
    // Rank-3 states without grid metadata use the leading dimension as channels.
    const StateVector plain(Vec{1, 2, 3, 4, 5, 6}, Shape{3, 1, 2});
    EXPECT_EQ(evaluate({QuantityKind::weighted_global_mean, 0, {}, false, 2}, plain), 5.5);
}

TEST(Quantity, IncompatibleSpecsAreContractErrors) {
    const StateVector x(Vec(4, 1.0));
    EXPECT_THROW(evaluate({QuantityKind::component, 4}, x), ContractError);
    EXPECT_THROW(evaluate({QuantityKind::patch_mean, 0, {}}, x), ContractError);
    EXPECT_THROW(evaluate({QuantityKind::patch_mean, 0, {0, 9}}, x), ContractError);
    EXPECT_THROW(evaluate({QuantityKind::weighted_global_mean, 0, {}, true}, x), ContractError);
    EXPECT_THROW(evaluate({QuantityKind::weighted_global_mean, 0, {}, false, 1}, x), ContractError);
    EXPECT_THROW(parse_quantity_kind("max"), ConfigError);
}
