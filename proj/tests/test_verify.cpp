#include <gradflow/problem.hpp>
#include <gradflow/verify.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace gradflow;

TEST(Stability, BackwardEulerThresholdIsOne) {
    const auto r = stability_threshold(builtin("be"));
    EXPECT_NEAR(r.threshold, 1.0, 1e-8);
    EXPECT_TRUE(r.feasible_at_zero);
    EXPECT_FALSE(r.unbounded);
}

TEST(Stability, GammaTildeAtZeroReproducesGammaForBackwardEuler) {
    const auto g = compute_gamma_tilde(builtin("be"), 0.0);
    EXPECT_DOUBLE_EQ(g.S(1, 1), 1.0);
    const auto h = compute_gamma_tilde(builtin("be"), 0.5);
    EXPECT_NEAR(h.S(1, 1), 0.5, 1e-15);
}

TEST(Stability, FullyImplicitTableausAreUnconditionallyStable) {
    for (const char* name : {"fi2", "fi3", "fi1125"}) {
        const auto r = stability_threshold(builtin(name));
        EXPECT_TRUE(r.unbounded) << name;
        EXPECT_TRUE(std::isinf(r.threshold)) << name;
    }
}

TEST(Stability, PrintedThirdOrderTableauIsInfeasibleAtZero) {
    const auto r = stability_threshold(builtin("si3"));
    EXPECT_FALSE(r.feasible_at_zero);
    EXPECT_EQ(r.threshold, 0.0);
}

TEST(Stability, DiagonalsPositiveOnRandomSamplesBelowThreshold) {
    std::mt19937_64 rng(3);
    for (const char* name : {"be", "si2", "si1c", "si1125c"}) {
        const Tableau t = builtin(name);
        const double thr = stability_threshold(t).threshold;
        ASSERT_GT(thr, 0.0) << name;
        std::uniform_real_distribution<double> u(0.0, thr);
        for (int s = 0; s < 100; ++s) {
            const double kl = u(rng);
            const auto g = compute_gamma_tilde(t, kl);
            for (int m = 1; m <= t.stages; ++m) EXPECT_GT(g.S(m, m), 0.0) << name << " kL=" << kl << " m=" << m;
        }
    }
}

TEST(Order, PrintedCoefficientsHaveClaimedOrders) {
    EXPECT_EQ(order_of(builtin("be"), 1e-2), 1);
    EXPECT_EQ(order_of(builtin("si2"), 1e-2), 2);
    EXPECT_EQ(order_of(builtin("si3"), 1e-2), 3);
    EXPECT_EQ(order_of(builtin("fi2"), 1e-2), 2);
    EXPECT_EQ(order_of(builtin("fi3"), 1e-2), 3);
}

TEST(Order, BackwardEulerExpansion) {
    const auto b = compute_beta(builtin("be"));
    EXPECT_DOUBLE_EQ(b.final_value(1), 1.0);
    EXPECT_DOUBLE_EQ(b.final_value(2), 1.0);
    EXPECT_DOUBLE_EQ(b.final_value(3), 0.0);
}

TEST(Order, SemiImplicitConventionNeedsTheta) {
    EXPECT_THROW(compute_beta(builtin("fi2"), Convention::semi_implicit), Error);
    EXPECT_NO_THROW(compute_beta(builtin("fi2"), Convention::fully_implicit));
}

TEST(Order, PredictorTableausMatchTheirTargets) {
    EXPECT_LT(order_residual(builtin("si1c"), 1), 1e-2);
    EXPECT_LT(order_residual(builtin("si1125c"), 1), 1e-2);
    EXPECT_LT(order_residual(builtin("fi1125"), 1), 1e-2);
    const auto b = compute_beta(builtin("si1125c"));
    EXPECT_NEAR(b.final_value(2), 11.0 / 25.0, 1e-3);
}

TEST(Polish, ReachesMachinePrecisionAndKeepsStructure) {
    for (const char* name : {"si2", "si3", "fi2", "fi3", "si1c", "si1125c", "fi1125"}) {
        const Tableau t = builtin(name);
        const auto rep = polish_report(t, t.claimed_order);
        EXPECT_LE(rep.residual, 1e-13) << name;
        EXPECT_LT(rep.max_change, 5e-2) << name;
        if (!t.predictor_target) {
            EXPECT_GE(order_of(rep.tableau, 1e-12), t.claimed_order) << name;
        }
        if (rep.tableau.theta) {
            for (int m = 1; m <= t.stages; ++m) EXPECT_EQ(rep.tableau.theta->row_sum(m), 1.0) << name;
            EXPECT_FALSE(detail::theta_violation(rep.tableau, 1e-12).has_value()) << name;
        }
        const double before = stability_threshold(t).threshold;
        EXPECT_GE(rep.threshold_after, 0.9 * before) << name;
    }
}

// Scalar amplification factor R(z) of one step for u' = -u, fully implicit.
static double amplification(const Tableau& t, double z) {
    std::vector<double> U{1.0};
    for (int m = 1; m <= t.stages; ++m) {
        double r = 0.0;
        for (int i = 0; i < m; ++i) r += t.gamma(m, i) * U[static_cast<std::size_t>(i)];
        U.push_back(r / (t.row_sum(m) + z));
    }
    return U.back();
}

TEST(Polish, RemovesFirstOrderDefectOfRoundedCoefficients) {
    const double z = 1e-3;
    for (const char* name : {"fi2", "fi3"}) {
        const Tableau t = builtin(name);
        const double printed = std::abs(amplification(t, z) - std::exp(-z)) / z;
        const double polished = std::abs(amplification(polish(t, t.claimed_order), z) - std::exp(-z)) / z;
        EXPECT_GT(printed, 1e-4) << name;
        EXPECT_LT(polished, 1e-5) << name;
    }
}

TEST(Polish, RejectsUnreachableTargets) {
    EXPECT_THROW(polish(builtin("be"), 2), PolishError);
    EXPECT_THROW(polish(builtin("si2"), 4), PolishError);
    try {
        polish(builtin("be"), 2);
    } catch (const PolishError& e) {
        EXPECT_GT(e.residual(), 0.0);
    }
}

namespace {
PointwiseProblem equivalence_problem(int n) {
    return PointwiseProblem("equivalence", n,
                            {[](double u) { return 0.25 * u * u * u * u + u * u; }, [](double u) { return u * u * u + 2 * u; },
                             [](double u) { return 3 * u * u + 2; }},
                            PointwiseProblem::Potential{[](double u) { return std::sin(u); },
                                                        [](double u) { return std::cos(u); },
                                                        [](double u) { return -std::sin(u); }},
                            1.0);
}
}  // namespace

TEST(StageObjective, ObjectiveEquivalenceOnRandomDraws) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> sym(-2.0, 2.0), unit(0.0, 1.0);
    const auto p = equivalence_problem(5);
    const char* names[] = {"be", "si2", "si3", "si1c", "si1125c"};
    int checks = 0;
    for (int d = 0; d < 100; ++d) {
        const Tableau t = builtin(names[d % 5]);
        const int m = 1 + static_cast<int>(unit(rng) * t.stages) % t.stages;
        const double lambda = 0.5 + 2.0 * unit(rng);
        const double k = 1e-4 + 1e-3 * unit(rng);
        std::vector<Vector> U;
        for (int i = 0; i < m; ++i) U.push_back(Vector::NullaryExpr(5, [&] { return sym(rng); }));
        const Vector a = Vector::NullaryExpr(5, [&] { return sym(rng); });
        const Vector b = Vector::NullaryExpr(5, [&] { return sym(rng); });
        const auto r = objective_equivalence_check(t, m, p, U, a, b, k, lambda);
        EXPECT_LE(r.relative(), 1e-9) << names[d % 5] << " stage " << m;
        ++checks;
    }
    EXPECT_EQ(checks, 100);
}
