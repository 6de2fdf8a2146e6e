#include <gradflow/integrator.hpp>
#include <gradflow/verify.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace gradflow;

namespace {

using Potential = PointwiseProblem::Potential;

Potential quartic() {
    return {[](double u) { return 0.25 * u * u * u * u + u * u; }, [](double u) { return u * u * u + 2 * u; },
            [](double u) { return 3 * u * u + 2; }};
}

Potential wave() {
    return {[](double u) { return std::sin(u); }, [](double u) { return std::cos(u); },
            [](double u) { return -std::sin(u); }};
}

PointwiseProblem split_problem(int n) { return PointwiseProblem("split", n, quartic(), wave(), 1.0); }

Vector random_state(int n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    return Vector::NullaryExpr(n, [&] { return u(rng); });
}

Tableau single_stage(double gamma) {
    Tableau t;
    t.stages = 1;
    t.gamma = LowerTriangular::from_rows({{gamma}});
    t.theta = LowerTriangular::from_rows({{1.0}});
    return t;
}

double self_convergence_order(const Tableau& t, const GradientFlowProblem& p, const Vector& u0, int n) {
    auto at = [&](int steps) { return run(t, p, u0, 1.0 / steps, steps, {false}).final_state; };
    const Vector a = at(n), b = at(2 * n), c = at(4 * n);
    return std::log2((a - b).norm() / (b - c).norm());
}

}  // namespace

TEST(Step, ScaledBackwardEulerHalvesTheStep) {
    const auto p = split_problem(4);
    const Vector u0 = random_state(4, 1);
    const double k = 0.05;
    const auto twice = ms_step(single_stage(2.0), p, u0, k);
    const auto half = ms_step(builtin("be"), p, u0, k / 2);
    EXPECT_LT((twice.u_next - half.u_next).norm(), 1e-13);
}

TEST(Step, StagesSatisfyTheirEquations) {
    const auto p = split_problem(6);
    const Vector u0 = random_state(6, 2);
    for (const char* name : {"be", "si2", "si3", "fi2", "fi3"}) {
        const Tableau t = polish(builtin(name), builtin(name).claimed_order);
        const auto rec = ms_step(t, p, u0, 0.01);
        ASSERT_EQ(static_cast<int>(rec.stages.size()), t.stages + 1);
        for (int m = 1; m <= t.stages; ++m) EXPECT_LE(stage_residual(t, p, rec.stages, m, 0.01), 1e-10) << name;
    }
}

TEST(Step, CachedAndFreshFactorizationsAgree) {
    const Potential quad{[](double u) { return u * u; }, [](double u) { return 2 * u; }, [](double) { return 2.0; }};
    const PointwiseProblem constant("q", 5, quad, wave(), 1.0, true);
    const PointwiseProblem general("q", 5, quad, wave(), 1.0, false);
    const Vector u0 = random_state(5, 3);
    const Tableau t = builtin("si2");
    const auto a = run(t, constant, u0, 0.01, 20).final_state;
    const auto b = run(t, general, u0, 0.01, 20).final_state;
    EXPECT_LT((a - b).norm(), 1e-12);
}

TEST(Energy, DecreasesBelowTheStabilityThreshold) {
    const auto p = split_problem(8);
    for (const char* name : {"be", "si2", "si1c", "si1125c"}) {
        const Tableau t = polish(builtin(name), builtin(name).claimed_order);
        const double thr = stability_threshold(t).threshold;
        const double k = 0.9 * thr / p.lambda_bound();
        for (unsigned seed = 0; seed < 5; ++seed) {
            const auto tr = run(t, p, random_state(8, 10 + seed), k, 200);
            EXPECT_EQ(tr.energy_violations, 0) << name << " seed " << seed;
        }
    }
}

TEST(Energy, FullyImplicitSchemesAreStableAtLargeSteps) {
    const auto p = split_problem(8);
    for (const char* name : {"fi2", "fi3"}) {
        const auto tr = run(builtin(name), p, random_state(8, 4), 0.5, 40);
        EXPECT_EQ(tr.energy_violations, 0) << name;
        EXPECT_TRUE(tr.final_state.allFinite());
    }
}

TEST(Order, SelfConvergenceOnAScalarSplitFlow) {
    const auto p = split_problem(1);
    const Vector u0 = Vector::Constant(1, 1.2);
    for (const char* name : {"si2", "fi2"}) {
        EXPECT_NEAR(self_convergence_order(polish(builtin(name), 2), p, u0, 40), 2.0, 0.15) << name;
    }
    for (const char* name : {"si3", "fi3"}) {
        EXPECT_NEAR(self_convergence_order(polish(builtin(name), 3), p, u0, 40), 3.0, 0.2) << name;
    }
}

TEST(Newton, NonFiniteResidualIsReported) {
    const Potential bad{[](double) { return 0.0; }, [](double) { return std::numeric_limits<double>::quiet_NaN(); },
                        [](double) { return 1.0; }};
    const PointwiseProblem p("bad", 2, bad);
    EXPECT_THROW(ms_step(builtin("be"), p, Vector::Ones(2), 0.1), NewtonError);
    EXPECT_THROW(run(builtin("be"), p, Vector::Ones(2), 0.1, 3), StepError);
}

TEST(Newton, IterationBudgetIsEnforced) {
    NewtonOptions opts;
    opts.max_iterations = 0;
    StageSolver solver(opts);
    const auto p = split_problem(3);
    try {
        solver.solve(p, 1.0, 0.5, {}, Vector::Ones(3), Vector::Zero(3), false);
        FAIL() << "expected NewtonError";
    } catch (const NewtonError& e) {
        EXPECT_EQ(e.residual_history().size(), 1u);
    }
}
