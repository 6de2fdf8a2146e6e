#include <gradflow/metric.hpp>
#include <gradflow/problems.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

using namespace gradflow;

namespace {

Coefficient linear_u() {
    return {[](double u) { return u; }, [](double) { return 1.0; }, [](double) { return 0.0; }, true, true};
}

PointwiseProblem half_square() {
    return PointwiseProblem("scalar", 1,
                            {[](double u) { return 0.5 * u * u; }, [](double u) { return u; }, [](double) { return 1.0; }},
                            std::nullopt, 0.0, true);
}

double observed_order(MetricSchemeKind kind, int n) {
    const auto p = half_square();
    const PointwiseMetric L("u", linear_u(), Vector::Ones(1));
    auto tabs = std::make_shared<const MetricTableaus>(MetricTableaus::make(true));
    auto error = [&](int steps) {
        MetricStepper stepper(p, L, tabs);
        Vector u = Vector::Ones(1);
        for (int i = 0; i < steps; ++i) u = stepper.step(kind, u, 1.0 / steps).u_next;
        return std::abs(u[0] - 0.5);
    };
    return std::log2(error(n) / error(2 * n));
}

}  // namespace

TEST(Metric, SecondDerivativeMatchesFiniteDifferences) {
    const auto s = make_problem("ch_mob", 128);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    const Vector w = 0.1 * Vector::NullaryExpr(s.initial.size(), [&] { return nd(rng); });
    const Vector v = Vector::NullaryExpr(s.initial.size(), [&] { return nd(rng); });
    const double r1 = dsqL_check(*s.metric, s.initial, w, v, 1e-2);
    const double r2 = dsqL_check(*s.metric, s.initial, w, v, 5e-3);
    EXPECT_LT(r2, 1e-3);
    EXPECT_NEAR(r1 / r2, 4.0, 0.5);
}

TEST(Metric, LinearMetricsHaveNoSecondDerivative) {
    const auto s = make_problem("pme_wass", 65);
    const Vector w = Vector::Ones(s.initial.size());
    EXPECT_EQ(dsqL_check(*s.metric, s.initial, w, w, 1e-3), 0.0);
    const SparseMatrix C = s.metric->corrected(s.initial, w, 0.1);
    EXPECT_EQ((C - s.metric->matrix(s.initial)).norm(), 0.0);
}

TEST(Metric, MatrixAndMatrixFreeActionAgree) {
    for (const char* name : {"pme_wass", "heat_wass", "ch_mob"}) {
        const auto s = make_problem(name, 129);
        const Vector g = s.problem->gradient(s.initial);
        EXPECT_LT((s.metric->apply(s.initial, g) - s.metric->matrix(s.initial) * g).norm(),
                  1e-10 * (1.0 + g.norm()))
            << name;
    }
}

TEST(Metric, CorrectedOperatorPositivity) {
    const auto s = make_problem("ch_mob", 128);
    const Vector w = s.metric->apply(s.initial, s.problem->gradient(s.initial));
    EXPECT_TRUE(s.metric->positivity_check(s.initial, w, 1e-4));
    const PointwiseMetric L("u", linear_u(), Vector::Ones(3));
    EXPECT_TRUE(L.positivity_check(Vector::Constant(3, 0.5), Vector::Ones(3), 1.0));
    // A concave coefficient with a huge correction loses positivity.
    const PointwiseMetric concave(
        "c", {[](double u) { return 1.0 - u * u; }, [](double u) { return -2 * u; }, [](double) { return -2.0; }},
        Vector::Ones(2));
    EXPECT_TRUE(concave.positivity_check(Vector::Zero(2), Vector::Ones(2), 1.0));
    const PointwiseMetric convex(
        "v", {[](double u) { return 0.1 + u * u; }, [](double u) { return 2 * u; }, [](double) { return 2.0; }},
        Vector::Ones(2));
    EXPECT_FALSE(convex.positivity_check(Vector::Zero(2), Vector::Constant(2, 10.0), 1.0));
}

TEST(Metric, ScalarOdeOrders) {
    EXPECT_NEAR(observed_order(MetricSchemeKind::step2, 32), 2.0, 0.1);
    EXPECT_NEAR(observed_order(MetricSchemeKind::step2_fi, 32), 2.0, 0.1);
    EXPECT_NEAR(observed_order(MetricSchemeKind::step3, 32), 3.0, 0.15);
    EXPECT_NEAR(observed_order(MetricSchemeKind::step3_fi, 32), 3.0, 0.15);
}

TEST(Metric, SchemeNames) {
    EXPECT_EQ(metric_scheme_from_name("si3"), MetricSchemeKind::step3);
    EXPECT_EQ(metric_scheme_from_name("step2_fi"), MetricSchemeKind::step2_fi);
    EXPECT_THROW(metric_scheme_from_name("rk4"), UnknownNameError);
}
