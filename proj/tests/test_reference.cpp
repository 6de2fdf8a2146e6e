#include <gradflow/reference.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace gradflow;

namespace {

double self_order(const ProblemSpec& s, int n) {
    const Vector a = reference_run(s, n), b = reference_run(s, 2 * n), c = reference_run(s, 4 * n);
    return std::log2(s.grid().l2_norm(a - b) / s.grid().l2_norm(b - c));
}

}  // namespace

TEST(Reference, TrBdf2IsSecondOrder) {
    const auto s = make_problem("heat_wass", 129);
    EXPECT_NEAR(self_order(s, 16), 2.0, 0.15);
}

TEST(Reference, ExtrapolatedBdf2IsSecondOrder) {
    const auto s = make_problem("ac1d_tw", 257, 1.0);
    EXPECT_NEAR(self_order(s, 256), 2.0, 0.2);
}

TEST(Reference, MobilityBdfIsSecondOrder) {
    const auto s = make_problem("ch_mob", 128, 0.01);
    EXPECT_NEAR(self_order(s, 32), 2.0, 0.3);
}

TEST(Reference, RichardsonImprovesOnASingleRun) {
    const auto s = make_problem("heat_wass", 129);
    const Vector fine = reference_run(s, 4096);
    const double single = s.grid().l2_norm(reference_run(s, 64) - fine);
    const double extrapolated = s.grid().l2_norm(reference_solution(s, 64, 3) - fine);
    EXPECT_LT(extrapolated, single / 50);
}

TEST(Reference, HeatReferenceMatchesExactSolutionToSpatialAccuracy) {
    const auto s = make_problem("heat_wass", 257);
    const Vector ref = reference_solution(s, 256, 3);
    EXPECT_LT(s.grid().l2_norm(ref - s.exact(s.final_time)), 1e-5);
}

TEST(Reference, LevelsAreValidated) {
    const auto s = make_problem("heat_wass", 33);
    EXPECT_THROW(reference_solution(s, 4, 0), Error);
    EXPECT_THROW(reference_solution(s, 4, 4), Error);
}
