// Solves u' = -u^2 (energy u^2/2 under the metric L(u) = u) with the
// second- and third-order metric schemes and prints observed orders.

#include <gradflow/gradflow.hpp>

#include <fmt/format.h>

#include <cmath>
#include <memory>

int main() {
    using namespace gradflow;
    PointwiseProblem p("scalar", 1, {[](double u) { return 0.5 * u * u; }, [](double u) { return u; }, [](double) { return 1.0; }},
                       std::nullopt, 0.0, true);
    PointwiseMetric L("u", {[](double u) { return u; }, [](double) { return 1.0; }, [](double) { return 0.0; }, true, true},
                      Vector::Ones(1));
    auto tabs = std::make_shared<const MetricTableaus>(MetricTableaus::make(true));
    const double T = 1.0, exact = 1.0 / (1.0 + T);
    for (const char* name : {"step2", "step3", "step2_fi", "step3_fi"}) {
        const auto kind = metric_scheme_from_name(name);
        fmt::print("{:<9}", name);
        double prev = 0.0;
        for (int n = 4; n <= 64; n *= 2) {
            MetricStepper stepper(p, L, tabs);
            Vector u = Vector::Ones(1);
            for (int i = 0; i < n; ++i) u = stepper.step(kind, u, T / n).u_next;
            const double err = std::abs(u[0] - exact);
            if (prev > 0.0) fmt::print("  {:.3f}", std::log2(prev / err));
            prev = err;
        }
        fmt::print("\n");
    }
}
