// Acceptance gate: one PASS/FAIL line per criterion, details indented below.
// Exits nonzero when any criterion fails.

#include <gradflow/gradflow.hpp>

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

using namespace gradflow;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(bool ok, const std::string& name, const std::string& summary) {
    fmt::print("{} {}: {}\n", ok ? "PASS" : "FAIL", name, summary);
    std::fflush(stdout);
    if (!ok) ++failures;
}

void detail_line(const std::string& s) { fmt::print("    {}\n", s); }

std::string order_list(const ConvergenceReport& rep) {
    std::string out;
    for (const auto& r : rep.rows) {
        if (!r.ok()) out += " fail";
        else if (r.observed_order) out += fmt::format(" {:.3f}", *r.observed_order);
    }
    return out;
}

// Largest k*Lambda for which every sub-step of a scheme stays below its
// tableau's threshold.  Infinite for the fully implicit schemes.
double scheme_threshold(const ProblemSpec& s, const std::string& scheme, bool polished) {
    auto thr = [polished](const char* name) {
        Tableau t = builtin(name);
        if (polished) t = polish(t, t.claimed_order);
        return stability_threshold(t).threshold;
    };
    if (!s.metric) return thr(scheme.c_str());
    if (scheme == "si2") return std::min(2.0 * thr("be"), thr("si2"));
    if (scheme == "si3") {
        return std::min({6.0 * thr("si1c"), 2.0 * thr("si3"), 2.5 * thr("be"), 1.2 * thr("si1125c")});
    }
    return std::numeric_limits<double>::infinity();
}

struct EnergyTally {
    int rows_checked = 0;
    int rows_skipped = 0;
    int violations = 0;
    int violations_above_threshold = 0;
    std::vector<std::string> offenders;
};

EnergyTally energy_tally;

void record_energy(const ProblemSpec& s, const ConvergenceReport& rep, bool polished) {
    const double lambda = s.problem->lambda_bound();
    const double thr = scheme_threshold(s, rep.scheme, polished);
    for (const auto& r : rep.rows) {
        if (!r.ok()) continue;
        const bool below = r.k * lambda < thr && r.range_exits == 0;
        if (below) {
            ++energy_tally.rows_checked;
            energy_tally.violations += r.energy_violations;
            if (r.energy_violations > 0) {
                energy_tally.offenders.push_back(fmt::format("{}/{} steps={}", rep.problem, rep.scheme, r.steps));
            }
        } else {
            ++energy_tally.rows_skipped;
            energy_tally.violations_above_threshold += r.energy_violations;
        }
    }
}

OracleCache oracles;

ConvergenceReport sweep(const std::string& problem, const std::string& scheme, const std::string& steps, bool polished,
                        std::optional<int> grid = std::nullopt) {
    RunConfig cfg;
    cfg.problem = problem;
    cfg.scheme = scheme;
    cfg.steps = parse_steps(steps);
    cfg.polish = polished;
    cfg.grid = grid;
    const auto t0 = Clock::now();
    auto rep = converge(cfg, &oracles);
    const ProblemSpec s = make_problem(problem, grid);
    record_energy(s, rep, polished);
    const auto fo = rep.final_order();
    detail_line(fmt::format("{} {}{}: orders{} (final {}), energy increases {}, {:.1f} s", problem, scheme,
                            polished ? " polished" : "", order_list(rep), fo ? fmt::format("{:.3f}", *fo) : "n/a",
                            rep.total_energy_violations(), seconds_since(t0)));
    for (const auto& r : rep.rows) {
        if (!r.ok()) detail_line(fmt::format("  steps {} failed: {}", r.steps, r.failure));
    }
    return rep;
}

bool all_rows_ok(const ConvergenceReport& rep) {
    return std::all_of(rep.rows.begin(), rep.rows.end(), [](const auto& r) { return r.ok(); });
}

double final_or_nan(const ConvergenceReport& rep) {
    const auto o = rep.final_order();
    return o ? *o : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------

void tableau_verification() {
    const auto t0 = Clock::now();
    const int o2 = order_of(builtin("si2"), 1e-2);
    const int o3 = order_of(builtin("si3"), 1e-2);
    double worst = 0.0;
    std::string failed;
    for (const auto& name : builtin_names()) {
        const Tableau t = builtin(name);
        try {
            const Tableau pt = polish(t, t.claimed_order);
            worst = std::max(worst, order_residual(pt, t.claimed_order));
        } catch (const std::exception& e) {
            failed += " " + name;
        }
    }
    const double secs = seconds_since(t0);
    const bool ok = o2 == 2 && o3 == 3 && worst <= 1e-13 && failed.empty() && secs < 1.0;
    verdict(ok, "tableau verification",
            fmt::format("order_of(si2)={} order_of(si3)={} max polished residual={:.1e}{} in {:.2f} s", o2, o3, worst,
                        failed.empty() ? "" : " polish failed:" + failed, secs));
}

void stability_thresholds() {
    const auto t0 = Clock::now();
    const double want2 = 3.0 / 872.0, want3 = 18.0 / 28567.0;
    const auto s2 = stability_threshold(builtin("si2"));
    const auto s3 = stability_threshold(builtin("si3"));
    const double secs = seconds_since(t0);
    const bool ok2 = std::abs(s2.threshold - want2) <= 0.1 * want2;
    const bool ok3 = std::abs(s3.threshold - want3) <= 0.1 * want3;
    verdict(ok2 && ok3 && secs < 1.0, "stability thresholds",
            fmt::format("si2 {:.4e} (claimed {:.4e}, {:+.1f}%), si3 {:.4e}{} (claimed {:.4e}) in {:.2f} s", s2.threshold,
                        want2, 100.0 * (s2.threshold / want2 - 1.0), s3.threshold,
                        s3.feasible_at_zero ? "" : " infeasible at kL=0", want3, secs));
}

void objective_equivalence() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> unit(0.0, 1.0), sym(-1.0, 1.0);
    const int n = 6;
    const double lambda = 2.0;
    PointwiseProblem p("equivalence", n,
                       {[](double u) { return 0.25 * u * u * u * u; }, [](double u) { return u * u * u; },
                        [](double u) { return 3 * u * u; }},
                       PointwiseProblem::Potential{[](double u) { return -std::cos(u); },
                                                   [](double u) { return std::sin(u); },
                                                   [](double u) { return std::cos(u); }},
                       lambda);
    const auto names = builtin_names();
    double worst = 0.0;
    int passed = 0;
    const int draws = 100;
    for (int d = 0; d < draws; ++d) {
        Tableau t = builtin(names[static_cast<std::size_t>(d) % names.size()]);
        if (d % 2) t = polish(t, t.claimed_order);
        const int m = 1 + static_cast<int>(unit(rng) * t.stages) % t.stages;
        const double k = (1e-6 + unit(rng) * 1e-2) / lambda;
        std::vector<Vector> states;
        for (int i = 0; i < m; ++i) states.push_back(Vector::NullaryExpr(n, [&] { return sym(rng); }));
        const Vector ua = Vector::NullaryExpr(n, [&] { return sym(rng); });
        const Vector ub = Vector::NullaryExpr(n, [&] { return sym(rng); });
        const double rel = objective_equivalence_check(t, m, p, states, ua, ub, k, lambda).relative();
        worst = std::max(worst, rel);
        if (rel <= 1e-9) ++passed;
    }
    verdict(passed == draws, "stage objective equivalence",
            fmt::format("{}/{} randomized checks at 1e-9 relative, worst {:.1e}", passed, draws, worst));
}

void scalar_metric_ode() {
    const auto t0 = Clock::now();
    PointwiseProblem p("scalar", 1,
                       {[](double u) { return 0.5 * u * u; }, [](double u) { return u; }, [](double) { return 1.0; }},
                       std::nullopt, 0.0, true);
    PointwiseMetric L("u", {[](double u) { return u; }, [](double) { return 1.0; }, [](double) { return 0.0; }, true, true},
                      Vector::Ones(1));
    auto tabs = std::make_shared<const MetricTableaus>(MetricTableaus::make(true));
    bool ok = true;
    std::string summary;
    for (const char* name : {"step2", "step2_fi", "step3", "step3_fi"}) {
        const auto kind = metric_scheme_from_name(name);
        const double want = (kind == MetricSchemeKind::step2 || kind == MetricSchemeKind::step2_fi) ? 2.0 : 3.0;
        const double tol = want == 2.0 ? 0.1 : 0.15;
        auto error = [&](int n) {
            MetricStepper stepper(p, L, tabs);
            Vector u = Vector::Ones(1);
            for (int i = 0; i < n; ++i) u = stepper.step(kind, u, 1.0 / n).u_next;
            return std::abs(u[0] - 0.5);
        };
        std::string orders;
        double prev = error(8);
        for (int n = 16; n <= 64; n *= 2) {
            const double e = error(n);
            const double o = std::log2(prev / e);
            ok = ok && std::abs(o - want) <= tol;
            orders += fmt::format(" {:.3f}", o);
            prev = e;
        }
        summary += fmt::format("{}:{}; ", name, orders);
    }
    const double secs = seconds_since(t0);
    verdict(ok && secs < 1.0, "scalar metric ODE", fmt::format("{}{:.2f} s", summary, secs));
}

void heat_wass() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string summary;
    for (const char* scheme : {"si2", "fi2", "si3", "fi3"}) {
        const auto rep = sweep("heat_wass", scheme, "2^3..2^7", true);
        const double want = scheme[2] == '2' ? 1.9 : 2.7;
        const double o = final_or_nan(rep);
        ok = ok && all_rows_ok(rep) && o >= want;
        summary += fmt::format("{} {:.3f} (>= {}); ", scheme, o, want);
    }
    verdict(ok, "heat_wass convergence", fmt::format("{}{:.1f} s", summary, seconds_since(t0)));
}

void ac1d_tw() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string summary;
    for (const char* scheme : {"si2", "fi2", "si3", "fi3"}) {
        const auto rep = sweep("ac1d_tw", scheme, "2^7..2^10", true, 4097);
        const double want = scheme[2] == '2' ? 1.85 : 2.5;
        const double o = final_or_nan(rep);
        ok = ok && all_rows_ok(rep) && o >= want;
        summary += fmt::format("{} {:.3f} (>= {}); ", scheme, o, want);
    }
    const double secs = seconds_since(t0);
    verdict(ok && secs <= 300.0, "ac1d_tw convergence", fmt::format("{}{:.1f} s (limit 300 s)", summary, secs));
}

void pme_wass() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string summary;
    for (const char* scheme : {"si2", "fi2", "si3", "fi3"}) {
        const auto rep = sweep("pme_wass", scheme, "2^4..2^8", true);
        const double want = scheme[2] == '2' ? 2.0 : 3.0;
        const double o = final_or_nan(rep);
        ok = ok && all_rows_ok(rep) && std::abs(o - want) <= 0.2;
        summary += fmt::format("{} {:.3f} ({} +- 0.2); ", scheme, o, want);
    }
    const double secs = seconds_since(t0);
    verdict(ok && secs <= 60.0, "pme_wass convergence", fmt::format("{}{:.1f} s (limit 60 s)", summary, secs));
}

void two_dimensional() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string summary;
    for (const char* problem : {"ac2d", "ch2d"}) {
        for (const char* scheme : {"si2", "si3"}) {
            const auto rep = sweep(problem, scheme, "2^6..2^9", true, 128);
            const double claimed = scheme[2] - '0';
            bool increasing = all_rows_ok(rep);
            std::optional<double> prev;
            for (const auto& r : rep.rows) {
                if (!r.observed_order) continue;
                if (prev && *r.observed_order < *prev - 0.05) increasing = false;
                prev = r.observed_order;
            }
            const double o = final_or_nan(rep);
            ok = ok && increasing && o >= claimed - 0.4;
            summary += fmt::format("{}/{} final {:.3f}{}; ", problem, scheme, o, increasing ? "" : " not increasing");
        }
    }
    const double secs = seconds_since(t0);
    verdict(ok && secs <= 900.0, "2D reduced convergence", fmt::format("{}{:.1f} s (limit 900 s)", summary, secs));
}

void energy_monotonicity() {
    const auto& t = energy_tally;
    std::string offenders;
    for (const auto& o : t.offenders) offenders += " " + o;
    verdict(t.violations == 0 && t.rows_checked > 0, "energy monotonicity",
            fmt::format("{} runs with kL below threshold, {} energy increases{}; {} runs above threshold or outside "
                        "the curvature range not counted ({} increases there)",
                        t.rows_checked, t.violations, offenders.empty() ? "" : " in" + offenders, t.rows_skipped,
                        t.violations_above_threshold));
}

// ---------------------------------------------------------------------------
// Invariant suites

Vector gaussian_probe(Eigen::Index n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    return Vector::NullaryExpr(n, [&] { return nd(rng); });
}

void invariants() {
    std::vector<std::string> bad;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok) bad.push_back(what);
    };
    int checks = 0;
    for (const auto& name : problem_names()) {
        const int pts = name == "ac2d" || name == "ch2d" ? 16 : 65;
        const auto s = make_problem(name, pts);
        const auto& p = *s.problem;
        const Vector u = s.initial;
        Vector v = 1e-2 * gaussian_probe(u.size(), 1);
        if (!p.admissible(u + v)) v = 0.1 * v.cwiseProduct(u);
        const double d = p.inner(p.gradient(u), v);
        const double eps = 1e-2;
        const double fd = (p.energy(u + eps * v) - p.energy(u - eps * v)) / (2 * eps);
        check(std::abs(fd - d) <= 1e-6 * (1.0 + std::abs(d)), name + " gradient");
        const double h = 1e-3;
        const Vector w = 1e-3 * gaussian_probe(u.size(), 2).cwiseProduct(u.cwiseAbs() + Vector::Ones(u.size())) / 4;
        const Vector hfd = (p.gradient(u + h * w) - p.gradient(u - h * w)) / (2 * h);
        const Vector hex = (p.hessian1(u) + p.hessian2(u)) * w;
        check((hfd - hex).norm() <= 1e-6 * (1.0 + hex.norm()), name + " hessian");
        const Vector& mask = s.grid().free_mask();
        const Vector a = gaussian_probe(u.size(), 3).cwiseProduct(mask);
        const Vector b = gaussian_probe(u.size(), 4).cwiseProduct(mask);
        auto adjoint = [&](const SparseMatrix& A, const std::string& what) {
            const double l = p.inner(A * a, b), r = p.inner(a, A * b);
            check(std::abs(l - r) <= 1e-12 * std::max(1.0, std::abs(l)), name + " " + what + " adjoint");
        };
        adjoint(p.hessian1(u), "hessian1");
        if (const auto* M = p.flow_operator()) adjoint(*M, "flow operator");
        if (s.metric) {
            adjoint(s.metric->matrix(u), "metric");
            const double r1 = dsqL_check(*s.metric, u, w * 100, a, 1e-2);
            const double r2 = dsqL_check(*s.metric, u, w * 100, a, 5e-3);
            if (!s.metric->is_linear_in_u()) {
                check(r2 <= 1e-3 && std::abs(r1 / r2 - 4.0) <= 0.5, name + " dsqL_check");
            } else {
                check(r1 == 0.0, name + " dsqL_check");
            }
        }
        checks += 5;
    }
    {
        PointwiseProblem p("split", 5,
                           {[](double u) { return 0.25 * u * u * u * u + u * u; },
                            [](double u) { return u * u * u + 2 * u; }, [](double u) { return 3 * u * u + 2; }},
                           PointwiseProblem::Potential{[](double u) { return std::sin(u); },
                                                       [](double u) { return std::cos(u); },
                                                       [](double u) { return -std::sin(u); }},
                           1.0);
        const Vector u0 = gaussian_probe(5, 9);
        for (const auto& name : builtin_names()) {
            const Tableau t = builtin(name);
            const auto rec = ms_step(t, p, u0, 0.01);
            for (int m = 1; m <= t.stages; ++m) {
                check(stage_residual(t, p, rec.stages, m, 0.01) <= 1e-10, name + " stage residual");
                ++checks;
            }
        }
    }
    std::string list;
    for (const auto& b : bad) list += " " + b;
    verdict(bad.empty(), "invariant suites",
            fmt::format("{} checks (gradients, Hessians, adjoints, dsqL_check, stage residuals){}", checks,
                        bad.empty() ? "" : ", failed:" + list));
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    tableau_verification();
    stability_thresholds();
    objective_equivalence();
    scalar_metric_ode();
    invariants();
    heat_wass();
    pme_wass();
    ac1d_tw();
    two_dimensional();
    energy_monotonicity();
    fmt::print("{} criteria failed, {:.0f} s total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
