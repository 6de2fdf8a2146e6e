// Command line driver: convergence sweeps and tableau verification.

#include <gradflow/gradflow.hpp>

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cmath>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace gradflow;

std::string number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return fmt::format("{:.17g}", v);
}

void print_tableau_report(const Tableau& t, double scan_max) {
    const auto conv = convention_for(t);
    const auto st = stability_threshold(t, scan_max);
    fmt::print("tableau {} ({} stages, {})\n", t.label.empty() ? "(unnamed)" : t.label, t.stages,
               t.theta ? "semi-implicit" : "fully implicit");
    if (t.predictor_target) {
        fmt::print("  predictor target c = {}\n", *t.predictor_target);
        fmt::print("  predictor residual {:.3e}\n", order_residual(t, t.claimed_order));
    } else {
        for (int p = 1; p <= 3; ++p) {
            fmt::print("  order {} residual {:.3e}\n", p, max_residual(compute_beta(t, conv), order_conditions(p, conv)));
        }
    }
    fmt::print("  stability threshold k*Lambda = {}{}\n", st.unbounded ? "inf" : fmt::format("{:.10g}", st.threshold),
               st.feasible_at_zero ? "" : " (infeasible at k*Lambda = 0)");
    if (t.claimed_threshold) fmt::print("  claimed threshold {}\n", number(*t.claimed_threshold));
    if (st.non_monotone) fmt::print("  warning: feasibility is not monotone on [0, {}]\n", scan_max);

    const int order = t.predictor_target ? t.claimed_order : order_of(t, 1e-2, conv);
    fmt::print("label={}\n", t.label);
    fmt::print("stages={}\n", t.stages);
    fmt::print("order={}\n", order);
    fmt::print("threshold={}\n", st.unbounded ? std::string("inf") : number(st.threshold));
    fmt::print("feasible_at_zero={}\n", st.feasible_at_zero ? 1 : 0);
    fmt::print("non_monotone={}\n", st.non_monotone ? 1 : 0);
    fmt::print("theta_ok={}\n", st.theta_ok && st.monotone_ok ? 1 : 0);
}

int cmd_verify(const std::string& target, std::optional<int> polish_order, double scan_max,
               const std::string& write_path) {
    if (target.empty()) {
        const auto rep = verify_all();
        std::cout << format_verify(rep);
        fmt::print("verify_all={}\n", rep.ok() ? "pass" : "fail");
        return rep.ok() ? 0 : 1;
    }
    const Tableau t = resolve_tableau(target);
    print_tableau_report(t, scan_max);
    if (polish_order) {
        PolishOptions opts;
        opts.scan_max = scan_max;
        const auto rep = polish_report(t, *polish_order, opts);
        fmt::print("\npolished to order {}: residual {:.3e} after {} iterations, max coefficient change {:.3e}\n",
                   *polish_order, rep.residual, rep.iterations, rep.max_change);
        print_tableau_report(rep.tableau, scan_max);
        fmt::print("polish_residual={}\n", number(rep.residual));
        fmt::print("polish_max_change={}\n", number(rep.max_change));
        if (!write_path.empty()) {
            save(rep.tableau, write_path);
            fmt::print("written={}\n", write_path);
        }
    }
    return 0;
}

int cmd_run(RunConfig cfg) {
    const auto rep = converge(cfg);
    std::cout << emit_table(rep);
    write_outputs(cfg, rep);
    if (!cfg.out_dir.empty()) fmt::print("csv={}/convergence.csv\n", cfg.out_dir);
    if (const auto o = rep.final_order()) fmt::print("final_order={:.4f}\n", *o);
    fmt::print("energy_violations={}\n", rep.total_energy_violations());
    const bool all_ok = std::all_of(rep.rows.begin(), rep.rows.end(), [](const auto& r) { return r.ok(); });
    return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Energy-stable multistage IMEX integrators for gradient flows"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "Time-step refinement sweep for one experiment");
    std::string problem, scheme, steps, out, config;
    std::optional<int> grid;
    std::optional<double> final_time;
    std::optional<int> ref_factor;
    bool polish_flag = false, no_energy = false;
    run->add_option("--problem", problem, "Experiment name");
    run->add_option("--scheme", scheme, "si2, si3, fi2 or fi3");
    run->add_option("--steps", steps, "Step counts, e.g. 2^3..2^7 or 8,16,32");
    run->add_flag("--polish", polish_flag, "Use polished coefficients");
    run->add_option("--grid", grid, "Points per axis");
    run->add_option("--final-time", final_time, "Override the final time");
    run->add_option("--reference-factor", ref_factor, "Reference steps per finest test step");
    run->add_option("--out", out, "Directory for CSV outputs");
    run->add_option("--config", config, "Flat key=value configuration file")->check(CLI::ExistingFile);
    run->add_flag("--no-energy", no_energy, "Skip energy monitoring");

    auto* verify = app.add_subcommand("verify", "Order and stability report for a tableau (all builtins if omitted)");
    std::string target, write_path;
    std::optional<int> polish_order;
    double scan_max = 1.0;
    verify->add_option("tableau", target, "Builtin name or tableau file");
    verify->add_option("--polish", polish_order, "Polish to this order")->check(CLI::Range(1, 3));
    verify->add_option("--scan-max", scan_max, "Upper end of the k*Lambda scan")->check(CLI::PositiveNumber);
    verify->add_option("--write", write_path, "Save the polished tableau here");

    auto* list = app.add_subcommand("list", "List experiments and builtin tableaus");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            RunConfig cfg;
            if (!config.empty()) cfg = RunConfig::load(config);
            if (!problem.empty()) cfg.problem = problem;
            if (!scheme.empty()) cfg.scheme = scheme;
            if (!steps.empty()) cfg.steps = parse_steps(steps);
            if (polish_flag) cfg.polish = true;
            if (grid) cfg.grid = grid;
            if (final_time) cfg.final_time = final_time;
            if (ref_factor) cfg.reference_factor = *ref_factor;
            if (!out.empty()) cfg.out_dir = out;
            if (no_energy) cfg.monitor_energy = false;
            return cmd_run(cfg);
        }
        if (*verify) return cmd_verify(target, polish_order, scan_max, write_path);
        if (*list) {
            fmt::print("problems:");
            for (const auto& n : problem_names()) fmt::print(" {}", n);
            fmt::print("\ntableaus:");
            for (const auto& n : builtin_names()) fmt::print(" {}", n);
            fmt::print("\n");
            return 0;
        }
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
    return 0;
}
