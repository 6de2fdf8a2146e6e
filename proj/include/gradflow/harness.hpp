#pragma once

// Convergence sweeps, report emission and the builtin verification suite.

#include <gradflow/error.hpp>
#include <gradflow/integrator.hpp>
#include <gradflow/metric.hpp>
#include <gradflow/problems.hpp>
#include <gradflow/reference.hpp>
#include <gradflow/tableau.hpp>
#include <gradflow/verify.hpp>

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace gradflow {

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("{}: '{}' is not an integer", what, s));
    }
}

inline double parse_real(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("{}: '{}' is not a number", what, s));
    }
}

inline bool parse_bool(const std::string& s, const std::string& what) {
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw ConfigError(fmt::format("{}: '{}' is not a boolean", what, s));
}

// "2^a" or a plain integer.
inline int parse_count(const std::string& s) {
    const auto caret = s.find('^');
    if (caret == std::string::npos) return parse_int(s, "steps");
    if (trim(s.substr(0, caret)) != "2") throw ConfigError(fmt::format("steps: only powers of two, got '{}'", s));
    const int e = parse_int(trim(s.substr(caret + 1)), "steps");
    if (e < 0 || e > 30) throw ConfigError(fmt::format("steps: exponent {} out of range", e));
    return 1 << e;
}

}  // namespace detail

/// Step counts from "2^a..2^b" (all powers of two in between) or a comma list.
inline std::vector<int> parse_steps(const std::string& text) {
    const std::string s = detail::trim(text);
    std::vector<int> out;
    if (const auto dots = s.find(".."); dots != std::string::npos) {
        const int lo = detail::parse_count(detail::trim(s.substr(0, dots)));
        const int hi = detail::parse_count(detail::trim(s.substr(dots + 2)));
        if (lo <= 0 || hi < lo) throw ConfigError(fmt::format("steps: empty range '{}'", s));
        for (long n = lo; n <= hi; n *= 2) out.push_back(static_cast<int>(n));
    } else {
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(detail::parse_count(detail::trim(tok)));
    }
    return out;
}

struct RunConfig {
    std::string problem;
    std::string scheme = "si2";
    std::vector<int> steps;
    std::optional<int> grid;
    std::optional<double> final_time;
    std::string out_dir;
    bool polish = false;
    bool monitor_energy = true;
    /// Reference runs use (largest step count) * reference_factor steps.
    int reference_factor = 8;
    int reference_levels = 3;
    /// Worker threads for rows; 0 selects GRADFLOW_THREADS or the hardware count.
    int threads = 0;

    void validate() const {
        const auto names = problem_names();
        if (std::find(names.begin(), names.end(), problem) == names.end()) throw UnknownNameError("problem", problem);
        metric_scheme_from_name(scheme);
        if (steps.size() < 2) throw ConfigError("at least two step counts are needed to estimate orders");
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (steps[i] < 0) throw ConfigError("step counts must be nonnegative");
            if (i > 0 && steps[i] <= steps[i - 1]) throw ConfigError("step counts must be strictly increasing");
        }
        if (grid && *grid < 3) throw ConfigError("grid needs at least 3 points per axis");
        if (final_time && !(*final_time >= 0.0)) throw ConfigError("final time must be nonnegative");
        if (reference_factor < 1) throw ConfigError("reference factor must be positive");
        if (reference_levels < 1 || reference_levels > 3) throw ConfigError("reference levels must be 1, 2 or 3");
    }

    /// Applies one key=value setting.
    void set(const std::string& key, const std::string& value) {
        if (key == "problem") problem = value;
        else if (key == "scheme") scheme = value;
        else if (key == "steps") steps = parse_steps(value);
        else if (key == "grid") grid = detail::parse_int(value, key);
        else if (key == "final_time") final_time = detail::parse_real(value, key);
        else if (key == "out" || key == "out_dir") out_dir = value;
        else if (key == "polish") polish = detail::parse_bool(value, key);
        else if (key == "monitor_energy") monitor_energy = detail::parse_bool(value, key);
        else if (key == "reference_factor") reference_factor = detail::parse_int(value, key);
        else if (key == "reference_levels") reference_levels = detail::parse_int(value, key);
        else if (key == "threads") threads = detail::parse_int(value, key);
        else if (key == "metric") {
            // Accepted for documentation; the metric is fixed by the problem.
        } else {
            throw ConfigError(fmt::format("unknown configuration key '{}'", key));
        }
    }

    /// Flat key=value text; '#' starts a comment.
    static RunConfig parse(std::istream& is) { return parse(is, RunConfig()); }
    static RunConfig parse(std::istream& is, RunConfig base) {
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key = value", lineno));
            base.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        }
        return base;
    }

    static RunConfig load(const std::string& path) { return load(path, RunConfig()); }
    static RunConfig load(const std::string& path, RunConfig base) {
        std::ifstream is(path);
        if (!is) throw ConfigError(fmt::format("cannot open config file '{}'", path));
        return parse(is, std::move(base));
    }
};

/// Worker count: explicit request, else GRADFLOW_THREADS, else hardware concurrency.
inline int thread_count(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("GRADFLOW_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

// ---------------------------------------------------------------------------
// Convergence sweeps

struct ConvergenceRow {
    int steps = 0;
    double k = 0.0;
    /// NaN when the run failed.
    double l2_error = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> observed_order;
    int energy_violations = 0;
    int range_exits = 0;
    double wallclock_s = 0.0;
    std::vector<double> energies;
    std::string failure;

    bool ok() const { return failure.empty(); }
};

struct ConvergenceReport {
    std::string problem;
    std::string scheme;
    bool polished = false;
    double final_time = 0.0;
    int grid_points = 0;
    std::vector<ConvergenceRow> rows;
    double reference_wallclock_s = 0.0;
    Vector initial;
    Vector final_state;
    Vector oracle;

    int total_energy_violations() const {
        int n = 0;
        for (const auto& r : rows) n += r.energy_violations;
        return n;
    }
    /// Last defined observed order.
    std::optional<double> final_order() const {
        for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
            if (it->observed_order) return it->observed_order;
        }
        return std::nullopt;
    }
};

/// Reference solutions shared across sweeps in one process.
class OracleCache {
public:
    Vector get(const ProblemSpec& s, int grid_points, int fine_steps, int levels, double* seconds = nullptr) {
        const std::string key = fmt::format("{}|{}|{:.17g}|{}|{}", s.name, grid_points, s.final_time, fine_steps, levels);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            if (auto it = cache_.find(key); it != cache_.end()) {
                if (seconds) *seconds = 0.0;
                return it->second;
            }
        }
        const auto t0 = std::chrono::steady_clock::now();
        Vector ref = s.final_time == 0.0 ? s.initial : reference_solution(s, fine_steps, levels);
        if (seconds) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard<std::mutex> lock(mutex_);
        cache_.emplace(key, ref);
        return ref;
    }

private:
    std::mutex mutex_;
    std::map<std::string, Vector> cache_;
};

namespace detail {

inline std::string canonical_scheme(const std::string& s) {
    switch (metric_scheme_from_name(s)) {
        case MetricSchemeKind::step2: return "si2";
        case MetricSchemeKind::step3: return "si3";
        case MetricSchemeKind::step2_fi: return "fi2";
        case MetricSchemeKind::step3_fi: return "fi3";
    }
    return s;
}

inline int scheme_order(const std::string& canonical) { return canonical.back() - '0'; }

}  // namespace detail

/// Builds the step function for one row.  Plain problems run the multistage
/// tableau directly; solution-dependent metrics use the predictor schemes.
inline StepFunction make_stepper(const ProblemSpec& s, const std::string& scheme, bool polished,
                                 std::shared_ptr<const MetricTableaus> tabs = nullptr) {
    const std::string name = detail::canonical_scheme(scheme);
    if (s.metric) {
        if (!tabs) tabs = std::make_shared<const MetricTableaus>(MetricTableaus::make(polished));
        auto stepper = std::make_shared<MetricStepper>(*s.problem, *s.metric, tabs);
        const auto kind = metric_scheme_from_name(name);
        return [stepper, kind](const Vector& u, double k) { return stepper->step(kind, u, k); };
    }
    Tableau t = builtin(name);
    if (polished) t = polish(t, detail::scheme_order(name));
    auto tab = std::make_shared<const Tableau>(std::move(t));
    auto solver = std::make_shared<StageSolver>();
    auto problem = s.problem;
    return [tab, solver, problem](const Vector& u, double k) { return ms_step(*tab, *problem, u, k, {}, solver.get()); };
}

/// Time-step refinement sweep against the same-grid reference solution.
inline ConvergenceReport converge(const RunConfig& cfg, OracleCache* cache = nullptr) {
    cfg.validate();
    const ProblemSpec s = make_problem(cfg.problem, cfg.grid, cfg.final_time);
    ConvergenceReport rep;
    rep.problem = cfg.problem;
    rep.scheme = detail::canonical_scheme(cfg.scheme);
    rep.polished = cfg.polish;
    rep.final_time = s.final_time;
    rep.grid_points = s.grid().points_per_axis();
    rep.initial = s.initial;

    OracleCache local;
    OracleCache& oracles = cache ? *cache : local;
    const int fine = std::max(1, cfg.steps.back()) * cfg.reference_factor;
    rep.oracle = oracles.get(s, rep.grid_points, fine, cfg.reference_levels, &rep.reference_wallclock_s);

    auto tabs = s.metric ? std::make_shared<const MetricTableaus>(MetricTableaus::make(cfg.polish)) : nullptr;
    rep.rows.resize(cfg.steps.size());
    std::vector<Vector> finals(cfg.steps.size());

    auto run_row = [&](std::size_t i) {
        ConvergenceRow& row = rep.rows[i];
        row.steps = cfg.steps[i];
        row.k = row.steps > 0 ? s.final_time / row.steps : 0.0;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const StepFunction step = make_stepper(s, rep.scheme, cfg.polish, tabs);
            RunOptions opts;
            opts.monitor_energy = cfg.monitor_energy;
            const Trajectory tr = run(step, *s.problem, s.initial, row.k, row.k > 0.0 ? row.steps : 0, opts);
            row.l2_error = s.grid().l2_norm(tr.final_state - rep.oracle);
            row.energy_violations = tr.energy_violations;
            row.range_exits = tr.range_exits;
            row.energies = tr.energies;
            finals[i] = tr.final_state;
        } catch (const std::exception& e) {
            row.failure = e.what();
            row.l2_error = std::numeric_limits<double>::quiet_NaN();
        }
        row.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    const int workers = std::min<int>(thread_count(cfg.threads), static_cast<int>(cfg.steps.size()));
    if (workers <= 1) {
        for (std::size_t i = cfg.steps.size(); i-- > 0;) run_row(i);
    } else {
        // Largest rows first so the slowest work starts early.
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t j; (j = next++) < cfg.steps.size();) run_row(cfg.steps.size() - 1 - j);
            });
        }
        for (auto& t : pool) t.join();
    }

    for (std::size_t i = 1; i < rep.rows.size(); ++i) {
        const double a = rep.rows[i - 1].l2_error, b = rep.rows[i].l2_error;
        if (std::isfinite(a) && std::isfinite(b) && a > 0.0 && b > 0.0) rep.rows[i].observed_order = std::log2(a / b);
    }
    for (std::size_t i = rep.rows.size(); i-- > 0;) {
        if (rep.rows[i].ok()) {
            rep.final_state = finals[i];
            break;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Output

inline constexpr const char* csv_header = "steps,k,l2_error,observed_order,energy_violations,wallclock_s";

namespace detail {

inline std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    return fmt::format("{:.17g}", v);
}

}  // namespace detail

inline void emit_csv(const ConvergenceReport& rep, std::ostream& os) {
    os << csv_header << '\n';
    for (const auto& r : rep.rows) {
        os << r.steps << ',' << detail::csv_number(r.k) << ',' << detail::csv_number(r.l2_error) << ','
           << (r.observed_order ? detail::csv_number(*r.observed_order) : std::string()) << ','
           << r.energy_violations << ',' << fmt::format("{:.6f}", r.wallclock_s) << '\n';
    }
}

inline void emit_csv(const ConvergenceReport& rep, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error(fmt::format("cannot write '{}'", path));
    emit_csv(rep, os);
}

/// Column-per-step-count table: step counts, L2 errors and orders.
inline std::string emit_table(const ConvergenceReport& rep) {
    std::string out = fmt::format("{} / {}{} (T = {}, {} points per axis)\n", rep.problem, rep.scheme,
                                  rep.polished ? " polished" : "", rep.final_time, rep.grid_points);
    const int order = rep.scheme.empty() ? 0 : rep.scheme.back() - '0';
    const std::string labels[] = {"Number of time steps", fmt::format("L2 error ({} order)", order == 2 ? "2nd" : order == 3 ? "3rd" : "?"),
                                  "Order"};
    std::size_t w0 = 0;
    for (const auto& l : labels) w0 = std::max(w0, l.size());
    auto steps_label = [](int n) {
        if (n > 0 && (n & (n - 1)) == 0) return fmt::format("2^{}", static_cast<int>(std::log2(n)));
        return std::to_string(n);
    };
    std::string l1 = fmt::format("{:<{}}", labels[0], w0), l2 = fmt::format("{:<{}}", labels[1], w0),
                l3 = fmt::format("{:<{}}", labels[2], w0);
    for (const auto& r : rep.rows) {
        l1 += fmt::format(" | {:>9}", steps_label(r.steps));
        l2 += fmt::format(" | {:>9}", std::isnan(r.l2_error) ? std::string("nan") : fmt::format("{:.2e}", r.l2_error));
        l3 += fmt::format(" | {:>9}", r.observed_order ? fmt::format("{:.2f}", *r.observed_order) : std::string());
    }
    out += l1 + '\n' + l2 + '\n' + l3 + '\n';
    for (const auto& r : rep.rows) {
        if (!r.ok()) out += fmt::format("  steps {} failed: {}\n", r.steps, r.failure);
    }
    if (rep.total_energy_violations() > 0) {
        out += fmt::format("  energy increases: {}\n", rep.total_energy_violations());
    }
    return out;
}

/// Initial and final fields as CSV columns (x[,y],initial,final).
inline void emit_snapshot(const ConvergenceReport& rep, const Grid& g, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error(fmt::format("cannot write '{}'", path));
    os << (g.dimension() == 2 ? "x,y,initial,final\n" : "x,initial,final\n");
    const Vector& fin = rep.final_state.size() == rep.initial.size() ? rep.final_state : rep.initial;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const auto p = g.node(i);
        os << detail::csv_number(p[0]) << ',';
        if (g.dimension() == 2) os << detail::csv_number(p[1]) << ',';
        os << detail::csv_number(rep.initial[i]) << ',' << detail::csv_number(fin[i]) << '\n';
    }
}

/// Energy traces of every successful row (step,time,energy per steps value).
inline void emit_energy(const ConvergenceReport& rep, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error(fmt::format("cannot write '{}'", path));
    os << "steps,step,time,energy\n";
    for (const auto& r : rep.rows) {
        for (std::size_t n = 0; n < r.energies.size(); ++n) {
            os << r.steps << ',' << n << ',' << detail::csv_number(static_cast<double>(n) * r.k) << ','
               << detail::csv_number(r.energies[n]) << '\n';
        }
    }
}

/// Writes convergence.csv, energy.csv and snapshot.csv under cfg.out_dir.
inline void write_outputs(const RunConfig& cfg, const ConvergenceReport& rep) {
    if (cfg.out_dir.empty()) return;
    std::filesystem::create_directories(cfg.out_dir);
    const auto dir = std::filesystem::path(cfg.out_dir);
    emit_csv(rep, (dir / "convergence.csv").string());
    emit_energy(rep, (dir / "energy.csv").string());
    const ProblemSpec s = make_problem(cfg.problem, cfg.grid, cfg.final_time);
    emit_snapshot(rep, s.grid(), (dir / "snapshot.csv").string());
}

// ---------------------------------------------------------------------------
// Verification of the builtin tableaus

struct TableauCheck {
    std::string name;
    int claimed_order = 0;
    int order = 0;
    StabilityReport stability;
    std::optional<double> claimed_threshold;
    bool threshold_ok = true;
    double polish_residual = std::numeric_limits<double>::quiet_NaN();
    int polished_order = 0;
    std::string polish_failure;
    double equivalence_max_relative = 0.0;
    int equivalence_checks = 0;
    bool equivalence_ok = true;

    bool ok() const {
        return order >= claimed_order && threshold_ok && polish_failure.empty() && polish_residual <= 1e-13 &&
               equivalence_ok;
    }
};

struct VerifyReport {
    std::vector<TableauCheck> tableaus;
    bool ok() const {
        return std::all_of(tableaus.begin(), tableaus.end(), [](const auto& t) { return t.ok(); });
    }
};

namespace detail {

// Randomized stage-objective equivalence on a small pointwise problem.
inline void equivalence_trials(const Tableau& t, double threshold, int draws, std::mt19937_64& rng, TableauCheck& out) {
    std::uniform_real_distribution<double> unit(0.0, 1.0), sym(-1.0, 1.0);
    const int n = 6;
    const double lambda = 2.0;
    PointwiseProblem p("equivalence", n, {[](double u) { return 0.25 * u * u * u * u; }, [](double u) { return u * u * u; },
                                    [](double u) { return 3 * u * u; }},
                       PointwiseProblem::Potential{[](double u) { return -std::cos(u); }, [](double u) { return std::sin(u); },
                                                   [](double u) { return std::cos(u); }},
                       1.0);
    const double kl_max = std::isfinite(threshold) ? threshold : 1.0;
    for (int d = 0; d < draws; ++d) {
        const int m = 1 + static_cast<int>(unit(rng) * t.stages) % t.stages;
        const double k = std::max(1e-6, unit(rng) * kl_max) / lambda;
        std::vector<Vector> states;
        for (int i = 0; i < m; ++i) states.push_back(Vector::NullaryExpr(n, [&] { return sym(rng); }));
        const Vector ua = Vector::NullaryExpr(n, [&] { return sym(rng); });
        const Vector ub = Vector::NullaryExpr(n, [&] { return sym(rng); });
        const auto r = objective_equivalence_check(t, m, p, states, ua, ub, k, lambda);
        out.equivalence_max_relative = std::max(out.equivalence_max_relative, r.relative());
        ++out.equivalence_checks;
    }
    out.equivalence_ok = out.equivalence_max_relative <= 1e-9;
}

}  // namespace detail

/// Order, threshold, polish and stage-objective checks for every builtin.
inline VerifyReport verify_all(int equivalence_draws = 20, std::uint64_t seed = 12345) {
    VerifyReport rep;
    std::mt19937_64 rng(seed);
    for (const auto& name : builtin_names()) {
        const Tableau t = builtin(name);
        TableauCheck c;
        c.name = name;
        c.claimed_order = t.claimed_order;
        c.order = t.predictor_target ? (order_residual(t, t.claimed_order) <= 1e-2 ? t.claimed_order : 0)
                                     : order_of(t, 1e-2);
        c.stability = stability_threshold(t);
        c.claimed_threshold = t.claimed_threshold;
        if (t.claimed_threshold) {
            const double want = *t.claimed_threshold;
            c.threshold_ok = std::isinf(want) ? std::isinf(c.stability.threshold)
                                              : std::abs(c.stability.threshold - want) <= 0.1 * want;
        }
        try {
            const Tableau pt = polish(t, t.claimed_order);
            c.polish_residual = order_residual(pt, t.claimed_order);
            c.polished_order = t.predictor_target ? t.claimed_order : order_of(pt, 1e-12);
        } catch (const std::exception& e) {
            c.polish_failure = e.what();
        }
        if (t.theta || t.fully_implicit()) detail::equivalence_trials(t, c.stability.threshold, equivalence_draws, rng, c);
        rep.tableaus.push_back(std::move(c));
    }
    return rep;
}

inline std::string format_verify(const VerifyReport& rep) {
    std::string out;
    for (const auto& c : rep.tableaus) {
        out += fmt::format("{:<8} order {} (claimed {})  threshold {}{}  polish residual {:.1e}  equiv {:.1e}  {}\n",
                           c.name, c.order, c.claimed_order,
                           std::isinf(c.stability.threshold) ? std::string("inf") : fmt::format("{:.6g}", c.stability.threshold),
                           c.claimed_threshold ? fmt::format(" (claimed {:.6g})", *c.claimed_threshold) : std::string(),
                           c.polish_residual, c.equivalence_max_relative, c.ok() ? "ok" : "FAIL");
        if (!c.polish_failure.empty()) out += fmt::format("         polish failed: {}\n", c.polish_failure);
    }
    return out;
}

}  // namespace gradflow
