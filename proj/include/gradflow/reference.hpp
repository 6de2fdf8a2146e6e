#pragma once

// Reference ("exact"-proxy) solvers used as convergence oracles: a two-step
// BDF scheme with extrapolated explicit terms, its stabilized variant for the
// variable-mobility problem, and TR-BDF2.  All run on the experiment's grid,
// so the oracle measures temporal error only; Richardson extrapolation over
// halved steps removes the leading error terms.

#include <gradflow/error.hpp>
#include <gradflow/integrator.hpp>
#include <gradflow/linear_solver.hpp>
#include <gradflow/metric.hpp>
#include <gradflow/problems.hpp>
#include <gradflow/tableau.hpp>

#include <fmt/format.h>

#include <cmath>
#include <vector>

namespace gradflow {

namespace detail {

inline SparseMatrix identity(Eigen::Index n) {
    SparseMatrix I(n, n);
    I.setIdentity();
    return I;
}

// Right-hand side f(u) = -M(u) grad E(u) and its Jacobian.
struct FlowField {
    const ProblemSpec& spec;

    SparseMatrix op(const Vector& u) const {
        if (spec.metric) return spec.metric->matrix(u);
        if (const auto* M = spec.problem->flow_operator()) return *M;
        return identity(u.size());
    }
    Vector value(const Vector& u) const {
        if (spec.metric) return -spec.metric->apply(u, spec.problem->gradient(u));
        return -(op(u) * spec.problem->gradient(u));
    }
    SparseMatrix jacobian(const Vector& u) const {
        const auto& p = *spec.problem;
        SparseMatrix H = p.hessian1(u);
        if (p.has_explicit_part()) H += p.hessian2(u);
        SparseMatrix J = -(op(u) * H);
        if (spec.metric) J -= spec.metric->derivative_applied(u, p.gradient(u));
        return J;
    }
};

// Solves u - c f(u) = rhs by damped Newton.  The iteration matrix is
// I - c f'(u_J); it is refreshed at the current iterate whenever the frozen
// one contracts too slowly.  `lu` carries the factorization between calls.
inline Vector implicit_solve(const FlowField& f, double c, const Vector& rhs, Vector u,
                             std::unique_ptr<LinearFactorization>& lu) {
    const auto& p = *f.spec.problem;
    const double scale = std::max(p.norm(rhs), 1e-300);
    std::vector<double> history;
    bool fresh = false;
    for (int it = 0; it < 100; ++it) {
        const Vector F = u - c * f.value(u) - rhs;
        const double r = p.norm(F);
        history.push_back(r);
        if (r <= 1e-14 * scale) return u;
        if (history.size() >= 2) {
            const double prev = history[history.size() - 2];
            if (r > 0.5 * prev && r <= 1e-11 * scale) return u;
            if (r > 0.25 * prev && !fresh) lu.reset();
        }
        fresh = false;
        if (!lu) {
            lu = std::make_unique<LinearFactorization>(SparseMatrix(identity(u.size()) - c * f.jacobian(u)));
            fresh = true;
        }
        const Vector d = lu->solve(-F);
        double lam = 1.0;
        Vector next = u + d;
        for (int h = 0; !p.admissible(next) || (f.spec.metric && !f.spec.metric->admissible(next)); ++h) {
            if (h == 40) throw InadmissibleStateError("reference Newton update left the admissible set");
            lam *= 0.5;
            next = u + lam * d;
        }
        u = std::move(next);
    }
    throw NewtonError("reference Newton did not converge", history);
}

inline Vector bootstrap_be(const ProblemSpec& s, const Vector& u0, double k, StageSolver& solver) {
    const Tableau be = builtin("be");
    Vector u = u0;
    for (int q = 0; q < 4; ++q) {
        if (s.metric) {
            const SparseMatrix L = s.metric->matrix(u);
            u = ms_step(be, *s.problem, u, 0.25 * k, FrozenMetric{&L, 0}, &solver).u_next;
        } else {
            u = ms_step(be, *s.problem, u, 0.25 * k, {}, &solver).u_next;
        }
    }
    return u;
}

}  // namespace detail

/// (3/2)u^{n+1} - 2u^n + (1/2)u^{n-1} = -k M [grad E1(u^{n+1}) + 2 grad E2(u^n) - grad E2(u^{n-1})]
/// for quadratic E1 and constant M.
inline Vector bdf2_ab(const ProblemSpec& s, int steps) {
    const auto& p = *s.problem;
    if (!p.hessian1_constant()) throw Error("bdf2_ab needs a quadratic implicit energy");
    const double k = s.final_time / steps;
    const Vector& u0 = s.initial;
    if (steps == 0) return u0;
    StageSolver solver;
    Vector prev = u0;
    Vector cur = detail::bootstrap_be(s, u0, k, solver);
    const SparseMatrix* M = p.flow_operator();
    const SparseMatrix H = p.hessian1(u0);
    const SparseMatrix MH = M ? SparseMatrix((*M) * H) : H;
    const LinearFactorization lu(SparseMatrix(1.5 * detail::identity(u0.size()) + k * MH));
    Vector g_prev = p.grad_energy2(prev);
    // Solved for the increment u^{n+1} - u^n, which keeps rounding errors
    // proportional to the change per step rather than to u.
    for (int n = 1; n < steps; ++n) {
        const Vector g_cur = p.grad_energy2(cur);
        const Vector force = H * cur + 2.0 * g_cur - g_prev;
        const Vector rhs = 0.5 * (cur - prev) - k * (M ? Vector((*M) * force) : force);
        Vector next = cur + lu.solve(rhs);
        prev = std::move(cur);
        cur = std::move(next);
        g_prev = g_cur;
    }
    return cur;
}

/// 3u^{n+1} + 2k eps^2 Lap^2 u^{n+1} = 4u^n - u^{n-1}
///   + 4k (eps^2 Lap^2 u^n + N(u^n)) - 2k (eps^2 Lap^2 u^{n-1} + N(u^{n-1})),
/// with N(u) = -L(u) grad E(u) including the forcing.
inline Vector bdf_ab_mobility(const ProblemSpec& s, int steps) {
    if (!s.metric) throw Error("bdf_ab_mobility needs a metric problem");
    const double k = s.final_time / steps;
    const Vector& u0 = s.initial;
    if (steps == 0) return u0;
    const double e2 = s.epsilon * s.epsilon;
    const SparseMatrix lap = s.grid().laplacian_matrix();
    const SparseMatrix bih = lap * lap;
    detail::FlowField f{s};
    StageSolver solver;
    Vector prev = u0;
    Vector cur = detail::bootstrap_be(s, u0, k, solver);
    const LinearFactorization lu(SparseMatrix(3.0 * detail::identity(u0.size()) + 2.0 * k * e2 * bih));
    auto explicit_part = [&](const Vector& u) -> Vector { return e2 * (bih * u) + f.value(u); };
    Vector x_prev = explicit_part(prev);
    for (int n = 1; n < steps; ++n) {
        const Vector x_cur = explicit_part(cur);
        const Vector rhs = (cur - prev) + 4.0 * k * x_cur - 2.0 * k * x_prev - 2.0 * k * e2 * (bih * cur);
        Vector next = cur + lu.solve(rhs);
        prev = std::move(cur);
        cur = std::move(next);
        x_prev = x_cur;
    }
    return cur;
}

/// TR-BDF2 with gamma = 2 - sqrt(2) for u' = -M(u) grad E(u).
inline Vector tr_bdf2(const ProblemSpec& s, int steps) {
    const double k = s.final_time / steps;
    const double g = 2.0 - std::sqrt(2.0);
    const double a = 1.0 / (g * (2.0 - g));
    const double b = (1.0 - g) * (1.0 - g) / (g * (2.0 - g));
    const double c = (1.0 - g) / (2.0 - g);
    detail::FlowField f{s};
    Vector u = s.initial;
    std::unique_ptr<LinearFactorization> lu;
    for (int n = 0; n < steps; ++n) {
        const Vector fu = f.value(u);
        const Vector rhs1 = u + 0.5 * g * k * fu;
        Vector guess = u + g * k * fu;
        if (!s.problem->admissible(guess)) guess = u;
        const Vector ug = detail::implicit_solve(f, 0.5 * g * k, rhs1, guess, lu);
        const Vector rhs2 = a * ug - b * u;
        u = detail::implicit_solve(f, c * k, rhs2, ug, lu);
    }
    return u;
}

/// Single reference run with the experiment's designated scheme.
inline Vector reference_run(const ProblemSpec& s, int steps) {
    switch (s.reference) {
        case ReferenceKind::bdf2_ab: return bdf2_ab(s, steps);
        case ReferenceKind::bdf_ab_mobility: return bdf_ab_mobility(s, steps);
        case ReferenceKind::tr_bdf2: return tr_bdf2(s, steps);
    }
    throw Error("unknown reference scheme");
}

/// Richardson-extrapolated reference from runs with fine_steps * 2^j steps,
/// j < levels (levels 1..3), assuming an error expansion a k^2 + b k^3.
inline Vector reference_solution(const ProblemSpec& s, int fine_steps, int levels = 3) {
    if (levels < 1 || levels > 3) throw Error("reference levels must be 1, 2 or 3");
    std::vector<Vector> runs;
    for (int j = 0; j < levels; ++j) runs.push_back(reference_run(s, fine_steps << j));
    if (levels == 1) return runs[0];
    if (levels == 2) return (4.0 * runs[1] - runs[0]) / 3.0;
    return runs[0] / 21.0 - (4.0 / 7.0) * runs[1] + (32.0 / 21.0) * runs[2];
}

}  // namespace gradflow
