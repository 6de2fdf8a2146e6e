#pragma once

// One step of the multistage variational scheme.  Stage m solves the
// Euler-Lagrange equation
//
//   S_m U_m + k M grad E1(U_m) = sum_{i<m} gamma(m,i) U_i - k M sum_{i<m} theta(m,i) grad E2(U_i)
//
// by Newton's method, where M is a frozen operator (identity by default).
// Tableaus without theta treat E2 implicitly together with E1.

#include <gradflow/error.hpp>
#include <gradflow/linear_solver.hpp>
#include <gradflow/problem.hpp>
#include <gradflow/tableau.hpp>

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <tuple>
#include <vector>

namespace gradflow {

/// Operator frozen for the duration of a step.  A nonzero cache_id promises
/// that the same id always denotes the same matrix, which lets stage
/// Jacobians be factorized once per (S_m, k).
struct FrozenMetric {
    const SparseMatrix* op = nullptr;
    std::uint64_t cache_id = 0;
};

/// Reserved cache id for a problem's own constant flow operator.
inline constexpr std::uint64_t problem_operator_id = 1;

struct NewtonOptions {
    double rel_tol = 1e-12;
    double abs_tol = 1e-14;
    int max_iterations = 50;
    /// A stalled iteration is accepted once the relative residual is below this
    /// floor (finite precision limit for stiff stage operators).
    double stall_rel_tol = 1e-10;
    /// ... or once it is within this factor of the rounding level eps |J| |U|.
    double stall_rounding_factor = 10.0;
};

/// Newton solver for stage equations, with a factorization cache for stages
/// whose Jacobian does not depend on the state.  Owned by a single run.
class StageSolver {
public:
    explicit StageSolver(NewtonOptions opts = {}) : opts_(opts) {}

    const NewtonOptions& options() const noexcept { return opts_; }

    /// Solves S U + k M g(U) = rhs where g = grad E1 (+ grad E2 if implicit_e2).
    Vector solve(const GradientFlowProblem& p, double S, double k, const FrozenMetric& M,
                 const Vector& rhs, const Vector& guess, bool implicit_e2, int* iterations = nullptr) {
        const bool constant = p.hessian1_constant() && !(implicit_e2 && p.has_explicit_part()) &&
                              (M.op == nullptr || M.cache_id != 0);
        const double scale = std::max(p.norm(rhs), 1e-300);
        Vector U = guess;
        std::vector<double> history;
        for (int it = 0;; ++it) {
            const Vector F = residual(p, S, k, M, rhs, U, implicit_e2);
            const double r = p.norm(F);
            history.push_back(r);
            if (!std::isfinite(r)) {
                throw NewtonError("stage residual is not finite", history);
            }
            bool converged = r <= opts_.abs_tol || r <= opts_.rel_tol * scale;
            if (!converged && it >= 2 && r > 0.5 * history[history.size() - 2]) {
                // A stall is also accepted at the rounding level of the residual,
                // eps |J| |U|, which dominates when the operator has large
                // cancelling entries.
                const SparseMatrix J = jacobian(p, S, k, M, U, implicit_e2).cwiseAbs();
                const double rounding = std::numeric_limits<double>::epsilon() * p.norm(J * U.cwiseAbs());
                converged = r <= opts_.stall_rel_tol * scale || r <= opts_.stall_rounding_factor * rounding;
            }
            if (converged) {
                if (iterations) *iterations = it;
                return U;
            }
            if (it == opts_.max_iterations) {
                throw NewtonError(fmt::format("stage Newton did not converge in {} iterations (residual {:.3e})",
                                              opts_.max_iterations, r),
                                  history);
            }
            Vector delta;
            if (constant) {
                delta = cached(p, S, k, M, U, implicit_e2).solve(-F);
            } else {
                delta = LinearFactorization(jacobian(p, S, k, M, U, implicit_e2)).solve(-F);
            }
            if (!delta.allFinite()) throw LinearSolveError("stage linear solve produced non-finite values");
            double lambda = 1.0;
            Vector next = U + delta;
            for (int h = 0; !p.admissible(next); ++h) {
                if (h == 40) throw InadmissibleStateError("Newton update cannot be damped into the admissible set");
                lambda *= 0.5;
                next = U + lambda * delta;
            }
            U = std::move(next);
        }
    }

    static Vector residual(const GradientFlowProblem& p, double S, double k, const FrozenMetric& M,
                           const Vector& rhs, const Vector& U, bool implicit_e2) {
        Vector g = p.grad_energy1(U);
        if (implicit_e2 && p.has_explicit_part()) g += p.grad_energy2(U);
        if (M.op) g = (*M.op) * g;
        return S * U + k * g - rhs;
    }

    static SparseMatrix jacobian(const GradientFlowProblem& p, double S, double k, const FrozenMetric& M,
                                 const Vector& U, bool implicit_e2) {
        SparseMatrix H = p.hessian1(U);
        if (implicit_e2 && p.has_explicit_part()) H += p.hessian2(U);
        SparseMatrix J;
        if (M.op && is_diagonal(H)) {
            // M H with diagonal H is a column scaling of M.
            J = *M.op;
            const Vector h = H.diagonal();
            for (Eigen::Index c = 0; c < J.outerSize(); ++c) {
                for (SparseMatrix::InnerIterator it(J, c); it; ++it) it.valueRef() *= k * h[c];
            }
        } else {
            J = M.op ? SparseMatrix((*M.op) * H) : H;
            J *= k;
        }
        if (!add_to_diagonal(J, S)) {
            SparseMatrix I(U.size(), U.size());
            I.setIdentity();
            J += S * I;
        }
        J.makeCompressed();
        return J;
    }

private:
    static bool is_diagonal(const SparseMatrix& A) {
        for (Eigen::Index c = 0; c < A.outerSize(); ++c) {
            for (SparseMatrix::InnerIterator it(A, c); it; ++it) {
                if (it.row() != c) return false;
            }
        }
        return true;
    }

    // Adds s to every diagonal entry in place; false if one is not stored.
    static bool add_to_diagonal(SparseMatrix& A, double s) {
        A.makeCompressed();
        std::vector<double*> diag(static_cast<std::size_t>(A.cols()), nullptr);
        for (Eigen::Index c = 0; c < A.outerSize(); ++c) {
            for (SparseMatrix::InnerIterator it(A, c); it; ++it) {
                if (it.row() == c) diag[static_cast<std::size_t>(c)] = &it.valueRef();
            }
        }
        if (std::find(diag.begin(), diag.end(), nullptr) != diag.end()) return false;
        for (double* d : diag) *d += s;
        return true;
    }

    using LU = LinearFactorization;
    using Key = std::tuple<const GradientFlowProblem*, double, double, std::uint64_t, bool>;

    LU& cached(const GradientFlowProblem& p, double S, double k, const FrozenMetric& M, const Vector& U,
               bool implicit_e2) {
        const Key key{&p, S, k, M.op ? M.cache_id : 0, implicit_e2};
        auto it = cache_.find(key);
        if (it != cache_.end()) return *it->second;
        if (cache_.size() >= max_cached) cache_.clear();
        auto lu = std::make_unique<LU>(jacobian(p, S, k, M, U, implicit_e2));
        return *cache_.emplace(key, std::move(lu)).first->second;
    }

    static constexpr std::size_t max_cached = 64;
    NewtonOptions opts_;
    std::map<Key, std::unique_ptr<LU>> cache_;
};

struct StepRecord {
    Vector u_next;
    /// U_0..U_M for a plain multistage step; intermediate states for composite schemes.
    std::vector<Vector> stages;
    double energy_before = 0.0;
    double energy_after = 0.0;
    std::vector<int> newton_iterations;
    /// Violations of internal energy inequalities (composite schemes only).
    int internal_violations = 0;
};

/// Resolves the operator used by a step: the supplied one, else the problem's own.
inline FrozenMetric effective_metric(const GradientFlowProblem& p, const FrozenMetric& supplied) {
    if (supplied.op) return supplied;
    if (const auto* op = p.flow_operator()) return {op, problem_operator_id};
    return {};
}

/// Right-hand side of stage m given U_0..U_{m-1} and their explicit gradients.
inline Vector stage_rhs(const Tableau& t, int m, const std::vector<Vector>& U,
                        const std::vector<Vector>& grad2, double k, const FrozenMetric& M) {
    Vector rhs = Vector::Zero(U.front().size());
    for (int i = 0; i < m; ++i) rhs += t.gamma(m, i) * U[static_cast<std::size_t>(i)];
    if (t.theta && !grad2.empty()) {
        Vector acc = Vector::Zero(rhs.size());
        for (int i = 0; i < m; ++i) {
            const double th = (*t.theta)(m, i);
            if (th != 0.0) acc += th * grad2[static_cast<std::size_t>(i)];
        }
        rhs -= k * (M.op ? Vector((*M.op) * acc) : acc);
    }
    return rhs;
}

inline StepRecord ms_step(const Tableau& t, const GradientFlowProblem& p, const Vector& u_n, double k,
                          const FrozenMetric& metric = {}, StageSolver* solver = nullptr) {
    StageSolver local;
    StageSolver& sol = solver ? *solver : local;
    const FrozenMetric M = effective_metric(p, metric);
    const bool implicit_e2 = t.fully_implicit();
    const bool explicit_terms = !implicit_e2 && p.has_explicit_part();

    StepRecord rec;
    rec.energy_before = p.energy(u_n);
    rec.stages.reserve(static_cast<std::size_t>(t.stages + 1));
    rec.stages.push_back(u_n);
    std::vector<Vector> grad2;
    if (explicit_terms) grad2.push_back(p.grad_energy2(u_n));

    for (int m = 1; m <= t.stages; ++m) {
        const double S = t.row_sum(m);
        const Vector rhs = stage_rhs(t, m, rec.stages, grad2, k, M);
        Vector guess = Vector::Zero(u_n.size());
        for (int i = 0; i < m; ++i) guess += t.gamma(m, i) * rec.stages[static_cast<std::size_t>(i)];
        guess /= S;
        if (!p.admissible(guess)) guess = rec.stages.back();
        int iters = 0;
        rec.stages.push_back(sol.solve(p, S, k, M, rhs, guess, implicit_e2, &iters));
        rec.newton_iterations.push_back(iters);
        if (explicit_terms && m < t.stages) grad2.push_back(p.grad_energy2(rec.stages.back()));
    }
    rec.u_next = rec.stages.back();
    rec.energy_after = p.energy(rec.u_next);
    return rec;
}

/// Relative residual of stage m's equation for given stage states, evaluated
/// independently of the Newton loop.
inline double stage_residual(const Tableau& t, const GradientFlowProblem& p, const std::vector<Vector>& U,
                             int m, double k, const FrozenMetric& metric = {}) {
    const FrozenMetric M = effective_metric(p, metric);
    std::vector<Vector> grad2;
    if (!t.fully_implicit() && p.has_explicit_part()) {
        for (int i = 0; i < m; ++i) grad2.push_back(p.grad_energy2(U[static_cast<std::size_t>(i)]));
    }
    const Vector rhs = stage_rhs(t, m, U, grad2, k, M);
    const Vector F = StageSolver::residual(p, t.row_sum(m), k, M, rhs, U[static_cast<std::size_t>(m)],
                                           t.fully_implicit());
    return p.norm(F) / std::max(p.norm(rhs), 1e-300);
}

// ---------------------------------------------------------------------------
// Time stepping with energy monitoring

using StepFunction = std::function<StepRecord(const Vector&, double)>;

struct RunOptions {
    bool monitor_energy = true;
    bool keep_states = false;
    /// Relative tolerance for flagging an energy increase.
    double energy_tolerance = 1e-12;
};

struct Trajectory {
    Vector final_state;
    /// All states u_0..u_N when keep_states is set.
    std::vector<Vector> states;
    /// Energies E(u_0)..E(u_N) when monitoring.
    std::vector<double> energies;
    int energy_violations = 0;
    std::vector<int> violation_steps;
    /// Steps whose state left the interval on which lambda_bound() holds.
    int range_exits = 0;
    long newton_iterations = 0;
};

/// True when e_next exceeds e_prev beyond the relative tolerance.
inline bool energy_increased(double e_prev, double e_next, double tol = 1e-12) {
    return e_next > e_prev + tol * (1.0 + std::abs(e_prev));
}

inline Trajectory run(const StepFunction& step, const GradientFlowProblem& p, const Vector& u0, double k,
                      int n_steps, const RunOptions& opts = {}) {
    Trajectory tr;
    Vector u = u0;
    if (opts.keep_states) tr.states.push_back(u);
    double e = opts.monitor_energy ? p.energy(u) : 0.0;
    if (opts.monitor_energy) tr.energies.push_back(e);
    for (int n = 0; n < n_steps; ++n) {
        StepRecord rec;
        try {
            rec = step(u, k);
        } catch (const Error& err) {
            throw StepError(n, err.what());
        }
        for (int it : rec.newton_iterations) tr.newton_iterations += it;
        u = std::move(rec.u_next);
        if (!p.within_lambda_range(u)) ++tr.range_exits;
        if (opts.monitor_energy) {
            const double e_next = p.energy(u);
            const bool bad = energy_increased(e, e_next, opts.energy_tolerance) || rec.internal_violations > 0;
            if (bad) {
                ++tr.energy_violations;
                tr.violation_steps.push_back(n);
            }
            tr.energies.push_back(e_next);
            e = e_next;
        }
        if (opts.keep_states) tr.states.push_back(u);
    }
    tr.final_state = std::move(u);
    return tr;
}

/// Runs the plain multistage scheme t with a fresh stage solver.
inline Trajectory run(const Tableau& t, const GradientFlowProblem& p, const Vector& u0, double k, int n_steps,
                      const RunOptions& opts = {}) {
    auto solver = std::make_shared<StageSolver>();
    StepFunction step = [&t, &p, solver](const Vector& u, double kk) { return ms_step(t, p, u, kk, {}, solver.get()); };
    return run(step, p, u0, k, n_steps, opts);
}

}  // namespace gradflow
