#pragma once

// Energy-stability and order-of-accuracy checks for multistage tableaus, and
// refinement of printed coefficients onto the order-condition manifold.

#include <gradflow/error.hpp>
#include <gradflow/problem.hpp>
#include <gradflow/tableau.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace gradflow {

// ---------------------------------------------------------------------------
// Auxiliary quantities gamma~ and S~

struct GammaTilde {
    int stages = 0;
    LowerTriangular gamma_tilde;
    /// s_tilde[j][m] = sum_{i<m} gamma~(j, i) for 0 <= m <= j (index j from 1).
    std::vector<std::vector<double>> s_tilde;

    double S(int j, int m) const { return s_tilde[static_cast<std::size_t>(j)][static_cast<std::size_t>(m)]; }
};

namespace detail {

// Downward recursion over packed (m, i) storage; Scalar may be complex for
// complex-step differentiation.  Returns the S~ table, or nullopt with the
// offending stage in *bad_stage when a diagonal entry vanishes.
template <class Scalar>
std::optional<std::vector<std::vector<Scalar>>> gamma_tilde_recursion(
    int M, const std::vector<Scalar>& gamma, const std::vector<Scalar>* theta, double k_lambda,
    std::vector<Scalar>& gt, int* bad_stage) {
    gt.assign(gamma.size(), Scalar(0));
    std::vector<std::vector<Scalar>> st(static_cast<std::size_t>(M + 1));
    for (int m = M; m >= 1; --m) {
        for (int i = 0; i < m; ++i) {
            const auto idx = LowerTriangular::index(m, i);
            Scalar v = gamma[idx];
            if (theta) v -= k_lambda * (*theta)[idx];
            for (int j = m + 1; j <= M; ++j) {
                const auto& sj = st[static_cast<std::size_t>(j)];
                v -= gt[LowerTriangular::index(j, i)] * sj[static_cast<std::size_t>(m)] /
                     sj[static_cast<std::size_t>(j)];
            }
            gt[idx] = v;
        }
        auto& sm = st[static_cast<std::size_t>(m)];
        sm.assign(static_cast<std::size_t>(m + 1), Scalar(0));
        for (int l = 1; l <= m; ++l) {
            sm[static_cast<std::size_t>(l)] =
                sm[static_cast<std::size_t>(l - 1)] + gt[LowerTriangular::index(m, l - 1)];
        }
        if (std::real(sm[static_cast<std::size_t>(m)]) == 0.0) {
            if (bad_stage) *bad_stage = m;
            return std::nullopt;
        }
    }
    return st;
}

inline std::vector<double> packed(const LowerTriangular& t) {
    std::vector<double> v(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) v[k] = t.flat(k);
    return v;
}

}  // namespace detail

/// gamma~ and S~ at the product k*Lambda.  An absent theta contributes nothing.
inline GammaTilde compute_gamma_tilde(const Tableau& t, double k_lambda) {
    const auto g = detail::packed(t.gamma);
    std::vector<double> th;
    if (t.theta) th = detail::packed(*t.theta);
    std::vector<double> gt;
    int bad = 0;
    auto st = detail::gamma_tilde_recursion<double>(t.stages, g, t.theta ? &th : nullptr, k_lambda,
                                                    gt, &bad);
    if (!st) throw DegenerateRecursionError(bad);
    GammaTilde out;
    out.stages = t.stages;
    out.gamma_tilde = LowerTriangular(t.stages);
    for (std::size_t k = 0; k < gt.size(); ++k) out.gamma_tilde.flat(k) = gt[k];
    out.s_tilde = std::move(*st);
    return out;
}

// ---------------------------------------------------------------------------
// Stability threshold

struct StabilityReport {
    /// Largest feasible k*Lambda; +inf when feasible at the end of the scan.
    double threshold = 0.0;
    bool unbounded = false;
    bool feasible_at_zero = false;
    /// Feasibility was lost and later regained inside the scan.
    bool non_monotone = false;
    double scan_max = 1.0;
    /// S~(m, m) evaluated at the threshold (at scan_max when unbounded).
    std::vector<double> per_stage_S_tilde;
    bool theta_ok = true;
    bool monotone_ok = true;
};

/// Diagonal S~(m, m) at k*Lambda, or nullopt when the recursion degenerates.
inline std::optional<std::vector<double>> stage_diagonals(const Tableau& t, double k_lambda) {
    try {
        const auto gt = compute_gamma_tilde(t, k_lambda);
        std::vector<double> d(static_cast<std::size_t>(t.stages));
        for (int m = 1; m <= t.stages; ++m) d[static_cast<std::size_t>(m - 1)] = gt.S(m, m);
        return d;
    } catch (const DegenerateRecursionError&) {
        return std::nullopt;
    }
}

inline bool stable_at(const Tableau& t, double k_lambda) {
    const auto d = stage_diagonals(t, k_lambda);
    if (!d) return false;
    return std::all_of(d->begin(), d->end(), [](double s) { return s > 0.0; });
}

namespace detail {

inline void theta_conditions(const Tableau& t, double tol, bool& theta_ok, bool& monotone_ok) {
    theta_ok = true;
    monotone_ok = true;
    for (int m = 1; m <= t.stages; ++m) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) {
            const double v = t.theta_at(m, i);
            s += v;
            if (v < -tol) theta_ok = false;
            if (m >= 2 && i < m - 1 && t.theta_at(m - 1, i) < v - tol) monotone_ok = false;
        }
        if (std::abs(s - 1.0) > tol) theta_ok = false;
    }
}

// First violated theta condition, described for error messages.
inline std::optional<std::string> theta_violation(const Tableau& t, double tol) {
    for (int m = 1; m <= t.stages; ++m) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) {
            const double v = t.theta_at(m, i);
            s += v;
            if (v < -tol) return fmt::format("negative theta({}, {}) = {}", m, i, v);
            if (m >= 2 && i < m - 1 && t.theta_at(m - 1, i) < v - tol) {
                return fmt::format("theta({}, {}) = {} exceeds theta({}, {}) = {}", m, i, v, m - 1, i,
                                   t.theta_at(m - 1, i));
            }
        }
        if (std::abs(s - 1.0) > tol) return fmt::format("theta row sum of row {} is {}", m, s);
    }
    return std::nullopt;
}

}  // namespace detail

inline StabilityReport stability_threshold(const Tableau& t, double scan_max = 1.0,
                                           double theta_tolerance = printed_theta_tolerance) {
    constexpr int samples = 1000;
    StabilityReport r;
    r.scan_max = scan_max;
    detail::theta_conditions(t, theta_tolerance, r.theta_ok, r.monotone_ok);

    r.feasible_at_zero = stable_at(t, 0.0);
    if (!r.feasible_at_zero) {
        r.threshold = 0.0;
        r.per_stage_S_tilde = stage_diagonals(t, 0.0).value_or(std::vector<double>{});
        return r;
    }

    // Largest feasible prefix of the sample grid, then bisection on the first gap.
    const double h = scan_max / samples;
    int last_ok = 0;
    bool lost = false;
    for (int s = 1; s <= samples; ++s) {
        const bool ok = stable_at(t, h * s);
        if (ok && !lost) last_ok = s;
        if (!ok) lost = true;
        if (ok && lost) r.non_monotone = true;
    }
    if (last_ok == samples) {
        r.unbounded = true;
        r.threshold = std::numeric_limits<double>::infinity();
        r.per_stage_S_tilde = stage_diagonals(t, scan_max).value_or(std::vector<double>{});
        return r;
    }
    double lo = h * last_ok;
    double hi = h * (last_ok + 1);
    while (hi - lo > 1e-10 * hi) {
        const double mid = 0.5 * (lo + hi);
        if (stable_at(t, mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    r.threshold = lo;
    r.per_stage_S_tilde = stage_diagonals(t, lo).value_or(std::vector<double>{});
    return r;
}

// ---------------------------------------------------------------------------
// Taylor coefficients beta and order conditions

/// How theta is read when computing beta.  fully_implicit treats an absent
/// theta as theta(m, 0) = 1 and zero elsewhere; semi_implicit requires theta.
enum class Convention { semi_implicit, fully_implicit };

/// Convention that matches how the integrator uses t: fully implicit exactly
/// when theta is absent.
inline Convention convention_for(const Tableau& t) {
    return t.fully_implicit() ? Convention::fully_implicit : Convention::semi_implicit;
}

struct BetaTable {
    int stages = 0;
    /// beta[j][m] for j = 1..9 (row 0 unused) and m = 0..M.
    std::array<std::vector<double>, 10> beta;
    /// Row sums S_m, index 0 unused.
    std::vector<double> S;

    double operator()(int j, int m) const {
        return beta[static_cast<std::size_t>(j)][static_cast<std::size_t>(m)];
    }
    double final_value(int j) const { return (*this)(j, stages); }
};

namespace detail {

template <class Scalar>
std::array<std::vector<Scalar>, 10> beta_recursion(int M, const std::vector<Scalar>& gamma,
                                                   const std::vector<Scalar>& theta,
                                                   std::vector<Scalar>* row_sums = nullptr) {
    std::array<std::vector<Scalar>, 10> b;
    for (auto& row : b) row.assign(static_cast<std::size_t>(M + 1), Scalar(0));
    if (row_sums) row_sums->assign(static_cast<std::size_t>(M + 1), Scalar(0));
    auto at = [&](int j, int m) -> Scalar& {
        return b[static_cast<std::size_t>(j)][static_cast<std::size_t>(m)];
    };
    for (int m = 1; m <= M; ++m) {
        Scalar S(0);
        for (int i = 0; i < m; ++i) S += gamma[LowerTriangular::index(m, i)];
        if (std::real(S) == 0.0) throw TableauError(TableauError::Kind::nonpositive_row_sum,
                                                    fmt::format("stage row sum S_{} vanishes", m));
        if (row_sums) (*row_sums)[static_cast<std::size_t>(m)] = S;

        std::array<Scalar, 10> gsum{};
        for (int i = 1; i < m; ++i) {
            const Scalar g = gamma[LowerTriangular::index(m, i)];
            for (int j = 1; j <= 9; ++j) gsum[static_cast<std::size_t>(j)] += g * at(j, i);
        }
        Scalar th1(0), th2(0), th3(0), th11(0);
        for (int i = 0; i < m; ++i) {
            const Scalar th = theta[LowerTriangular::index(m, i)];
            th1 += th * at(1, i);
            th2 += th * at(2, i);
            th3 += th * at(3, i);
            th11 += th * at(1, i) * at(1, i);
        }
        at(1, m) = (Scalar(1) + gsum[1]) / S;
        at(2, m) = (at(1, m) + gsum[2]) / S;
        at(3, m) = (th1 + gsum[3]) / S;
        at(4, m) = (at(2, m) + gsum[4]) / S;
        at(5, m) = (at(3, m) + gsum[5]) / S;
        at(6, m) = (th2 + gsum[6]) / S;
        at(7, m) = (th3 + gsum[7]) / S;
        at(8, m) = (at(1, m) * at(1, m) / Scalar(2) + gsum[8]) / S;
        at(9, m) = (th11 / Scalar(2) + gsum[9]) / S;
    }
    return b;
}

inline std::vector<double> effective_theta(const Tableau& t, Convention conv) {
    if (t.theta) return packed(*t.theta);
    if (conv != Convention::fully_implicit) {
        throw TableauError(TableauError::Kind::malformed,
                           "tableau has no theta; beta needs the fully implicit convention flag");
    }
    std::vector<double> th(t.gamma.size(), 0.0);
    for (int m = 1; m <= t.stages; ++m) th[LowerTriangular::index(m, 0)] = 1.0;
    return th;
}

}  // namespace detail

inline BetaTable compute_beta(const Tableau& t, Convention conv = Convention::semi_implicit) {
    const auto g = detail::packed(t.gamma);
    const auto th = detail::effective_theta(t, conv);
    BetaTable out;
    out.stages = t.stages;
    out.beta = detail::beta_recursion<double>(t.stages, g, th, &out.S);
    return out;
}

struct OrderCondition {
    int j;  // beta index
    double target;
};

/// Conditions on beta_{j,M} for order p (1..3).  Under the fully implicit
/// convention only the E1 coefficients (beta 1, 2, 4, 8) are constrained.
inline std::vector<OrderCondition> order_conditions(int p, Convention conv) {
    std::vector<OrderCondition> c;
    const bool fi = conv == Convention::fully_implicit;
    if (p >= 1) c.push_back({1, 1.0});
    if (p >= 2) {
        c.push_back({2, 0.5});
        if (!fi) c.push_back({3, 0.5});
    }
    if (p >= 3) {
        for (int j = 4; j <= 9; ++j) {
            if (fi && j != 4 && j != 8) continue;
            c.push_back({j, 1.0 / 6.0});
        }
    }
    return c;
}

/// Conditions met by a predictor sub-tableau: beta_1 = 1 and beta_2 (and
/// beta_3 when semi-implicit) equal to the target c.
inline std::vector<OrderCondition> predictor_conditions(double c, Convention conv) {
    std::vector<OrderCondition> out{{1, 1.0}, {2, c}};
    if (conv == Convention::semi_implicit) out.push_back({3, c});
    return out;
}

/// Conditions that polish() drives to zero for t at the given order.
inline std::vector<OrderCondition> target_conditions(const Tableau& t, int order) {
    const auto conv = convention_for(t);
    if (t.predictor_target) return predictor_conditions(*t.predictor_target, conv);
    return order_conditions(order, conv);
}

inline double max_residual(const BetaTable& b, const std::vector<OrderCondition>& cs) {
    double r = 0.0;
    for (const auto& c : cs) r = std::max(r, std::abs(b.final_value(c.j) - c.target));
    return r;
}

inline double order_residual(const Tableau& t, int order) {
    return max_residual(compute_beta(t, convention_for(t)), target_conditions(t, order));
}

/// Largest p in {0, 1, 2, 3} whose conditions hold within tol.
inline int order_of(const Tableau& t, double tol, Convention conv) {
    const auto b = compute_beta(t, conv);
    int p = 0;
    for (int q = 1; q <= 3; ++q) {
        if (max_residual(b, order_conditions(q, conv)) <= tol) {
            p = q;
        } else {
            break;
        }
    }
    return p;
}

inline int order_of(const Tableau& t, double tol) { return order_of(t, tol, convention_for(t)); }

// ---------------------------------------------------------------------------
// Polishing

struct PolishOptions {
    double tolerance = 1e-13;
    int max_iterations = 100;
    /// Required fraction of the input's stability threshold.
    double threshold_fraction = 0.9;
    double scan_max = 1.0;
    /// Precondition tolerance on the input's order residual.
    double precondition_tolerance = 5e-2;
};

struct PolishReport {
    Tableau tableau;
    double residual = 0.0;
    int iterations = 0;
    double threshold_before = 0.0;
    double threshold_after = 0.0;
    double max_change = 0.0;
    /// Stages whose S~ diagonal had to be pinned to keep the threshold.
    std::vector<int> pinned_stages;
};

namespace detail {

struct FreeVar {
    bool is_theta;
    std::size_t index;  // packed index
};

struct PolishProblem {
    const Tableau* t;
    std::vector<OrderCondition> conditions;
    std::vector<int> theta_sum_rows;
    std::vector<FreeVar> vars;
    std::vector<double> gamma0, theta0;  // values of frozen entries come from here
    bool has_theta = false;
    Convention conv = Convention::semi_implicit;
    // Stability pins: S~(m, m) at tau equal to pin_value.
    double tau = 0.0;
    std::vector<std::pair<int, double>> pins;
    // Active monotonicity constraints theta(m, i) = theta(m - 1, i), as (m, i).
    std::vector<std::pair<int, int>> ties;

    std::size_t rows() const {
        return conditions.size() + theta_sum_rows.size() + ties.size() + pins.size();
    }

    template <class Scalar>
    std::vector<Scalar> residual(const std::vector<Scalar>& x) const {
        std::vector<Scalar> g(gamma0.begin(), gamma0.end());
        std::vector<Scalar> th(theta0.begin(), theta0.end());
        for (std::size_t k = 0; k < vars.size(); ++k) {
            (vars[k].is_theta ? th : g)[vars[k].index] = x[k];
        }
        std::vector<Scalar> out;
        out.reserve(rows());
        const auto b = beta_recursion<Scalar>(t->stages, g, th);
        for (const auto& c : conditions) {
            out.push_back(b[static_cast<std::size_t>(c.j)][static_cast<std::size_t>(t->stages)] -
                          Scalar(c.target));
        }
        for (int m : theta_sum_rows) {
            Scalar s(0);
            for (int i = 0; i < m; ++i) s += th[LowerTriangular::index(m, i)];
            out.push_back(s - Scalar(1));
        }
        for (const auto& [m, i] : ties) {
            out.push_back(th[LowerTriangular::index(m, i)] - th[LowerTriangular::index(m - 1, i)]);
        }
        if (!pins.empty()) {
            std::vector<Scalar> gt;
            int bad = 0;
            auto st = gamma_tilde_recursion<Scalar>(t->stages, g, has_theta ? &th : nullptr, tau,
                                                    gt, &bad);
            for (const auto& [m, v] : pins) {
                out.push_back(st ? (*st)[static_cast<std::size_t>(m)][static_cast<std::size_t>(m)] -
                                       Scalar(v)
                                 : Scalar(std::numeric_limits<double>::quiet_NaN()));
            }
        }
        return out;
    }

    Eigen::MatrixXd jacobian(const std::vector<double>& x) const {
        using C = std::complex<double>;
        constexpr double h = 1e-30;
        Eigen::MatrixXd J(static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(x.size()));
        std::vector<C> xc(x.begin(), x.end());
        for (std::size_t k = 0; k < x.size(); ++k) {
            xc[k] = C(x[k], h);
            const auto r = residual<C>(xc);
            for (std::size_t i = 0; i < r.size(); ++i) {
                J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = r[i].imag() / h;
            }
            xc[k] = C(x[k], 0.0);
        }
        return J;
    }

    Tableau assemble(const std::vector<double>& x) const {
        Tableau out = *t;
        for (std::size_t k = 0; k < out.gamma.size(); ++k) out.gamma.flat(k) = gamma0[k];
        if (out.theta) {
            for (std::size_t k = 0; k < out.theta->size(); ++k) out.theta->flat(k) = theta0[k];
        }
        for (std::size_t k = 0; k < vars.size(); ++k) {
            if (vars[k].is_theta) {
                out.theta->flat(vars[k].index) = x[k];
            } else {
                out.gamma.flat(vars[k].index) = x[k];
            }
        }
        return out;
    }
};

inline double max_abs(const std::vector<double>& v, std::size_t count) {
    double r = 0.0;
    for (std::size_t i = 0; i < count; ++i) r = std::max(r, std::abs(v[i]));
    return r;
}

// Minimal-norm Gauss-Newton projection of x0 onto {residual = 0}.
inline std::vector<double> project(const PolishProblem& pp, const std::vector<double>& x0,
                                   double tol, int max_iter, int& iterations, double& residual) {
    const auto n = static_cast<Eigen::Index>(x0.size());
    std::vector<double> x = x0;
    Eigen::Map<const Eigen::VectorXd> x0v(x0.data(), n);
    for (iterations = 0; iterations <= max_iter; ++iterations) {
        const auto r = pp.residual<double>(x);
        residual = max_abs(r, r.size());
        if (residual <= tol) return x;
        if (!std::isfinite(residual) || iterations == max_iter) break;
        const Eigen::MatrixXd J = pp.jacobian(x);
        Eigen::Map<const Eigen::VectorXd> xv(x.data(), n);
        Eigen::Map<const Eigen::VectorXd> rv(r.data(), static_cast<Eigen::Index>(r.size()));
        const Eigen::VectorXd rhs = J * (xv - x0v) - rv;
        const Eigen::VectorXd d = J.completeOrthogonalDecomposition().solve(rhs);
        for (Eigen::Index k = 0; k < n; ++k) x[static_cast<std::size_t>(k)] = x0[static_cast<std::size_t>(k)] + d[k];
    }
    throw PolishError(fmt::format("polish did not converge in {} iterations", max_iter), residual);
}

}  // namespace detail

/// Minimal-norm correction of t's coefficients so the order conditions for
/// target_order (or the predictor conditions) hold to opts.tolerance, theta
/// rows sum to one, theta stays nonnegative and monotone, and the stability
/// threshold keeps opts.threshold_fraction of its input value.
inline PolishReport polish_report(const Tableau& t, int target_order, const PolishOptions& opts = {}) {
    validate(t);
    const auto conv = convention_for(t);
    if (!t.predictor_target) {
        if (target_order < 1 || target_order > 3) {
            throw PolishError(fmt::format("unsupported target order {}", target_order), 0.0);
        }
        if (order_of(t, opts.precondition_tolerance, conv) < target_order) {
            throw PolishError(fmt::format("tableau {} is not close to order {}", t.label, target_order),
                              order_residual(t, target_order));
        }
    }

    detail::PolishProblem pp;
    pp.t = &t;
    pp.conv = conv;
    pp.conditions = target_conditions(t, target_order);
    pp.has_theta = t.theta.has_value();
    pp.gamma0 = detail::packed(t.gamma);
    pp.theta0 = detail::effective_theta(t, conv);

    for (std::size_t k = 0; k < pp.gamma0.size(); ++k) pp.vars.push_back({false, k});
    if (t.theta) {
        for (int m = 2; m <= t.stages; ++m) {
            bool any = false;
            for (int i = 0; i < m; ++i) {
                const auto idx = LowerTriangular::index(m, i);
                if (pp.theta0[idx] != 0.0) {
                    pp.vars.push_back({true, idx});
                    any = true;
                }
            }
            if (any) pp.theta_sum_rows.push_back(m);
        }
    }

    PolishReport rep;
    const auto before = stability_threshold(t, opts.scan_max);
    rep.threshold_before = before.threshold;
    const double required = opts.threshold_fraction * before.threshold;

    std::vector<double> x0(pp.vars.size());
    for (std::size_t k = 0; k < pp.vars.size(); ++k) {
        x0[k] = pp.vars[k].is_theta ? pp.theta0[pp.vars[k].index] : pp.gamma0[pp.vars[k].index];
    }

    // Stability reference point for pinning: inside the input's feasible range.
    const bool finite_threshold = std::isfinite(before.threshold);
    pp.tau = finite_threshold ? 0.95 * before.threshold : 0.0;
    const auto ref_diag = stage_diagonals(t, pp.tau);

    constexpr double monotone_slack = 1e-12;
    std::vector<double> x;
    for (int round = 0;; ++round) {
        x = detail::project(pp, x0, opts.tolerance, opts.max_iterations, rep.iterations, rep.residual);

        // Active set on theta >= 0: clamp and freeze negative entries.
        bool clamped = false;
        for (std::size_t k = 0; k < pp.vars.size();) {
            if (pp.vars[k].is_theta && x[k] < 0.0) {
                pp.theta0[pp.vars[k].index] = 0.0;
                pp.vars.erase(pp.vars.begin() + static_cast<std::ptrdiff_t>(k));
                x0.erase(x0.begin() + static_cast<std::ptrdiff_t>(k));
                x.erase(x.begin() + static_cast<std::ptrdiff_t>(k));
                clamped = true;
            } else {
                ++k;
            }
        }
        if (clamped) continue;

        // Active set on column monotonicity: tie offending pairs.
        if (t.theta) {
            const Tableau trial = pp.assemble(x);
            bool tied = false;
            for (int m = 2; m <= t.stages; ++m) {
                for (int i = 0; i < m - 1; ++i) {
                    if ((*trial.theta)(m, i) > (*trial.theta)(m - 1, i) + monotone_slack) {
                        pp.ties.emplace_back(m, i);
                        tied = true;
                    }
                }
            }
            if (tied) continue;
        }

        if (before.feasible_at_zero && ref_diag) {
            const Tableau trial = pp.assemble(x);
            const auto after = stability_threshold(trial, opts.scan_max);
            if (after.threshold >= required) break;
            const auto diag = stage_diagonals(trial, pp.tau);
            bool added = false;
            for (int m = 1; m <= t.stages; ++m) {
                const bool pinned = std::any_of(pp.pins.begin(), pp.pins.end(),
                                                [m](const auto& p) { return p.first == m; });
                const double ref = (*ref_diag)[static_cast<std::size_t>(m - 1)];
                const double cur = diag ? (*diag)[static_cast<std::size_t>(m - 1)] : -1.0;
                if (!pinned && cur < 0.5 * ref) {
                    pp.pins.emplace_back(m, ref);
                    rep.pinned_stages.push_back(m);
                    added = true;
                }
            }
            if (!added || round > t.stages + 1) break;
            continue;
        }
        break;
    }

    // Exact unit theta row sums: absorb the rounding remainder in the largest entry.
    Tableau out = pp.assemble(x);
    if (out.theta) {
        for (int m : pp.theta_sum_rows) {
            int big = -1;
            for (int i = 0; i < m; ++i) {
                const bool free = std::any_of(pp.vars.begin(), pp.vars.end(), [&](const auto& v) {
                    return v.is_theta && v.index == LowerTriangular::index(m, i);
                });
                if (free && (big < 0 || (*out.theta)(m, i) > (*out.theta)(m, big))) big = i;
            }
            if (big < 0) continue;
            for (int pass = 0; pass < 4 && out.theta->row_sum(m) != 1.0; ++pass) {
                (*out.theta)(m, big) += 1.0 - out.theta->row_sum(m);
            }
        }
    }

    rep.residual = order_residual(out, target_order);
    if (!(rep.residual <= opts.tolerance)) {
        throw PolishError("order conditions not met after theta normalization", rep.residual);
    }
    if (t.theta) {
        if (const auto bad = detail::theta_violation(out, 1e-12)) {
            throw PolishError("polished tableau violates theta conditions: " + *bad, rep.residual);
        }
    }
    const auto after = stability_threshold(out, opts.scan_max);
    rep.threshold_after = after.threshold;
    if (rep.threshold_after < required) {
        throw PolishError(fmt::format("polished stability threshold {} below {} of input {}",
                                      rep.threshold_after, opts.threshold_fraction,
                                      rep.threshold_before),
                          rep.residual);
    }
    for (std::size_t k = 0; k < out.gamma.size(); ++k) {
        rep.max_change = std::max(rep.max_change, std::abs(out.gamma.flat(k) - t.gamma.flat(k)));
    }
    if (out.theta) {
        for (std::size_t k = 0; k < out.theta->size(); ++k) {
            rep.max_change = std::max(rep.max_change, std::abs(out.theta->flat(k) - t.theta->flat(k)));
        }
    }
    out.label = t.label;
    rep.tableau = std::move(out);
    return rep;
}

inline Tableau polish(const Tableau& t, int target_order, const PolishOptions& opts = {}) {
    return polish_report(t, target_order, opts).tableau;
}

// ---------------------------------------------------------------------------
// Objective equivalence of the stage minimization problem

struct EquivalenceResult {
    double difference = 0.0;
    double scale = 1.0;
    double relative() const { return difference / scale; }
};

/// Evaluates the stage-m objective in its original form F1 and in the form
/// F2 built from gamma~ and S~, at probes ua and ub, and returns
/// |(F1 - F2)(ua) - (F1 - F2)(ub)|.  states holds U_0..U_{m-1}.
inline EquivalenceResult objective_equivalence_check(const Tableau& t, int m,
                                                     const GradientFlowProblem& p,
                                                     const std::vector<Vector>& states,
                                                     const Vector& ua, const Vector& ub, double k,
                                                     double lambda) {
    if (m < 1 || m > t.stages || static_cast<int>(states.size()) < m) {
        throw Error("objective_equivalence_check: stage index or state count out of range");
    }
    const auto gt = compute_gamma_tilde(t, k * lambda);
    const int M = t.stages;
    auto theta = [&](int mm, int i) { return t.theta ? (*t.theta)(mm, i) : 0.0; };

    auto f1 = [&](const Vector& u) {
        double f = p.energy1(u);
        for (int i = 0; i < m; ++i) {
            const auto& Ui = states[static_cast<std::size_t>(i)];
            f += theta(m, i) * linearized_energy(p, u, Ui);
            const Vector d = u - Ui;
            f += t.gamma(m, i) / (2.0 * k) * p.inner(d, d);
        }
        return f;
    };
    auto f2 = [&](const Vector& u) {
        double f = p.energy1(u);
        for (int i = 0; i < m; ++i) {
            const auto& Ui = states[static_cast<std::size_t>(i)];
            const Vector d = u - Ui;
            f += theta(m, i) * (linearized_energy(p, u, Ui) + 0.5 * lambda * p.inner(d, d));
        }
        for (int j = m; j <= M; ++j) {
            Vector v = gt.S(j, m) * u;
            for (int i = 0; i < m; ++i) v -= gt.gamma_tilde(j, i) * states[static_cast<std::size_t>(i)];
            f += p.inner(v, v) / (2.0 * k * gt.S(j, j));
        }
        return f;
    };
    const double a1 = f1(ua), a2 = f2(ua), b1 = f1(ub), b2 = f2(ub);
    EquivalenceResult r;
    r.difference = std::abs((a1 - a2) - (b1 - b2));
    r.scale = std::max({1.0, std::abs(a1), std::abs(a2), std::abs(b1), std::abs(b2)});
    return r;
}

}  // namespace gradflow
