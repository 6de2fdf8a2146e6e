#pragma once

// Gradient flows u' = -L(u) grad E(u) with a solution-dependent operator L.
// Each scheme composes fixed-operator multistage steps in which L is frozen
// at a predicted state; the third-order schemes freeze the corrected operator
// L(u*) - (k^2/72) D^2L(u*)(w, w) with w = L(u*) grad E(u*).

#include <gradflow/error.hpp>
#include <gradflow/grid.hpp>
#include <gradflow/integrator.hpp>
#include <gradflow/problem.hpp>
#include <gradflow/tableau.hpp>
#include <gradflow/verify.hpp>

#include <fmt/format.h>

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>

namespace gradflow {

class MetricOperator {
public:
    virtual ~MetricOperator() = default;

    virtual std::string name() const = 0;
    /// L(u) as a matrix.
    virtual SparseMatrix matrix(const Vector& u) const = 0;
    /// D^2L(u)(w, w) as a matrix.
    virtual SparseMatrix second_derivative(const Vector& u, const Vector& w) const = 0;
    /// Matrix of v -> (DL(u)[v]) g.
    virtual SparseMatrix derivative_applied(const Vector& u, const Vector& g) const = 0;
    virtual bool is_linear_in_u() const = 0;
    /// Weights of the inner product in which L is symmetric.
    virtual const Vector& weights() const = 0;
    /// States at which L is defined and positive.
    virtual bool admissible(const Vector& /*u*/) const { return true; }

    /// Exact positivity verdict for the corrected operator when the structure
    /// of L allows one; nullopt otherwise.
    virtual std::optional<bool> structural_positivity(const Vector& /*u*/, const Vector& /*w*/,
                                                      double /*k*/) const {
        return std::nullopt;
    }

    virtual Vector apply(const Vector& u, const Vector& v) const { return matrix(u) * v; }
    Vector second_derivative_action(const Vector& u, const Vector& w, const Vector& v) const {
        return second_derivative(u, w) * v;
    }

    /// L(u) - (k^2/72) D^2L(u)(w, w).
    SparseMatrix corrected(const Vector& u, const Vector& w, double k) const {
        SparseMatrix C = matrix(u);
        if (!is_linear_in_u()) C -= (k * k / 72.0) * second_derivative(u, w);
        C.makeCompressed();
        return C;
    }

    /// Whether the corrected operator is positive: the structural test when
    /// available, else the smallest Rayleigh quotient over random probes.
    bool positivity_check(const Vector& u, const Vector& w, double k, int probes = 20) const {
        if (const auto s = structural_positivity(u, w, k)) return *s;
        const SparseMatrix C = corrected(u, w, k);
        std::mt19937_64 rng(0x5eed);
        std::normal_distribution<double> nd;
        const Vector& wt = weights();
        for (int p = 0; p < probes; ++p) {
            Vector v(u.size());
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = nd(rng);
            const double q = (wt.array() * v.array() * (C * v).array()).sum();
            if (!(q > 0.0)) return false;
        }
        return true;
    }
};

/// L = identity.
class IdentityMetric : public MetricOperator {
public:
    explicit IdentityMetric(Vector weights) : w_(std::move(weights)) {}
    std::string name() const override { return "identity"; }
    SparseMatrix matrix(const Vector& u) const override {
        SparseMatrix I(u.size(), u.size());
        I.setIdentity();
        return I;
    }
    SparseMatrix second_derivative(const Vector& u, const Vector&) const override {
        return SparseMatrix(u.size(), u.size());
    }
    SparseMatrix derivative_applied(const Vector& u, const Vector&) const override {
        return SparseMatrix(u.size(), u.size());
    }
    bool is_linear_in_u() const override { return true; }
    const Vector& weights() const override { return w_; }

private:
    Vector w_;
};

/// State-independent L, e.g. -Laplacian for H^-1 flows.
class ConstantMetric : public MetricOperator {
public:
    ConstantMetric(std::string name, SparseMatrix op, Vector weights)
        : name_(std::move(name)), op_(std::move(op)), w_(std::move(weights)) {}
    std::string name() const override { return name_; }
    SparseMatrix matrix(const Vector&) const override { return op_; }
    SparseMatrix second_derivative(const Vector& u, const Vector&) const override {
        return SparseMatrix(u.size(), u.size());
    }
    SparseMatrix derivative_applied(const Vector& u, const Vector&) const override {
        return SparseMatrix(u.size(), u.size());
    }
    bool is_linear_in_u() const override { return true; }
    const Vector& weights() const override { return w_; }

private:
    std::string name_;
    SparseMatrix op_;
    Vector w_;
};

/// Scalar coefficient a(u) with its first two derivatives.
struct Coefficient {
    std::function<double(double)> a;
    std::function<double(double)> da;
    std::function<double(double)> d2a;
    /// a'' vanishes identically.
    bool linear = false;
    /// The metric is only defined for u > 0.
    bool requires_positive = false;
};

namespace detail {
inline Vector map_values(const std::function<double(double)>& f, const Vector& u) {
    Vector out(u.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = f(u[i]);
    return out;
}
}  // namespace detail

/// L(u) = diag(a(u)) acting pointwise; used for ODE systems.
class PointwiseMetric : public MetricOperator {
public:
    PointwiseMetric(std::string name, Coefficient c, Vector weights)
        : name_(std::move(name)), c_(std::move(c)), w_(std::move(weights)) {}
    std::string name() const override { return name_; }
    SparseMatrix matrix(const Vector& u) const override { return diag(detail::map_values(c_.a, u)); }
    SparseMatrix second_derivative(const Vector& u, const Vector& w) const override {
        return diag(detail::map_values(c_.d2a, u).cwiseProduct(w.cwiseProduct(w)));
    }
    SparseMatrix derivative_applied(const Vector& u, const Vector& g) const override {
        return diag(detail::map_values(c_.da, u).cwiseProduct(g));
    }
    bool is_linear_in_u() const override { return c_.linear; }
    const Vector& weights() const override { return w_; }
    bool admissible(const Vector& u) const override {
        return u.allFinite() && (!c_.requires_positive || u.minCoeff() > 0.0);
    }
    std::optional<bool> structural_positivity(const Vector& u, const Vector& w, double k) const override {
        const Vector d = corrected(u, w, k).diagonal();
        return d.minCoeff() > 0.0;
    }

private:
    static SparseMatrix diag(const Vector& d) {
        SparseMatrix m(d.size(), d.size());
        m.reserve(Eigen::VectorXi::Constant(d.size(), 1));
        for (Eigen::Index i = 0; i < d.size(); ++i) m.insert(i, i) = d[i];
        m.makeCompressed();
        return m;
    }
    std::string name_;
    Coefficient c_;
    Vector w_;
};

/// L(u) = -div(a(u) grad) with face-averaged coefficients on a grid.
class DivergenceMetric : public MetricOperator {
public:
    DivergenceMetric(std::string name, std::shared_ptr<const Grid> grid, Coefficient c)
        : name_(std::move(name)), grid_(std::move(grid)), c_(std::move(c)) {}
    std::string name() const override { return name_; }
    SparseMatrix matrix(const Vector& u) const override {
        return grid_->divergence_form(grid_->face_average() * detail::map_values(c_.a, u));
    }
    Vector apply(const Vector& u, const Vector& v) const override {
        return -grid_->divergence_of_flux(detail::map_values(c_.a, u), v);
    }
    SparseMatrix second_derivative(const Vector& u, const Vector& w) const override {
        return grid_->divergence_form(correction_faces(u, w));
    }
    SparseMatrix derivative_applied(const Vector& u, const Vector& g) const override {
        return grid_->flux_derivative(g, detail::map_values(c_.da, u));
    }
    bool is_linear_in_u() const override { return c_.linear; }
    const Vector& weights() const override { return grid_->weights(); }
    bool admissible(const Vector& u) const override {
        return u.allFinite() && (!c_.requires_positive || u.minCoeff() > 0.0);
    }
    /// The corrected operator is again of divergence form; it is positive
    /// exactly when every corrected face coefficient is.
    std::optional<bool> structural_positivity(const Vector& u, const Vector& w, double k) const override {
        Vector faces = grid_->face_average() * detail::map_values(c_.a, u);
        if (!c_.linear) faces -= (k * k / 72.0) * correction_faces(u, w);
        return faces.minCoeff() > 0.0;
    }
    const Grid& grid() const { return *grid_; }

private:
    Vector correction_faces(const Vector& u, const Vector& w) const {
        return grid_->face_average() * detail::map_values(c_.d2a, u).cwiseProduct(w.cwiseProduct(w));
    }
    std::string name_;
    std::shared_ptr<const Grid> grid_;
    Coefficient c_;
};

/// Relative discrepancy between D^2L(u)(w, w) v and the centred second
/// difference (L(u + hw) - 2L(u) + L(u - hw)) v / h^2.  Operators linear in
/// u have D^2L identically zero and return 0.
inline double dsqL_check(const MetricOperator& L, const Vector& u, const Vector& w, const Vector& v, double h) {
    if (L.is_linear_in_u()) return 0.0;
    const Vector exact = L.second_derivative_action(u, w, v);
    const Vector fd = (L.apply(u + h * w, v) - 2.0 * L.apply(u, v) + L.apply(u - h * w, v)) / (h * h);
    return (fd - exact).norm() / std::max(exact.norm(), 1e-300);
}

// ---------------------------------------------------------------------------
// Schemes

/// Sub-tableaus used by the metric schemes.
struct MetricTableaus {
    Tableau be, be_implicit, si2, si3, si1c, si1125c, fi2, fi3, fi1125;

    /// Coefficients as printed, or refined onto the order-condition manifold.
    static MetricTableaus make(bool polished) {
        auto get = [polished](const char* name) {
            Tableau t = builtin(name);
            return polished ? polish(t, t.claimed_order) : t;
        };
        MetricTableaus m;
        m.be = builtin("be");
        m.be_implicit = m.be;
        m.be_implicit.theta.reset();
        m.be_implicit.label = "be (fully implicit)";
        m.si2 = get("si2");
        m.si3 = get("si3");
        m.si1c = get("si1c");
        m.si1125c = get("si1125c");
        m.fi2 = get("fi2");
        m.fi3 = get("fi3");
        m.fi1125 = get("fi1125");
        return m;
    }
};

struct MetricStepOptions {
    /// Apply the (k^2/72) D^2L correction in the third-order schemes.
    bool apply_correction = true;
    bool check_positivity = true;
    double energy_tolerance = 1e-12;
};

enum class MetricSchemeKind { step2, step3, step2_fi, step3_fi };

inline MetricSchemeKind metric_scheme_from_name(const std::string& s) {
    if (s == "si2" || s == "step2") return MetricSchemeKind::step2;
    if (s == "si3" || s == "step3") return MetricSchemeKind::step3;
    if (s == "fi2" || s == "step2_fi") return MetricSchemeKind::step2_fi;
    if (s == "fi3" || s == "step3_fi") return MetricSchemeKind::step3_fi;
    throw UnknownNameError("metric scheme", s);
}

/// Runs the solution-dependent-metric schemes for one problem.  Holds a stage
/// solver, so one instance belongs to one run.
class MetricStepper {
public:
    MetricStepper(const GradientFlowProblem& p, const MetricOperator& L, std::shared_ptr<const MetricTableaus> tabs,
                  MetricStepOptions opts = {})
        : p_(p), L_(L), tabs_(std::move(tabs)), opts_(opts) {}

    StepRecord step(MetricSchemeKind kind, const Vector& u, double k) {
        switch (kind) {
            case MetricSchemeKind::step2: return step2(u, k);
            case MetricSchemeKind::step3: return step3(u, k);
            case MetricSchemeKind::step2_fi: return step2_fi(u, k);
            case MetricSchemeKind::step3_fi: return step3_fi(u, k);
        }
        throw Error("unknown metric scheme");
    }

    /// Predictor at k/2 with L(u_n), then si2 over k with L(u*).
    StepRecord step2(const Vector& u_n, double k) { return two_stage(u_n, k, tabs_->be, tabs_->si2); }
    StepRecord step2_fi(const Vector& u_n, double k) { return two_stage(u_n, k, tabs_->be_implicit, tabs_->fi2); }

    StepRecord step3(const Vector& u_n, double k) {
        return three_stage(u_n, k, tabs_->si1c, tabs_->be, tabs_->si1125c, tabs_->si3);
    }
    StepRecord step3_fi(const Vector& u_n, double k) {
        return three_stage(u_n, k, tabs_->be_implicit, tabs_->be_implicit, tabs_->fi1125, tabs_->fi3);
    }

private:
    StepRecord ms(const Tableau& t, const Vector& start, double k, const SparseMatrix& op, StepRecord& acc) {
        if (!L_.admissible(start)) throw InadmissibleStateError("state outside the domain of the metric");
        StepRecord r = ms_step(t, p_, start, k, FrozenMetric{&op, 0}, &solver_);
        acc.newton_iterations.insert(acc.newton_iterations.end(), r.newton_iterations.begin(),
                                     r.newton_iterations.end());
        return r;
    }

    SparseMatrix frozen(const Vector& u_star, double k) {
        if (!L_.admissible(u_star)) throw InadmissibleStateError("predicted state outside the domain of the metric");
        if (!opts_.apply_correction || L_.is_linear_in_u()) return L_.matrix(u_star);
        const Vector w = L_.apply(u_star, p_.gradient(u_star));
        if (opts_.check_positivity && !L_.positivity_check(u_star, w, k)) {
            throw PositivityError("corrected metric L - (k^2/72) D^2L is not positive definite");
        }
        return L_.corrected(u_star, w, k);
    }

    StepRecord two_stage(const Vector& u_n, double k, const Tableau& predictor, const Tableau& main) {
        StepRecord rec;
        rec.energy_before = p_.energy(u_n);
        const SparseMatrix Ln = L_.matrix(u_n);
        const Vector u_star = ms(predictor, u_n, 0.5 * k, Ln, rec).u_next;
        const SparseMatrix Ls = L_.matrix(u_star);
        rec.u_next = ms(main, u_n, k, Ls, rec).u_next;
        rec.stages = {u_star, rec.u_next};
        rec.energy_after = p_.energy(rec.u_next);
        return rec;
    }

    StepRecord three_stage(const Vector& u_n, double k, const Tableau& pred1, const Tableau& be,
                           const Tableau& pred2, const Tableau& main) {
        StepRecord rec;
        rec.energy_before = p_.energy(u_n);
        const SparseMatrix Ln = L_.matrix(u_n);
        const Vector u1 = ms(pred1, u_n, k / 6.0, Ln, rec).u_next;
        const SparseMatrix C1 = frozen(u1, k);
        const Vector ubar = ms(main, u_n, 0.5 * k, C1, rec).u_next;
        const Vector u21 = ms(be, u_n, 0.4 * k, Ln, rec).u_next;
        const SparseMatrix L21 = L_.matrix(u21);
        const Vector u22 = ms(pred2, u_n, 5.0 * k / 6.0, L21, rec).u_next;
        const SparseMatrix C2 = frozen(u22, k);
        rec.u_next = ms(main, ubar, 0.5 * k, C2, rec).u_next;
        rec.stages = {u1, ubar, u21, u22, rec.u_next};
        rec.energy_after = p_.energy(rec.u_next);
        const double e_bar = p_.energy(ubar);
        if (energy_increased(rec.energy_before, e_bar, opts_.energy_tolerance)) ++rec.internal_violations;
        if (energy_increased(e_bar, rec.energy_after, opts_.energy_tolerance)) ++rec.internal_violations;
        return rec;
    }

    const GradientFlowProblem& p_;
    const MetricOperator& L_;
    std::shared_ptr<const MetricTableaus> tabs_;
    MetricStepOptions opts_;
    StageSolver solver_;
};

}  // namespace gradflow
