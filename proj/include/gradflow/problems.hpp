#pragma once

// Concrete gradient flows on grids: phase-field (Allen-Cahn, Cahn-Hilliard,
// variable-mobility Cahn-Hilliard), porous medium and entropy/heat flows.

#include <gradflow/error.hpp>
#include <gradflow/grid.hpp>
#include <gradflow/metric.hpp>
#include <gradflow/problem.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace gradflow {

/// Pointwise potential with two derivatives.
struct Potential1D {
    std::function<double(double)> f, df, d2f;
};

namespace detail {
inline SparseMatrix diagonal(const Vector& d) {
    SparseMatrix m(d.size(), d.size());
    m.reserve(Eigen::VectorXi::Constant(d.size(), 1));
    for (Eigen::Index i = 0; i < d.size(); ++i) m.insert(i, i) = d[i];
    m.makeCompressed();
    return m;
}
}  // namespace detail

class GridProblem : public GradientFlowProblem {
public:
    GridProblem(std::string name, std::shared_ptr<const Grid> grid) : name_(std::move(name)), grid_(std::move(grid)) {}
    std::string name() const override { return name_; }
    Eigen::Index size() const override { return grid_->size(); }
    const Vector& weights() const override { return grid_->weights(); }
    const Grid& grid() const { return *grid_; }
    std::shared_ptr<const Grid> grid_ptr() const { return grid_; }

protected:
    std::string name_;
    std::shared_ptr<const Grid> grid_;
};

/// E1 = kappa/2 int |grad u|^2 (implicit), E2 = int W(u) + F u (explicit),
/// optionally with the H^-1 flow operator -Laplacian.
class PhaseFieldProblem : public GridProblem {
public:
    PhaseFieldProblem(std::string name, std::shared_ptr<const Grid> grid, double kappa, Potential1D W,
                      std::optional<Vector> forcing, double lambda, std::pair<double, double> range, bool hminus1)
        : GridProblem(std::move(name), std::move(grid)),
          kappa_(kappa),
          W_(std::move(W)),
          F_(forcing ? std::move(*forcing) : Vector::Zero(grid_->size())),
          lambda_(lambda),
          range_(range),
          H1_(-kappa * grid_->laplacian_matrix()) {
        if (hminus1) M_ = -grid_->laplacian_matrix();
    }

    double energy1(const Vector& u) const override { return kappa_ * grid_->grad_sq_energy(u); }
    double energy2(const Vector& u) const override {
        double s = 0.0;
        const Vector& w = weights();
        for (Eigen::Index i = 0; i < u.size(); ++i) s += w[i] * (W_.f(u[i]) + F_[i] * u[i]);
        return s;
    }
    Vector grad_energy1(const Vector& u) const override { return H1_ * u; }
    Vector grad_energy2(const Vector& u) const override {
        Vector g(u.size());
        for (Eigen::Index i = 0; i < u.size(); ++i) g[i] = W_.df(u[i]) + F_[i];
        return g.cwiseProduct(grid_->free_mask());
    }
    SparseMatrix hessian1(const Vector&) const override { return H1_; }
    SparseMatrix hessian2(const Vector& u) const override {
        Vector d(u.size());
        for (Eigen::Index i = 0; i < u.size(); ++i) d[i] = W_.d2f(u[i]);
        return detail::diagonal(d.cwiseProduct(grid_->free_mask()));
    }
    bool has_explicit_part() const override { return true; }
    bool hessian1_constant() const override { return true; }
    double lambda_bound() const override { return lambda_; }
    std::optional<std::pair<double, double>> lambda_range() const override { return range_; }
    const SparseMatrix* flow_operator() const override { return M_ ? &*M_ : nullptr; }

private:
    double kappa_;
    Potential1D W_;
    Vector F_;
    double lambda_;
    std::pair<double, double> range_;
    SparseMatrix H1_;
    std::optional<SparseMatrix> M_;
};

/// E1 = c int u^p on positive states, E2 = 0; optionally an H^-1 flow.
class PowerEnergyProblem : public GridProblem {
public:
    PowerEnergyProblem(std::string name, std::shared_ptr<const Grid> grid, double c, double p, bool hminus1)
        : GridProblem(std::move(name), std::move(grid)), c_(c), p_(p) {
        if (hminus1) M_ = -grid_->laplacian_matrix();
    }
    double energy1(const Vector& u) const override {
        return c_ * weights().dot(u.array().pow(p_).matrix());
    }
    Vector grad_energy1(const Vector& u) const override { return (c_ * p_) * u.array().pow(p_ - 1.0).matrix(); }
    SparseMatrix hessian1(const Vector& u) const override {
        return detail::diagonal((c_ * p_ * (p_ - 1.0)) * u.array().pow(p_ - 2.0).matrix());
    }
    bool admissible(const Vector& u) const override { return u.allFinite() && u.minCoeff() > 0.0; }
    const SparseMatrix* flow_operator() const override { return M_ ? &*M_ : nullptr; }

private:
    double c_, p_;
    std::optional<SparseMatrix> M_;
};

/// Negative entropy int u log u split as E1 = 1/2 int u^2 and
/// E2 = int u log u - 1/2 int u^2 (concave for u >= 1).
class EntropyProblem : public GridProblem {
public:
    using GridProblem::GridProblem;
    double energy1(const Vector& u) const override { return 0.5 * weights().dot(u.cwiseProduct(u)); }
    double energy2(const Vector& u) const override {
        return weights().dot((u.array() * u.array().log() - 0.5 * u.array().square()).matrix());
    }
    Vector grad_energy1(const Vector& u) const override { return u; }
    Vector grad_energy2(const Vector& u) const override { return (u.array().log() + 1.0 - u.array()).matrix(); }
    SparseMatrix hessian1(const Vector& u) const override { return detail::diagonal(Vector::Ones(u.size())); }
    SparseMatrix hessian2(const Vector& u) const override {
        return detail::diagonal((1.0 / u.array() - 1.0).matrix());
    }
    bool has_explicit_part() const override { return true; }
    bool hessian1_constant() const override { return true; }
    std::optional<std::pair<double, double>> lambda_range() const override {
        return std::pair{1.0, std::numeric_limits<double>::infinity()};
    }
    bool admissible(const Vector& u) const override { return u.allFinite() && u.minCoeff() > 0.0; }
};

// ---------------------------------------------------------------------------
// Experiment catalogue

enum class MetricKind { identity, hminus1, wasserstein, mobility };
enum class ReferenceKind { bdf2_ab, tr_bdf2, bdf_ab_mobility };

struct ProblemSpec {
    std::string name;
    std::shared_ptr<const GridProblem> problem;
    /// Solution-dependent operator; null for fixed inner products.
    std::shared_ptr<const MetricOperator> metric;
    MetricKind metric_kind = MetricKind::identity;
    Vector initial;
    double final_time = 1.0;
    /// Exact solution u(., t) of the continuous problem, when known.
    std::function<Vector(double)> exact;
    ReferenceKind reference = ReferenceKind::tr_bdf2;
    /// Interface width parameter of the mobility problem (ch_mob only).
    double epsilon = 0.0;

    const Grid& grid() const { return problem->grid(); }
    bool uses_metric() const { return metric != nullptr; }
};

inline std::vector<std::string> problem_names() {
    return {"ac1d_tw", "ac2d", "ch2d", "pme_hm1", "heat_wass", "pme_wass", "ch_mob"};
}

/// Default points per axis for each experiment.
inline int default_grid_points(const std::string& name) {
    if (name == "ac1d_tw") return 4097;
    if (name == "ac2d" || name == "ch2d") return 128;
    if (name == "ch_mob") return 2048;
    return 2049;
}

namespace detail {

// W(u) = 8u - 16u^2 - (8/3)u^3 + 8u^4: unequal wells at -1 and 1.
inline Potential1D unequal_wells() {
    return {[](double u) { return 8 * u - 16 * u * u - (8.0 / 3.0) * u * u * u + 8 * u * u * u * u; },
            [](double u) { return 8 - 32 * u - 8 * u * u + 32 * u * u * u; },
            [](double u) { return -32 - 16 * u + 96 * u * u; }};
}
// W(u) = u^2 (1 - u)^2: equal wells at 0 and 1.
inline Potential1D wells_01() {
    return {[](double u) { return u * u * (1 - u) * (1 - u); },
            [](double u) { return 2 * u * (1 - u) * (1 - 2 * u); },
            [](double u) { return 2 - 12 * u + 12 * u * u; }};
}
// W(u) = (1 - u^2)^2: equal wells at -1 and 1.
inline Potential1D wells_pm1() {
    return {[](double u) { return (1 - u * u) * (1 - u * u); },
            [](double u) { return -4 * u * (1 - u * u); },
            [](double u) { return -4 + 12 * u * u; }};
}

/// max of f'' over [lo, hi] for a quartic potential (vertex or endpoints).
inline double max_curvature(const Potential1D& W, double lo, double hi) {
    double best = std::max(W.d2f(lo), W.d2f(hi));
    for (int i = 1; i < 2000; ++i) best = std::max(best, W.d2f(lo + (hi - lo) * i / 2000.0));
    return std::max(best, 0.0);
}

inline double gaussian_bump(double x) {
    return 3.0 / (2.0 * std::sqrt(2.0 * std::numbers::pi)) * std::exp(-9.0 * x * x / 8.0);
}

}  // namespace detail

/// Builds one of the named experiments.  points overrides the grid
/// resolution per axis; final_time overrides T.
inline ProblemSpec make_problem(const std::string& name, std::optional<int> points = std::nullopt,
                                std::optional<double> final_time = std::nullopt) {
    const int n = points.value_or(default_grid_points(name));
    ProblemSpec s;
    s.name = name;

    if (name == "ac1d_tw") {
        auto g = std::make_shared<const Grid>(Grid::line(-10.0, 10.0, n, Boundary::dirichlet));
        const auto W = detail::unequal_wells();
        const double lam = detail::max_curvature(W, -1.2, 1.2);
        s.problem = std::make_shared<PhaseFieldProblem>(name, g, 1.0, W, std::nullopt, lam, std::pair{-1.2, 1.2}, false);
        s.initial = g->sample([](double x) { return std::tanh(4 * x + 20); });
        s.initial[0] = -1.0;
        s.initial[n - 1] = 1.0;
        s.final_time = 5.0;
        s.exact = [g](double t) {
            Vector u = g->sample([t](double x) { return std::tanh(4 * x + 20 - 8 * t); });
            u[0] = -1.0;
            u[u.size() - 1] = 1.0;
            return u;
        };
        s.reference = ReferenceKind::bdf2_ab;
    } else if (name == "ac2d" || name == "ch2d") {
        const bool ch = name == "ch2d";
        auto g = std::make_shared<const Grid>(Grid::square(-10.0, 10.0, n, Boundary::periodic));
        const auto W = detail::wells_01();
        const double lam = detail::max_curvature(W, -0.2, 1.2);
        s.problem = std::make_shared<PhaseFieldProblem>(name, g, 1.0, W, std::nullopt, lam, std::pair{-0.2, 1.2}, ch);
        const double radius = ch ? 5.0 : 7.5;
        s.initial = g->sample([radius](double x, double y) {
            return 1.0 / (1.0 + std::exp(-(radius - std::sqrt(x * x + y * y))));
        });
        s.metric_kind = ch ? MetricKind::hminus1 : MetricKind::identity;
        s.final_time = 1.0;
        s.reference = ReferenceKind::bdf2_ab;
    } else if (name == "pme_hm1" || name == "pme_wass") {
        const bool hm1 = name == "pme_hm1";
        auto g = std::make_shared<const Grid>(Grid::line(-3.0, 3.0, n, Boundary::neumann));
        if (hm1) {
            s.problem = std::make_shared<PowerEnergyProblem>(name, g, 3.0 / 8.0, 8.0 / 3.0, true);
            s.metric_kind = MetricKind::hminus1;
        } else {
            s.problem = std::make_shared<PowerEnergyProblem>(name, g, 1.5, 5.0 / 3.0, false);
            s.metric = std::make_shared<DivergenceMetric>(
                "wasserstein", g,
                Coefficient{[](double u) { return u; }, [](double) { return 1.0; }, [](double) { return 0.0; }, true,
                            true});
            s.metric_kind = MetricKind::wasserstein;
        }
        s.initial = g->sample(detail::gaussian_bump);
        s.final_time = 1.0;
        s.reference = ReferenceKind::tr_bdf2;
    } else if (name == "heat_wass") {
        auto g = std::make_shared<const Grid>(Grid::line(0.0, 1.0, n, Boundary::neumann));
        s.problem = std::make_shared<EntropyProblem>(name, g);
        s.metric = std::make_shared<DivergenceMetric>(
            "wasserstein", g,
            Coefficient{[](double u) { return u; }, [](double) { return 1.0; }, [](double) { return 0.0; }, true, true});
        s.metric_kind = MetricKind::wasserstein;
        s.initial = g->sample([](double x) { return std::cos(std::numbers::pi * x) + 2.0; });
        s.final_time = 0.1;
        s.exact = [g](double t) {
            const double decay = std::exp(-std::numbers::pi * std::numbers::pi * t);
            return g->sample([decay](double x) { return std::cos(std::numbers::pi * x) * decay + 2.0; });
        };
        s.reference = ReferenceKind::tr_bdf2;
    } else if (name == "ch_mob") {
        const double eps = 1.0 / 20.0;
        auto g = std::make_shared<const Grid>(Grid::line(-0.5, 0.5, n, Boundary::periodic));
        const auto W = detail::wells_pm1();
        const double lam = detail::max_curvature(W, -1.2, 1.2);
        const auto shape = [eps](double x) { return std::tanh(std::cos(2 * std::numbers::pi * x) / (10 * eps)); };
        Vector F = g->sample(shape);
        s.problem = std::make_shared<PhaseFieldProblem>(name, g, eps * eps, W, F, lam, std::pair{-1.2, 1.2}, false);
        s.metric = std::make_shared<DivergenceMetric>(
            "mobility", g,
            Coefficient{[eps](double u) { return (1 - eps) * (1 - u * u) * (1 - u * u) + eps; },
                        [eps](double u) { return -4 * (1 - eps) * u * (1 - u * u); },
                        [eps](double u) { return -4 * (1 - eps) * (1 - 3 * u * u); }, false, false});
        s.metric_kind = MetricKind::mobility;
        s.initial = g->sample(shape);
        s.final_time = 0.125;
        s.reference = ReferenceKind::bdf_ab_mobility;
        s.epsilon = eps;
    } else {
        throw UnknownNameError("problem", name);
    }
    if (final_time) s.final_time = *final_time;
    return s;
}

}  // namespace gradflow
