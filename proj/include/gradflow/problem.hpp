#pragma once

// Abstract gradient flow u' = -M grad E(u) with E = E1 + E2, E1 treated
// implicitly and E2 explicitly.  Gradients are taken with respect to the
// weighted inner product <u, v> = sum_i w_i u_i v_i defined by weights().

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>

namespace gradflow {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

enum class LinearSolverKind { direct, conjugate_gradient };

class GradientFlowProblem {
public:
    virtual ~GradientFlowProblem() = default;

    virtual std::string name() const = 0;
    virtual Eigen::Index size() const = 0;
    virtual const Vector& weights() const = 0;

    virtual double energy1(const Vector& u) const = 0;
    virtual double energy2(const Vector& /*u*/) const { return 0.0; }
    virtual Vector grad_energy1(const Vector& u) const = 0;
    virtual Vector grad_energy2(const Vector& u) const { return Vector::Zero(u.size()); }

    /// Jacobian of grad_energy1 (so hessian1(u) * v is the Hessian action).
    virtual SparseMatrix hessian1(const Vector& u) const = 0;
    virtual SparseMatrix hessian2(const Vector& u) const {
        SparseMatrix z(u.size(), u.size());
        return z;
    }

    virtual bool has_explicit_part() const { return false; }
    /// True when E1 is quadratic, so stage Jacobians can be factorized once.
    virtual bool hessian1_constant() const { return false; }
    /// Curvature bound: max(0, sup D^2 E2(u)(v, v)) over unit v.
    virtual double lambda_bound() const { return 0.0; }
    /// Interval of values for which lambda_bound() was derived, if restricted.
    virtual std::optional<std::pair<double, double>> lambda_range() const { return std::nullopt; }

    /// Fixed operator M of the flow u' = -M grad E (H^-1 type inner products);
    /// nullptr means the identity.
    virtual const SparseMatrix* flow_operator() const { return nullptr; }

    virtual bool admissible(const Vector& u) const { return u.allFinite(); }
    virtual LinearSolverKind preferred_solver() const { return LinearSolverKind::direct; }

    double energy(const Vector& u) const { return energy1(u) + energy2(u); }
    Vector gradient(const Vector& u) const { return grad_energy1(u) + grad_energy2(u); }
    Vector hess1_action(const Vector& u, const Vector& v) const { return hessian1(u) * v; }

    double inner(const Vector& a, const Vector& b) const {
        return (weights().array() * a.array() * b.array()).sum();
    }
    double norm(const Vector& a) const { return std::sqrt(inner(a, a)); }

    /// True when every entry of u lies inside lambda_range() (or no range is set).
    bool within_lambda_range(const Vector& u) const {
        const auto r = lambda_range();
        if (!r) return true;
        return u.minCoeff() >= r->first && u.maxCoeff() <= r->second;
    }
};

/// Energies that act pointwise: E_k(u) = sum_i w_i phi_k(u_i).  Mostly used
/// for scalar and small-system tests; n = 1 gives a scalar ODE.
class PointwiseProblem : public GradientFlowProblem {
public:
    struct Potential {
        std::function<double(double)> value;
        std::function<double(double)> d1;
        std::function<double(double)> d2;
    };

    PointwiseProblem(std::string name, Eigen::Index n, Potential implicit_part,
                     std::optional<Potential> explicit_part = std::nullopt, double lambda = 0.0,
                     bool implicit_quadratic = false)
        : name_(std::move(name)),
          weights_(Vector::Ones(n)),
          e1_(std::move(implicit_part)),
          e2_(std::move(explicit_part)),
          lambda_(lambda),
          quadratic_(implicit_quadratic) {}

    std::string name() const override { return name_; }
    Eigen::Index size() const override { return weights_.size(); }
    const Vector& weights() const override { return weights_; }

    double energy1(const Vector& u) const override { return sum(e1_.value, u); }
    double energy2(const Vector& u) const override { return e2_ ? sum(e2_->value, u) : 0.0; }
    Vector grad_energy1(const Vector& u) const override { return map(e1_.d1, u); }
    Vector grad_energy2(const Vector& u) const override {
        return e2_ ? map(e2_->d1, u) : Vector::Zero(u.size());
    }
    SparseMatrix hessian1(const Vector& u) const override { return diag(e1_.d2, u); }
    SparseMatrix hessian2(const Vector& u) const override {
        if (!e2_) return SparseMatrix(u.size(), u.size());
        return diag(e2_->d2, u);
    }
    bool has_explicit_part() const override { return e2_.has_value(); }
    bool hessian1_constant() const override { return quadratic_; }
    double lambda_bound() const override { return lambda_; }

private:
    double sum(const std::function<double(double)>& f, const Vector& u) const {
        double s = 0.0;
        for (Eigen::Index i = 0; i < u.size(); ++i) s += weights_[i] * f(u[i]);
        return s;
    }
    static Vector map(const std::function<double(double)>& f, const Vector& u) {
        Vector out(u.size());
        for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = f(u[i]);
        return out;
    }
    static SparseMatrix diag(const std::function<double(double)>& f, const Vector& u) {
        SparseMatrix m(u.size(), u.size());
        m.reserve(Eigen::VectorXi::Constant(u.size(), 1));
        for (Eigen::Index i = 0; i < u.size(); ++i) m.insert(i, i) = f(u[i]);
        m.makeCompressed();
        return m;
    }

    std::string name_;
    Vector weights_;
    Potential e1_;
    std::optional<Potential> e2_;
    double lambda_;
    bool quadratic_;
};

/// L2(u, q) = E2(q) + <grad E2(q), u - q>: the explicit energy linearized at q.
inline double linearized_energy(const GradientFlowProblem& p, const Vector& u, const Vector& q) {
    return p.energy2(q) + p.inner(p.grad_energy2(q), u - q);
}

}  // namespace gradflow
