#pragma once

// Uniform tensor grids in one or two dimensions with second-order
// finite-difference operators in flux form.
//
// With node quadrature weights W, face differences D and face weights C the
// discrete Dirichlet energy is 1/2 sum_f C_f (Du)_f^2 and the Laplacian is
// -W^{-1} D^T C D, which is symmetric in the weighted inner product.
// Neumann boundaries use trapezoid end weights (the mirror-ghost stencil);
// Dirichlet boundary nodes keep their values and get zero operator rows.

#include <gradflow/error.hpp>
#include <gradflow/problem.hpp>

#include <fmt/format.h>

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace gradflow {

enum class Boundary { periodic, neumann, dirichlet };

inline std::string_view to_string(Boundary b) {
    switch (b) {
        case Boundary::periodic: return "periodic";
        case Boundary::neumann: return "neumann";
        case Boundary::dirichlet: return "dirichlet";
    }
    return "?";
}

class Grid {
public:
    /// Uniform grid on [lo, hi] with n points (periodic: the point at hi is
    /// identified with lo and not stored).
    static Grid line(double lo, double hi, int n, Boundary bc) { return Grid(1, lo, hi, n, bc); }
    /// Square [lo, hi]^2 with n points per axis.
    static Grid square(double lo, double hi, int n, Boundary bc) { return Grid(2, lo, hi, n, bc); }

    int dimension() const noexcept { return dim_; }
    int points_per_axis() const noexcept { return n_; }
    Eigen::Index size() const noexcept { return weights_.size(); }
    double spacing() const noexcept { return h_; }
    double lower() const noexcept { return lo_; }
    double upper() const noexcept { return hi_; }
    Boundary boundary() const noexcept { return bc_; }

    /// Coordinate of index i along an axis.
    double coordinate(int i) const { return lo_ + h_ * i; }
    /// Coordinates of flat node index k (x fastest).
    std::array<double, 2> node(Eigen::Index k) const {
        const int i = static_cast<int>(k % n_);
        const int j = static_cast<int>(k / n_);
        return {coordinate(i), dim_ == 2 ? coordinate(j) : 0.0};
    }

    const Vector& weights() const noexcept { return weights_; }
    const Vector& face_weights() const noexcept { return face_weights_; }
    /// Face differences (faces x nodes).
    const SparseMatrix& difference() const noexcept { return D_; }
    /// Face averages (a_l + a_r)/2 (faces x nodes).
    const SparseMatrix& face_average() const noexcept { return A_; }
    /// 1 on nodes whose values evolve, 0 on Dirichlet boundary nodes.
    const Vector& free_mask() const noexcept { return mask_; }

    /// Evaluates f at every node.
    template <class F>
    Vector sample(F&& f) const {
        Vector v(size());
        for (Eigen::Index k = 0; k < size(); ++k) {
            const auto p = node(k);
            if constexpr (std::is_invocable_v<F, double>) {
                v[k] = f(p[0]);
            } else {
                v[k] = f(p[0], p[1]);
            }
        }
        return v;
    }

    double integrate(const Vector& u) const { return weights_.dot(u); }

    /// sqrt(h^d sum_i v_i^2).
    double l2_norm(const Vector& v) const {
        return std::sqrt(std::pow(h_, dim_) * v.squaredNorm());
    }

    /// Positive operator W^{-1} D^T C diag(face_coeff) D, i.e. -div(a grad) with
    /// face coefficients a; Dirichlet rows zeroed.
    SparseMatrix divergence_form(const Vector& face_coeff) const {
        check_faces(face_coeff);
        std::vector<Eigen::Triplet<double>> t;
        t.reserve(static_cast<std::size_t>(4 * face_l_.size()));
        const double ih2 = 1.0 / (h_ * h_);
        for (std::size_t f = 0; f < face_l_.size(); ++f) {
            const Eigen::Index l = face_l_[f], r = face_r_[f];
            const double c = face_weights_[static_cast<Eigen::Index>(f)] * face_coeff[static_cast<Eigen::Index>(f)] * ih2;
            const double cl = c * row_scale_[l], cr = c * row_scale_[r];
            t.emplace_back(l, l, cl);
            t.emplace_back(l, r, -cl);
            t.emplace_back(r, r, cr);
            t.emplace_back(r, l, -cr);
        }
        return assemble(t);
    }

    /// Discrete Laplacian matrix.
    SparseMatrix laplacian_matrix() const {
        SparseMatrix L = -divergence_form(Vector::Ones(D_.rows()));
        return L;
    }

    Vector laplacian(const Vector& u) const {
        check_nodes(u);
        const Vector flux = face_weights_.cwiseProduct(D_ * u);
        return -(div_ * flux);
    }

    /// 1/2 sum_f C_f (Du)_f^2, the discrete integral of |grad u|^2 / 2.
    double grad_sq_energy(const Vector& u) const {
        check_nodes(u);
        const Vector du = D_ * u;
        return 0.5 * face_weights_.dot(du.cwiseProduct(du));
    }

    /// div(a grad u) with face-averaged nodal coefficient a.
    Vector divergence_of_flux(const Vector& a, const Vector& u) const {
        check_nodes(a);
        check_nodes(u);
        const Vector flux = face_weights_.cwiseProduct((A_ * a).cwiseProduct(D_ * u));
        return -(div_ * flux);
    }

    /// Operator v -> W^{-1} D^T C diag(D g) A diag(s) v: the derivative of
    /// u -> div-form(A a(u)) g in direction v, with s = a'(u).
    SparseMatrix flux_derivative(const Vector& g, const Vector& s) const {
        check_nodes(g);
        check_nodes(s);
        std::vector<Eigen::Triplet<double>> t;
        t.reserve(static_cast<std::size_t>(4 * face_l_.size()));
        for (std::size_t f = 0; f < face_l_.size(); ++f) {
            const Eigen::Index l = face_l_[f], r = face_r_[f];
            const double q = 0.5 * face_weights_[static_cast<Eigen::Index>(f)] * (g[r] - g[l]) / (h_ * h_);
            const double ql = q * row_scale_[l], qr = q * row_scale_[r];
            t.emplace_back(l, l, -ql * s[l]);
            t.emplace_back(l, r, -ql * s[r]);
            t.emplace_back(r, l, qr * s[l]);
            t.emplace_back(r, r, qr * s[r]);
        }
        return assemble(t);
    }

    void check_nodes(const Vector& u) const {
        if (u.size() != size()) {
            throw Error(fmt::format("field has {} entries, grid has {} nodes", u.size(), size()));
        }
    }

private:
    Grid(int dim, double lo, double hi, int n, Boundary bc) : dim_(dim), n_(n), lo_(lo), hi_(hi), bc_(bc) {
        if (n < 3) throw Error("grid needs at least 3 points per axis");
        if (!(hi > lo)) throw Error("grid extent must be positive");
        if (dim == 2 && bc == Boundary::dirichlet) throw Error("dirichlet boundaries are only supported in 1D");
        h_ = bc == Boundary::periodic ? (hi - lo) / n : (hi - lo) / (n - 1);

        // 1D building blocks.
        const int nf = bc == Boundary::periodic ? n : n - 1;
        std::vector<Eigen::Triplet<double>> d, a;
        for (int f = 0; f < nf; ++f) {
            const int l = f;
            const int r = (f + 1) % n;
            d.emplace_back(f, l, -1.0 / h_);
            d.emplace_back(f, r, 1.0 / h_);
            a.emplace_back(f, l, 0.5);
            a.emplace_back(f, r, 0.5);
        }
        SparseMatrix D1(nf, n), A1(nf, n);
        D1.setFromTriplets(d.begin(), d.end());
        A1.setFromTriplets(a.begin(), a.end());
        Vector w1 = Vector::Constant(n, h_);
        if (bc != Boundary::periodic) {
            w1[0] *= 0.5;
            w1[n - 1] *= 0.5;
        }
        const Vector c1 = Vector::Constant(nf, h_);

        if (dim == 1) {
            D_ = D1;
            A_ = A1;
            weights_ = w1;
            face_weights_ = c1;
        } else {
            SparseMatrix I(n, n);
            I.setIdentity();
            const SparseMatrix Dx = kron(I, D1), Dy = kron(D1, I);
            const SparseMatrix Ax = kron(I, A1), Ay = kron(A1, I);
            D_ = vstack(Dx, Dy);
            A_ = vstack(Ax, Ay);
            weights_ = kron(w1, w1);
            face_weights_.resize(D_.rows());
            face_weights_ << kron(w1, c1), kron(c1, w1);
        }
        mask_ = Vector::Ones(weights_.size());
        if (bc == Boundary::dirichlet) {
            mask_[0] = 0.0;
            mask_[n - 1] = 0.0;
        }
        winv_mask_ = SparseMatrix(weights_.size(), weights_.size());
        std::vector<Eigen::Triplet<double>> wm;
        for (Eigen::Index k = 0; k < weights_.size(); ++k) {
            if (mask_[k] != 0.0) wm.emplace_back(k, k, 1.0 / weights_[k]);
        }
        winv_mask_.setFromTriplets(wm.begin(), wm.end());
        row_scale_ = mask_.cwiseQuotient(weights_);
        D_.makeCompressed();
        for (Eigen::Index f = 0; f < D_.rows(); ++f) {
            face_l_.push_back(-1);
            face_r_.push_back(-1);
        }
        for (int k = 0; k < D_.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(D_, k); it; ++it) {
                auto& slot = it.value() < 0.0 ? face_l_ : face_r_;
                slot[static_cast<std::size_t>(it.row())] = it.col();
            }
        }
        A_.makeCompressed();
        div_ = SparseMatrix(winv_mask_ * SparseMatrix(D_.transpose()));
        div_.makeCompressed();
    }

    // (B kron C) with B acting on the slow (y) index.
    static SparseMatrix kron(const SparseMatrix& B, const SparseMatrix& C) {
        std::vector<Eigen::Triplet<double>> t;
        for (int kb = 0; kb < B.outerSize(); ++kb) {
            for (SparseMatrix::InnerIterator ib(B, kb); ib; ++ib) {
                for (int kc = 0; kc < C.outerSize(); ++kc) {
                    for (SparseMatrix::InnerIterator ic(C, kc); ic; ++ic) {
                        t.emplace_back(ib.row() * C.rows() + ic.row(), ib.col() * C.cols() + ic.col(),
                                       ib.value() * ic.value());
                    }
                }
            }
        }
        SparseMatrix out(B.rows() * C.rows(), B.cols() * C.cols());
        out.setFromTriplets(t.begin(), t.end());
        return out;
    }
    static Vector kron(const Vector& b, const Vector& c) {
        Vector out(b.size() * c.size());
        for (Eigen::Index i = 0; i < b.size(); ++i) out.segment(i * c.size(), c.size()) = b[i] * c;
        return out;
    }
    static SparseMatrix vstack(const SparseMatrix& top, const SparseMatrix& bottom) {
        std::vector<Eigen::Triplet<double>> t;
        for (const SparseMatrix* m : {&top, &bottom}) {
            const Eigen::Index off = m == &top ? 0 : top.rows();
            for (int k = 0; k < m->outerSize(); ++k) {
                for (SparseMatrix::InnerIterator it(*m, k); it; ++it) t.emplace_back(it.row() + off, it.col(), it.value());
            }
        }
        SparseMatrix out(top.rows() + bottom.rows(), top.cols());
        out.setFromTriplets(t.begin(), t.end());
        return out;
    }

    SparseMatrix assemble(const std::vector<Eigen::Triplet<double>>& t) const {
        SparseMatrix out(size(), size());
        out.setFromTriplets(t.begin(), t.end());
        out.prune(0.0);
        out.makeCompressed();
        return out;
    }

    void check_faces(const Vector& a) const {
        if (a.size() != D_.rows()) {
            throw Error(fmt::format("face field has {} entries, grid has {} faces", a.size(), D_.rows()));
        }
    }

    int dim_;
    int n_;
    double lo_, hi_;
    Boundary bc_;
    double h_ = 0.0;
    Vector weights_;
    Vector face_weights_;
    Vector mask_;
    Vector row_scale_;
    std::vector<Eigen::Index> face_l_, face_r_;
    SparseMatrix D_, A_, winv_mask_;
    // W^{-1} D^T with masked rows, the discrete divergence of a face flux.
    SparseMatrix div_;
};

}  // namespace gradflow
