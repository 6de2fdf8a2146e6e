#pragma once

// Direct factorization of the sparse stage systems.  Circulant matrices
// (constant-coefficient operators on periodic grids, 1D or square 2D) are
// diagonalized by FFT.  Matrices with a narrow band (after an optional
// interleaving of a periodic ring) use LAPACK's banded or tridiagonal LU
// with partial pivoting; everything else uses Eigen's SparseLU.

#include <gradflow/error.hpp>
#include <gradflow/problem.hpp>

#include <Eigen/SparseLU>
#include <fftw3.h>
#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

namespace gradflow {

namespace detail {

// FFTW's planner is not thread-safe; execution is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

template <class T>
struct FftwDeleter {
    void operator()(T* p) const { fftw_free(p); }
};

template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwDeleter<T>>;

template <class T>
FftwBuffer<T> fftw_buffer(std::size_t n) {
    auto* p = static_cast<T*>(fftw_malloc(sizeof(T) * std::max<std::size_t>(n, 1)));
    if (!p) throw LinearSolveError("FFT buffer allocation failed");
    return FftwBuffer<T>(p);
}

}  // namespace detail

/// Solver for A x = b when A is circulant (1D) or block circulant with
/// circulant blocks on a square grid (2D, first index fastest).
class CirculantSolver {
public:
    /// Returns a solver when A has that structure and is well conditioned.
    static std::unique_ptr<CirculantSolver> detect(const SparseMatrix& A) {
        const Eigen::Index N = A.rows();
        if (N < 16 || A.cols() != N) return nullptr;
        std::vector<std::vector<int>> shapes{{static_cast<int>(N)}};
        const auto n = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(N))));
        if (n * n == N) shapes.push_back({static_cast<int>(n), static_cast<int>(n)});
        for (const auto& dims : shapes) {
            if (auto s = stencil(A, dims)) {
                auto solver = std::unique_ptr<CirculantSolver>(new CirculantSolver(dims, *s));
                if (solver->well_conditioned_) return solver;
            }
        }
        return nullptr;
    }

    ~CirculantSolver() {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        if (forward_) fftw_destroy_plan(forward_);
        if (backward_) fftw_destroy_plan(backward_);
    }
    CirculantSolver(const CirculantSolver&) = delete;
    CirculantSolver& operator=(const CirculantSolver&) = delete;

    Vector solve(const Vector& b) const {
        if (b.size() != n_) throw LinearSolveError("right-hand side has the wrong size");
        auto in = detail::fftw_buffer<double>(static_cast<std::size_t>(n_));
        auto spec = detail::fftw_buffer<fftw_complex>(spec_size_);
        std::copy(b.data(), b.data() + n_, in.get());
        fftw_execute_dft_r2c(forward_, in.get(), spec.get());
        for (std::size_t i = 0; i < spec_size_; ++i) {
            const std::complex<double> v(spec[i][0], spec[i][1]);
            const std::complex<double> q = v / eig_[i];
            spec[i][0] = q.real();
            spec[i][1] = q.imag();
        }
        fftw_execute_dft_c2r(backward_, spec.get(), in.get());
        Vector x(n_);
        const double scale = 1.0 / static_cast<double>(n_);
        for (Eigen::Index i = 0; i < n_; ++i) x[i] = in[static_cast<std::size_t>(i)] * scale;
        return x;
    }

private:
    // First column of A as a dense array when every column is its cyclic
    // shift under the given index layout.
    static std::optional<std::vector<double>> stencil(const SparseMatrix& A, const std::vector<int>& dims) {
        const Eigen::Index N = A.rows();
        const int n0 = dims[0];
        auto offset = [&](Eigen::Index r, Eigen::Index c) {
            if (dims.size() == 1) return static_cast<std::size_t>(((r - c) % N + N) % N);
            const Eigen::Index di = ((r % n0 - c % n0) % n0 + n0) % n0;
            const Eigen::Index dj = ((r / n0 - c / n0) % n0 + n0) % n0;
            return static_cast<std::size_t>(di + n0 * dj);
        };
        std::vector<double> s(static_cast<std::size_t>(N), 0.0);
        double big = 0.0;
        for (SparseMatrix::InnerIterator it(A, 0); it; ++it) {
            s[offset(it.row(), 0)] = it.value();
            big = std::max(big, std::abs(it.value()));
        }
        if (big == 0.0) return std::nullopt;
        const double tol = 1e-13 * big;
        const auto nonzeros = std::count_if(s.begin(), s.end(), [tol](double v) { return std::abs(v) > tol; });
        // Offsets are distinct within a column, so matching values plus an
        // equal nonzero count means the column is exactly the shifted stencil.
        for (Eigen::Index c = 1; c < N; ++c) {
            std::ptrdiff_t here = 0;
            for (SparseMatrix::InnerIterator it(A, c); it; ++it) {
                if (std::abs(it.value() - s[offset(it.row(), c)]) > tol) return std::nullopt;
                here += std::abs(it.value()) > tol;
            }
            if (here != nonzeros) return std::nullopt;
        }
        return s;
    }

    CirculantSolver(const std::vector<int>& dims, const std::vector<double>& s) : n_(static_cast<Eigen::Index>(s.size())) {
        // r2c layout: the last dimension is halved.  FFTW is row major, so the
        // first (fastest) grid index is FFTW's last dimension.
        const int last = dims[0];
        spec_size_ = static_cast<std::size_t>(n_ / last) * static_cast<std::size_t>(last / 2 + 1);
        auto in = detail::fftw_buffer<double>(s.size());
        auto spec = detail::fftw_buffer<fftw_complex>(spec_size_);
        {
            std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
            if (dims.size() == 1) {
                forward_ = fftw_plan_dft_r2c_1d(last, in.get(), spec.get(), FFTW_ESTIMATE);
                backward_ = fftw_plan_dft_c2r_1d(last, spec.get(), in.get(), FFTW_ESTIMATE);
            } else {
                forward_ = fftw_plan_dft_r2c_2d(dims[1], last, in.get(), spec.get(), FFTW_ESTIMATE);
                backward_ = fftw_plan_dft_c2r_2d(dims[1], last, spec.get(), in.get(), FFTW_ESTIMATE);
            }
        }
        if (!forward_ || !backward_) throw LinearSolveError("FFT planning failed");
        std::copy(s.begin(), s.end(), in.get());
        fftw_execute_dft_r2c(forward_, in.get(), spec.get());
        eig_.resize(spec_size_);
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (std::size_t i = 0; i < spec_size_; ++i) {
            eig_[i] = {spec[i][0], spec[i][1]};
            lo = std::min(lo, std::abs(eig_[i]));
            hi = std::max(hi, std::abs(eig_[i]));
        }
        well_conditioned_ = lo > 64.0 * std::numeric_limits<double>::epsilon() * hi;
    }

    Eigen::Index n_ = 0;
    std::size_t spec_size_ = 0;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
    std::vector<std::complex<double>> eig_;
    bool well_conditioned_ = false;
};

class LinearFactorization {
public:
    /// Largest half-bandwidth handled by the banded path.
    static constexpr int max_band = 32;

    explicit LinearFactorization(const SparseMatrix& A) {
        if (A.rows() != A.cols()) throw LinearSolveError("matrix is not square");
        n_ = A.rows();
        if ((circulant_ = CirculantSolver::detect(A))) return;
        if (try_banded(A)) return;
        lu_ = std::make_unique<Eigen::SparseLU<SparseMatrix>>();
        lu_->analyzePattern(A);
        lu_->factorize(A);
        if (lu_->info() != Eigen::Success) {
            throw LinearSolveError("sparse LU factorization failed: " + lu_->lastErrorMessage());
        }
    }

    bool banded() const noexcept { return !lu_ && !circulant_; }
    bool circulant() const noexcept { return circulant_ != nullptr; }

    Vector solve(const Vector& b) const {
        if (circulant_) return circulant_->solve(b);
        if (lu_) {
            Vector x = lu_->solve(b);
            if (lu_->info() != Eigen::Success) throw LinearSolveError("sparse LU solve failed");
            return x;
        }
        Vector pb(n_);
        for (Eigen::Index i = 0; i < n_; ++i) pb[perm_[static_cast<std::size_t>(i)]] = b[i];
        const lapack_int info =
            tri_ ? LAPACKE_dgttrs(LAPACK_COL_MAJOR, 'N', static_cast<lapack_int>(n_), 1, dl_.data(), d_.data(),
                                  du_.data(), du2_.data(), ipiv_.data(), pb.data(), static_cast<lapack_int>(n_))
                 : LAPACKE_dgbtrs(LAPACK_COL_MAJOR, 'N', static_cast<lapack_int>(n_), kl_, ku_, 1, ab_.data(),
                                  ldab_, ipiv_.data(), pb.data(), static_cast<lapack_int>(n_));
        if (info != 0) throw LinearSolveError("banded solve failed");
        Vector x(n_);
        for (Eigen::Index i = 0; i < n_; ++i) x[i] = pb[perm_[static_cast<std::size_t>(i)]];
        return x;
    }

private:
    static void bandwidth(const SparseMatrix& A, const std::vector<Eigen::Index>& p, int& kl, int& ku) {
        Eigen::Index lo = 0, up = 0;
        for (int k = 0; k < A.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
                const Eigen::Index d = p[static_cast<std::size_t>(it.row())] - p[static_cast<std::size_t>(it.col())];
                lo = std::max(lo, d);
                up = std::max(up, -d);
            }
        }
        kl = static_cast<int>(std::min<Eigen::Index>(lo, 1 << 30));
        ku = static_cast<int>(std::min<Eigen::Index>(up, 1 << 30));
    }

    bool try_banded(const SparseMatrix& A) {
        std::vector<Eigen::Index> identity(static_cast<std::size_t>(n_)), ring(static_cast<std::size_t>(n_));
        const Eigen::Index half = (n_ + 1) / 2;
        for (Eigen::Index i = 0; i < n_; ++i) {
            identity[static_cast<std::size_t>(i)] = i;
            ring[static_cast<std::size_t>(i)] = i < half ? 2 * i : 2 * (n_ - 1 - i) + 1;
        }
        int kl1 = 0, ku1 = 0, kl2 = 0, ku2 = 0;
        bandwidth(A, identity, kl1, ku1);
        bandwidth(A, ring, kl2, ku2);
        if (std::max(kl1, ku1) <= std::max(kl2, ku2)) {
            perm_ = std::move(identity);
            kl_ = kl1;
            ku_ = ku1;
        } else {
            perm_ = std::move(ring);
            kl_ = kl2;
            ku_ = ku2;
        }
        if (std::max(kl_, ku_) > max_band) return false;
        if (kl_ == 1 && ku_ == 1) return factor_tridiagonal(A);

        ldab_ = 2 * kl_ + ku_ + 1;
        ab_.assign(static_cast<std::size_t>(ldab_) * static_cast<std::size_t>(n_), 0.0);
        for (int k = 0; k < A.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
                const Eigen::Index i = perm_[static_cast<std::size_t>(it.row())];
                const Eigen::Index j = perm_[static_cast<std::size_t>(it.col())];
                ab_[static_cast<std::size_t>(j * ldab_ + kl_ + ku_ + i - j)] += it.value();
            }
        }
        ipiv_.assign(static_cast<std::size_t>(n_), 0);
        const lapack_int info = LAPACKE_dgbtrf(LAPACK_COL_MAJOR, static_cast<lapack_int>(n_),
                                               static_cast<lapack_int>(n_), kl_, ku_, ab_.data(), ldab_, ipiv_.data());
        if (info != 0) throw LinearSolveError("banded LU factorization failed (singular matrix)");
        return true;
    }

    bool factor_tridiagonal(const SparseMatrix& A) {
        tri_ = true;
        const auto n = static_cast<std::size_t>(n_);
        dl_.assign(n - 1, 0.0);
        d_.assign(n, 0.0);
        du_.assign(n - 1, 0.0);
        du2_.assign(n > 2 ? n - 2 : 1, 0.0);
        for (int k = 0; k < A.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
                const Eigen::Index i = perm_[static_cast<std::size_t>(it.row())];
                const Eigen::Index j = perm_[static_cast<std::size_t>(it.col())];
                if (i == j) d_[static_cast<std::size_t>(i)] += it.value();
                else if (i == j + 1) dl_[static_cast<std::size_t>(j)] += it.value();
                else du_[static_cast<std::size_t>(i)] += it.value();
            }
        }
        ipiv_.assign(n, 0);
        const lapack_int info = LAPACKE_dgttrf(static_cast<lapack_int>(n_), dl_.data(), d_.data(), du_.data(),
                                               du2_.data(), ipiv_.data());
        if (info != 0) throw LinearSolveError("tridiagonal LU factorization failed (singular matrix)");
        return true;
    }

    Eigen::Index n_ = 0;
    bool tri_ = false;
    std::vector<double> dl_, d_, du_, du2_;
    std::vector<Eigen::Index> perm_;
    lapack_int kl_ = 0, ku_ = 0, ldab_ = 1;
    std::vector<double> ab_;
    std::vector<lapack_int> ipiv_;
    std::unique_ptr<Eigen::SparseLU<SparseMatrix>> lu_;
    std::unique_ptr<CirculantSolver> circulant_;
};

}  // namespace gradflow
