#pragma once

// Dense linear algebra and integration substrate shared by every other module.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace poprisk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kDefaultRankTol = 1e-10;

/// Raised when a caller breaks a documented precondition.
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised by the ODE integrators when the state or its derivative stops being finite.
class IntegrationFailure : public std::runtime_error {
public:
    IntegrationFailure(const std::string& what, double time)
        : std::runtime_error(what + " at t=" + std::to_string(time)), time_(time) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractViolation(msg);
}

struct SpectralDecomposition {
    Vector values;   // descending
    Matrix vectors;  // column j pairs with values(j)
};

inline double relative_asymmetry(const Matrix& a) {
    const double scale = a.norm();
    if (scale == 0.0) return 0.0;
    return (a - a.transpose()).norm() / scale;
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
/// Ties keep the solver's order, which is deterministic for a given input.
inline SpectralDecomposition sym_eig(const Matrix& a, double asym_tol = 1e-8) {
    require(a.rows() == a.cols(), "sym_eig: matrix must be square");
    require(relative_asymmetry(a) <= asym_tol, "sym_eig: matrix is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetrize(a));
    if (solver.info() != Eigen::Success) throw std::runtime_error("sym_eig: eigensolver failed");
    const Eigen::Index n = a.rows();
    SpectralDecomposition out{Vector(n), Matrix(n, n)};
    for (Eigen::Index j = 0; j < n; ++j) {
        out.values(j) = solver.eigenvalues()(n - 1 - j);
        out.vectors.col(j) = solver.eigenvectors().col(n - 1 - j);
    }
    return out;
}

/// Number of eigenvalues strictly above rank_tol * max(|lambda_max|, 0).
inline Eigen::Index retained_rank(const Vector& descending, double rank_tol = kDefaultRankTol) {
    if (descending.size() == 0) return 0;
    const double top = std::max(descending(0), 0.0);
    if (top == 0.0) return 0;
    Eigen::Index r = 0;
    while (r < descending.size() && descending(r) > rank_tol * top) ++r;
    return r;
}

/// Moore-Penrose pseudoinverse; singular values at or below rank_tol * sigma_max are dropped.
inline Matrix pinv(const Matrix& a, double rank_tol = kDefaultRankTol) {
    require(rank_tol > 0.0 && rank_tol < 1.0, "pinv: rank_tol must lie in (0,1)");
    if (a.size() == 0) return Matrix::Zero(a.cols(), a.rows());
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double cut = s.size() > 0 ? rank_tol * s(0) : 0.0;
    Vector inv = Vector::Zero(s.size());
    for (Eigen::Index j = 0; j < s.size(); ++j)
        if (s(j) > cut && s(j) > 0.0) inv(j) = 1.0 / s(j);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

inline Eigen::Index numerical_rank(const Matrix& a, double rank_tol = kDefaultRankTol) {
    if (a.size() == 0) return 0;
    Eigen::JacobiSVD<Matrix> svd(a);
    const Vector& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > rank_tol * s(0)) ++r;
    return r;
}

/// Largest singular value.
inline double op_norm(const Matrix& a) {
    if (a.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(a);
    return svd.singularValues()(0);
}

/// f(W) for symmetric PSD W applied on the retained spectrum; zero elsewhere.
template <class Fn>
Matrix psd_function(const SpectralDecomposition& eig, Fn&& fn, double rank_tol = kDefaultRankTol) {
    const Eigen::Index r = retained_rank(eig.values, rank_tol);
    const Matrix v = eig.vectors.leftCols(r);
    Vector d(r);
    for (Eigen::Index j = 0; j < r; ++j) d(j) = fn(eig.values(j));
    return v * d.asDiagonal() * v.transpose();
}

inline Matrix psd_sqrt(const Matrix& w, double rank_tol = kDefaultRankTol) {
    return psd_function(sym_eig(w), [](double x) { return std::sqrt(x); }, rank_tol);
}

/// W^{dagger/2}: inverse square root on range(W) at the shared rank tolerance.
inline Matrix psd_pinv_sqrt(const Matrix& w, double rank_tol = kDefaultRankTol) {
    return psd_function(sym_eig(w), [](double x) { return 1.0 / std::sqrt(x); }, rank_tol);
}

/// Matrix exponential. Symmetric inputs go through the eigendecomposition,
/// everything else through Pade scaling-and-squaring.
inline Matrix expm(const Matrix& a) {
    require(a.rows() == a.cols(), "expm: matrix must be square");
    require(a.allFinite(), "expm: non-finite entries");
    if (a.size() == 0) return a;
    if (relative_asymmetry(a) <= 1e-14) {
        const auto eig = sym_eig(a);
        Vector e = eig.values.array().exp();
        return eig.vectors * e.asDiagonal() * eig.vectors.transpose();
    }
    return a.exp();
}

template <class State>
struct OdeSolution {
    std::vector<double> times;
    std::vector<State> states;
};

namespace detail {
template <class X, class = void>
struct plain_state { using type = X; };
template <class X>
struct plain_state<X, std::void_t<typename X::PlainObject>> { using type = typename X::PlainObject; };
}  // namespace detail

template <class State>
bool all_finite(const State& x) {
    if constexpr (std::is_arithmetic_v<State>) return std::isfinite(x);
    else return x.allFinite();
}

/// One classical RK4 step of size h from (t, x).
template <class State, class Fn>
State rk4_step(Fn&& f, double t, const State& x, double h) {
    const State k1 = f(t, x);
    if (!all_finite(k1)) throw IntegrationFailure("rk4: non-finite derivative", t);
    const State k2 = f(t + 0.5 * h, State(x + (0.5 * h) * k1));
    const State k3 = f(t + 0.5 * h, State(x + (0.5 * h) * k2));
    const State k4 = f(t + h, State(x + h * k3));
    if (!all_finite(k2) || !all_finite(k3) || !all_finite(k4))
        throw IntegrationFailure("rk4: non-finite derivative", t + 0.5 * h);
    State out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!all_finite(out)) throw IntegrationFailure("rk4: non-finite state", t + h);
    return out;
}

/// Classical fixed-step RK4 on [s,T] with uniform step (T-s)/steps.
/// `f(t, x)` returns dx/dt.
template <class X0, class Fn, class State = typename detail::plain_state<X0>::type>
OdeSolution<State> ode_rk4(Fn&& f, const X0& x0, double s, double t_end, int steps) {
    require(steps >= 1, "ode_rk4: steps must be >= 1");
    require(t_end >= s, "ode_rk4: requires T >= s");
    OdeSolution<State> sol;
    sol.times.reserve(static_cast<std::size_t>(steps) + 1);
    sol.states.reserve(static_cast<std::size_t>(steps) + 1);
    const double h = (t_end - s) / steps;
    State x = x0;
    sol.times.push_back(s);
    sol.states.push_back(x);
    for (int k = 0; k < steps; ++k) {
        x = rk4_step(f, s + k * h, x, h);
        sol.times.push_back(k + 1 == steps ? t_end : s + (k + 1) * h);
        sol.states.push_back(x);
    }
    return sol;
}

/// Calls fn(indices) for every size-k subset of {0..n-1} in lexicographic order.
template <class Fn>
void for_each_subset(std::size_t n, std::size_t k, Fn&& fn) {
    require(k <= n, "for_each_subset: k > n");
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    while (true) {
        fn(static_cast<const std::vector<std::size_t>&>(idx));
        std::size_t i = k;
        while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
        if (i == 0) return;
        ++idx[i - 1];
        for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
}

/// Seeded generator shared by every stochastic routine. Streams are
/// reproducible for a given seed on a given standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }
    Vector normal_vector(Eigen::Index n, double sd = 1.0) {
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = sd * normal();
        return v;
    }
    Matrix normal_matrix(Eigen::Index r, Eigen::Index c, double sd = 1.0) {
        Matrix m(r, c);
        for (Eigen::Index j = 0; j < c; ++j)
            for (Eigen::Index i = 0; i < r; ++i) m(i, j) = sd * normal();
        return m;
    }
    /// Uniformly random subset of size k from [0, n), returned sorted.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + index(n - i)]);
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Random orthonormal columns (n x k) via QR of a Gaussian matrix.
inline Matrix random_orthonormal(Rng& rng, Eigen::Index n, Eigen::Index k) {
    Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(n, k));
    return qr.householderQ() * Matrix::Identity(n, k);
}

/// Ordinary least-squares slope/intercept/R^2 of y on x.
struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    double slope_stderr = 0.0;
};

inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, "fit_line: need >= 2 paired points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) { mx += x[i]; my += y[i]; }
    mx /= n; my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    require(sxx > 0.0, "fit_line: degenerate abscissae");
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    const double sse = std::max(syy - fit.slope * sxy, 0.0);
    fit.r_squared = syy > 0.0 ? 1.0 - sse / syy : 1.0;
    if (x.size() > 2) fit.slope_stderr = std::sqrt(sse / (n - 2.0) / sxx);
    return fit;
}

}  // namespace poprisk
