#pragma once

// Window operators along a recorded gradient-flow trajectory: propagator,
// dissipation Gramian W, displacement operators D and G, normalized channels,
// the optimal predictor, the remainder, visibility, and the four-cell split.

#include "poprisk/trajectory.hpp"

#include <array>
#include <json.hpp>

namespace poprisk {

/// Jacobians and loss Hessian at interpolated times, with a small cache that
/// covers the repeated stage times of one RK4 step.
class KernelOracle {
public:
    struct Sample {
        double t = 0.0;
        Matrix j_s;             // np x d
        Matrix j_q;             // n_Q p x d (empty without a test set)
        Matrix b;               // np x np; empty when B = I/n
        double b_scale = 0.0;   // 1/n when B is the scalar marker
    };

    KernelOracle(const TrainingTrajectory& traj, const Dataset* test) : traj_(traj), test_(test) {
        require(traj.kind == TrajectoryKind::gradient_flow, "operators need a gradient-flow trajectory");
    }

    const Sample& at(double t) {
        for (auto& s : cache_)
            if (s.valid && s.sample.t == t) return s.sample;
        Slot& slot = cache_[next_];
        next_ = (next_ + 1) % cache_.size();
        const Model m = traj_.model_at(t);
        slot.sample.t = t;
        slot.sample.j_s = jacobian_stacked(m, traj_.data);
        if (test_) slot.sample.j_q = jacobian_stacked(m, *test_);
        if (traj_.constant_hessian()) {
            slot.sample.b.resize(0, 0);
            slot.sample.b_scale = 1.0 / static_cast<double>(traj_.n());
        } else {
            slot.sample.b = output_hessian(forward_stacked(m, traj_.data), traj_.data, traj_.loss, traj_.weights_ptr());
            slot.sample.b_scale = 0.0;
        }
        slot.valid = true;
        return slot.sample;
    }

    static Matrix apply_b(const Sample& s, const Matrix& x) { return s.b.size() == 0 ? Matrix(s.b_scale * x) : Matrix(s.b * x); }

private:
    struct Slot {
        bool valid = false;
        Sample sample;
    };
    const TrainingTrajectory& traj_;
    const Dataset* test_;
    std::array<Slot, 3> cache_{};
    std::size_t next_ = 0;
};

struct OperatorOptions {
    int substeps = 1;  // RK4 steps per trajectory grid interval
    double rank_tol = kDefaultRankTol;
};

struct WindowOperators {
    double s = 0.0, T = 0.0;
    double rank_tol = kDefaultRankTol;
    Matrix W, D, G;          // np x np, np x np, n_Q p x np
    Matrix propagator;       // P(T,s)
    Matrix complement;       // F_SS = int B K P
    Matrix W_pinv_sqrt;      // W^{dagger/2}
    Matrix C_S, C_Q;
    Matrix A_opt, R_perp;
    Matrix Gamma_Q;
    Matrix P_sig, P_res;
    SpectralDecomposition W_eig;
    Eigen::Index rank = 0;
    Vector mobility;         // spectrum of K_SS(s)/n, descending

    double gamma_norm() const { return W_eig.values.size() == 0 ? 0.0 : sym_eig(Gamma_Q).values(0); }

    /// Projector onto W's eigenvectors with eigenvalue <= eps.
    Matrix low_projector(double eps) const {
        const auto m = W_eig.values.size();
        Matrix p = Matrix::Zero(m, m);
        for (Eigen::Index j = 0; j < m; ++j)
            if (W_eig.values(j) <= eps) p += W_eig.vectors.col(j) * W_eig.vectors.col(j).transpose();
        return p;
    }
};

namespace detail {

inline std::pair<std::size_t, std::size_t> window_indices(const TrainingTrajectory& traj, double s, double T) {
    require(s <= T, "window: requires s <= T");
    return {traj.index_of(s), traj.index_of(T)};
}

inline double grid_step(const TrainingTrajectory& traj) {
    return traj.size() > 1 ? traj.times[1] - traj.times[0] : 0.0;
}

}  // namespace detail

/// P(t,s), solving dP/dt = -B K_SS P with P(s,s) = I.
inline Matrix propagator(const TrainingTrajectory& traj, double s, double t, const OperatorOptions& opt = {}) {
    const auto [i0, i1] = detail::window_indices(traj, s, t);
    const Eigen::Index np = traj.n() * traj.p();
    Matrix P = Matrix::Identity(np, np);
    if (i0 == i1) return P;
    KernelOracle oracle(traj, nullptr);
    auto f = [&](double tau, const Matrix& x) -> Matrix {
        const auto& k = oracle.at(tau);
        return -KernelOracle::apply_b(k, k.j_s * (k.j_s.transpose() * x));
    };
    const double h = detail::grid_step(traj) / opt.substeps;
    for (std::size_t k = i0; k < i1; ++k)
        for (int sub = 0; sub < opt.substeps; ++sub) P = rk4_step(f, traj.times[k] + sub * h, P, h);
    return P;
}

/// Dense window operators on [s,T]. The integrals of W, D, G and F_SS are
/// carried as extra RK4 states next to the propagator.
inline WindowOperators window_operators(const TrainingTrajectory& traj, const Dataset& test, double s, double T,
                                        const OperatorOptions& opt = {}) {
    const auto [i0, i1] = detail::window_indices(traj, s, T);
    require(i1 > i0, "window_operators: window needs at least 2 grid points");
    require(opt.substeps >= 1, "window_operators: substeps must be >= 1");
    require(test.input_dim() == traj.data.input_dim() && test.output_dim() == traj.p(),
            "window_operators: test set dimensions differ from training set");
    const Eigen::Index np = traj.n() * traj.p();
    const Eigen::Index nq = test.size() * test.output_dim();

    KernelOracle oracle(traj, &test);
    // rows: P | W | D | F | G
    auto f = [&](double tau, const Matrix& x) -> Matrix {
        const auto& k = oracle.at(tau);
        const auto P = x.topRows(np);
        const Matrix jtp = k.j_s.transpose() * P;
        const Matrix kp = k.j_s * jtp;
        const Matrix bkp = KernelOracle::apply_b(k, kp);
        Matrix dx(4 * np + nq, np);
        dx.topRows(np) = -bkp;
        dx.middleRows(np, np) = P.transpose() * kp;
        dx.middleRows(2 * np, np) = kp;
        dx.middleRows(3 * np, np) = bkp;
        dx.bottomRows(nq) = k.j_q * jtp;
        return dx;
    };
    Matrix x = Matrix::Zero(4 * np + nq, np);
    x.topRows(np).setIdentity();
    const double h = detail::grid_step(traj) / opt.substeps;
    for (std::size_t k = i0; k < i1; ++k)
        for (int sub = 0; sub < opt.substeps; ++sub) x = rk4_step(f, traj.times[k] + sub * h, x, h);

    WindowOperators ops;
    ops.s = traj.times[i0];
    ops.T = traj.times[i1];
    ops.rank_tol = opt.rank_tol;
    ops.propagator = x.topRows(np);
    ops.W = symmetrize(x.middleRows(np, np));
    ops.D = x.middleRows(2 * np, np);
    ops.complement = x.middleRows(3 * np, np);
    ops.G = x.bottomRows(nq);

    ops.W_eig = sym_eig(ops.W);
    ops.rank = retained_rank(ops.W_eig.values, opt.rank_tol);
    ops.W_pinv_sqrt = psd_function(ops.W_eig, [](double v) { return 1.0 / std::sqrt(v); }, opt.rank_tol);
    const Matrix vr = ops.W_eig.vectors.leftCols(ops.rank);
    ops.P_sig = vr * vr.transpose();
    ops.P_res = Matrix::Identity(np, np) - ops.P_sig;

    ops.C_S = ops.D * ops.W_pinv_sqrt;
    ops.C_Q = ops.G * ops.W_pinv_sqrt;
    const Matrix cs_pinv = pinv(ops.C_S, opt.rank_tol);
    ops.A_opt = ops.C_Q * cs_pinv;
    ops.R_perp = ops.C_Q * (Matrix::Identity(np, np) - cs_pinv * ops.C_S);
    ops.Gamma_Q = symmetrize(ops.W_pinv_sqrt * ops.G.transpose() * ops.G * ops.W_pinv_sqrt);

    const auto& k0 = oracle.at(ops.s);
    ops.mobility = sym_eig(k0.j_s * k0.j_s.transpose() / static_cast<double>(traj.n())).values;
    return ops;
}

/// |g(s)^T W g(s) - (Phi_S(u(s)) - Phi_S(u(T)))|.
inline double dissipation_identity_check(const TrainingTrajectory& traj, const WindowOperators& ops) {
    if (ops.s == ops.T) return 0.0;
    const auto i0 = traj.index_of(ops.s), i1 = traj.index_of(ops.T);
    const Vector& g = traj.gradients[i0];
    return std::abs(g.dot(ops.W * g) - (traj.losses[i0] - traj.losses[i1]));
}

/// Recorded U_Q(w(T)) - U_Q(w(s)).
inline Vector recorded_test_displacement(const TrainingTrajectory& traj, const Dataset& test, double s, double T) {
    const auto i0 = traj.index_of(s), i1 = traj.index_of(T);
    return forward_stacked(traj.model_at_index(i1), test) - forward_stacked(traj.model_at_index(i0), test);
}

inline Vector recorded_train_displacement(const TrainingTrajectory& traj, double s, double T) {
    return traj.outputs[traj.index_of(T)] - traj.outputs[traj.index_of(s)];
}

/// A_opt applied to a training displacement.
inline Vector predict_test_displacement(const WindowOperators& ops, const Vector& train_disp) {
    require(train_disp.size() == ops.A_opt.cols(), "predict_test_displacement: length mismatch");
    return ops.A_opt * train_disp;
}

struct FourCellDecomposition {
    Vector bias;
    Vector reservoir;
    Vector signal;
    Vector target;   // U_Q(T) - f*(Q)
    double residual = 0.0;
};

/// Bias, reservoir-noise and signal-channel-noise terms of U_Q(T) - f*(Q).
inline FourCellDecomposition four_cell_decomposition(const TrainingTrajectory& traj, const WindowOperators& ops,
                                                     const Dataset& data, const Dataset& test) {
    require(traj.constant_hessian(), "four_cell_decomposition: needs unweighted squared loss");
    require(data.noise.has_value(), "four_cell_decomposition: dataset has no noise record");
    const auto i0 = traj.index_of(ops.s), i1 = traj.index_of(ops.T);
    const double n = static_cast<double>(data.size());
    const Vector eps = stack_rows(*data.noise);
    const Vector f_s = stack_rows(data.clean_targets());
    const Vector f_q = stack_rows(test.noise ? test.clean_targets() : test.targets);
    const Vector uq_s = forward_stacked(traj.model_at_index(i0), test);
    const Vector uq_t = forward_stacked(traj.model_at_index(i1), test);

    FourCellDecomposition out;
    out.bias = uq_s + ops.A_opt * (ops.D * (f_s - traj.outputs[i0])) / n - f_q;
    out.reservoir = ops.G * (ops.P_res * eps) / n;
    out.signal = ops.G * (ops.P_sig * eps) / n;
    out.target = uq_t - f_q;
    out.residual = (out.bias + out.reservoir + out.signal - out.target).norm();
    return out;
}

// ---------------------------------------------------------------------------
// Matrix-free dual solves. Only Jacobian-vector products are formed.

namespace detail {

inline Vector apply_b_vec(const KernelOracle::Sample& k, const Vector& v) {
    return k.b.size() == 0 ? Vector(k.b_scale * v) : Vector(k.b * v);
}
inline Vector apply_k(const KernelOracle::Sample& k, const Vector& v) { return k.j_s * (k.j_s.transpose() * v); }
/// A^T v with A = B K.
inline Vector apply_a_transpose(const KernelOracle::Sample& k, const Vector& v) { return apply_k(k, apply_b_vec(k, v)); }

/// Integrates dq/dtau = A^T q - source(tau) backwards from q(T) = 0 and returns q(s).
template <class Source>
Vector backward_solve(const TrainingTrajectory& traj, KernelOracle& oracle, std::size_t i0, std::size_t i1, int substeps,
                      Eigen::Index dim, Source&& source) {
    const double h = grid_step(traj) / substeps;
    const double t_end = traj.times[i1];
    // r = T - tau runs forward; dq/dr = -A^T q + source
    auto f = [&](double r, const Vector& q) -> Vector {
        const double tau = t_end - r;
        const auto& k = oracle.at(tau);
        return -apply_a_transpose(k, q) + source(tau, k);
    };
    Vector q = Vector::Zero(dim);
    const std::size_t steps = (i1 - i0) * static_cast<std::size_t>(substeps);
    for (std::size_t k = 0; k < steps; ++k) q = rk4_step(f, static_cast<double>(k) * h, q, h);
    return q;
}

}  // namespace detail

/// W h via one forward solve for z = P h and one backward solve with source K z.
inline Vector dual_solve_W(const TrainingTrajectory& traj, const Vector& h, double s, double T, int substeps = 1) {
    const auto [i0, i1] = detail::window_indices(traj, s, T);
    const Eigen::Index np = traj.n() * traj.p();
    require(h.size() == np, "dual_solve_W: vector length mismatch");
    require(substeps >= 1, "dual_solve_W: substeps must be >= 1");
    if (i0 == i1) return Vector::Zero(np);
    KernelOracle oracle(traj, nullptr);
    // forward pass on the half-step grid so every backward stage time has z
    const double hh = 0.5 * detail::grid_step(traj) / substeps;
    const std::size_t half_steps = 2 * (i1 - i0) * static_cast<std::size_t>(substeps);
    std::vector<Vector> z;
    z.reserve(half_steps + 1);
    z.push_back(h);
    auto fwd = [&](double tau, const Vector& x) -> Vector {
        const auto& k = oracle.at(tau);
        return -detail::apply_b_vec(k, detail::apply_k(k, x));
    };
    for (std::size_t k = 0; k < half_steps; ++k) z.push_back(rk4_step(fwd, traj.times[i0] + k * hh, z.back(), hh));
    KernelOracle back(traj, nullptr);
    return detail::backward_solve(traj, back, i0, i1, substeps, np,
                                  [&](double tau, const KernelOracle::Sample& k) -> Vector {
                                      const auto idx = static_cast<std::size_t>(std::llround((tau - traj.times[i0]) / hh));
                                      return detail::apply_k(k, z[idx]);
                                  });
}

/// G^T xi, xi a test-output covector.
inline Vector dual_solve_G_adjoint(const TrainingTrajectory& traj, const Dataset& test, const Vector& xi, double s,
                                   double T, int substeps = 1) {
    const auto [i0, i1] = detail::window_indices(traj, s, T);
    const Eigen::Index np = traj.n() * traj.p();
    require(xi.size() == test.size() * test.output_dim(), "dual_solve_G_adjoint: covector length mismatch");
    if (i0 == i1) return Vector::Zero(np);
    KernelOracle oracle(traj, &test);
    return detail::backward_solve(traj, oracle, i0, i1, substeps, np,
                                  [&](double, const KernelOracle::Sample& k) -> Vector {
                                      return k.j_s * (k.j_q.transpose() * xi);
                                  });
}

/// D^T eta.
inline Vector dual_solve_D_adjoint(const TrainingTrajectory& traj, const Vector& eta, double s, double T,
                                   int substeps = 1) {
    const auto [i0, i1] = detail::window_indices(traj, s, T);
    const Eigen::Index np = traj.n() * traj.p();
    require(eta.size() == np, "dual_solve_D_adjoint: vector length mismatch");
    if (i0 == i1) return Vector::Zero(np);
    KernelOracle oracle(traj, nullptr);
    return detail::backward_solve(traj, oracle, i0, i1, substeps, np,
                                  [&](double, const KernelOracle::Sample& k) -> Vector { return detail::apply_k(k, eta); });
}

/// Summary used by the CLI emitters.
inline nlohmann::json operators_to_json(const WindowOperators& ops) {
    nlohmann::json j;
    j["window"] = {ops.s, ops.T};
    j["rank_tol"] = ops.rank_tol;
    j["rank"] = ops.rank;
    j["W_spectrum"] = std::vector<double>(ops.W_eig.values.data(), ops.W_eig.values.data() + ops.W_eig.values.size());
    j["mobility_spectrum"] = std::vector<double>(ops.mobility.data(), ops.mobility.data() + ops.mobility.size());
    j["gamma_norm"] = ops.gamma_norm();
    j["R_perp_norm"] = op_norm(ops.R_perp);
    j["C_Q_norm"] = op_norm(ops.C_Q);
    j["G_reservoir_frobenius"] = (ops.G * ops.P_res).norm();
    return j;
}

}  // namespace poprisk
