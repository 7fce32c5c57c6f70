#pragma once

// Self-influence and run diagnostics: backward sensitivity solves and the
// influence matrix, the centered-trace gap estimator, holdout directions,
// replace-one stability, signal directions under a complexity metric,
// SGD drift/diffusion, and cross-validation risks.

#include "poprisk/pathwise_operators.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <functional>
#include <numeric>
#include <vector>

namespace poprisk {

// ---------------------------------------------------------------------------
// Backward sensitivity.

namespace detail {

/// Dense loss Hessian (plus weight decay) and weighted per-example gradients
/// at interpolated times, cached over the stage times of one RK4 step.
class HessianOracle {
public:
    struct Sample {
        double t = 0.0;
        Matrix H;      // d x d
        Matrix grads;  // n x d, rows c_j grad l_j
    };

    explicit HessianOracle(const TrainingTrajectory& traj) : traj_(traj) {
        require(traj.kind == TrajectoryKind::gradient_flow, "backward sensitivity needs a gradient-flow trajectory");
        require(traj.model.num_weights() <= kDenseHessianCap, "backward sensitivity: d exceeds dense Hessian cap");
    }

    const Sample& at(double t) {
        for (auto& s : cache_)
            if (s.valid && s.sample.t == t) return s.sample;
        Slot& slot = cache_[next_];
        next_ = (next_ + 1) % cache_.size();
        const Model m = traj_.model_at(t);
        slot.sample.t = t;
        slot.sample.H = loss_hessian(m, traj_.data, traj_.loss, traj_.weights_ptr());
        if (traj_.weight_decay != 0.0) slot.sample.H.diagonal().array() += traj_.weight_decay;
        slot.sample.grads = per_example_gradients(m, traj_.data, traj_.loss);
        if (traj_.example_weights) slot.sample.grads = traj_.example_weights->asDiagonal() * slot.sample.grads;
        slot.valid = true;
        return slot.sample;
    }

private:
    struct Slot {
        bool valid = false;
        Sample sample;
    };
    const TrainingTrajectory& traj_;
    std::array<Slot, 3> cache_{};
    std::size_t next_ = 0;
};

struct AdjointSolution {
    std::vector<Matrix> path;  // p(t_k), d x m, on the grid from 0 to T
    Matrix pairing;            // n x m: (1/n) int <grad l_j, p_i> dtau
};

/// Integrates dp/dtau = H p backward from p(T) = pT while accumulating the
/// pairing with per-example gradients, in reversed time r = T - tau.
inline AdjointSolution solve_adjoint(const TrainingTrajectory& traj, const Matrix& pT, int substeps,
                                     bool keep_path) {
    require(substeps >= 1, "adjoint: substeps must be >= 1");
    const Eigen::Index d = traj.model.num_weights(), n = traj.n(), m = pT.cols();
    require(pT.rows() == d, "adjoint: terminal condition has wrong dimension");
    HessianOracle oracle(traj);
    const double T = traj.horizon();
    const double inv_n = 1.0 / static_cast<double>(n);
    auto f = [&](double r, const Matrix& x) -> Matrix {
        const auto& s = oracle.at(T - r);
        const auto p = x.topRows(d);
        Matrix out(d + n, m);
        out.topRows(d) = -s.H * p;
        out.bottomRows(n) = inv_n * (s.grads * p);
        return out;
    };
    Matrix x = Matrix::Zero(d + n, m);
    x.topRows(d) = pT;
    AdjointSolution sol;
    std::vector<Matrix> reversed;
    if (keep_path) reversed.push_back(pT);
    const std::size_t K = traj.size() - 1;
    const double h = K > 0 ? (traj.times[1] - traj.times[0]) / substeps : 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const double r0 = T - traj.times[K - k];
        for (int j = 0; j < substeps; ++j) x = rk4_step(f, r0 + j * h, x, h);
        if (keep_path) reversed.push_back(x.topRows(d));
    }
    if (keep_path) sol.path.assign(reversed.rbegin(), reversed.rend());
    sol.pairing = x.bottomRows(n);
    return sol;
}

}  // namespace detail

struct AdjointPath {
    std::vector<double> times;
    std::vector<Vector> p;
};

/// p_i on the trajectory grid: dp/dtau = Hess L_S(w(tau)) p, backward from
/// p(T) = J_i(w(T))^T grad psi(e_i(T)).
inline AdjointPath backward_sensitivity(const TrainingTrajectory& traj, Eigen::Index i, const Loss& psi,
                                        int substeps = 1) {
    require(i >= 0 && i < traj.n(), "backward_sensitivity: index out of range");
    const std::size_t one[1] = {static_cast<std::size_t>(i)};
    const Dataset zi = traj.data.subset(one);
    const Matrix pT = per_example_gradients(traj.model.with_weights(traj.weights.back()), zi, psi).transpose();
    const auto sol = detail::solve_adjoint(traj, pT, substeps, true);
    AdjointPath out;
    out.times = traj.times;
    for (const auto& m : sol.path) out.p.push_back(m.col(0));
    return out;
}

struct InfluenceMatrix {
    Matrix J;  // J(i,j): d/dlambda of psi_i under downweighting example j
    double T = 0.0;
    Loss psi;

    Eigen::Index n() const { return J.rows(); }
    Vector diagonal() const { return J.diagonal(); }
};

/// All n backward solves at once, with the time integral against per-example
/// gradients carried as extra RK4 state.
inline InfluenceMatrix influence_matrix(const TrainingTrajectory& traj, const Loss& psi, int substeps = 1) {
    const Matrix pT = per_example_gradients(traj.model.with_weights(traj.weights.back()), traj.data, psi).transpose();
    const auto sol = detail::solve_adjoint(traj, pT, substeps, false);
    InfluenceMatrix out;
    out.J = sol.pairing.transpose();
    out.T = traj.horizon();
    out.psi = psi;
    return out;
}

inline InfluenceMatrix influence_matrix(const TrainingTrajectory& traj, int substeps = 1) {
    return influence_matrix(traj, traj.loss, substeps);
}

/// Sensitivity of psi(U_Q(w(T))) = sum_q psi_q under weights 1 - lambda nu,
/// by one backward solve.
inline double reweighting_sensitivity_adjoint(const TrainingTrajectory& traj, const Dataset& test, const Loss& psi,
                                              const Vector& nu, int substeps = 1) {
    require(nu.size() == traj.n(), "reweighting_sensitivity: nu must have length n");
    const Matrix g = per_example_gradients(traj.model.with_weights(traj.weights.back()), test, psi);
    const Vector pT = g.colwise().sum().transpose();
    const auto sol = detail::solve_adjoint(traj, pT, substeps, false);
    return nu.dot(sol.pairing.col(0));
}

/// Same quantity by the forward sensitivity v' = -H v + (1/n) sum nu_j grad l_j.
inline double reweighting_sensitivity_forward(const TrainingTrajectory& traj, const Dataset& test, const Loss& psi,
                                              const Vector& nu, int substeps = 1) {
    require(nu.size() == traj.n(), "reweighting_sensitivity: nu must have length n");
    require(substeps >= 1, "reweighting_sensitivity: substeps must be >= 1");
    detail::HessianOracle oracle(traj);
    const double inv_n = 1.0 / static_cast<double>(traj.n());
    auto f = [&](double tau, const Vector& v) -> Vector {
        const auto& s = oracle.at(tau);
        return -s.H * v + inv_n * (s.grads.transpose() * nu);
    };
    Vector v = Vector::Zero(traj.model.num_weights());
    const std::size_t K = traj.size() - 1;
    const double h = K > 0 ? (traj.times[1] - traj.times[0]) / substeps : 0.0;
    for (std::size_t k = 0; k < K; ++k)
        for (int j = 0; j < substeps; ++j) v = rk4_step(f, traj.times[k] + j * h, v, h);
    const Matrix g = per_example_gradients(traj.model.with_weights(traj.weights.back()), test, psi);
    return g.colwise().sum().dot(v.transpose());
}

// ---------------------------------------------------------------------------
// Centered trace and holdout directions.

struct CenteringProjector {
    Eigen::Index n = 0;

    Vector apply(const Vector& v) const {
        require(v.size() == n, "CenteringProjector: dimension mismatch");
        return (v.array() - v.mean()).matrix();
    }
    Matrix matrix() const {
        return Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
    }
};

struct GapEstimate {
    double value = 0.0;   // (1/(n-1)) tr(J C_n)
    Vector contributions;  // (1/(n-1)) (J C_n)_ii
};

inline GapEstimate gap_estimator(const Matrix& J) {
    require(J.rows() == J.cols() && J.rows() >= 2, "gap_estimator: need square J with n >= 2");
    const double n = static_cast<double>(J.rows());
    GapEstimate out;
    out.contributions = (J.diagonal() - J.rowwise().mean()) / (n - 1.0);
    out.value = out.contributions.sum();
    return out;
}

inline GapEstimate gap_estimator(const InfluenceMatrix& J) { return gap_estimator(J.J); }

/// nu^(i) = (n/(n-1)) C_n e_i, the same for every holdout size k.
inline Vector common_first_variation(Eigen::Index n, Eigen::Index i, Eigen::Index k) {
    require(n >= 2, "common_first_variation: need n >= 2");
    require(i >= 0 && i < n, "common_first_variation: index out of range");
    require(k >= 1 && k <= n - 1, "common_first_variation: need 1 <= k <= n-1");
    Vector e = Vector::Unit(n, i);
    return static_cast<double>(n) / static_cast<double>(n - 1) * CenteringProjector{n}.apply(e);
}

/// Average of 1 - alpha^(-I) over all size-k holdouts I containing i, where
/// alpha^(-I) puts n/(n-k) on the kept points.
inline Vector holdout_direction_average(Eigen::Index n, Eigen::Index i, Eigen::Index k) {
    require(n >= 2 && n <= 20, "holdout_direction_average: need 2 <= n <= 20");
    require(i >= 0 && i < n && k >= 1 && k <= n - 1, "holdout_direction_average: invalid i or k");
    const double keep = static_cast<double>(n) / static_cast<double>(n - k);
    Vector acc = Vector::Zero(n);
    double count = 0.0;
    for_each_subset(static_cast<std::size_t>(n), static_cast<std::size_t>(k), [&](const std::vector<std::size_t>& I) {
        if (std::find(I.begin(), I.end(), static_cast<std::size_t>(i)) == I.end()) return;
        Vector alpha = Vector::Constant(n, keep);
        for (auto j : I) alpha(static_cast<Eigen::Index>(j)) = 0.0;
        acc += Vector::Ones(n) - alpha;
        count += 1.0;
    });
    return acc / count;
}

// ---------------------------------------------------------------------------
// Replace-one stability.

struct ReplaceOneReport {
    Vector recorded;       // U_Q^S(T) - U_Q^{S'}(T)
    Vector initial_term;   // -G^(i) delta_i
    Vector drift_term;     // -(G_S - G_S') g_S'(0)
    Vector delta;          // block i of g_S(0) - g_S'(0)
    double residual = 0.0; // |recorded - initial - drift|
    double bound = 0.0;    // |G^(i)| |delta| + |G_S - G_S'| |g_S'(0)|
    double initial_norm = 0.0, operator_drift_norm = 0.0;
};

inline ReplaceOneReport replace_one_displacement(const TrainingTrajectory& S, const TrainingTrajectory& S2,
                                                 const Dataset& test, Eigen::Index i,
                                                 const OperatorOptions& opt = {}) {
    require(S.n() == S2.n() && S.p() == S2.p(), "replace_one: datasets must have the same shape");
    require(i >= 0 && i < S.n(), "replace_one: index out of range");
    require(S.model.weights() == S2.model.weights(), "replace_one: trajectories must share w0");
    require(std::abs(S.horizon() - S2.horizon()) <= 1e-12 * std::max(1.0, S.horizon()) && S.size() == S2.size(),
            "replace_one: trajectories must share the time grid");
    for (Eigen::Index a = 0; a < S.n(); ++a) {
        if (a == i) continue;
        require(S.data.inputs.row(a) == S2.data.inputs.row(a) && S.data.targets.row(a) == S2.data.targets.row(a),
                "replace_one: datasets differ at an index other than i");
    }
    const double T = S.horizon();
    const auto opsS = window_operators(S, test, 0.0, T, opt);
    const auto opsS2 = window_operators(S2, test, 0.0, T, opt);
    const auto p = S.p();
    ReplaceOneReport out;
    const Vector dg = S.gradients.front() - S2.gradients.front();
    out.delta = dg.segment(i * p, p);
    const Matrix Gi = opsS.G.middleCols(i * p, p);
    const Matrix dG = opsS.G - opsS2.G;
    out.initial_term = -Gi * out.delta;
    out.drift_term = -dG * S2.gradients.front();
    out.recorded = forward_stacked(S.model.with_weights(S.weights.back()), test) -
                   forward_stacked(S2.model.with_weights(S2.weights.back()), test);
    out.residual = (out.recorded - out.initial_term - out.drift_term).norm();
    out.initial_norm = op_norm(Gi) * out.delta.norm();
    out.operator_drift_norm = op_norm(dG) * S2.gradients.front().norm();
    out.bound = out.initial_norm + out.operator_drift_norm;
    return out;
}

/// Per-grid-point |Pi grad l(w_k(S), z_i) - Pi grad l(w_k(S^(ij)), z_i)| for
/// two runs whose datasets differ at i and j; Pi acts on parameter space.
inline std::vector<double> replace_two_defect(const TrainingTrajectory& S, const TrainingTrajectory& Sij,
                                              Eigen::Index i, const Matrix& Pi) {
    require(S.size() == Sij.size(), "replace_two_defect: trajectories must share the grid");
    require(Pi.rows() == Pi.cols() && Pi.cols() == S.model.num_weights(), "replace_two_defect: projector dimension");
    const std::size_t one[1] = {static_cast<std::size_t>(i)};
    const Dataset zi = S.data.subset(one);
    std::vector<double> out;
    for (std::size_t k = 0; k < S.size(); ++k) {
        const Vector a = per_example_gradients(S.model_at_index(k), zi, S.loss).row(0).transpose();
        const Vector b = per_example_gradients(Sij.model_at_index(k), zi, S.loss).row(0).transpose();
        out.push_back((Pi * (a - b)).norm());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Signal directions under a complexity metric.

/// Unnormalized symmetric k-NN graph Laplacian with Gaussian weights; the
/// bandwidth is the median pairwise distance.
inline Matrix knn_graph_laplacian(const Matrix& inputs, int k = 5) {
    const auto n = inputs.rows();
    require(n >= 2, "knn_graph_laplacian: need n >= 2");
    require(k >= 1, "knn_graph_laplacian: need k >= 1");
    Matrix dist(n, n);
    std::vector<double> all;
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b) {
            dist(a, b) = (inputs.row(a) - inputs.row(b)).norm();
            if (a < b) all.push_back(dist(a, b));
        }
    std::nth_element(all.begin(), all.begin() + all.size() / 2, all.end());
    double bw = all[all.size() / 2];
    if (all.size() % 2 == 0) {
        const double lower = *std::max_element(all.begin(), all.begin() + all.size() / 2);
        bw = 0.5 * (bw + lower);
    }
    if (bw <= 0.0) bw = 1.0;
    Matrix w = Matrix::Zero(n, n);
    const Eigen::Index kk = std::min<Eigen::Index>(k, n - 1);
    for (Eigen::Index a = 0; a < n; ++a) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index b = 0; b < n; ++b)
            if (b != a) idx.push_back(b);
        std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return dist(a, x) < dist(a, y); });
        for (Eigen::Index j = 0; j < kk; ++j) {
            const auto b = idx[static_cast<std::size_t>(j)];
            const double v = std::exp(-dist(a, b) * dist(a, b) / (2.0 * bw * bw));
            w(a, b) = std::max(w(a, b), v);
            w(b, a) = w(a, b);
        }
    }
    Matrix lap = -w;
    lap.diagonal() = w.rowwise().sum();
    return lap;
}

/// R = I + gamma (L kron I_p) on stacked outputs.
inline Matrix complexity_metric(const Dataset& data, double gamma, int k = 5) {
    require(gamma >= 0.0, "complexity_metric: gamma must be >= 0");
    const Matrix lap = knn_graph_laplacian(data.inputs, k);
    const auto n = data.size(), p = data.output_dim();
    Matrix r = Matrix::Identity(n * p, n * p);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
            for (Eigen::Index o = 0; o < p; ++o) r(a * p + o, b * p + o) += gamma * lap(a, b);
    return r;
}

namespace detail {

inline void require_psd_metric(const Matrix& R) {
    require(R.rows() == R.cols(), "signal_spectrum: metric must be square");
    const auto eig = sym_eig(R, 1e-8);
    require(eig.values.minCoeff() >= -1e-8 * std::max(1.0, eig.values.cwiseAbs().maxCoeff()),
            "signal_spectrum: metric is not PSD");
}

}  // namespace detail

struct SignalSpectrum {
    Matrix R;  // regularized metric
    Matrix R_sqrt, R_inv_sqrt;
    Matrix C_R;
    SpectralDecomposition eig;  // descending
    Eigen::Index rank = 0;
    double gamma_norm = 0.0;

    /// lambda_{r+1}, zero once r reaches the rank.
    double tail(Eigen::Index r) const { return r < rank ? eig.values(r) : 0.0; }
    double optimal_value(Eigen::Index r) const { return gamma_norm * tail(r); }

    Matrix projector(Eigen::Index r) const {
        require(r >= 0 && r <= eig.values.size(), "SignalSpectrum: rank out of range");
        const Matrix v = eig.vectors.leftCols(r);
        return v * v.transpose();
    }
    /// Pi_r = R^{-1/2} Q_r R^{1/2}.
    Matrix r_projector(Eigen::Index r) const { return R_inv_sqrt * projector(r) * R_sqrt; }
};

inline SignalSpectrum signal_spectrum(const WindowOperators& ops, const Matrix& R, double rank_tol = kDefaultRankTol) {
    require(R.rows() == ops.W.rows() && R.cols() == ops.W.cols(), "signal_spectrum: metric dimension mismatch");
    detail::require_psd_metric(R);
    SignalSpectrum out;
    out.R = symmetrize(R) + 1e-10 * Matrix::Identity(R.rows(), R.cols());
    const auto re = sym_eig(out.R);
    out.R_sqrt = re.vectors * re.values.cwiseSqrt().asDiagonal() * re.vectors.transpose();
    out.R_inv_sqrt = re.vectors * re.values.cwiseSqrt().cwiseInverse().asDiagonal() * re.vectors.transpose();
    out.C_R = symmetrize(out.R_inv_sqrt * ops.W * out.R_inv_sqrt);
    out.eig = sym_eig(out.C_R);
    out.rank = retained_rank(out.eig.values, rank_tol);
    out.gamma_norm = ops.gamma_norm();
    return out;
}

struct TailCheck {
    double lhs = 0.0;  // |G (I - Pi_r) h|^2
    double rhs = 0.0;  // |Gamma_Q| lambda_{r+1} h^T R (I - Pi_r) h
};

inline TailCheck tail_bound_check(const WindowOperators& ops, const SignalSpectrum& sp, Eigen::Index r,
                                  const Vector& h) {
    const Matrix I = Matrix::Identity(sp.R.rows(), sp.R.cols());
    const Matrix rest = I - sp.r_projector(r);
    TailCheck out;
    out.lhs = (ops.G * (rest * h)).squaredNorm();
    out.rhs = sp.optimal_value(r) * h.dot(sp.R * (rest * h));
    return out;
}

// ---------------------------------------------------------------------------
// SGD drift and diffusion.

struct SgdOptions {
    Loss loss;
    double eta = 1e-2;
    long steps = 100;
    long batch_size = 1;
    std::uint64_t seed = 0;
    std::optional<Matrix> M;  // preconditioner, identity when absent
};

/// Discrete SGD run with the per-step records drift/diffusion needs: the
/// conditional mean mu_k (full-data gradient, batches drawn fresh each step
/// without replacement) and the fluctuation xi_k = g_hat_k - mu_k.
struct SgdRun {
    Model model;  // w0
    Dataset test;
    double eta = 0.0;
    long batch_size = 0;
    std::vector<Vector> weights;   // w_0 .. w_N
    std::vector<Vector> mu, xi;    // per step
    std::vector<Vector> drift_inc, diff_inc;  // -eta L_{Q,k} mu_k, -eta L_{Q,k} xi_k
    std::vector<Vector> test_outputs;         // U_Q(w_k)

    long steps() const { return static_cast<long>(mu.size()); }
};

inline SgdRun record_sgd(const Model& model, const Dataset& data, const Dataset& test, const SgdOptions& opt) {
    const long n = static_cast<long>(data.size());
    require(opt.batch_size >= 1 && opt.batch_size <= n, "record_sgd: need 1 <= batch_size <= n");
    require(opt.steps >= 0 && opt.eta > 0.0, "record_sgd: need steps >= 0 and eta > 0");
    const int d = model.num_weights();
    require(!opt.M || (opt.M->rows() == d && opt.M->cols() == d), "record_sgd: preconditioner dimension mismatch");
    SgdRun run{model, test, opt.eta, opt.batch_size, {}, {}, {}, {}, {}, {}};
    Rng rng(opt.seed);
    Vector w = model.weights();
    run.weights.push_back(w);
    run.test_outputs.push_back(forward_stacked(model, test));
    for (long k = 0; k < opt.steps; ++k) {
        const Model mk = model.with_weights(w);
        const Vector mu = mean_loss_gradient(mk, data, opt.loss).gradient;
        const auto batch = rng.sample_without_replacement(static_cast<std::size_t>(n),
                                                          static_cast<std::size_t>(opt.batch_size));
        const Vector g = mean_loss_gradient(mk, data, opt.loss, batch).gradient;
        const Vector xi = g - mu;
        Matrix L = jacobian_stacked(mk, test);
        if (opt.M) L = L * *opt.M;
        run.drift_inc.push_back(-opt.eta * (L * mu));
        run.diff_inc.push_back(-opt.eta * (L * xi));
        run.mu.push_back(mu);
        run.xi.push_back(xi);
        w = w - opt.eta * (opt.M ? Vector(*opt.M * g) : g);
        run.weights.push_back(w);
        run.test_outputs.push_back(forward_stacked(model.with_weights(w), test));
    }
    return run;
}

struct DriftDiffusionReport {
    Vector displacement;  // U_Q(w_N) - U_Q(w_0)
    Vector drift, diffusion, remainder;
    std::vector<double> step_remainder;  // |per-step remainder|
    double remainder_factor = 0.0;        // (1/2) sum |w_{k+1} - w_k|^2, times beta_Q bounds |remainder|
    double identity_residual = 0.0;       // |drift + diffusion + remainder - displacement|
};

inline DriftDiffusionReport drift_diffusion(const SgdRun& run) {
    const auto N = static_cast<std::size_t>(run.steps());
    require(run.drift_inc.size() == N && run.diff_inc.size() == N && run.xi.size() == N &&
                run.weights.size() == N + 1 && run.test_outputs.size() == N + 1,
            "drift_diffusion: missing per-step records");
    DriftDiffusionReport out;
    const auto m = run.test_outputs.front().size();
    out.displacement = run.test_outputs.back() - run.test_outputs.front();
    out.drift = Vector::Zero(m);
    out.diffusion = Vector::Zero(m);
    out.remainder = Vector::Zero(m);
    for (std::size_t k = 0; k < N; ++k) {
        const Vector step = run.test_outputs[k + 1] - run.test_outputs[k];
        const Vector rk = step - run.drift_inc[k] - run.diff_inc[k];
        out.drift += run.drift_inc[k];
        out.diffusion += run.diff_inc[k];
        out.remainder += rk;
        out.step_remainder.push_back(rk.norm());
        out.remainder_factor += 0.5 * (run.weights[k + 1] - run.weights[k]).squaredNorm();
    }
    out.identity_residual = (out.drift + out.diffusion + out.remainder - out.displacement).norm();
    return out;
}

struct ScalingFit {
    LinearFit drift, diffusion;  // log-log fits
    double drift_ci = 0.0, diffusion_ci = 0.0;  // 95% half-widths on the slopes
};

/// Slopes of log mean |drift| and log RMS |diffusion| against log x, from
/// reports grouped by abscissa (one vector of per-seed reports per x).
inline ScalingFit fit_drift_diffusion_scaling(const std::vector<double>& x,
                                              const std::vector<std::vector<DriftDiffusionReport>>& reports) {
    require(x.size() == reports.size() && x.size() >= 2, "fit_drift_diffusion_scaling: need >= 2 abscissae");
    std::vector<double> lx, ld, lf;
    for (std::size_t a = 0; a < x.size(); ++a) {
        require(x[a] > 0.0 && !reports[a].empty(), "fit_drift_diffusion_scaling: invalid group");
        double dm = 0.0, fm = 0.0;
        for (const auto& r : reports[a]) {
            dm += r.drift.norm();
            fm += r.diffusion.squaredNorm();
        }
        const double s = static_cast<double>(reports[a].size());
        lx.push_back(std::log(x[a]));
        ld.push_back(std::log(dm / s));
        lf.push_back(0.5 * std::log(fm / s));
    }
    ScalingFit out;
    out.drift = fit_line(lx, ld);
    out.diffusion = fit_line(lx, lf);
    out.drift_ci = 1.96 * out.drift.slope_stderr;
    out.diffusion_ci = 1.96 * out.diffusion.slope_stderr;
    return out;
}

inline nlohmann::json drift_diffusion_to_json(const DriftDiffusionReport& r) {
    return {{"drift_norm", r.drift.norm()},
            {"diffusion_norm", r.diffusion.norm()},
            {"remainder_norm", r.remainder.norm()},
            {"displacement_norm", r.displacement.norm()},
            {"remainder_factor", r.remainder_factor},
            {"identity_residual", r.identity_residual}};
}

inline nlohmann::json scaling_to_json(const ScalingFit& f) {
    return {{"drift_slope", f.drift.slope},
            {"drift_slope_ci95", {f.drift.slope - f.drift_ci, f.drift.slope + f.drift_ci}},
            {"drift_r_squared", f.drift.r_squared},
            {"diffusion_slope", f.diffusion.slope},
            {"diffusion_slope_ci95", {f.diffusion.slope - f.diffusion_ci, f.diffusion.slope + f.diffusion_ci}},
            {"diffusion_r_squared", f.diffusion.r_squared}};
}

// ---------------------------------------------------------------------------
// Cross-validation risks.

using ModelFactory = std::function<Model(const Dataset& train)>;

namespace detail {

inline double holdout_loss(const ModelFactory& factory, const Dataset& data, const Loss& psi,
                           const std::vector<std::size_t>& held) {
    std::vector<std::size_t> keep;
    for (std::size_t a = 0; a < static_cast<std::size_t>(data.size()); ++a)
        if (std::find(held.begin(), held.end(), a) == held.end()) keep.push_back(a);
    const Model m = factory(data.subset(keep));
    return per_example_losses(m, data.subset(held), psi).sum();
}

}  // namespace detail

/// k = 1: leave-one-out by enumeration; k > 1: K-fold over the contiguous
/// partition into n/k folds (k must divide n).
inline double cv_risk(const ModelFactory& factory, const Dataset& data, const Loss& psi, Eigen::Index k) {
    const auto n = data.size();
    require(n >= 2 && n <= 24, "cv_risk: need 2 <= n <= 24");
    require(k >= 1 && k <= n - 1, "cv_risk: need 1 <= k <= n-1");
    require(k == 1 || n % k == 0, "cv_risk: k must divide n for K-fold");
    double acc = 0.0;
    for (Eigen::Index start = 0; start < n; start += k) {
        std::vector<std::size_t> held;
        for (Eigen::Index a = start; a < start + k; ++a) held.push_back(static_cast<std::size_t>(a));
        acc += detail::holdout_loss(factory, data, psi, held);
    }
    return acc / static_cast<double>(n);
}

/// The k-holdout risk averaged over all C(n,k) holdout sets.
inline double cv_risk_exhaustive(const ModelFactory& factory, const Dataset& data, const Loss& psi, Eigen::Index k) {
    const auto n = data.size();
    require(n >= 2 && n <= 12, "cv_risk_exhaustive: need 2 <= n <= 12");
    require(k >= 1 && k <= n - 1, "cv_risk_exhaustive: need 1 <= k <= n-1");
    double acc = 0.0, count = 0.0;
    for_each_subset(static_cast<std::size_t>(n), static_cast<std::size_t>(k), [&](const std::vector<std::size_t>& I) {
        acc += detail::holdout_loss(factory, data, psi, I) / static_cast<double>(k);
        count += 1.0;
    });
    return acc / count;
}

}  // namespace poprisk
