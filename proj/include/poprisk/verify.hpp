#pragma once

// Property and oracle suites shared by `poprisk-lab verify` and the acceptance
// binary. Each function returns one Check per assertion.

#include "poprisk/experiments.hpp"

namespace poprisk::verify {

namespace detail {

using poprisk::detail::check;
using poprisk::detail::fmt;

inline Check within(const std::string& name, double value, double tol) {
    return check(name, std::isfinite(value) && value <= tol, fmt(value) + " <= " + fmt(tol));
}

/// Folds many measurements of one property into a single check on the worst ratio value/tol.
struct Worst {
    std::string name;
    double ratio = 0.0;
    std::string where;
    bool finite = true;

    void add(double value, double tol, const std::string& at) {
        if (!std::isfinite(value)) finite = false;
        const double r = value / tol;
        if (where.empty() || !(r <= ratio)) {
            ratio = r;
            where = at + ": " + fmt(value) + " vs " + fmt(tol);
        }
    }
    Check result() const { return check(name, finite && ratio <= 1.0, where.empty() ? "no cases" : "worst " + where); }
};

inline Matrix kernel_of(const Matrix& x) { return x * x.transpose(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Pathwise operators on random small problems.

inline std::vector<Check> operator_identities(int problems = 20) {
    using detail::Worst;
    Worst invis{"operators/reservoir-invisibility"}, dissip{"operators/dissipation-identity"},
        coupling{"operators/squared-loss-coupling"}, recomp{"operators/four-cell-recomposition"},
        reservoir{"operators/four-cell-reservoir-cell"}, dual{"operators/dense-vs-matrix-free-dual"};
    long kernel_dirs = 0;
    Rng pick(2024);
    for (int k = 0; k < problems; ++k) {
        const bool linear = k % 2 == 0;
        GeneratorConfig g;
        g.kind = linear ? GeneratorKind::linear_gaussian : GeneratorKind::noisy_teacher;
        g.n = 6 + static_cast<int>(pick.index(6));  // 6..11, one more with the duplicate
        g.output_dim = 1 + static_cast<int>(pick.index(2));
        g.input_dim = linear ? 2 + static_cast<int>(pick.index(static_cast<std::size_t>(g.n - 3))) : 2 + static_cast<int>(pick.index(3));
        g.n_test = 3 + static_cast<int>(pick.index(4));
        g.noise_sd = 0.3;
        g.duplicate_first = !linear;
        const auto split = make_split(g, 7000 + k);
        Rng init(9000 + k);
        const Model m = linear ? Model::linear(g.input_dim, g.output_dim, init.normal_vector(g.input_dim * g.output_dim, 0.5))
                               : Model::init({ModelKind::mlp, {g.input_dim, 4 + static_cast<int>(pick.index(12)), g.output_dim},
                                              Activation::tanh},
                                             init);
        require(m.num_weights() <= 200 && split.train.size() <= 12 && split.train.size() * g.output_dim <= 36,
                "operator_identities: problem outside the declared size range");
        const double T = 2.0;
        const auto tr = record_gradient_flow(m, split.train, T, 200);
        const auto ops = window_operators(tr, split.test, 0.0, T);
        const std::string at = "problem " + std::to_string(k);
        const Eigen::Index np = ops.W.rows();

        const double g_norm = op_norm(ops.G);
        for (Eigen::Index j = ops.rank; j < np; ++j) {
            invis.add((ops.G * ops.W_eig.vectors.col(j)).norm(), 1e-6 * g_norm, at);
            ++kernel_dirs;
        }
        dissip.add(dissipation_identity_check(tr, ops), 1e-5 * (tr.losses.front() - tr.losses.back()), at);
        const Vector rec = recorded_test_displacement(tr, split.test, 0.0, T);
        const Vector pred = predict_test_displacement(ops, recorded_train_displacement(tr, 0.0, T));
        coupling.add((pred - rec).norm(), 1e-5 * rec.norm(), at);
        const auto cells = four_cell_decomposition(tr, ops, split.train, split.test);
        recomp.add(cells.residual, 1e-6, at);
        reservoir.add(cells.reservoir.norm(), 1e-7, at);

        Rng rng(11000 + k);
        const Vector h = rng.normal_vector(np), xi = rng.normal_vector(ops.G.rows()), eta = rng.normal_vector(np);
        dual.add((dual_solve_W(tr, h, 0.0, T) - ops.W * h).norm(), 1e-5, at + " W");
        dual.add((dual_solve_G_adjoint(tr, split.test, xi, 0.0, T) - ops.G.transpose() * xi).norm(), 1e-5, at + " G^T");
        dual.add((dual_solve_D_adjoint(tr, eta, 0.0, T) - ops.D.transpose() * eta).norm(), 1e-5, at + " D^T");
    }
    return {detail::check("operators/reservoir-directions-present", kernel_dirs > 0, std::to_string(kernel_dirs) + " directions"),
            invis.result(), dissip.result(), coupling.result(), recomp.result(), reservoir.result(), dual.result()};
}

inline std::vector<Check> linear_closed_forms() {
    using detail::within;
    std::vector<Check> out;
    GeneratorConfig g;
    g.kind = GeneratorKind::linear_gaussian;
    g.n = 8;
    g.n_test = 5;
    g.input_dim = 5;
    g.noise_sd = 0.5;
    const auto split = make_split(g, 101);
    const auto& x = split.train.inputs;
    const double n = 8.0, T = 2.0;
    Rng rng(7);
    const Model m = Model::linear(5, 1, rng.normal_vector(5));
    const auto tr = record_gradient_flow(m, split.train, T, 200);
    const auto ops = window_operators(tr, split.test, 0.0, T);
    const Matrix K = detail::kernel_of(x);
    const Matrix I = Matrix::Identity(8, 8);
    out.push_back(within("linear/propagator", (propagator(tr, 0.5, 1.5) - expm(-K / n)).norm(), 1e-5));
    out.push_back(within("linear/W", (ops.W - (n / 2.0) * (I - expm(-2.0 * T * K / n))).norm(), 1e-5));
    out.push_back(within("linear/D", (ops.D - n * (I - expm(-T * K / n))).norm(), 1e-5));
    out.push_back(within("linear/G",
                         (ops.G - n * split.test.inputs * x.transpose() * pinv(K) * (I - expm(-T * K / n))).norm(), 1e-5));

    // Weight-decayed flow from zero, run until every mode has converged; d > n so lambda = 0 is underdetermined.
    GeneratorConfig wide = g;
    wide.input_dim = 12;
    const auto ws = make_split(wide, 102);
    const Model zero = Model::linear(12, 1, Vector::Zero(12));
    const Matrix& xw = ws.train.inputs;
    const Vector yw = stack_rows(ws.train.targets);
    const auto sm = build_spectral_model(zero, ws.train, ws.train, 0.0);
    for (double lambda : {0.0, 0.05, 0.5}) {
        const double horizon = infinite_horizon(sm.sigma, ws.train.size(), lambda);
        const double top = sm.sigma(0) * sm.sigma(0) / n + lambda;
        FlowOptions fo;
        fo.weight_decay = lambda;
        const auto run = record_gradient_flow(zero, ws.train, horizon, static_cast<int>(std::ceil(4.0 * horizon * top)), fo);
        const Vector expected =
            lambda == 0.0 ? Vector(pinv(xw) * yw)
                          : Vector(xw.transpose() * (detail::kernel_of(xw) + n * lambda * I).ldlt().solve(yw));
        out.push_back(within(lambda == 0.0 ? "linear/min-norm-endpoint" : "linear/ridge-endpoint[lambda=" + detail::fmt(lambda) + "]",
                             (run.weights.back() - expected).norm(), 1e-8));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frozen-kernel statistics.

inline std::vector<Check> frozen_kernel_statistics() {
    std::vector<Check> out;
    GeneratorConfig g;
    g.kind = GeneratorKind::noisy_teacher;
    g.n = 10;
    g.n_test = 7;
    g.input_dim = 3;
    g.noise_sd = 0.4;
    const auto split = make_split(g, 11);
    Rng init(12);
    const Model m = Model::init({ModelKind::mlp, {3, 8, 1}, Activation::tanh}, init);
    Rng rng(13);
    const Matrix L = rng.normal_matrix(10, 10) * 0.15;
    const Matrix cov = L * L.transpose() + 0.05 * Matrix::Identity(10, 10);
    const auto sm = build_spectral_model(m, split.train, split.test, cov);
    const Vector ybar = stack_rows(split.train.clean_targets());
    const Eigen::LLT<Matrix> chol(cov);
    const Vector target = sm.mean_test_output();
    const double top = sm.sigma(0) * sm.sigma(0);
    const std::vector<std::pair<FilterKind, double>> grid{
        {FilterKind::gradient_flow, 0.5}, {FilterKind::gradient_flow, 2.0}, {FilterKind::gradient_flow, 20.0},
        {FilterKind::ridge, 0.01},        {FilterKind::ridge, 0.1},         {FilterKind::ridge, 1.0},
        {FilterKind::threshold, 0.05 * top}, {FilterKind::rank, 3.0},      {FilterKind::rank, 6.0},
        {FilterKind::identity, 0.0}};
    detail::Worst mc{"frozen/monte-carlo-within-3se"};
    for (const auto& [kind, param] : grid) {
        const Matrix M = make_filter(kind, param, sm).M;
        const double risk = bias_variance(sm, M).risk;
        const int draws = 10000;
        double sum = 0.0, sum2 = 0.0;
        for (int k = 0; k < draws; ++k) {
            const Vector y = ybar + chol.matrixL() * rng.normal_vector(10);
            const double e = (filtered_test_output(sm, M, y) - target).squaredNorm();
            sum += e;
            sum2 += e * e;
        }
        const double mean = sum / draws;
        const double se = std::sqrt(std::max(0.0, sum2 / draws - mean * mean) / draws);
        mc.add(std::abs(mean - risk), 3.0 * se, to_string(kind) + "(" + detail::fmt(param) + ")");
    }
    out.push_back(detail::check("frozen/filter-grid-size", grid.size() == 10, std::to_string(grid.size()) + " filters"));
    out.push_back(mc.result());
    for (const char* name : {"benign-overfitting", "double-descent"}) {
        const auto art = run_experiment(default_config(name));
        for (const auto& c : art.checks) out.push_back({"frozen/" + c.name, c.passed, c.detail});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer theory.

inline std::vector<Check> optimizer_theory() {
    std::vector<Check> out;
    auto random_psd = [](Rng& rng, Eigen::Index d, Eigen::Index rank) {
        const Matrix f = rng.normal_matrix(d, rank);
        return Matrix(f * f.transpose() / static_cast<double>(rank));
    };
    {
        detail::Worst triple{"optimizer/omega-triple-identity"};
        Rng rng(8);
        for (int trial = 0; trial < 40; ++trial) {
            const int b = 2 + static_cast<int>(rng.index(7));
            const int d = 1 + static_cast<int>(rng.index(32));
            const Matrix gr = rng.normal_matrix(b, d);
            const Matrix M = random_psd(rng, d, 1 + static_cast<int>(rng.index(static_cast<std::size_t>(d))));
            const auto st = batch_stats(gr);
            const double pair = omega_pairwise(gr, M);
            const double tol = 1e-10 * std::max(1.0, std::abs(pair));
            triple.add(std::abs(omega_rate(st, M) - pair), tol, "gradient batch " + std::to_string(trial));
        }
        for (int trial = 0; trial < 6; ++trial) {
            Rng r2(40 + trial);
            const bool ce = trial % 2 == 1;
            const Model model = Model::init({ModelKind::mlp, {3, 5, ce ? 3 : 2}, trial < 3 ? Activation::tanh : Activation::relu}, r2);
            Dataset batch;
            batch.inputs = r2.normal_matrix(5, 3);
            if (ce) {
                batch.targets = Matrix::Zero(5, 3);
                for (int a = 0; a < 5; ++a) batch.targets(a, static_cast<Eigen::Index>(r2.index(3))) = 1.0;
            } else {
                batch.targets = r2.normal_matrix(5, 2);
            }
            const Loss loss{ce ? LossKind::softmax_ce : LossKind::squared};
            const Matrix M = random_psd(r2, model.num_weights(), 12);
            const Matrix gr = per_example_gradients(model, batch, loss);
            const double pair = omega_pairwise(gr, M);
            const double tol = 1e-10 * std::max(1.0, std::abs(pair));
            triple.add(std::abs(omega_rate(batch_stats(gr), M) - pair), tol, "network " + std::to_string(trial));
            triple.add(std::abs(omega_kernel_block(model, batch, loss, M) - pair), tol, "kernel block " + std::to_string(trial));
        }
        out.push_back(triple.result());
    }
    {
        detail::Worst fp{"optimizer/finite-population-covariance"};
        Rng rng(28);
        for (std::size_t n = 2; n <= 8; ++n) {
            const Matrix gr = rng.normal_matrix(static_cast<Eigen::Index>(n), 3);
            for (std::size_t b = 1; b <= n; ++b)
                fp.add((subset_mean_covariance(gr, b) - finite_population_covariance(gr, b)).cwiseAbs().maxCoeff(), 1e-10,
                       "n=" + std::to_string(n) + " b=" + std::to_string(b));
        }
        out.push_back(fp.result());
    }
    {
        detail::Worst gate{"optimizer/hard-gate-equals-dense-projector"};
        Rng rng(15);
        for (int trial = 0; trial < 50; ++trial) {
            const int d = 8;
            const Vector mu = rng.normal_vector(d);
            const Vector s = rng.normal_vector(d).cwiseAbs2();
            Vector p(d);
            for (int k = 0; k < d; ++k) p(k) = 0.1 + rng.uniform();
            const Matrix A = (mu.cwiseAbs2() - s).asDiagonal();
            const Matrix Ms = optimal_projector(A, Matrix(p.asDiagonal()));
            const Vector q = diagonal_gate(mu, s, {GateKind::hard, 1.0});
            gate.add((Ms - Matrix((q.cwiseProduct(p)).asDiagonal())).norm(), 1e-12, "instance " + std::to_string(trial));
        }
        out.push_back(gate.result());
    }
    {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (std::uint64_t seed : {23u, 24u, 25u}) {
            Rng rng(seed);
            const Model m = Model::init({ModelKind::mlp, {3, 6, 2}, Activation::tanh}, rng);
            Rng data_rng(seed + 100);
            Dataset b;
            b.inputs = data_rng.normal_matrix(8, 3);
            b.targets = data_rng.normal_matrix(8, 2);
            const Matrix M = random_psd(rng, m.num_weights(), m.num_weights());
            std::vector<double> err;
            for (double eta : {1e-2, 1e-3, 1e-4, 1e-5}) {
                const auto r = one_step_loo_risk(m, b, {}, eta, M);
                err.push_back(std::abs(r.loo - r.predicted));
            }
            for (std::size_t k = 0; k + 1 < err.size(); ++k) {
                const double rt = err[k] / err[k + 1];
                lo = std::isnan(rt) ? -1.0 : std::min(lo, rt);
                hi = std::max(hi, rt);
            }
        }
        out.push_back(detail::check("optimizer/one-step-loo-error-is-second-order", lo >= 50.0 && hi <= 200.0,
                                    "per-decade ratios in [" + detail::fmt(lo) + ", " + detail::fmt(hi) + "]"));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Influence and drift-diffusion.

inline std::vector<Check> influence_suite() {
    std::vector<Check> out;
    auto gaussian_rows = [](int n, int in, std::uint64_t seed) {
        Rng rng(seed);
        Dataset d;
        d.inputs = rng.normal_matrix(n, in);
        d.targets = rng.normal_matrix(n, 1);
        return d;
    };
    {
        detail::Worst fd{"influence/finite-difference-reweighting"};
        for (std::uint64_t seed : {7u, 8u}) {
            const int n = 6;
            Rng rng(seed);
            const Dataset data = gaussian_rows(n, 2, seed + 50);
            const Model m = Model::init({ModelKind::mlp, {2, 5, 1}, seed == 7 ? Activation::tanh : Activation::relu}, rng);
            require(m.num_weights() <= 64, "influence_suite: network too large");
            const double T = 2.0;
            const int steps = 200;
            const Matrix J = influence_matrix(record_gradient_flow(m, data, T, steps)).J;
            auto terminal = [&](const Vector& c, int i) {
                FlowOptions o;
                o.example_weights = c;
                const auto tr = record_gradient_flow(m, data, T, steps, o);
                return per_example_losses(m.with_weights(tr.weights.back()), data)(i);
            };
            const double h = 1e-4;
            for (int j = 0; j < n; ++j) {
                Vector up = Vector::Ones(n), down = Vector::Ones(n);
                up(j) -= h;
                down(j) += h;
                for (int i = 0; i < n; ++i) {
                    const double v = (terminal(up, i) - terminal(down, i)) / (2 * h);
                    fd.add(std::abs(J(i, j) - v), 1e-3 * std::abs(v) + 1e-9,
                           "seed " + std::to_string(seed) + " (" + std::to_string(i) + "," + std::to_string(j) + ")");
                }
            }
        }
        out.push_back(fd.result());
    }
    {
        const int n = 10;
        double est = 0.0, truth = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            GeneratorConfig cfg;
            cfg.kind = GeneratorKind::linear_gaussian;
            cfg.n = n;
            cfg.input_dim = 1;
            cfg.noise_sd = 1.0;
            const Dataset data = make_dataset(cfg, 100 + seed);
            const Model m = Model::linear(1, 1, Vector::Zero(1));
            const auto tr = record_gradient_flow(m, data, 1.0, 100);
            est += gap_estimator(influence_matrix(tr)).value;
            double loo = 0.0;
            for (int i = 0; i < n; ++i) {
                const auto tri = record_gradient_flow(m, data.without(static_cast<std::size_t>(i)), 1.0, 100);
                loo += per_example_losses(m.with_weights(tri.weights.back()), data)(i);
            }
            truth += loo / n - empirical_loss(m.with_weights(tr.weights.back()), data);
        }
        est /= 20.0;
        truth /= 20.0;
        out.push_back(detail::check("influence/gap-estimator-vs-retrained-loo", truth > 0.0 && std::abs(est - truth) <= 0.3 * truth,
                                    "estimate " + detail::fmt(est) + " retrain " + detail::fmt(truth)));
    }
    {
        detail::Worst cfv{"influence/common-first-variation-enumeration"};
        for (Eigen::Index n = 2; n <= 6; ++n)
            for (Eigen::Index k = 1; k <= n - 1; ++k)
                for (Eigen::Index i = 0; i < n; ++i)
                    cfv.add((holdout_direction_average(n, i, k) - common_first_variation(n, i, k)).cwiseAbs().maxCoeff(), 1e-14,
                            "n=" + std::to_string(n) + " k=" + std::to_string(k) + " i=" + std::to_string(i));
        out.push_back(cfv.result());
    }
    return out;
}

inline std::vector<Check> drift_diffusion_suite() {
    std::vector<Check> out;
    GeneratorConfig cfg;
    cfg.kind = GeneratorKind::linear_gaussian;
    cfg.n = 200;
    cfg.n_test = 40;
    cfg.input_dim = 40;
    cfg.noise_sd = 1.0;
    const auto split = make_split(cfg, 38);
    const Model m = Model::linear(40, 1, Vector::Zero(40));
    const double eta = 2e-4;
    std::vector<double> T;
    std::vector<std::vector<DriftDiffusionReport>> reps;
    double worst_identity = 0.0;
    for (long N : {10L, 20L, 40L, 80L, 160L}) {
        T.push_back(static_cast<double>(N) * eta);
        reps.emplace_back();
        for (std::uint64_t s = 0; s < 20; ++s) {
            SgdOptions opt;
            opt.eta = eta;
            opt.steps = N;
            opt.batch_size = 4;
            opt.seed = 500 + s;
            reps.back().push_back(drift_diffusion(record_sgd(m, split.train, split.test, opt)));
            worst_identity = std::max(worst_identity, reps.back().back().identity_residual);
        }
    }
    const auto fit = fit_drift_diffusion_scaling(T, reps);
    const double ds = fit.diffusion.slope, dr = fit.drift.slope;
    out.push_back(detail::check("drift-diffusion/diffusion-exponent", ds >= 0.4 && ds <= 0.65, "slope " + detail::fmt(ds)));
    out.push_back(detail::check("drift-diffusion/drift-exponent", dr >= 0.85 && dr <= 1.1, "slope " + detail::fmt(dr)));
    out.push_back(detail::within("drift-diffusion/identity-per-step", worst_identity, 1e-12));
    return out;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"operators", "optimizer", "frozen", "influence"};
    return names;
}

inline std::vector<Check> run_suite(const std::string& name) {
    std::vector<Check> out;
    auto append = [&](std::vector<Check> more) { out.insert(out.end(), more.begin(), more.end()); };
    if (name == "operators") {
        append(operator_identities());
        append(linear_closed_forms());
    } else if (name == "optimizer") {
        append(optimizer_theory());
    } else if (name == "frozen") {
        append(frozen_kernel_statistics());
    } else if (name == "influence") {
        append(influence_suite());
        append(drift_diffusion_suite());
    } else {
        throw ContractViolation("unknown suite: " + name);
    }
    return out;
}

}  // namespace poprisk::verify
