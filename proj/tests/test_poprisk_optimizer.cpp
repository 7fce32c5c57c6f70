#include "poprisk/poprisk_optimizer.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace poprisk;

namespace {

Matrix random_psd(Rng& rng, Eigen::Index d, Eigen::Index rank) {
    const Matrix f = rng.normal_matrix(d, rank);
    return f * f.transpose() / static_cast<double>(rank);
}

// Random M with 0 <= M <= P: P^{1/2} Q diag(u) Q^T P^{1/2}, u in [0,1].
Matrix random_feasible(Rng& rng, const Matrix& P) {
    const auto d = P.rows();
    const Matrix q = random_orthonormal(rng, d, d);
    Vector u(d);
    for (Eigen::Index k = 0; k < d; ++k) u(k) = rng.uniform();
    const Matrix ph = psd_sqrt(P, 0.0);
    return ph * q * u.asDiagonal() * q.transpose() * ph;
}

double tr_rate(const BatchStats& st, const Matrix& M) { return (M * *st.A).trace(); }

Dataset regression_batch(int b, int in, int out, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.inputs = rng.normal_matrix(b, in);
    d.targets = rng.normal_matrix(b, out);
    return d;
}

Dataset classification_batch(int b, int in, int classes, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.inputs = rng.normal_matrix(b, in);
    d.targets = Matrix::Zero(b, classes);
    for (int a = 0; a < b; ++a) d.targets(a, static_cast<Eigen::Index>(rng.index(classes))) = 1.0;
    return d;
}

}  // namespace

TEST(BatchStats, IdenticalGradientsHaveZeroVariance) {
    Rng rng(1);
    const Vector g = rng.normal_vector(5);
    Matrix grads(4, 5);
    for (int a = 0; a < 4; ++a) grads.row(a) = g.transpose();
    const auto st = batch_stats(grads);
    EXPECT_LE(st.variance.norm(), 1e-15);
    EXPECT_LE((*st.A - g * g.transpose()).norm(), 1e-14);
}

TEST(BatchStats, CenteredRowsSumToZeroAndSigmaIsPsd) {
    Rng rng(2);
    const auto st = batch_stats(rng.normal_matrix(7, 10));
    EXPECT_LE(st.centered.colwise().sum().norm(), 1e-10);
    EXPECT_GE(sym_eig(*st.Sigma).values.minCoeff(), -1e-12);
    EXPECT_LE((st.Sigma->diagonal() - st.variance).norm(), 1e-14);
}

TEST(BatchStats, RejectsSingleExample) {
    EXPECT_THROW(batch_stats(Matrix::Ones(1, 3)), ContractViolation);
}

TEST(BatchStats, DenseRateOnlyUpToThreshold) {
    Rng rng(3);
    EXPECT_TRUE(batch_stats(rng.normal_matrix(3, 64)).dense());
    EXPECT_FALSE(batch_stats(rng.normal_matrix(3, 65)).dense());
}

TEST(OmegaRate, OppositePairGivesMinusSquaredNorm) {
    Rng rng(4);
    const Vector g1 = rng.normal_vector(6);
    Matrix grads(2, 6);
    grads.row(0) = g1.transpose();
    grads.row(1) = -g1.transpose();
    const auto st = batch_stats(grads);
    EXPECT_LE(st.mean.norm(), 1e-15);
    EXPECT_NEAR(omega_rate(st, Matrix::Identity(6, 6)), -g1.squaredNorm(), 1e-12);
    EXPECT_NEAR(omega_rate(st, Matrix::Identity(6, 6)), g1.dot(-g1), 1e-12);
}

TEST(OmegaRate, TraceOfRateMatrixIsPairwiseMean) {
    Rng rng(5);
    const Matrix g = rng.normal_matrix(5, 8);
    double pair = 0.0;
    for (int a = 0; a < 5; ++a)
        for (int c = 0; c < 5; ++c)
            if (a != c) pair += g.row(a).dot(g.row(c));
    pair /= 20.0;
    EXPECT_NEAR(batch_stats(g).A->trace(), pair, 1e-12);
}

TEST(OmegaRate, HandSetThreeExampleBatch) {
    Matrix g(3, 2);
    g << 1, 0, 0, 2, 1, 1;
    // <g1,g2> = 0, <g1,g3> = 1, <g2,g3> = 2; ordered pairs double each.
    EXPECT_NEAR(omega_rate(batch_stats(g), Matrix::Identity(2, 2)), 2.0 * (0 + 1 + 2) / 6.0, 1e-14);
}

TEST(OmegaRate, ZeroPreconditionerGivesZero) {
    Rng rng(6);
    EXPECT_EQ(omega_rate(batch_stats(rng.normal_matrix(4, 3)), Matrix::Zero(3, 3)), 0.0);
}

TEST(OmegaRate, RejectsNonPsdPreconditioner) {
    Rng rng(7);
    const auto st = batch_stats(rng.normal_matrix(4, 3));
    Matrix m = Matrix::Identity(3, 3);
    m(2, 2) = -1e-3;
    EXPECT_THROW(omega_rate(st, m), ContractViolation);
    Matrix asym = Matrix::Identity(3, 3);
    asym(0, 1) = 0.5;
    EXPECT_THROW(omega_rate(st, asym), ContractViolation);
    EXPECT_THROW(omega_rate_diagonal(st, Vector::Constant(3, -1.0)), ContractViolation);
}

TEST(OmegaRate, TripleIdentityOnRandomBatches) {
    Rng rng(8);
    for (int trial = 0; trial < 60; ++trial) {
        const int b = 2 + static_cast<int>(rng.index(7));
        const int d = 1 + static_cast<int>(rng.index(32));
        const Matrix g = rng.normal_matrix(b, d);
        const Matrix M = random_psd(rng, d, 1 + static_cast<int>(rng.index(static_cast<std::size_t>(d))));
        const auto st = batch_stats(g);
        const double pair = omega_pairwise(g, M);
        const double scale = std::max(1.0, std::abs(pair));
        EXPECT_NEAR(omega_rate(st, M), pair, 1e-10 * scale) << "b=" << b << " d=" << d;
        EXPECT_NEAR(tr_rate(st, M), pair, 1e-10 * scale) << "b=" << b << " d=" << d;
        const Vector diag = M.diagonal();
        EXPECT_NEAR(omega_rate_diagonal(st, diag), omega_pairwise(g, Matrix(diag.asDiagonal())), 1e-10 * scale);
    }
}

TEST(OmegaRate, KernelBlockFormMatchesGradientForm) {
    for (int trial = 0; trial < 6; ++trial) {
        Rng rng(40 + trial);
        const bool ce = trial % 2 == 1;
        const Architecture arch{ModelKind::mlp, {3, 5, ce ? 3 : 2}, trial < 3 ? Activation::tanh : Activation::relu};
        const Model model = Model::init(arch, rng);
        const Dataset batch = ce ? classification_batch(5, 3, 3, 90 + trial) : regression_batch(5, 3, 2, 90 + trial);
        const Loss loss{ce ? LossKind::softmax_ce : LossKind::squared};
        const Matrix M = random_psd(rng, model.num_weights(), 12);
        const Matrix g = per_example_gradients(model, batch, loss);
        const double grad_form = omega_rate(batch_stats(g), M);
        const double kernel_form = omega_kernel_block(model, batch, loss, M);
        EXPECT_NEAR(kernel_form, grad_form, 1e-10 * std::max(1.0, std::abs(grad_form)));
        EXPECT_NEAR(omega_pairwise(g, M), grad_form, 1e-10 * std::max(1.0, std::abs(grad_form)));
    }
}

TEST(OptimalProjector, PsdRateWithIdentityBaseIsRangeProjector) {
    Rng rng(9);
    const Matrix f = rng.normal_matrix(6, 3);
    const Matrix A = f * f.transpose();
    const Matrix M = optimal_projector(A, Matrix::Identity(6, 6));
    const Matrix range = f * pinv(f);
    EXPECT_LE((M - range).norm(), 1e-10);
    EXPECT_NEAR((M * A).trace(), A.trace(), 1e-10 * A.trace());
}

TEST(OptimalProjector, NegativeSemidefiniteRateGivesZero) {
    Rng rng(10);
    const Matrix f = rng.normal_matrix(5, 2);
    EXPECT_LE(optimal_projector(Matrix(-f * f.transpose()), Matrix::Identity(5, 5)).norm(), 1e-14);
    // Opposite pair: zero mean, so A_B = -Sigma_B.
    Matrix g(2, 3);
    g << 1, 0, 0, -1, 0, 0;
    const auto st = batch_stats(g);
    EXPECT_LE(optimal_projector(st, Matrix::Identity(3, 3)).norm(), 1e-14);
}

TEST(OptimalProjector, BeatsRandomFeasiblePreconditioners) {
    Rng rng(11);
    const auto st = batch_stats(rng.normal_matrix(4, 6) + Matrix::Constant(4, 6, 0.3));
    for (const bool identity_base : {true, false}) {
        const Matrix P = identity_base ? Matrix(Matrix::Identity(6, 6)) : random_psd(rng, 6, 6);
        const Matrix Ms = optimal_projector(st, P);
        const double best = tr_rate(st, Ms);
        // Feasibility of M* itself.
        EXPECT_GE(sym_eig(Ms).values.minCoeff(), -1e-10);
        EXPECT_GE(sym_eig(Matrix(P - Ms)).values.minCoeff(), -1e-10);
        for (int k = 0; k < 200; ++k) {
            const Matrix M = random_feasible(rng, P);
            EXPECT_GE(best, tr_rate(st, M) - 1e-12);
        }
    }
}

TEST(OptimalProjector, RequiresDenseStats) {
    Rng rng(12);
    EXPECT_THROW(optimal_projector(batch_stats(rng.normal_matrix(3, 70)), Matrix::Identity(70, 70)),
                 ContractViolation);
}

TEST(DiagonalGate, HardGateIsStrictAtBoundary) {
    Vector mu(1), s(1);
    mu << 0.5;
    s << 0.25;
    GateConfig cfg{GateKind::hard, 1.0, 1.0, 1e-8};
    EXPECT_EQ(diagonal_gate(mu, s, cfg)(0), 0.0);
    cfg.kind = GateKind::soft;
    EXPECT_EQ(diagonal_gate(mu, s, cfg)(0), 0.0);
    mu << 0.5 + 1e-9;
    cfg.kind = GateKind::hard;
    EXPECT_EQ(diagonal_gate(mu, s, cfg)(0), 1.0);
}

TEST(DiagonalGate, ZeroVarianceOpens) {
    Vector mu(3), s = Vector::Zero(3);
    mu << 0.3, -2.0, 1e-2;
    EXPECT_EQ(diagonal_gate(mu, s, {GateKind::hard}).minCoeff(), 1.0);
    const Vector soft = diagonal_gate(mu, s, {GateKind::soft});
    EXPECT_GT(soft.minCoeff(), 1.0 - 1e-3);
    EXPECT_LE(soft.maxCoeff(), 1.0);
}

TEST(DiagonalGate, OutputsInUnitIntervalAndOrdered) {
    Rng rng(13);
    for (int k = 0; k < 200; ++k) {
        const Vector mu = rng.normal_vector(10);
        const Vector s = rng.normal_vector(10).cwiseAbs2();
        for (auto kind : {GateKind::hard, GateKind::soft, GateKind::snr}) {
            const Vector q = diagonal_gate(mu, s, {kind, 0.7, 2.0, 1e-8});
            EXPECT_GE(q.minCoeff(), 0.0);
            EXPECT_LE(q.maxCoeff(), 1.0);
        }
        // Soft is zero exactly where hard is zero.
        const Vector h = diagonal_gate(mu, s, {GateKind::hard, 0.7});
        const Vector so = diagonal_gate(mu, s, {GateKind::soft, 0.7});
        for (int j = 0; j < 10; ++j) EXPECT_EQ(h(j) == 0.0, so(j) == 0.0);
    }
}

TEST(DiagonalGate, SnrGateIsPositiveBelowThreshold) {
    Vector mu(1), s(1);
    mu << 0.1;
    s << 1.0;
    EXPECT_EQ(diagonal_gate(mu, s, {GateKind::soft}), Vector::Zero(1));
    EXPECT_GT(diagonal_gate(mu, s, {GateKind::snr})(0), 0.0);
}

TEST(DiagonalGate, LargeLambdaClosesSoftGate) {
    Rng rng(14);
    const Vector mu = rng.normal_vector(8);
    const Vector s = Vector::Constant(8, 1e-3);
    EXPECT_LE(diagonal_gate(mu, s, {GateKind::soft, 1.0, 1e12}).maxCoeff(), 1e-6);
}

TEST(DiagonalGate, HardGateEqualsDenseProjectorOnDiagonalInstances) {
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
        EXPECT_LE((Ms.diagonal() - q.cwiseProduct(p)).norm(), 1e-12);
        EXPECT_LE((Ms - Matrix(Ms.diagonal().asDiagonal())).norm(), 1e-12);
    }
}

TEST(DiagonalGate, HardGateMaximizesOverAllMasksAndFlipsLose) {
    Rng rng(16);
    const int d = 8;
    for (int trial = 0; trial < 20; ++trial) {
        const Vector mu = rng.normal_vector(d);
        const Vector s = rng.normal_vector(d).cwiseAbs2();
        Vector p(d);
        for (int k = 0; k < d; ++k) p(k) = 0.1 + rng.uniform();
        const Vector gain = p.cwiseProduct(mu.cwiseAbs2() - s);
        const Vector q = diagonal_gate(mu, s, {GateKind::hard, 1.0});
        const double best = q.dot(gain);
        for (int mask = 0; mask < (1 << d); ++mask) {
            double v = 0.0;
            for (int k = 0; k < d; ++k)
                if (mask >> k & 1) v += gain(k);
            EXPECT_LE(v, best + 1e-14);
        }
        for (int k = 0; k < d; ++k) {
            Vector f = q;
            f(k) = 1.0 - f(k);
            EXPECT_LT(f.dot(gain), best);
        }
    }
}

TEST(LooCoefficient, Values) {
    EXPECT_EQ(loo_coefficient_fresh(), 1.0);
    EXPECT_DOUBLE_EQ(loo_coefficient(100, 20), 0.25);
    EXPECT_DOUBLE_EQ(loo_coefficient(64, 32), 1.0);
    EXPECT_THROW(loo_coefficient(10, 10), ContractViolation);
    EXPECT_THROW(loo_coefficient(10, 12), ContractViolation);
}

TEST(Optimizer, ForcedOpenGateMatchesAdamW) {
    Rng rng(17);
    OptimizerConfig c;
    c.lr = 3e-3;
    c.weight_decay = 0.1;
    OptimizerConfig forced = c;
    forced.force_open = true;
    PopRiskState a(c, 12), p(forced, 12);
    Vector wa = rng.normal_vector(12), wp = wa;
    for (int t = 0; t < 200; ++t) {
        const Vector g = rng.normal_vector(12) + 0.2 * wa;
        wa = adamw_step(a, g, wa);
        wp = poprisk_step(p, g, wp);
        ASSERT_LE((wa - wp).cwiseAbs().maxCoeff(), 1e-12) << "step " << t;
    }
    EXPECT_EQ(p.q, Vector::Ones(12));
}

TEST(Optimizer, HugeLambdaIsPureWeightDecay) {
    Rng rng(18);
    OptimizerConfig c;
    c.lr = 0.01;
    c.weight_decay = 0.5;
    c.gate = {GateKind::soft, 1.0, 1e15, 1e-8};
    PopRiskState st(c, 6);
    Vector w = rng.normal_vector(6);
    for (int t = 0; t < 5; ++t) {
        const Vector g = rng.normal_vector(6);
        const Vector want = w - c.lr * c.weight_decay * w;
        w = poprisk_step(st, g, w);
        EXPECT_LE((w - want).norm(), 1e-9);
    }
}

TEST(Optimizer, ConstantGradientStreamOpensHardGate) {
    Rng rng(19);
    OptimizerConfig c;
    c.gate.kind = GateKind::hard;
    c.lr = 1e-2;
    PopRiskState st(c, 5), adam(c, 5);
    const Vector g = rng.normal_vector(5);
    Vector w = Vector::Zero(5), wa = w;
    for (int t = 0; t < 3000; ++t) {
        const Vector w0 = w, wa0 = wa;
        w = poprisk_step(st, g, w0);
        wa = adamw_step(adam, g, wa0);
    }
    const Vector s_hat = st.s / (1.0 - std::pow(c.rho, 3000.0));
    EXPECT_LE(s_hat.maxCoeff(), 1e-6 * g.cwiseAbs2().minCoeff());
    EXPECT_EQ(st.q, Vector::Ones(5));
    const Vector w_next = poprisk_step(st, g, w);
    const Vector wa_next = adamw_step(adam, g, w);
    EXPECT_LE((w_next - wa_next).norm(), 1e-14);
}

TEST(Optimizer, ZeroGradientWithoutDecayLeavesWeights) {
    OptimizerConfig c;
    PopRiskState a(c, 4), p(c, 4);
    const Vector w = Vector::LinSpaced(4, -1, 1);
    EXPECT_EQ(adamw_step(a, Vector::Zero(4), w), w);
    EXPECT_EQ(poprisk_step(p, Vector::Zero(4), w), w);
    EXPECT_GE(p.v.minCoeff(), 0.0);
    EXPECT_GE(p.s.minCoeff(), 0.0);
}

TEST(Optimizer, RejectsNonFiniteGradient) {
    OptimizerConfig c;
    PopRiskState st(c, 3);
    Vector g = Vector::Zero(3);
    g(1) = std::nan("");
    EXPECT_THROW(poprisk_step(st, g, Vector::Zero(3)), ContractViolation);
    g(1) = INFINITY;
    EXPECT_THROW(adamw_step(st, g, Vector::Zero(3)), ContractViolation);
}

TEST(Optimizer, VarianceUsesPreUpdateMean) {
    OptimizerConfig c;
    c.rho = 0.5;
    c.beta1 = 0.5;
    PopRiskState st(c, 1);
    const Vector w = Vector::Zero(1);
    poprisk_step(st, Vector::Constant(1, 2.0), w);
    // s = 0.5 * (2 - 0)^2; m = 1.
    EXPECT_DOUBLE_EQ(st.s(0), 2.0);
    poprisk_step(st, Vector::Constant(1, 4.0), w);
    // s = 0.5 * 2 + 0.5 * (4 - 1)^2.
    EXPECT_DOUBLE_EQ(st.s(0), 5.5);
    EXPECT_EQ(st.t, 2);
}

TEST(Optimizer, ExactVarianceReplacesStreamingEstimate) {
    OptimizerConfig c;
    c.gate.kind = GateKind::hard;
    PopRiskState st(c, 2);
    const Vector var = (Vector(2) << 0.0, 100.0).finished();
    poprisk_step(st, Vector::Constant(2, 1.0), Vector::Zero(2), &var);
    EXPECT_EQ(st.q(0), 1.0);
    EXPECT_EQ(st.q(1), 0.0);
}

TEST(Optimizer, ReplayIsDeterministic) {
    auto run = [] {
        Rng rng(20);
        PopRiskState st(OptimizerConfig{}, 7);
        Vector w = rng.normal_vector(7);
        for (int t = 0; t < 100; ++t) w = poprisk_step(st, rng.normal_vector(7) + w, w);
        return w;
    };
    EXPECT_EQ(run(), run());
}

TEST(OptimizerConfig, JsonRoundTripAndUnknownKeys) {
    OptimizerConfig c;
    c.kind = OptimizerKind::adamw;
    c.lr = 0.02;
    c.gate.kind = GateKind::snr;
    c.regime = LooRegime::finite;
    c.exact_variance = true;
    const auto j = optimizer_to_json(c);
    const auto back = optimizer_from_json(j);
    EXPECT_EQ(optimizer_to_json(back), j);
    auto manual = j;
    manual["alpha"] = 0.3;
    const auto m = optimizer_from_json(manual);
    EXPECT_EQ(m.regime, LooRegime::manual);
    EXPECT_EQ(m.gate.alpha, 0.3);
    auto bad = j;
    bad["momentum"] = 0.9;
    EXPECT_THROW(optimizer_from_json(bad), ContractViolation);
    auto bad_beta = j;
    bad_beta["beta2"] = 1.0;
    EXPECT_THROW(optimizer_from_json(bad_beta), ContractViolation);
    const auto defaults = optimizer_from_json(nlohmann::json::object());
    EXPECT_EQ(defaults.beta1, 0.9);
    EXPECT_EQ(defaults.beta2, 0.999);
    EXPECT_EQ(defaults.rho, 0.99);
    EXPECT_EQ(defaults.eps, 1e-8);
    EXPECT_EQ(defaults.gate.lambda_pop, 1.0);
    EXPECT_EQ(defaults.gate.kind, GateKind::soft);
}

TEST(OneStepLoo, ZeroStepIsBatchLoss) {
    Rng rng(21);
    const Model m = Model::init({ModelKind::mlp, {2, 4, 1}, Activation::tanh}, rng);
    const Dataset b = regression_batch(6, 2, 1, 22);
    const auto r = one_step_loo_risk(m, b, {}, 0.0, Matrix::Identity(m.num_weights(), m.num_weights()));
    EXPECT_DOUBLE_EQ(r.loo, r.batch_loss);
    EXPECT_DOUBLE_EQ(r.predicted, r.batch_loss);
    EXPECT_NEAR(r.batch_loss, empirical_loss(m, b), 1e-15);
}

TEST(OneStepLoo, ErrorShrinksQuadraticallyInStep) {
    for (std::uint64_t seed : {23u, 24u, 25u}) {
        Rng rng(seed);
        const Model m = Model::init({ModelKind::mlp, {3, 6, 2}, Activation::tanh}, rng);
        const Dataset b = regression_batch(8, 3, 2, seed + 100);
        const Matrix M = random_psd(rng, m.num_weights(), m.num_weights());
        std::vector<double> err;
        for (double eta : {1e-2, 1e-3, 1e-4}) {
            const auto r = one_step_loo_risk(m, b, {}, eta, M);
            err.push_back(std::abs(r.loo - r.predicted));
        }
        for (int k = 0; k < 2; ++k) {
            const double ratio = err[k] / err[k + 1];
            EXPECT_GE(ratio, 50.0) << "seed " << seed;
            EXPECT_LE(ratio, 200.0) << "seed " << seed;
        }
    }
}

TEST(OneStepLoo, LinearFirstOrderTermMatchesFiniteDifference) {
    Rng rng(26);
    const Model m = Model::linear(4, 1, rng.normal_vector(4));
    const Dataset b = regression_batch(7, 4, 1, 27);
    const Matrix M = random_psd(rng, 4, 4);
    const double h = 1e-3;
    const double up = one_step_loo_risk(m, b, {}, h, M).loo;
    const double down = one_step_loo_risk(m, b, {}, -h, M).loo;
    const auto r0 = one_step_loo_risk(m, b, {}, 0.0, M);
    EXPECT_NEAR((up - down) / (2 * h), -r0.rate, 1e-8);
}

TEST(FinitePopulation, SubsetCovarianceMatchesFormula) {
    Rng rng(28);
    for (std::size_t n = 2; n <= 8; ++n) {
        const Matrix g = rng.normal_matrix(static_cast<Eigen::Index>(n), 3);
        for (std::size_t b = 1; b <= std::min<std::size_t>(4, n); ++b) {
            const Matrix enumd = subset_mean_covariance(g, b);
            const Matrix formula = finite_population_covariance(g, b);
            EXPECT_LE((enumd - formula).cwiseAbs().maxCoeff(), 1e-10) << "n=" << n << " b=" << b;
        }
    }
}

TEST(FinitePopulation, SubsetEnumerationCountsAndOrder) {
    std::set<std::vector<std::size_t>> seen;
    for_each_subset(6, 3, [&](const std::vector<std::size_t>& s) {
        EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
        seen.insert(s);
    });
    EXPECT_EQ(seen.size(), 20u);
}

TEST(FinitePopulation, TraceIdentityGivesAlpha) {
    Rng rng(29);
    const Matrix g = rng.normal_matrix(8, 4);
    const Matrix P = random_psd(rng, 4, 4);
    const std::size_t b = 3;
    const double lhs = (P * population_covariance(g)).trace() / 7.0;
    const double rhs = loo_coefficient(8, 3) * (P * subset_mean_covariance(g, b)).trace();
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Exchangeability, LooAverageEqualsHoldoutEnumeration) {
    for (int n : {4, 7, 12}) {
        GeneratorConfig cfg;
        cfg.kind = GeneratorKind::linear_gaussian;
        cfg.n = n;
        cfg.input_dim = 3;
        cfg.noise_sd = 0.3;
        const Dataset data = make_dataset(cfg, 30 + n);
        const Model w0 = Model::linear(3, 1, Vector::Constant(3, 0.1));
        const HoldoutLearner one_step = [&](const Dataset& train, const Dataset& point) {
            const auto lg = mean_loss_gradient(w0, train);
            return empirical_loss(w0.with_weights(w0.weights() - 0.2 * lg.gradient), point);
        };
        const double loo = loo_average(data, one_step);
        const double enumd = holdout_enumeration_average(data, 1, one_step);
        EXPECT_NEAR(loo, enumd, 1e-13 * std::max(1.0, loo)) << "n=" << n;
    }
}

TEST(Train, LogColumnsDeterminismAndEpochWarning) {
    GeneratorConfig cfg;
    cfg.kind = GeneratorKind::modular_arithmetic;
    cfg.modulus = 5;
    cfg.train_fraction = 0.6;
    const auto split = make_split(cfg, 31);
    Rng rng(32);
    const Model init = Model::init({ModelKind::mlp, {10, 16, 5}, Activation::relu}, rng);
    OptimizerConfig oc;
    oc.lr = 1e-2;
    TrainOptions opt;
    opt.loss.kind = LossKind::softmax_ce;
    opt.steps = 40;
    opt.batch_size = 8;
    opt.log_every = 10;
    opt.seed = 3;
    std::vector<std::string> warnings;
    opt.warn = [&](const std::string& s) { warnings.push_back(s); };
    const auto r1 = train(init, split.train, split.test, oc, opt);
    const auto r2 = train(init, split.train, split.test, oc, opt);
    EXPECT_EQ(r1.log.str(), r2.log.str());
    EXPECT_EQ(r1.log.columns(),
              (std::vector<std::string>{"step", "train_loss", "val_loss", "val_acc", "gate_open_fraction", "mean_q"}));
    EXPECT_EQ(r1.log.size(), 5u);
    EXPECT_GT(r1.epochs_crossed, 0);
    EXPECT_FALSE(warnings.empty());
    EXPECT_LT(r1.log.rows().back()[1], r1.log.rows().front()[1]);
    for (const auto& row : r1.log.rows()) {
        EXPECT_GE(row[3], 0.0);
        EXPECT_LE(row[3], 1.0);
    }

    oc.exact_variance = true;
    oc.regime = LooRegime::finite;
    const auto r3 = train(init, split.train, split.test, oc, opt);
    EXPECT_EQ(r3.steps_run, 40);
    oc.kind = OptimizerKind::adamw;
    const auto r4 = train(init, split.train, split.test, oc, opt);
    EXPECT_EQ(r4.log.rows().back()[5], 1.0);
}

TEST(Train, SingleEpochDoesNotWarn) {
    Dataset d = regression_batch(20, 2, 1, 33);
    Rng rng(34);
    const Model init = Model::linear(2, 1, rng.normal_vector(2));
    TrainOptions opt;
    opt.steps = 5;
    opt.batch_size = 4;
    int warned = 0;
    opt.warn = [&](const std::string&) { ++warned; };
    const auto r = train(init, d, Dataset{}, OptimizerConfig{}, opt);
    EXPECT_EQ(warned, 0);
    EXPECT_EQ(r.epochs_crossed, 0);
}
