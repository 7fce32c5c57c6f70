#include "poprisk/models.hpp"

#include <gtest/gtest.h>

using namespace poprisk;

namespace {

Dataset gaussian_data(Rng& rng, int n, int in, int p) {
    Dataset d;
    d.inputs = rng.normal_matrix(n, in);
    d.targets = rng.normal_matrix(n, p);
    return d;
}

Architecture random_arch(Rng& rng, int in, int p) {
    Architecture a;
    a.kind = ModelKind::mlp;
    a.activation = rng.uniform() < 0.5 ? Activation::tanh : Activation::relu;
    a.widths = {in};
    const int hidden = 1 + static_cast<int>(rng.index(2));
    for (int h = 0; h < hidden; ++h) a.widths.push_back(2 + static_cast<int>(rng.index(6)));
    a.widths.push_back(p);
    return a;
}

Matrix fd_jacobian(const Model& m, const Dataset& d, double h) {
    const int dim = m.num_weights();
    Matrix out(d.size() * d.output_dim(), dim);
    for (int k = 0; k < dim; ++k) {
        Vector wp = m.weights(), wm = m.weights();
        wp(k) += h;
        wm(k) -= h;
        out.col(k) = (forward_stacked(m.with_weights(wp), d) - forward_stacked(m.with_weights(wm), d)) / (2 * h);
    }
    return out;
}

}  // namespace

TEST(ForwardStacked, LinearIsXw) {
    Rng rng(1);
    const Dataset d = gaussian_data(rng, 6, 4, 1);
    const Vector w = rng.normal_vector(4);
    const Model m = Model::linear(4, 1, w);
    EXPECT_LE((forward_stacked(m, d) - d.inputs * w).norm(), 1e-13);
}

TEST(ForwardStacked, ZeroFinalLayerGivesZero) {
    Rng rng(2);
    const Dataset d = gaussian_data(rng, 5, 3, 2);
    Model m = Model::init({ModelKind::mlp, {3, 4, 2}, Activation::tanh}, rng);
    const int off = m.arch().layer_offset(1);
    m.weights().tail(m.num_weights() - off).setZero();
    EXPECT_EQ(forward_stacked(m, d).norm(), 0.0);
}

TEST(ForwardStacked, BlocksMatchSingleExample) {
    Rng rng(3);
    const Dataset d = gaussian_data(rng, 7, 3, 2);
    const Model m = Model::init({ModelKind::mlp, {3, 5, 4, 2}, Activation::tanh}, rng);
    const Vector u = forward_stacked(m, d);
    for (int i = 0; i < 7; ++i) {
        const Vector x = d.inputs.row(i).transpose();
        EXPECT_LE((u.segment(2 * i, 2) - forward_one(m, x)).norm(), 1e-14);
    }
}

TEST(ForwardStacked, DimensionMismatchThrows) {
    Rng rng(4);
    const Dataset d = gaussian_data(rng, 3, 2, 1);
    const Model m = Model::linear(3, 1, Vector::Zero(3));
    EXPECT_THROW(forward_stacked(m, d), ContractViolation);
    EXPECT_THROW(jacobian_stacked(m, d), ContractViolation);
}

TEST(JacobianStacked, LinearIsDataMatrix) {
    Rng rng(5);
    const Dataset d = gaussian_data(rng, 8, 5, 1);
    const Model m = Model::linear(5, 1, rng.normal_vector(5));
    EXPECT_LE((jacobian_stacked(m, d) - d.inputs).norm(), 1e-15);
}

TEST(JacobianStacked, ConstantOutputModelIsZero) {
    Rng rng(6);
    const Dataset d = gaussian_data(rng, 4, 3, 1);
    const Model m = Model::linear(3, 1, Vector::Zero(3));
    Dataset zero_inputs = d;
    zero_inputs.inputs.setZero();
    EXPECT_EQ(jacobian_stacked(m, zero_inputs).norm(), 0.0);
}

TEST(JacobianStacked, FiniteDifferenceAgreementRandomConfigs) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int in = 1 + static_cast<int>(rng.index(4));
        const int p = 1 + static_cast<int>(rng.index(3));
        const int n = 1 + static_cast<int>(rng.index(60 / p));
        const Dataset d = gaussian_data(rng, n, in, p);
        Architecture arch = trial % 5 == 0 ? Architecture{ModelKind::linear, {in, p}, Activation::tanh}
                                           : random_arch(rng, in, p);
        if (arch.activation == Activation::relu) arch.activation = Activation::tanh;
        const Model m = Model::init(arch, rng);
        ASSERT_LE(m.num_weights(), 200);
        const Matrix j = jacobian_stacked(m, d);
        const Matrix fd = fd_jacobian(m, d, 1e-5);
        EXPECT_LE((j - fd).norm(), 1e-5 * std::max(1.0, j.norm())) << "trial " << trial;
    }
}

TEST(JacobianStacked, ReluAwayFromKinks) {
    Rng rng(8);
    const Dataset d = gaussian_data(rng, 10, 3, 2);
    const Model m = Model::init({ModelKind::mlp, {3, 6, 2}, Activation::relu}, rng);
    const Matrix j = jacobian_stacked(m, d);
    EXPECT_LE((j - fd_jacobian(m, d, 1e-7)).norm(), 1e-5 * std::max(1.0, j.norm()));
}

TEST(PerExampleGradients, ZeroResidualGivesZero) {
    Rng rng(9);
    Dataset d = gaussian_data(rng, 5, 3, 2);
    const Model m = Model::init({ModelKind::mlp, {3, 4, 2}, Activation::tanh}, rng);
    d.targets = predict(m, d.inputs);
    EXPECT_LE(per_example_gradients(m, d).norm(), 1e-15);
}

TEST(PerExampleGradients, LinearSingleExampleHandDerivation) {
    const Vector x = Eigen::Vector3d(1.0, -2.0, 0.5);
    const Vector w = Eigen::Vector3d(0.3, 0.1, -1.0);
    Dataset d;
    d.inputs = x.transpose();
    d.targets = Matrix::Constant(1, 1, 2.0);
    const Model m = Model::linear(3, 1, w);
    const Vector want = x * (x.dot(w) - 2.0);
    EXPECT_LE((per_example_gradients(m, d).row(0).transpose() - want).norm(), 1e-14);
}

TEST(PerExampleGradients, MeanEqualsFullBatchGradient) {
    Rng rng(10);
    for (auto kind : {LossKind::squared, LossKind::softmax_ce}) {
        Dataset d = gaussian_data(rng, 9, 3, 3);
        if (kind == LossKind::softmax_ce) {
            d.targets.setZero();
            for (int i = 0; i < 9; ++i) d.targets(i, rng.index(3)) = 1.0;
        }
        const Model m = Model::init({ModelKind::mlp, {3, 5, 3}, Activation::tanh}, rng);
        const Loss loss{kind};
        const Vector mean = per_example_gradients(m, d, loss).colwise().mean().transpose();
        const auto full = mean_loss_gradient(m, d, loss);
        EXPECT_LE((mean - full.gradient).norm(), 1e-10);
        EXPECT_NEAR(full.loss, empirical_loss(m, d, loss), 1e-12);
        const Matrix j = jacobian_stacked(m, d);
        const Vector via_outputs = j.transpose() * output_gradient(forward_stacked(m, d), d, loss);
        EXPECT_LE((via_outputs - full.gradient).norm(), 1e-10);
    }
}

TEST(MeanLossGradient, BatchAndWeightsMatchFiniteDifference) {
    Rng rng(12);
    const Dataset d = gaussian_data(rng, 8, 2, 1);
    const Model m = Model::init({ModelKind::mlp, {2, 4, 1}, Activation::tanh}, rng);
    const Vector c = Vector::Ones(8) + 0.3 * rng.normal_vector(8);
    const auto lg = mean_loss_gradient(m, d, {}, {}, &c);
    const double h = 1e-6;
    for (int k = 0; k < m.num_weights(); ++k) {
        Vector wp = m.weights(), wm = m.weights();
        wp(k) += h;
        wm(k) -= h;
        const double fd = (empirical_loss(m.with_weights(wp), d, {}, &c) - empirical_loss(m.with_weights(wm), d, {}, &c)) / (2 * h);
        EXPECT_NEAR(lg.gradient(k), fd, 1e-7);
    }
    const std::vector<std::size_t> idx{1, 4, 6};
    const auto batch = mean_loss_gradient(m, d, {}, idx);
    const auto sub = mean_loss_gradient(m, d.subset(idx));
    EXPECT_LE((batch.gradient - sub.gradient).norm(), 1e-14);
}

TEST(HessianVectorProduct, MatchesGradientDifferences) {
    Rng rng(13);
    for (auto kind : {LossKind::squared, LossKind::softmax_ce}) {
        Dataset d = gaussian_data(rng, 6, 3, 2);
        if (kind == LossKind::softmax_ce) {
            d.targets.setZero();
            for (int i = 0; i < 6; ++i) d.targets(i, rng.index(2)) = 1.0;
        }
        const Model m = Model::init({ModelKind::mlp, {3, 4, 2}, Activation::tanh}, rng);
        const Loss loss{kind};
        const Vector v = rng.normal_vector(m.num_weights());
        const double h = 1e-5;
        const Vector fd = (mean_loss_gradient(m.with_weights(m.weights() + h * v), d, loss).gradient -
                           mean_loss_gradient(m.with_weights(m.weights() - h * v), d, loss).gradient) / (2 * h);
        const Vector hv = hessian_vector_product(m, d, loss, v);
        EXPECT_LE((hv - fd).norm(), 1e-7 * std::max(1.0, hv.norm()));
        const Matrix hess = loss_hessian(m, d, loss);
        EXPECT_LE((hess * v - hv).norm(), 1e-12 * std::max(1.0, hv.norm()));
    }
}

TEST(HessianVectorProduct, LinearSquaredIsGram) {
    Rng rng(14);
    const Dataset d = gaussian_data(rng, 7, 3, 1);
    const Model m = Model::linear(3, 1, rng.normal_vector(3));
    const Matrix want = d.inputs.transpose() * d.inputs / 7.0;
    EXPECT_LE((loss_hessian(m, d, {}) - want).norm(), 1e-13);
}

TEST(OutputHessian, SquaredLossIsIdentityOverN) {
    Rng rng(15);
    const Dataset d = gaussian_data(rng, 4, 2, 2);
    const Matrix b = output_hessian(Vector::Zero(8), d, {});
    EXPECT_LE((b - Matrix::Identity(8, 8) / 4.0).norm(), 1e-15);
}

TEST(MakeDataset, ModularCounting) {
    GeneratorConfig cfg;
    cfg.kind = GeneratorKind::modular_arithmetic;
    cfg.modulus = 7;
    cfg.op = ModularOp::add;
    cfg.train_fraction = 0.5;
    const auto split = make_split(cfg, 1);
    EXPECT_EQ(split.train.size(), 25);
    EXPECT_EQ(split.test.size(), 24);
    for (int i = 0; i < split.train.size(); ++i) {
        EXPECT_EQ(split.train.targets.row(i).sum(), 1.0);
        int a = -1, b = -1, c = -1;
        for (int k = 0; k < 7; ++k) {
            if (split.train.inputs(i, k) == 1.0) a = k;
            if (split.train.inputs(i, 7 + k) == 1.0) b = k;
            if (split.train.targets(i, k) == 1.0) c = k;
        }
        EXPECT_EQ((a + b) % 7, c);
    }
}

TEST(MakeDataset, DivisionNeedsPrime) {
    GeneratorConfig cfg;
    cfg.kind = GeneratorKind::modular_arithmetic;
    cfg.op = ModularOp::div;
    cfg.modulus = 8;
    EXPECT_THROW(make_dataset(cfg, 1), ContractViolation);
    cfg.modulus = 7;
    const auto d = make_dataset(cfg, 1);
    EXPECT_EQ(d.size(), 21);
}

TEST(MakeDataset, NoiselessTeacherRecordsZeroNoise) {
    GeneratorConfig cfg;
    cfg.kind = GeneratorKind::noisy_teacher;
    cfg.noise_sd = 0.0;
    cfg.n = 12;
    const auto d = make_dataset(cfg, 3);
    ASSERT_TRUE(d.noise.has_value());
    EXPECT_EQ(d.noise->norm(), 0.0);
}

TEST(MakeDataset, BitwiseDeterministic) {
    for (auto kind : {GeneratorKind::linear_gaussian, GeneratorKind::noisy_teacher,
                      GeneratorKind::modular_arithmetic, GeneratorKind::noisy_function_1d}) {
        GeneratorConfig cfg;
        cfg.kind = kind;
        cfg.noise_sd = 0.3;
        cfg.n_test = 5;
        const auto a = make_split(cfg, 99), b = make_split(cfg, 99);
        EXPECT_EQ(a.train.inputs, b.train.inputs);
        EXPECT_EQ(a.train.targets, b.train.targets);
        EXPECT_EQ(a.test.targets, b.test.targets);
    }
}

TEST(DatasetJson, RoundTrip) {
    GeneratorConfig cfg;
    cfg.noise_sd = 0.1;
    const Dataset d = make_dataset(cfg, 5);
    const Dataset back = dataset_from_json(nlohmann::json::parse(dataset_to_json(d).dump()));
    EXPECT_EQ(back.inputs, d.inputs);
    EXPECT_EQ(back.targets, d.targets);
    EXPECT_EQ(*back.noise, *d.noise);
    EXPECT_EQ(back.meta["seed"], 5);
    auto bad = dataset_to_json(d);
    bad["extra"] = 1;
    EXPECT_THROW(dataset_from_json(bad), ContractViolation);
}
