#pragma once

// Frozen-kernel spectral engine: SVD of J_S at initialization, the five
// spectral filters, the unified bias-variance split, the predictive-rank
// path, weight-decayed ridge flow and the grokking transfer mass.

#include "poprisk/csv.hpp"
#include "poprisk/models.hpp"

#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace poprisk {

struct SpectralModel {
    Matrix U;             // np x r
    Vector sigma;         // r, descending, positive
    Matrix V;             // d x r
    Matrix C0;            // n_Q p x r
    Matrix Gamma0;        // r x r
    Vector a_bar;         // U^T (ybar - U_S(0))
    Matrix Sigma_zeta;    // r x r
    Vector u_s0, u_q0;    // U_S(0), U_Q(0)
    Eigen::Index n = 0;   // number of training examples
    SpectralDecomposition gamma_eig;  // lambda_j, psi_j of Gamma0

    Eigen::Index rank() const { return sigma.size(); }
    /// Number of strictly positive eigenvalues of Gamma0.
    Eigen::Index predictive_rank() const { return retained_rank(gamma_eig.values); }
    /// Ubar_Q = U_Q(0) + C0 abar.
    Vector mean_test_output() const { return u_q0 + C0 * a_bar; }
};

namespace detail {

inline SpectralModel spectral_core(const Model& model, const Dataset& train, const Dataset& test, double rank_tol) {
    train.validate();
    test.validate();
    const Matrix js = jacobian_stacked(model, train);
    const Matrix jq = jacobian_stacked(model, test);
    Eigen::JacobiSVD<Matrix> svd(js, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > rank_tol * sv(0) && sv(r) > 0.0) ++r;
    if (r == 0) throw ContractViolation("build_spectral_model: degenerate Jacobian (rank 0)");
    SpectralModel sm;
    sm.n = train.size();
    sm.U = svd.matrixU().leftCols(r);
    sm.sigma = sv.head(r);
    sm.V = svd.matrixV().leftCols(r);
    sm.C0 = jq * sm.V * sm.sigma.cwiseInverse().asDiagonal();
    sm.Gamma0 = symmetrize(sm.C0.transpose() * sm.C0);
    sm.gamma_eig = sym_eig(sm.Gamma0);
    sm.u_s0 = forward_stacked(model, train);
    sm.u_q0 = forward_stacked(model, test);
    const Vector ybar = stack_rows(train.noise ? train.clean_targets() : train.targets);
    sm.a_bar = sm.U.transpose() * (ybar - sm.u_s0);
    return sm;
}

}  // namespace detail

/// Isotropic label noise: Sigma_zeta = noise_var * I_r.
inline SpectralModel build_spectral_model(const Model& model, const Dataset& train, const Dataset& test,
                                          double noise_var, double rank_tol = kDefaultRankTol) {
    require(noise_var >= 0.0, "build_spectral_model: noise variance must be >= 0");
    SpectralModel sm = detail::spectral_core(model, train, test, rank_tol);
    sm.Sigma_zeta = noise_var * Matrix::Identity(sm.rank(), sm.rank());
    return sm;
}

/// Explicit covariance of the stacked label noise xi (np x np); Sigma_zeta = U^T Cov U.
inline SpectralModel build_spectral_model(const Model& model, const Dataset& train, const Dataset& test,
                                          const Matrix& noise_cov, double rank_tol = kDefaultRankTol) {
    const Eigen::Index np = train.size() * train.output_dim();
    require(noise_cov.rows() == np && noise_cov.cols() == np, "build_spectral_model: noise covariance must be np x np");
    require(relative_asymmetry(noise_cov) <= 1e-8, "build_spectral_model: noise covariance must be symmetric");
    SpectralModel sm = detail::spectral_core(model, train, test, rank_tol);
    sm.Sigma_zeta = symmetrize(sm.U.transpose() * noise_cov * sm.U);
    return sm;
}

enum class FilterKind { gradient_flow, ridge, threshold, rank, identity };

inline std::string to_string(FilterKind k) {
    switch (k) {
        case FilterKind::gradient_flow: return "gradient-flow";
        case FilterKind::ridge: return "ridge";
        case FilterKind::threshold: return "threshold";
        case FilterKind::rank: return "rank";
        case FilterKind::identity: return "identity";
    }
    return "unknown";
}

struct Filter {
    FilterKind kind = FilterKind::identity;
    double param = 0.0;
    Matrix M;  // r x r, 0 <= M <= I
};

/// The five spectral filters on the mobile singular space. `param` is t,
/// eta, tau (on sigma^2) or the rank r; ignored for the identity.
inline Filter make_filter(FilterKind kind, double param, const SpectralModel& sm) {
    const Eigen::Index r = sm.rank();
    const double n = static_cast<double>(sm.n);
    const Vector s2 = sm.sigma.array().square();
    Filter f{kind, param, Matrix::Zero(r, r)};
    switch (kind) {
        case FilterKind::gradient_flow:
            require(param >= 0.0, "make_filter: gradient-flow time must be >= 0");
            f.M.diagonal() = -((-param * s2.array() / n).expm1()).matrix();
            break;
        case FilterKind::ridge:
            require(param > 0.0, "make_filter: ridge eta must be > 0");
            f.M.diagonal() = (s2.array() / (s2.array() + n * param)).matrix();
            break;
        case FilterKind::threshold:
            require(param >= 0.0, "make_filter: threshold must be >= 0");
            for (Eigen::Index j = 0; j < r; ++j) f.M(j, j) = s2(j) >= param ? 1.0 : 0.0;
            break;
        case FilterKind::rank: {
            require(param >= 0.0 && param <= static_cast<double>(r) && param == std::floor(param),
                    "make_filter: rank must be an integer in [0, r]");
            const auto k = static_cast<Eigen::Index>(param);
            const Matrix psi = sm.gamma_eig.vectors.leftCols(k);
            f.M = psi * psi.transpose();
            break;
        }
        case FilterKind::identity:
            f.M.setIdentity();
            break;
    }
    return f;
}

struct BiasVariance {
    double bias = 0.0;
    double variance = 0.0;
    double risk = 0.0;
};

inline BiasVariance bias_variance(const SpectralModel& sm, const Matrix& M) {
    require(M.rows() == sm.rank() && M.cols() == sm.rank(), "bias_variance: filter does not match rank");
    const Eigen::Index r = sm.rank();
    const Vector res = (Matrix::Identity(r, r) - M) * sm.a_bar;
    BiasVariance out;
    out.bias = res.dot(sm.Gamma0 * res);
    out.variance = (M * sm.Gamma0 * M * sm.Sigma_zeta).trace();
    out.risk = out.bias + out.variance;
    return out;
}

inline BiasVariance bias_variance(const SpectralModel& sm, const Filter& f) { return bias_variance(sm, f.M); }

/// U_Q^M for one label draw y (stacked).
inline Vector filtered_test_output(const SpectralModel& sm, const Matrix& M, const Vector& y) {
    return sm.u_q0 + sm.C0 * (M * (sm.U.transpose() * (y - sm.u_s0)));
}

struct RankPathEntry {
    Eigen::Index r = 0;
    double bias = 0.0;
    double variance = 0.0;
    double risk = 0.0;
    double increment = std::numeric_limits<double>::quiet_NaN();  // R_{r+1} - R_r; NaN at the end
};

/// R_r for r = 0..rho along the Gamma0 eigenbasis.
inline std::vector<RankPathEntry> predictive_rank_path(const SpectralModel& sm) {
    const Eigen::Index rho = sm.predictive_rank();
    const auto& lam = sm.gamma_eig.values;
    const auto& psi = sm.gamma_eig.vectors;
    std::vector<double> signal(rho), noise(rho);
    for (Eigen::Index j = 0; j < rho; ++j) {
        const double c = psi.col(j).dot(sm.a_bar);
        signal[j] = lam(j) * c * c;
        noise[j] = lam(j) * psi.col(j).dot(sm.Sigma_zeta * psi.col(j));
    }
    std::vector<RankPathEntry> path;
    for (Eigen::Index r = 0; r <= rho; ++r) {
        RankPathEntry e;
        e.r = r;
        for (Eigen::Index j = r; j < rho; ++j) e.bias += signal[j];
        for (Eigen::Index j = 0; j < r; ++j) e.variance += noise[j];
        e.risk = e.bias + e.variance;
        if (r < rho) e.increment = noise[r] - signal[r];
        path.push_back(e);
    }
    return path;
}

/// Smallest t with min_j (sigma_j^2 + n lambda) t / n >= 40.
inline double infinite_horizon(const Vector& sigma, Eigen::Index n, double lambda = 0.0) {
    require(sigma.size() > 0 && sigma.minCoeff() > 0.0, "infinite_horizon: need positive singular values");
    const double rate = (sigma.minCoeff() * sigma.minCoeff() + static_cast<double>(n) * lambda) / static_cast<double>(n);
    return 40.0 / rate;
}

struct RidgeFlowResult {
    Vector weights;
    Vector filter;   // M_j^lambda(t)
    Vector sigma;
    Matrix V;
};

/// Closed-form weight-decayed gradient flow for a single-output linear model,
/// dw/dt = -(1/n) X^T (X w - y) - lambda w, started from the model's weights.
inline RidgeFlowResult ridge_flow(const Model& model, const Dataset& data, double lambda, double t,
                                  double rank_tol = kDefaultRankTol) {
    require(model.arch().kind == ModelKind::linear && model.output_dim() == 1, "ridge_flow: needs a single-output linear model");
    require(lambda >= 0.0 && t >= 0.0, "ridge_flow: need lambda >= 0 and t >= 0");
    require(data.input_dim() == model.input_dim(), "ridge_flow: dimension mismatch");
    const double n = static_cast<double>(data.size());
    const Matrix& X = data.inputs;
    Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeFullV);
    const Vector& sv = svd.singularValues();
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > rank_tol * sv(0) && sv(r) > 0.0) ++r;
    const Matrix V = svd.matrixV().leftCols(r);
    const Matrix Vperp = svd.matrixV().rightCols(svd.matrixV().cols() - r);
    const Vector a = svd.matrixU().leftCols(r).transpose() * data.targets.col(0);
    const Vector& w0 = model.weights();
    const Vector alpha0 = V.transpose() * w0;

    RidgeFlowResult out;
    out.sigma = sv.head(r);
    out.V = V;
    out.filter.resize(r);
    Vector alpha(r);
    for (Eigen::Index j = 0; j < r; ++j) {
        const double s2 = out.sigma(j) * out.sigma(j);
        const double decay = std::exp(-(s2 + n * lambda) * t / n);
        const double fixed = out.sigma(j) * a(j) / (s2 + n * lambda);
        alpha(j) = alpha0(j) * decay + fixed * (1.0 - decay);
        out.filter(j) = s2 / (s2 + n * lambda) * (1.0 - decay);
    }
    out.weights = V * alpha + std::exp(-lambda * t) * (Vperp * (Vperp.transpose() * w0));
    return out;
}

/// Ridge regression solution X^T (X X^T + n lambda I)^{-1} y (lambda > 0) or X^dagger y (lambda = 0).
inline Vector ridge_solution(const Dataset& data, double lambda) {
    const Matrix& X = data.inputs;
    const double n = static_cast<double>(data.size());
    if (lambda == 0.0) return pinv(X) * data.targets.col(0);
    const Matrix k = X * X.transpose() + n * lambda * Matrix::Identity(X.rows(), X.rows());
    return X.transpose() * k.ldlt().solve(data.targets.col(0));
}

struct TransferMass {
    double t = 0.0;
    Vector spectrum;        // eigenvalues of n^2 M_t Gamma0 M_t, descending
    double leading_mass = 0.0;
    double tail_mass = 0.0;
};

/// Spectrum of n^2 M_t Gamma0 M_t with the top `k_lead` eigenvalues counted as leading mass.
inline TransferMass grokking_transfer_mass(const SpectralModel& sm, double t, Eigen::Index k_lead = 1) {
    require(k_lead >= 0, "grokking_transfer_mass: k_lead must be >= 0");
    const Matrix M = make_filter(FilterKind::gradient_flow, t, sm).M;
    const double n = static_cast<double>(sm.n);
    TransferMass out;
    out.t = t;
    out.spectrum = sym_eig(symmetrize(n * n * M * sm.Gamma0 * M)).values.cwiseMax(0.0);
    const Eigen::Index k = std::min<Eigen::Index>(k_lead, out.spectrum.size());
    out.leading_mass = out.spectrum.head(k).sum();
    out.tail_mass = out.spectrum.tail(out.spectrum.size() - k).sum();
    return out;
}

/// First grid time at which the leading mass overtakes the tail mass after
/// having been below it; empty when no such crossing occurs on the grid.
inline std::optional<double> mass_crossing_time(const std::vector<TransferMass>& path) {
    bool below = false;
    for (const auto& m : path) {
        if (m.leading_mass < m.tail_mass) below = true;
        else if (below) return m.t;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV emitters.

inline CsvTable rank_path_csv(const std::vector<RankPathEntry>& path) {
    CsvTable t({"r", "bias", "variance", "risk", "increment"});
    for (const auto& e : path) t.add_row({static_cast<double>(e.r), e.bias, e.variance, e.risk, e.increment});
    return t;
}

inline CsvTable ridge_path_csv(const SpectralModel& sm, const std::vector<double>& lambdas) {
    CsvTable t({"lambda", "bias", "variance", "risk"});
    for (double l : lambdas) {
        const auto bv = bias_variance(sm, make_filter(FilterKind::ridge, l, sm));
        t.add_row({l, bv.bias, bv.variance, bv.risk});
    }
    return t;
}

inline CsvTable grokking_mass_csv(const std::vector<TransferMass>& path) {
    CsvTable t({"t", "leading_mass", "tail_mass"});
    for (const auto& m : path) t.add_row({m.t, m.leading_mass, m.tail_mass});
    return t;
}

}  // namespace poprisk
