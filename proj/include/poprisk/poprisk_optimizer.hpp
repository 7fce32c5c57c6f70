#pragma once

// Population-risk training: minibatch rate statistics, the off-diagonal rate
// tr(M A_B), its optimal projector, per-parameter gates, the gated
// adaptive optimizer with its AdamW baseline, and a small training loop.

#include "poprisk/csv.hpp"
#include "poprisk/models.hpp"
#include "poprisk/numerics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace poprisk {

inline constexpr int kDenseRateCap = 64;

struct BatchStats {
    Matrix grads;     // b x d, rows g_a
    Vector mean;      // g_bar
    Matrix centered;  // rows c_a = g_a - g_bar
    Vector variance;  // diag(Sigma_B)
    std::optional<Matrix> Sigma;
    std::optional<Matrix> A;  // g_bar g_bar^T - Sigma_B / (b - 1)

    Eigen::Index b() const { return grads.rows(); }
    Eigen::Index d() const { return grads.cols(); }
    bool dense() const { return A.has_value(); }
};

inline BatchStats batch_stats(const Matrix& grads, int dense_threshold = kDenseRateCap) {
    require(grads.rows() >= 2, "batch_stats: need b >= 2");
    require(grads.allFinite(), "batch_stats: non-finite gradient");
    BatchStats st;
    st.grads = grads;
    st.mean = grads.colwise().mean().transpose();
    st.centered = grads.rowwise() - st.mean.transpose();
    const double b = static_cast<double>(grads.rows());
    st.variance = st.centered.array().square().colwise().sum().transpose() / b;
    if (grads.cols() <= dense_threshold) {
        Matrix sigma = symmetrize(st.centered.transpose() * st.centered / b);
        st.A = st.mean * st.mean.transpose() - sigma / (b - 1.0);
        st.Sigma = std::move(sigma);
    }
    return st;
}

namespace detail {

inline void require_psd(const Matrix& m, const char* who) {
    require(m.rows() == m.cols(), std::string(who) + ": matrix must be square");
    const auto eig = sym_eig(m, 1e-8);
    const double scale = std::max(1.0, eig.values.cwiseAbs().maxCoeff());
    require(eig.values.minCoeff() >= -1e-8 * scale, std::string(who) + ": matrix is not PSD");
}

}  // namespace detail

/// Omega_B(M) = g_bar^T M g_bar - tr(M Sigma_B) / (b - 1).
inline double omega_rate(const BatchStats& st, const Matrix& M) {
    require(M.rows() == st.d(), "omega_rate: preconditioner dimension mismatch");
    detail::require_psd(M, "omega_rate");
    const double b = static_cast<double>(st.b());
    const double quad = st.mean.dot(M * st.mean);
    const double tr = (st.centered * M).cwiseProduct(st.centered).sum() / b;
    return quad - tr / (b - 1.0);
}

inline double omega_rate_diagonal(const BatchStats& st, const Vector& m) {
    require(m.size() == st.d(), "omega_rate_diagonal: dimension mismatch");
    require((m.array() >= 0.0).all(), "omega_rate_diagonal: negative diagonal entry");
    const double b = static_cast<double>(st.b());
    return (m.array() * (st.mean.array().square() - st.variance.array() / (b - 1.0))).sum();
}

/// (1/(b(b-1))) sum_{a != c} g_a^T M g_c, by direct enumeration.
inline double omega_pairwise(const Matrix& grads, const Matrix& M) {
    const auto b = grads.rows();
    require(b >= 2, "omega_pairwise: need b >= 2");
    const Matrix gm = grads * M;
    double acc = 0.0;
    for (Eigen::Index a = 0; a < b; ++a)
        for (Eigen::Index c = 0; c < b; ++c)
            if (a != c) acc += gm.row(a).dot(grads.row(c));
    return acc / static_cast<double>(b * (b - 1));
}

/// Kernel-block form (1/(b(b-1))) sum_{a != c} r_a^T J_a M J_c^T r_c from the
/// stacked batch Jacobian and output residuals.
inline double omega_kernel_block(const Model& model, const Dataset& batch, const Loss& loss, const Matrix& M) {
    const auto b = batch.size();
    require(b >= 2, "omega_kernel_block: need b >= 2");
    detail::require_psd(M, "omega_kernel_block");
    const Matrix jac = jacobian_stacked(model, batch);
    const Vector r = output_gradient(forward_stacked(model, batch), batch, loss) * static_cast<double>(b);
    const Matrix k = jac * M * jac.transpose();
    const auto p = batch.output_dim();
    double self = 0.0;
    for (Eigen::Index a = 0; a < b; ++a) {
        const auto ra = r.segment(a * p, p);
        self += ra.dot(k.block(a * p, a * p, p, p) * ra);
    }
    return (r.dot(k * r) - self) / static_cast<double>(b * (b - 1));
}

/// M* = P^{1/2} 1_{(0,inf)}(P^{1/2} A P^{1/2}) P^{1/2}. Eigenvalues within
/// rank_tol of zero (relative) count as nonpositive.
inline Matrix optimal_projector(const Matrix& A, const Matrix& P, double rank_tol = kDefaultRankTol) {
    require(A.rows() == A.cols() && P.rows() == A.rows() && P.cols() == A.cols(),
            "optimal_projector: dimension mismatch");
    detail::require_psd(P, "optimal_projector");
    const Matrix ph = psd_sqrt(P, 0.0);
    const auto eig = sym_eig(symmetrize(ph * A * ph));
    const double scale = eig.values.size() ? eig.values.cwiseAbs().maxCoeff() : 0.0;
    Matrix n = Matrix::Zero(A.rows(), A.cols());
    for (Eigen::Index j = 0; j < eig.values.size(); ++j)
        if (eig.values(j) > rank_tol * scale) n += eig.vectors.col(j) * eig.vectors.col(j).transpose();
    return symmetrize(ph * n * ph);
}

inline Matrix optimal_projector(const BatchStats& st, const Matrix& P) {
    require(st.dense(), "optimal_projector: dense rate matrix unavailable at this d");
    return optimal_projector(*st.A, P);
}

// ---------------------------------------------------------------------------
// Gates.

enum class GateKind { hard, soft, snr };

inline std::string to_string(GateKind k) {
    switch (k) {
        case GateKind::hard: return "hard";
        case GateKind::soft: return "soft";
        case GateKind::snr: return "snr";
    }
    return "?";
}

inline GateKind gate_from_string(const std::string& s) {
    if (s == "hard") return GateKind::hard;
    if (s == "soft") return GateKind::soft;
    if (s == "snr") return GateKind::snr;
    throw ContractViolation("unknown gate kind: " + s);
}

struct GateConfig {
    GateKind kind = GateKind::soft;
    double alpha = 1.0;
    double lambda_pop = 1.0;
    double eps = 1e-8;
};

/// Per-parameter gate from mu (mean estimate) and s (variance of the mean).
inline Vector diagonal_gate(const Vector& mu, const Vector& s, const GateConfig& cfg) {
    require(mu.size() == s.size(), "diagonal_gate: size mismatch");
    require((s.array() >= 0.0).all(), "diagonal_gate: negative variance");
    const Eigen::ArrayXd m2 = mu.array().square();
    const Eigen::ArrayXd thr = cfg.alpha * s.array();
    switch (cfg.kind) {
        case GateKind::hard: return (m2 > thr).cast<double>().matrix();
        case GateKind::soft: {
            const Eigen::ArrayXd delta = (m2 - thr).max(0.0);
            const Eigen::ArrayXd den = delta + cfg.lambda_pop * s.array() + cfg.eps;
            return (den > 0.0).select(delta / den, 0.0).matrix();
        }
        case GateKind::snr: {
            const Eigen::ArrayXd den = m2 + cfg.lambda_pop * s.array() + cfg.eps;
            return (den > 0.0).select(m2 / den, 0.0).matrix();
        }
    }
    return Vector::Ones(mu.size());
}

enum class LooRegime { fresh, finite, manual };

inline double loo_coefficient_fresh() { return 1.0; }

inline double loo_coefficient(long n, long b) {
    require(b >= 1 && b < n, "loo_coefficient: finite regime needs 1 <= b < n");
    return static_cast<double>(b) / static_cast<double>(n - b);
}

// ---------------------------------------------------------------------------
// Optimizer.

enum class OptimizerKind { poprisk, adamw };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::poprisk ? "poprisk" : "adamw"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "poprisk") return OptimizerKind::poprisk;
    if (s == "adamw") return OptimizerKind::adamw;
    throw ContractViolation("unknown optimizer: " + s);
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::poprisk;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double rho = 0.99;
    double eps = 1e-8;  // added to sqrt(v_hat)
    double weight_decay = 0.0;
    GateConfig gate;
    LooRegime regime = LooRegime::fresh;
    bool force_open = false;      // q = 1 regardless of statistics
    bool exact_variance = false;  // s_hat from per-example gradients of the batch

    void validate() const {
        require(lr >= 0.0 && std::isfinite(lr), "optimizer: lr must be finite and >= 0");
        require(beta1 >= 0.0 && beta1 < 1.0, "optimizer: beta1 must lie in [0,1)");
        require(beta2 >= 0.0 && beta2 < 1.0, "optimizer: beta2 must lie in [0,1)");
        require(rho >= 0.0 && rho < 1.0, "optimizer: rho must lie in [0,1)");
        require(eps > 0.0, "optimizer: eps must be positive");
        require(weight_decay >= 0.0, "optimizer: weight_decay must be >= 0");
        require(gate.alpha > 0.0, "optimizer: alpha must be positive");
        require(gate.lambda_pop >= 0.0, "optimizer: lambda_pop must be >= 0");
        require(gate.eps >= 0.0, "optimizer: gate eps must be >= 0");
    }
};

inline nlohmann::json optimizer_to_json(const OptimizerConfig& c) {
    nlohmann::json j;
    j["kind"] = to_string(c.kind);
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["rho"] = c.rho;
    j["eps"] = c.eps;
    j["weight_decay"] = c.weight_decay;
    j["gate"] = to_string(c.gate.kind);
    if (c.regime == LooRegime::fresh) j["alpha"] = "fresh";
    else if (c.regime == LooRegime::finite) j["alpha"] = "finite";
    else j["alpha"] = c.gate.alpha;
    j["lambda_pop"] = c.gate.lambda_pop;
    j["gate_eps"] = c.gate.eps;
    j["force_open"] = c.force_open;
    j["exact_variance"] = c.exact_variance;
    return j;
}

/// Missing keys take defaults; unknown keys are rejected.
inline OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    require(j.is_object(), "optimizer config must be an object");
    static const std::vector<std::string> known = {"kind", "lr", "beta1", "beta2", "rho", "eps", "weight_decay", "gate",
                                                   "alpha", "lambda_pop", "gate_eps", "force_open", "exact_variance"};
    for (const auto& [k, v] : j.items())
        require(std::find(known.begin(), known.end(), k) != known.end(), "optimizer config: unknown key '" + k + "'");
    OptimizerConfig c;
    if (j.contains("kind")) c.kind = optimizer_from_string(j.at("kind").get<std::string>());
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.rho = j.value("rho", c.rho);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("gate")) c.gate.kind = gate_from_string(j.at("gate").get<std::string>());
    if (j.contains("alpha")) {
        const auto& a = j.at("alpha");
        if (a.is_string()) {
            const auto s = a.get<std::string>();
            if (s == "fresh") c.regime = LooRegime::fresh;
            else if (s == "finite") c.regime = LooRegime::finite;
            else throw ContractViolation("optimizer config: alpha must be a number, 'fresh' or 'finite'");
        } else {
            c.regime = LooRegime::manual;
            c.gate.alpha = a.get<double>();
        }
    }
    c.gate.lambda_pop = j.value("lambda_pop", c.gate.lambda_pop);
    c.gate.eps = j.value("gate_eps", c.gate.eps);
    c.force_open = j.value("force_open", c.force_open);
    c.exact_variance = j.value("exact_variance", c.exact_variance);
    c.validate();
    return c;
}

struct PopRiskState {
    OptimizerConfig cfg;
    Vector m, v, s;
    long t = 0;
    Vector q;  // gate of the last step

    PopRiskState() = default;
    PopRiskState(OptimizerConfig c, Eigen::Index d)
        : cfg(std::move(c)), m(Vector::Zero(d)), v(Vector::Zero(d)), s(Vector::Zero(d)), q(Vector::Ones(d)) {
        cfg.validate();
    }
};

namespace detail {

inline void check_step_inputs(const PopRiskState& st, const Vector& grad, const Vector& w) {
    require(grad.size() == st.m.size() && w.size() == st.m.size(), "optimizer step: dimension mismatch");
    require(grad.allFinite(), "optimizer step: non-finite gradient");
}

}  // namespace detail

/// One step of the gated optimizer. `batch_variance`, when given, replaces
/// the streaming s_hat (it should be diag(Sigma_B)/(b-1)).
inline Vector poprisk_step(PopRiskState& st, const Vector& grad, const Vector& w,
                           const Vector* batch_variance = nullptr) {
    detail::check_step_inputs(st, grad, w);
    const auto& c = st.cfg;
    st.t += 1;
    const Vector m_prev = st.m;
    st.s = c.rho * st.s + (1.0 - c.rho) * (grad - m_prev).cwiseAbs2();
    st.m = c.beta1 * st.m + (1.0 - c.beta1) * grad;
    st.v = c.beta2 * st.v + (1.0 - c.beta2) * grad.cwiseAbs2();
    const double t = static_cast<double>(st.t);
    const Vector m_hat = st.m / (1.0 - std::pow(c.beta1, t));
    const Vector v_hat = st.v / (1.0 - std::pow(c.beta2, t));
    Vector s_hat = st.s / (1.0 - std::pow(c.rho, t));
    if (batch_variance) {
        require(batch_variance->size() == grad.size(), "poprisk_step: batch variance dimension mismatch");
        s_hat = *batch_variance;
    }
    st.q = c.force_open ? Vector::Ones(grad.size()) : diagonal_gate(m_hat, s_hat, c.gate);
    const Vector dir = (st.q.array() * m_hat.array() / (v_hat.array().sqrt() + c.eps)).matrix();
    return w - c.lr * dir - c.lr * c.weight_decay * w;
}

/// Decoupled-weight-decay Adam with the same hyperparameters; s is left alone.
inline Vector adamw_step(PopRiskState& st, const Vector& grad, const Vector& w) {
    detail::check_step_inputs(st, grad, w);
    const auto& c = st.cfg;
    st.t += 1;
    st.m = c.beta1 * st.m + (1.0 - c.beta1) * grad;
    st.v = c.beta2 * st.v + (1.0 - c.beta2) * grad.cwiseAbs2();
    const double t = static_cast<double>(st.t);
    const Vector m_hat = st.m / (1.0 - std::pow(c.beta1, t));
    const Vector v_hat = st.v / (1.0 - std::pow(c.beta2, t));
    st.q = Vector::Ones(grad.size());
    const Vector dir = (st.q.array() * m_hat.array() / (v_hat.array().sqrt() + c.eps)).matrix();
    return w - c.lr * dir - c.lr * c.weight_decay * w;
}

// ---------------------------------------------------------------------------
// One-step leave-one-out risk.

struct OneStepLoo {
    double loo = 0.0;        // (1/b) sum_a l_a(w - eta M g_bar_{-a})
    double predicted = 0.0;  // L_B(w) - eta tr(M A_B)
    double batch_loss = 0.0;
    double rate = 0.0;       // tr(M A_B)
};

inline OneStepLoo one_step_loo_risk(const Model& model, const Dataset& batch, const Loss& loss, double eta,
                                    const Matrix& M) {
    const auto b = batch.size();
    require(b >= 2, "one_step_loo_risk: need b >= 2");
    require(M.rows() == model.num_weights() && M.cols() == model.num_weights(),
            "one_step_loo_risk: preconditioner dimension mismatch");
    const Matrix g = per_example_gradients(model, batch, loss);
    const BatchStats st = batch_stats(g, 0);
    OneStepLoo out;
    out.rate = omega_rate(st, M);
    out.batch_loss = empirical_loss(model, batch, loss);
    out.predicted = out.batch_loss - eta * out.rate;
    const Vector total = g.colwise().sum().transpose();
    for (Eigen::Index a = 0; a < b; ++a) {
        const Vector g_loo = (total - g.row(a).transpose()) / static_cast<double>(b - 1);
        const Model m = model.with_weights(model.weights() - eta * (M * g_loo));
        const std::size_t idx[1] = {static_cast<std::size_t>(a)};
        out.loo += per_example_losses(m, batch.subset(idx), loss)(0);
    }
    out.loo /= static_cast<double>(b);
    return out;
}

// ---------------------------------------------------------------------------
// Finite-population identities by enumeration.

/// Sigma_g = (1/n) sum_i (g_i - g_bar)(g_i - g_bar)^T.
inline Matrix population_covariance(const Matrix& grads) {
    const Matrix c = grads.rowwise() - grads.colwise().mean();
    return c.transpose() * c / static_cast<double>(grads.rows());
}

/// Covariance of the size-b subset mean over all C(n,b) subsets.
inline Matrix subset_mean_covariance(const Matrix& grads, std::size_t b) {
    const auto n = static_cast<std::size_t>(grads.rows());
    require(b >= 1 && b <= n, "subset_mean_covariance: need 1 <= b <= n");
    const Vector mu = grads.colwise().mean().transpose();
    Matrix acc = Matrix::Zero(grads.cols(), grads.cols());
    double count = 0.0;
    for_each_subset(n, b, [&](const std::vector<std::size_t>& idx) {
        Vector m = Vector::Zero(grads.cols());
        for (auto i : idx) m += grads.row(static_cast<Eigen::Index>(i)).transpose();
        m = m / static_cast<double>(b) - mu;
        acc += m * m.transpose();
        count += 1.0;
    });
    return acc / count;
}

/// (n-b)/(b(n-1)) Sigma_g.
inline Matrix finite_population_covariance(const Matrix& grads, std::size_t b) {
    const double n = static_cast<double>(grads.rows());
    require(n >= 2 && b >= 1 && static_cast<double>(b) <= n, "finite_population_covariance: need 1 <= b <= n, n >= 2");
    const double bb = static_cast<double>(b);
    return (n - bb) / (bb * (n - 1.0)) * population_covariance(grads);
}

/// A learner maps a training set to a function returning the held-out loss at
/// one example of the full dataset.
using HoldoutLearner = std::function<double(const Dataset& train, const Dataset& held_out_point)>;

/// (1/n) sum_i loss_i(learner(S_{-i})), indexing by the held-out point.
inline double loo_average(const Dataset& data, const HoldoutLearner& learner) {
    const auto n = static_cast<std::size_t>(data.size());
    require(n >= 2, "loo_average: need n >= 2");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t one[1] = {i};
        acc += learner(data.without(i), data.subset(one));
    }
    return acc / static_cast<double>(n);
}

/// Same quantity by enumerating every size-(n-k) training subset and
/// averaging the loss over each of its k held-out points.
inline double holdout_enumeration_average(const Dataset& data, std::size_t k, const HoldoutLearner& learner) {
    const auto n = static_cast<std::size_t>(data.size());
    require(n >= 2 && n <= 12, "holdout_enumeration_average: need 2 <= n <= 12");
    require(k >= 1 && k < n, "holdout_enumeration_average: need 1 <= k < n");
    double acc = 0.0, count = 0.0;
    for_each_subset(n, n - k, [&](const std::vector<std::size_t>& train_idx) {
        const Dataset train = data.subset(train_idx);
        std::vector<bool> in(n, false);
        for (auto i : train_idx) in[i] = true;
        for (std::size_t i = 0; i < n; ++i) {
            if (in[i]) continue;
            const std::size_t one[1] = {i};
            acc += learner(train, data.subset(one));
            count += 1.0;
        }
    });
    return acc / count;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
    Loss loss;
    long steps = 1000;
    long batch_size = 0;  // 0 means full batch
    long log_every = 50;
    std::uint64_t seed = 0;
    double target_val_acc = -1.0;  // stop once reached (after logging) when in (0,1]
    std::function<void(const std::string&)> warn;  // defaults to std::clog
};

struct TrainResult {
    Model model;
    CsvTable log{{"step", "train_loss", "val_loss", "val_acc", "gate_open_fraction", "mean_q"}};
    long epochs_crossed = 0;
    long steps_run = 0;
    std::optional<long> first_step_at_target;
};

/// Fraction of rows whose argmax matches the target argmax; NaN for squared loss.
inline double accuracy(const Model& model, const Dataset& data, const Loss& loss) {
    if (loss.kind != LossKind::softmax_ce) return std::nan("");
    const Matrix u = predict(model, data.inputs);
    long hit = 0;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        Eigen::Index pu, py;
        u.row(i).maxCoeff(&pu);
        data.targets.row(i).maxCoeff(&py);
        hit += pu == py;
    }
    return static_cast<double>(hit) / static_cast<double>(u.rows());
}

/// Minibatches are drawn by reshuffling each epoch. Replayed batches break
/// the independence the gate assumes: the first epoch crossing is reported
/// through opt.warn, followed by a total at the end.
inline TrainResult train(const Model& init, const Dataset& train_set, const Dataset& val_set,
                         const OptimizerConfig& cfg_in, const TrainOptions& opt) {
    const auto n = static_cast<long>(train_set.size());
    const long b = opt.batch_size > 0 ? std::min(opt.batch_size, n) : n;
    OptimizerConfig cfg = cfg_in;
    if (cfg.regime == LooRegime::fresh) cfg.gate.alpha = loo_coefficient_fresh();
    else if (cfg.regime == LooRegime::finite) cfg.gate.alpha = loo_coefficient(n, b);
    if (cfg.exact_variance) require(b >= 2, "train: exact variance needs batch size >= 2");
    auto warn = opt.warn ? opt.warn : [](const std::string& s) { std::clog << "warning: " << s << '\n'; };

    TrainResult res{init};
    PopRiskState st(cfg, init.num_weights());
    Rng rng(opt.seed);
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::size_t cursor = 0;
    bool crossed_reported = false;

    auto log_row = [&](long step) {
        const double tl = empirical_loss(res.model, train_set, opt.loss);
        const double vl = val_set.size() ? empirical_loss(res.model, val_set, opt.loss) : std::nan("");
        const double va = val_set.size() ? accuracy(res.model, val_set, opt.loss) : std::nan("");
        const double open = step == 0 ? std::nan("") : (st.q.array() > 0.0).cast<double>().mean();
        const double mq = step == 0 ? std::nan("") : st.q.mean();
        res.log.add_row({static_cast<double>(step), tl, vl, va, open, mq});
        return va;
    };
    log_row(0);

    std::vector<std::size_t> batch(static_cast<std::size_t>(b));
    for (long step = 1; step <= opt.steps; ++step) {
        for (long k = 0; k < b; ++k) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
                ++res.epochs_crossed;
                if (!crossed_reported) {
                    warn("epoch boundary crossed at step " + std::to_string(step) +
                         "; replayed batches are not independent of the optimizer history");
                    crossed_reported = true;
                }
            }
            batch[static_cast<std::size_t>(k)] = order[cursor++];
        }
        std::sort(batch.begin(), batch.end());
        Vector w;
        if (cfg.kind == OptimizerKind::adamw) {
            const auto lg = mean_loss_gradient(res.model, train_set, opt.loss, batch);
            w = adamw_step(st, lg.gradient, res.model.weights());
        } else if (cfg.exact_variance) {
            const BatchStats bs = batch_stats(per_example_gradients(res.model, train_set.subset(batch), opt.loss), 0);
            const Vector var = bs.variance / static_cast<double>(b - 1);
            w = poprisk_step(st, bs.mean, res.model.weights(), &var);
        } else {
            const auto lg = mean_loss_gradient(res.model, train_set, opt.loss, batch);
            w = poprisk_step(st, lg.gradient, res.model.weights());
        }
        res.model = res.model.with_weights(std::move(w));
        res.steps_run = step;
        const bool at_log = opt.log_every > 0 && (step % opt.log_every == 0 || step == opt.steps);
        if (at_log) {
            const double va = log_row(step);
            if (opt.target_val_acc > 0.0 && std::isfinite(va) && va >= opt.target_val_acc) {
                res.first_step_at_target = step;
                break;
            }
        }
    }
    if (crossed_reported && res.epochs_crossed > 1)
        warn(std::to_string(res.epochs_crossed) + " epoch boundaries crossed in total");
    return res;
}

}  // namespace poprisk
