#pragma once

// Desk-scale experiments behind poprisk-lab: versioned JSON configs, seeded
// per-seed runs, CSV/JSON artifacts and named assertions.

#include "poprisk/frozen_kernel.hpp"
#include "poprisk/influence.hpp"
#include "poprisk/pathwise_operators.hpp"
#include "poprisk/poprisk_optimizer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#ifndef POPRISK_VERSION
#define POPRISK_VERSION "0.0.0"
#endif

namespace poprisk {

inline constexpr int kConfigSchemaVersion = 1;

inline std::string tool_version() { return POPRISK_VERSION; }

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

inline bool all_passed(const std::vector<Check>& checks) {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

// ---------------------------------------------------------------------------
// Configuration.

enum class TrajectorySpecKind { flow, sgd };

struct TrajectorySpec {
    TrajectorySpecKind kind = TrajectorySpecKind::flow;
    LossKind loss = LossKind::squared;
    double horizon = 1.0;
    bool horizon_in_kernel_units = false;  // horizon * n / lambda_max(K_SS(0))
    long steps = 100;
    long batch_size = 0;
    long log_every = 50;
};

struct ExperimentConfig {
    int schema_version = kConfigSchemaVersion;
    std::string experiment;
    GeneratorConfig dataset;
    Architecture model{ModelKind::linear, {2, 1}, Activation::tanh};
    OptimizerConfig optimizer;
    TrajectorySpec trajectory;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string out = "runs";
    nlohmann::json params = nlohmann::json::object();

    void validate() const;
};

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"double-descent", "benign-overfitting", "mini-grokking",
                                                "coupling-audit", "denoise-1d",     "ridge-path"};
    return names;
}

namespace detail {

inline std::string modular_op_name(ModularOp op) {
    switch (op) {
        case ModularOp::add: return "add";
        case ModularOp::sub: return "sub";
        case ModularOp::mul: return "mul";
        case ModularOp::div: return "div";
    }
    return "add";
}

inline nlohmann::json dataset_json(const GeneratorConfig& g) {
    return {{"generator", to_string(g.kind)},  {"n", g.n},
            {"n_test", g.n_test},              {"input_dim", g.input_dim},
            {"output_dim", g.output_dim},      {"noise_sd", g.noise_sd},
            {"teacher_hidden", g.teacher_hidden}, {"modulus", g.modulus},
            {"op", modular_op_name(g.op)},     {"train_fraction", g.train_fraction},
            {"frequency", g.frequency},        {"duplicate_first", g.duplicate_first}};
}

inline GeneratorConfig dataset_from(const nlohmann::json& j) {
    GeneratorConfig g;
    g.kind = generator_from_string(j.at("generator").get<std::string>());
    g.n = j.at("n").get<int>();
    g.n_test = j.at("n_test").get<int>();
    g.input_dim = j.at("input_dim").get<int>();
    g.output_dim = j.at("output_dim").get<int>();
    g.noise_sd = j.at("noise_sd").get<double>();
    g.teacher_hidden = j.at("teacher_hidden").get<std::vector<int>>();
    g.modulus = j.at("modulus").get<int>();
    g.op = modular_op_from_string(j.at("op").get<std::string>());
    g.train_fraction = j.at("train_fraction").get<double>();
    g.frequency = j.at("frequency").get<int>();
    g.duplicate_first = j.at("duplicate_first").get<bool>();
    return g;
}

inline nlohmann::json model_json(const Architecture& a) {
    return {{"kind", a.kind == ModelKind::linear ? "linear" : "mlp"},
            {"widths", a.widths},
            {"activation", a.activation == Activation::tanh ? "tanh" : "relu"}};
}

inline Architecture model_from(const nlohmann::json& j) {
    Architecture a;
    const auto kind = j.at("kind").get<std::string>();
    require(kind == "linear" || kind == "mlp", "model.kind must be linear or mlp");
    a.kind = kind == "linear" ? ModelKind::linear : ModelKind::mlp;
    a.widths = j.at("widths").get<std::vector<int>>();
    const auto act = j.at("activation").get<std::string>();
    require(act == "tanh" || act == "relu", "model.activation must be tanh or relu");
    a.activation = act == "tanh" ? Activation::tanh : Activation::relu;
    a.validate();
    return a;
}

inline nlohmann::json trajectory_json(const TrajectorySpec& t) {
    return {{"kind", t.kind == TrajectorySpecKind::flow ? "flow" : "sgd"},
            {"loss", t.loss == LossKind::squared ? "squared" : "softmax-ce"},
            {"horizon", t.horizon},
            {"horizon_unit", t.horizon_in_kernel_units ? "kernel" : "absolute"},
            {"steps", t.steps},
            {"batch_size", t.batch_size},
            {"log_every", t.log_every}};
}

inline TrajectorySpec trajectory_from(const nlohmann::json& j) {
    TrajectorySpec t;
    const auto kind = j.at("kind").get<std::string>();
    require(kind == "flow" || kind == "sgd", "trajectory.kind must be flow or sgd");
    t.kind = kind == "flow" ? TrajectorySpecKind::flow : TrajectorySpecKind::sgd;
    const auto loss = j.at("loss").get<std::string>();
    require(loss == "squared" || loss == "softmax-ce", "trajectory.loss must be squared or softmax-ce");
    t.loss = loss == "squared" ? LossKind::squared : LossKind::softmax_ce;
    t.horizon = j.at("horizon").get<double>();
    const auto unit = j.at("horizon_unit").get<std::string>();
    require(unit == "absolute" || unit == "kernel", "trajectory.horizon_unit must be absolute or kernel");
    t.horizon_in_kernel_units = unit == "kernel";
    t.steps = j.at("steps").get<long>();
    t.batch_size = j.at("batch_size").get<long>();
    t.log_every = j.at("log_every").get<long>();
    return t;
}

/// Recursively replaces values of `base` by those in `patch`; every key in
/// `patch` must already exist in `base`.
inline void overlay(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
    require(patch.is_object(), "config: " + (path.empty() ? std::string("root") : path) + " must be an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        require(base.contains(it.key()), "config: unknown key " + key);
        auto& slot = base[it.key()];
        if (slot.is_object() && it.value().is_object()) overlay(slot, it.value(), key);
        else slot = it.value();
    }
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    return {{"schema_version", c.schema_version},
            {"experiment", c.experiment},
            {"dataset", detail::dataset_json(c.dataset)},
            {"model", detail::model_json(c.model)},
            {"optimizer", optimizer_to_json(c.optimizer)},
            {"trajectory", detail::trajectory_json(c.trajectory)},
            {"seeds", c.seeds},
            {"out", c.out},
            {"params", c.params}};
}

inline void ExperimentConfig::validate() const {
    require(schema_version == kConfigSchemaVersion, "config: unsupported schema_version " + std::to_string(schema_version));
    require(std::find(experiment_names().begin(), experiment_names().end(), experiment) != experiment_names().end(),
            "config: unknown experiment " + experiment);
    require(!seeds.empty(), "config: seeds must be non-empty");
    require(trajectory.steps >= 1, "config: trajectory.steps must be >= 1");
    require(trajectory.horizon > 0.0, "config: trajectory.horizon must be > 0");
    require(trajectory.batch_size >= 0 && trajectory.log_every >= 1, "config: bad batch_size or log_every");
    require(model.input_dim() == (dataset.kind == GeneratorKind::modular_arithmetic ? 2 * dataset.modulus
                                  : dataset.kind == GeneratorKind::noisy_function_1d ? 1
                                                                                     : dataset.input_dim),
            "config: model input width does not match the dataset");
    require(model.output_dim() == (dataset.kind == GeneratorKind::modular_arithmetic ? dataset.modulus
                                   : dataset.kind == GeneratorKind::noisy_function_1d ? 1
                                                                                      : dataset.output_dim),
            "config: model output width does not match the dataset");
    optimizer.validate();
}

/// Built-in defaults; also the schema against which user configs are checked.
inline ExperimentConfig default_config(const std::string& name) {
    ExperimentConfig c;
    c.experiment = name;
    c.out = "runs/" + name;
    auto& d = c.dataset;
    auto& t = c.trajectory;
    if (name == "double-descent" || name == "benign-overfitting" || name == "ridge-path") {
        d.kind = GeneratorKind::linear_gaussian;
        d.n = 20;
        d.n_test = 50;
        d.input_dim = name == "benign-overfitting" ? 100 : 40;
        d.noise_sd = name == "double-descent" ? 5.0 : 0.5;
        c.model = {ModelKind::linear, {d.input_dim, 1}, Activation::tanh};
        if (name == "double-descent") c.params = {{"mc_draws", 10000}, {"rank_tol", kDefaultRankTol}};
        if (name == "benign-overfitting")
            c.params = {{"noise_levels", {0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 1.5}}, {"mc_draws", 10000}};
        if (name == "ridge-path")
            c.params = {{"lambdas", {0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0}},
                        {"ode_steps_per_unit_rate", 4.0}};
    } else if (name == "mini-grokking") {
        d.kind = GeneratorKind::modular_arithmetic;
        d.modulus = 23;
        d.op = ModularOp::add;
        d.train_fraction = 0.7;
        c.model = {ModelKind::mlp, {46, 256, 23}, Activation::relu};
        c.optimizer.lr = 3e-3;
        c.optimizer.weight_decay = 1.0;
        c.optimizer.regime = LooRegime::finite;
        t = {TrajectorySpecKind::sgd, LossKind::softmax_ce, 1.0, false, 30000, 64, 250};
        c.params = {{"target_val_acc", 0.95}};
    } else if (name == "coupling-audit") {
        d.kind = GeneratorKind::noisy_teacher;
        d.n = 12;
        d.n_test = 40;
        d.input_dim = 2;
        d.noise_sd = 0.3;
        c.model = {ModelKind::mlp, {2, 8, 1}, Activation::tanh};
        t = {TrajectorySpecKind::flow, LossKind::squared, 10000.0, true, 40000, 0, 800};
        c.params = {{"rank_tol", kDefaultRankTol}};
    } else if (name == "denoise-1d") {
        d.kind = GeneratorKind::noisy_function_1d;
        d.n = 64;
        d.n_test = 200;
        d.noise_sd = 0.3;
        d.frequency = 3;
        c.model = {ModelKind::mlp, {1, 64, 64, 1}, Activation::tanh};
        c.optimizer.lr = 3e-3;
        c.optimizer.regime = LooRegime::finite;
        c.optimizer.gate.kind = GateKind::hard;
        t = {TrajectorySpecKind::sgd, LossKind::squared, 1.0, false, 10000, 16, 200};
        c.params = {{"best_final_tolerance", 1.1}};
    } else {
        throw ContractViolation("unknown experiment: " + name);
    }
    return c;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("experiment") && j.at("experiment").is_string(),
            "config: missing \"experiment\"");
    if (j.contains("schema_version"))
        require(j.at("schema_version").is_number_integer() && j.at("schema_version").get<int>() == kConfigSchemaVersion,
                "config: unsupported schema_version");
    nlohmann::json merged = config_to_json(default_config(j.at("experiment").get<std::string>()));
    detail::overlay(merged, j, "");
    ExperimentConfig c;
    try {
        c.schema_version = merged.at("schema_version").get<int>();
        c.experiment = merged.at("experiment").get<std::string>();
        c.dataset = detail::dataset_from(merged.at("dataset"));
        c.model = detail::model_from(merged.at("model"));
        c.optimizer = optimizer_from_json(merged.at("optimizer"));
        c.trajectory = detail::trajectory_from(merged.at("trajectory"));
        c.seeds = merged.at("seeds").get<std::vector<std::uint64_t>>();
        c.out = merged.at("out").get<std::string>();
        c.params = merged.at("params");
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot read config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("config " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Artifacts.

struct SeedOutput {
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, CsvTable>> tables;
    nlohmann::json summary = nlohmann::json::object();
};

struct RunArtifact {
    nlohmann::json config;
    std::vector<std::pair<std::string, CsvTable>> tables;
    nlohmann::json summary = nlohmann::json::object();
    std::vector<Check> checks;
    std::string version = tool_version();
    double wall_clock_seconds = 0.0;

    bool passed() const { return all_passed(checks); }

    const CsvTable& table(const std::string& name) const {
        for (const auto& [n, t] : tables)
            if (n == name) return t;
        throw ContractViolation("RunArtifact: no table " + name);
    }

    nlohmann::json summary_json() const {
        nlohmann::json checks_json = nlohmann::json::array();
        for (const auto& c : checks) checks_json.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
        nlohmann::json files = nlohmann::json::array();
        for (const auto& t : tables) files.push_back(t.first + ".csv");
        return {{"config", config},       {"version", version}, {"wall_clock_seconds", wall_clock_seconds},
                {"summary", summary},     {"checks", checks_json}, {"passed", passed()}, {"tables", files}};
    }

    /// config.json, summary.json (config, version, wall-clock, checks) and one CSV per table.
    void write(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        for (const auto& [name, t] : tables) t.write((fs::path(dir) / (name + ".csv")).string());
        std::ofstream(fs::path(dir) / "config.json") << config.dump(2) << '\n';
        std::ofstream(fs::path(dir) / "summary.json") << summary_json().dump(2) << '\n';
    }
};

struct RunOptions {
    bool parallel = false;
    unsigned threads = 0;  // 0: POPRISK_THREADS or hardware concurrency
};

inline unsigned thread_cap() {
    if (const char* env = std::getenv("POPRISK_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

using SeedFn = std::function<SeedOutput(const ExperimentConfig&, std::uint64_t)>;

/// Runs seeds sequentially or on a worker pool; outputs are ordered as in cfg.seeds.
inline std::vector<SeedOutput> run_seeds(const ExperimentConfig& cfg, const SeedFn& fn, const RunOptions& ro) {
    std::vector<SeedOutput> out(cfg.seeds.size());
    unsigned workers = ro.parallel ? std::min<unsigned>(ro.threads ? ro.threads : thread_cap(),
                                                        static_cast<unsigned>(cfg.seeds.size()))
                                   : 1u;
    if (const char* env = std::getenv("POPRISK_THREADS"))
        if (std::strtol(env, nullptr, 10) >= 1) workers = std::min(workers, thread_cap());
    if (workers <= 1) {
        for (std::size_t k = 0; k < cfg.seeds.size(); ++k) out[k] = fn(cfg, cfg.seeds[k]);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(cfg.seeds.size());
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t k; (k = next++) < cfg.seeds.size();) {
                try {
                    out[k] = fn(cfg, cfg.seeds[k]);
                } catch (...) {
                    errors[k] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

inline std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

inline Check check(std::string name, bool ok, std::string detail = {}) { return {std::move(name), ok, std::move(detail)}; }

inline std::string fmt(double v) { return format_number(v); }

/// Majority vote over seeds (strictly more than half).
inline Check majority(const std::string& name, const std::vector<bool>& votes) {
    const auto yes = std::count(votes.begin(), votes.end(), true);
    return check(name, 2 * static_cast<std::size_t>(yes) > votes.size(),
                 std::to_string(yes) + "/" + std::to_string(votes.size()) + " seeds");
}

inline Model init_model(const ExperimentConfig& cfg, std::uint64_t seed) {
    Rng rng(seed * 7919 + 17);
    return Model::init(cfg.model, rng);
}

inline double noise_var(const ExperimentConfig& cfg) { return cfg.dataset.noise_sd * cfg.dataset.noise_sd; }

/// Per-r theoretical and Monte-Carlo risk of the rank filters along Gamma0's eigenbasis.
struct RankMonteCarlo {
    std::vector<double> mean, se;
};

inline RankMonteCarlo rank_monte_carlo(const SpectralModel& sm, const Dataset& train, double sd, int draws, Rng& rng) {
    const Eigen::Index rho = sm.predictive_rank();
    const Matrix psi = sm.gamma_eig.vectors.leftCols(rho);
    const Matrix cols = sm.C0 * psi;  // n_Q p x rho
    const Vector ybar = stack_rows(train.noise ? train.clean_targets() : train.targets);
    const Vector target = sm.C0 * sm.a_bar;
    std::vector<double> sum(rho + 1, 0.0), sum2(rho + 1, 0.0);
    for (int k = 0; k < draws; ++k) {
        const Vector y = ybar + rng.normal_vector(ybar.size(), sd);
        const Vector z = psi.transpose() * (sm.U.transpose() * (y - sm.u_s0));
        Vector acc = -target;
        for (Eigen::Index r = 0; r <= rho; ++r) {
            if (r > 0) acc += cols.col(r - 1) * z(r - 1);
            const double e = acc.squaredNorm();
            sum[r] += e;
            sum2[r] += e * e;
        }
    }
    RankMonteCarlo out;
    for (Eigen::Index r = 0; r <= rho; ++r) {
        const double m = sum[r] / draws;
        out.mean.push_back(m);
        out.se.push_back(std::sqrt(std::max(0.0, sum2[r] / draws - m * m) / draws));
    }
    return out;
}

/// Index of the risk maximum and whether it sits where the increment turns
/// from positive to non-positive (or at the end of the path).
struct PeakCheck {
    Eigen::Index peak = 0;
    bool at_sign_change = false;
};

inline PeakCheck peak_check(const std::vector<RankPathEntry>& path) {
    PeakCheck pc;
    for (std::size_t r = 1; r < path.size(); ++r)
        if (path[r].risk >= path[pc.peak].risk) pc.peak = static_cast<Eigen::Index>(r);
    const auto r = static_cast<std::size_t>(pc.peak);
    const bool rising = r == 0 || path[r - 1].increment > 0.0;
    const bool falling = r + 1 == path.size() || path[r].increment <= 0.0;
    pc.at_sign_change = rising && falling;
    return pc;
}

inline SeedOutput double_descent_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto split = make_split(cfg.dataset, seed);
    const Model m = init_model(cfg, seed);
    const auto sm = build_spectral_model(m, split.train, split.test, noise_var(cfg), cfg.params.at("rank_tol").get<double>());
    const auto path = predictive_rank_path(sm);
    Rng rng(seed * 104729 + 3);
    const auto mc = rank_monte_carlo(sm, split.train, cfg.dataset.noise_sd, cfg.params.at("mc_draws").get<int>(), rng);
    CsvTable t({"r", "bias", "variance", "risk", "mc_risk", "mc_se", "increment", "increment_sign"});
    double worst = 0.0;
    bool within = true;
    for (std::size_t r = 0; r < path.size(); ++r) {
        const auto& e = path[r];
        const double sign = std::isnan(e.increment) ? std::nan("") : (e.increment > 0) - (e.increment < 0);
        t.add_row({static_cast<double>(e.r), e.bias, e.variance, e.risk, mc.mean[r], mc.se[r], e.increment, sign});
        const double gap = std::abs(mc.mean[r] - e.risk);
        const double tol = 3.0 * mc.se[r] + 1e-12 * std::max(1.0, e.risk);
        within = within && gap <= tol;
        worst = std::max(worst, mc.se[r] > 0 ? gap / mc.se[r] : 0.0);
    }
    bool monotone = true;
    for (std::size_t r = 1; r < path.size(); ++r) monotone = monotone && path[r].risk <= path[r - 1].risk * (1 + 1e-12) + 1e-15;
    const auto pc = peak_check(path);
    SeedOutput out{seed, {{seed_tag(seed) + "_rank_path", std::move(t)}}, {}};
    out.summary = {{"predictive_rank", sm.predictive_rank()}, {"peak_r", pc.peak},
                   {"peak_at_sign_change", pc.at_sign_change}, {"mc_within_3se", within},
                   {"mc_worst_se_units", worst}, {"monotone", monotone}};
    return out;
}

inline SeedOutput benign_overfitting_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto split = make_split(cfg.dataset, seed);
    const Model m = init_model(cfg, seed);
    const auto levels = cfg.params.at("noise_levels").get<std::vector<double>>();
    const int draws = cfg.params.at("mc_draws").get<int>();
    const auto sm = build_spectral_model(m, split.train, split.test, 1.0);
    const double tr_gamma = sm.Gamma0.trace();
    const Matrix I = Matrix::Identity(sm.rank(), sm.rank());
    const Vector ybar = stack_rows(split.train.clean_targets());
    const Vector target = sm.mean_test_output();
    Rng rng(seed * 15485863 + 5);
    CsvTable t({"noise_sd", "x", "risk", "risk_se", "train_loss"});
    std::vector<double> xs, ys;
    bool zero_ok = true, interp_ok = true;
    for (double sd : levels) {
        double sum = 0.0, sum2 = 0.0;
        for (int k = 0; k < draws; ++k) {
            const Vector y = ybar + rng.normal_vector(ybar.size(), sd);
            const double e = (filtered_test_output(sm, I, y) - target).squaredNorm();
            sum += e;
            sum2 += e * e;
        }
        const double mean = sum / draws;
        const double se = std::sqrt(std::max(0.0, sum2 / draws - mean * mean) / draws);
        // One explicit interpolating fit on a fresh draw.
        Dataset noisy = split.train;
        noisy.targets = unstack_rows(ybar + rng.normal_vector(ybar.size(), sd), split.train.output_dim());
        const Matrix jac = jacobian_stacked(m, noisy);
        const Vector w = m.weights() + pinv(jac) * (stack_rows(noisy.targets) - forward_stacked(m, noisy));
        const double train_loss = empirical_loss(m.with_weights(w), noisy);
        const double x = sd * sd * tr_gamma;
        t.add_row({sd, x, mean, se, train_loss});
        xs.push_back(x);
        ys.push_back(mean);
        if (sd == 0.0) zero_ok = zero_ok && mean <= 1e-20 * std::max(1.0, target.squaredNorm());
        else interp_ok = interp_ok && train_loss <= 1e-10 && mean > 0.0;
    }
    const auto fit = fit_line(xs, ys);
    SeedOutput out{seed, {{seed_tag(seed) + "_noise_sweep", std::move(t)}}, {}};
    out.summary = {{"trace_gamma0", tr_gamma}, {"slope", fit.slope},       {"intercept", fit.intercept},
                   {"r_squared", fit.r_squared}, {"zero_noise_zero_risk", zero_ok}, {"interpolates", interp_ok}};
    return out;
}

inline SeedOutput ridge_path_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    require(cfg.model.kind == ModelKind::linear && cfg.model.output_dim() == 1, "ridge-path: needs a single-output linear model");
    const auto split = make_split(cfg.dataset, seed);
    const Model m = Model::linear(cfg.model.input_dim(), 1, Vector::Zero(cfg.model.input_dim()));
    const auto sm = build_spectral_model(m, split.train, split.test, noise_var(cfg));
    const auto lambdas = cfg.params.at("lambdas").get<std::vector<double>>();
    const double per_rate = cfg.params.at("ode_steps_per_unit_rate").get<double>();
    const double n = static_cast<double>(split.train.size());
    const double top = sm.sigma(0) * sm.sigma(0) / n;
    const Matrix I = Matrix::Identity(sm.rank(), sm.rank());
    CsvTable t({"lambda", "bias", "variance", "risk", "ode_vs_flow", "flow_vs_solution"});
    double worst = 0.0;
    std::vector<double> risks;
    double min_norm_gap = 0.0;
    for (double l : lambdas) {
        require(l >= 0.0, "ridge-path: lambdas must be >= 0");
        const auto bv = l == 0.0 ? bias_variance(sm, I) : bias_variance(sm, make_filter(FilterKind::ridge, l, sm));
        const double horizon = infinite_horizon(sm.sigma, split.train.size(), l);
        const int steps = static_cast<int>(std::ceil(per_rate * horizon * (top + l)));
        FlowOptions fo;
        fo.weight_decay = l;
        const auto tr = record_gradient_flow(m, split.train, horizon, steps, fo);
        const Vector closed = ridge_flow(m, split.train, l, horizon).weights;
        const double ode = (tr.weights.back() - closed).norm();
        const double sol = (closed - ridge_solution(split.train, l)).norm();
        t.add_row({l, bv.bias, bv.variance, bv.risk, ode, sol});
        worst = std::max({worst, ode, sol});
        risks.push_back(bv.risk);
        if (l == 0.0) {
            const Matrix x = jacobian_stacked(m, split.train);
            min_norm_gap = (tr.weights.back() - pinv(x) * stack_rows(split.train.targets)).norm();
        }
    }
    const auto argmin = std::min_element(risks.begin(), risks.end()) - risks.begin();
    SeedOutput out{seed, {{seed_tag(seed) + "_ridge_path", std::move(t)}}, {}};
    out.summary = {{"worst_residual", worst},
                   {"argmin_index", argmin},
                   {"argmin_lambda", lambdas[static_cast<std::size_t>(argmin)]},
                   {"interior_minimizer", argmin > 0 && static_cast<std::size_t>(argmin) + 1 < lambdas.size()},
                   {"min_norm_gap", min_norm_gap},
                   {"has_zero", std::find(lambdas.begin(), lambdas.end(), 0.0) != lambdas.end()}};
    return out;
}

inline TrainOptions train_options(const ExperimentConfig& cfg, std::uint64_t seed) {
    TrainOptions o;
    o.loss.kind = cfg.trajectory.loss;
    o.steps = cfg.trajectory.steps;
    o.batch_size = cfg.trajectory.batch_size;
    o.log_every = cfg.trajectory.log_every;
    o.seed = seed;
    o.warn = [](const std::string&) {};
    return o;
}

inline OptimizerConfig with_kind(OptimizerConfig c, OptimizerKind k) {
    c.kind = k;
    return c;
}

inline std::optional<long> first_step_at(const CsvTable& log, std::size_t col, double target) {
    for (const auto& row : log.rows())
        if (std::isfinite(row[col]) && row[col] >= target) return static_cast<long>(row[0]);
    return std::nullopt;
}

inline SeedOutput mini_grokking_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    require(cfg.dataset.kind == GeneratorKind::modular_arithmetic, "mini-grokking: needs a modular-arithmetic dataset");
    require(cfg.trajectory.kind == TrajectorySpecKind::sgd && cfg.trajectory.loss == LossKind::softmax_ce,
            "mini-grokking: needs an sgd trajectory with softmax-ce loss");
    const auto split = make_split(cfg.dataset, seed);
    const Model m = init_model(cfg, seed);
    const double target = cfg.params.at("target_val_acc").get<double>();
    SeedOutput out{seed, {}, {}};
    for (auto kind : {OptimizerKind::adamw, OptimizerKind::poprisk}) {
        const auto opt = train_options(cfg, seed);
        auto res = train(m, split.train, split.test, with_kind(cfg.optimizer, kind), opt);
        const auto hit = first_step_at(res.log, 3, target);
        const auto& rows = res.log.rows();
        // Mean gate-open fraction over the first and last quarter of the logged steps.
        const std::size_t q = std::max<std::size_t>(1, (rows.size() - 1) / 4);
        double early = 0.0, late = 0.0;
        for (std::size_t k = 1; k <= q; ++k) early += rows[k][4];
        for (std::size_t k = rows.size() - q; k < rows.size(); ++k) late += rows[k][4];
        out.summary[to_string(kind)] = {{"steps_to_target", hit ? nlohmann::json(*hit) : nlohmann::json(nullptr)},
                                        {"train_accuracy", accuracy(res.model, split.train, opt.loss)},
                                        {"final_val_accuracy", accuracy(res.model, split.test, opt.loss)},
                                        {"gate_open_early", early / q},
                                        {"gate_open_late", late / q},
                                        {"epochs_crossed", res.epochs_crossed}};
        out.tables.emplace_back(seed_tag(seed) + "_" + to_string(kind) + "_log", std::move(res.log));
    }
    return out;
}

inline SeedOutput denoise_1d_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    require(cfg.dataset.kind == GeneratorKind::noisy_function_1d, "denoise-1d: needs a noisy-function-1d dataset");
    require(cfg.dataset.n_test > 0, "denoise-1d: needs a clean evaluation grid (n_test > 0)");
    require(cfg.trajectory.loss == LossKind::squared, "denoise-1d: needs squared loss");
    const auto split = make_split(cfg.dataset, seed);
    const Model m = init_model(cfg, seed);
    const double floor = noise_var(cfg);
    SeedOutput out{seed, {}, {}};
    for (auto kind : {OptimizerKind::adamw, OptimizerKind::poprisk}) {
        auto res = train(m, split.train, split.test, with_kind(cfg.optimizer, kind), train_options(cfg, seed));
        CsvTable t({"step", "train_mse", "clean_mse", "gate_open_fraction"});
        double best = std::numeric_limits<double>::infinity();
        for (const auto& row : res.log.rows()) {
            // Per-example loss is half the squared error.
            t.add_row({row[0], 2.0 * row[1], 2.0 * row[2], row[4]});
            best = std::min(best, 2.0 * row[2]);
        }
        const auto& last = t.rows().back();
        out.summary[to_string(kind)] = {{"best_clean_mse", best},  {"final_clean_mse", last[2]},
                                        {"final_train_mse", last[1]}, {"noise_floor", floor},
                                        {"final_over_best", last[2] / best}};
        out.tables.emplace_back(seed_tag(seed) + "_" + to_string(kind) + "_curve", std::move(t));
    }
    return out;
}

inline double correlation(const Vector& a, const Vector& b) {
    const Vector x = a.array() - a.mean(), y = b.array() - b.mean();
    const double den = x.norm() * y.norm();
    return den > 0.0 ? x.dot(y) / den : std::nan("");
}

inline SeedOutput coupling_audit_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    require(cfg.trajectory.kind == TrajectorySpecKind::flow && cfg.trajectory.loss == LossKind::squared,
            "coupling-audit: needs a squared-loss gradient flow");
    require(cfg.dataset.n_test > 0, "coupling-audit: needs a test set");
    const auto split = make_split(cfg.dataset, seed);
    const Model m = init_model(cfg, seed);
    const double T = cfg.trajectory.horizon * (cfg.trajectory.horizon_in_kernel_units ? kernel_time_scale(m, split.train) : 1.0);
    const auto tr = record_gradient_flow(m, split.train, T, static_cast<int>(cfg.trajectory.steps));
    OperatorOptions oo;
    oo.rank_tol = cfg.params.at("rank_tol").get<double>();
    const auto ops = window_operators(tr, split.test, 0.0, T, oo);
    const Vector rec = recorded_test_displacement(tr, split.test, 0.0, T);
    const Vector pred = predict_test_displacement(ops, recorded_train_displacement(tr, 0.0, T));
    const auto cells = four_cell_decomposition(tr, ops, split.train, split.test);

    const Matrix j0 = jacobian_stacked(m, split.train);
    const double k0 = op_norm(j0 * j0.transpose());
    CsvTable drift({"t", "kernel_drift", "train_loss"});
    double final_drift = 0.0;
    for (std::size_t k = 0; k < tr.size(); k += static_cast<std::size_t>(cfg.trajectory.log_every)) {
        const Matrix jk = jacobian_stacked(tr.model_at_index(k), split.train);
        drift.add_row({tr.times[k], op_norm(jk * jk.transpose() - j0 * j0.transpose()) / k0, tr.losses[k]});
    }
    {
        const Matrix jT = jacobian_stacked(tr.model_at_index(tr.size() - 1), split.train);
        final_drift = op_norm(jT * jT.transpose() - j0 * j0.transpose()) / k0;
        if (drift.rows().back()[0] != T) drift.add_row({T, final_drift, tr.losses.back()});
    }
    CsvTable scatter({"index", "predicted", "recorded"});
    for (Eigen::Index i = 0; i < rec.size(); ++i) scatter.add_row({static_cast<double>(i), pred(i), rec(i)});

    SeedOutput out{seed, {}, {}};
    out.summary = {{"horizon", T},
                   {"kernel_drift", final_drift},
                   {"correlation", correlation(pred, rec)},
                   {"relative_error", (pred - rec).norm() / rec.norm()},
                   {"R_perp_norm", op_norm(ops.R_perp)},
                   {"gamma_norm", ops.gamma_norm()},
                   {"cells",
                    {{"bias", cells.bias.norm()},
                     {"reservoir", cells.reservoir.norm()},
                     {"signal", cells.signal.norm()},
                     {"target", cells.target.norm()},
                     {"residual", cells.residual}}},
                   {"operators", operators_to_json(ops)}};
    out.tables.emplace_back(seed_tag(seed) + "_scatter", std::move(scatter));
    out.tables.emplace_back(seed_tag(seed) + "_kernel_drift", std::move(drift));
    return out;
}

// ---------------------------------------------------------------------------
// Assertions over all seeds.

inline std::vector<Check> double_descent_checks(const ExperimentConfig& cfg, const std::vector<SeedOutput>& seeds) {
    std::vector<Check> c;
    for (const auto& s : seeds) {
        const auto tag = "[" + seed_tag(s.seed) + "]";
        c.push_back(check("double-descent/mc-within-3se" + tag, s.summary["mc_within_3se"].get<bool>(),
                          "worst " + fmt(s.summary["mc_worst_se_units"].get<double>()) + " SE"));
        c.push_back(check("double-descent/peak-at-increment-sign-change" + tag, s.summary["peak_at_sign_change"].get<bool>(),
                          "peak r = " + std::to_string(s.summary["peak_r"].get<long>())));
        if (cfg.dataset.noise_sd == 0.0)
            c.push_back(check("double-descent/noise-free-monotone" + tag, s.summary["monotone"].get<bool>()));
    }
    return c;
}

inline std::vector<Check> benign_overfitting_checks(const ExperimentConfig&, const std::vector<SeedOutput>& seeds) {
    std::vector<Check> c;
    for (const auto& s : seeds) {
        const auto tag = "[" + seed_tag(s.seed) + "]";
        const double slope = s.summary["slope"].get<double>(), r2 = s.summary["r_squared"].get<double>();
        c.push_back(check("benign-overfitting/slope-1" + tag, std::abs(slope - 1.0) <= 0.05, "slope " + fmt(slope)));
        c.push_back(check("benign-overfitting/r-squared" + tag, r2 >= 0.99, "R^2 " + fmt(r2)));
        c.push_back(check("benign-overfitting/zero-noise-zero-risk" + tag, s.summary["zero_noise_zero_risk"].get<bool>()));
        c.push_back(check("benign-overfitting/interpolates-with-positive-risk" + tag, s.summary["interpolates"].get<bool>()));
    }
    return c;
}

inline std::vector<Check> ridge_path_checks(const ExperimentConfig& cfg, const std::vector<SeedOutput>& seeds) {
    std::vector<Check> c;
    for (const auto& s : seeds) {
        const auto tag = "[" + seed_tag(s.seed) + "]";
        const double worst = s.summary["worst_residual"].get<double>();
        c.push_back(check("ridge-path/ode-vs-closed-form" + tag, worst <= 1e-6, "worst " + fmt(worst)));
        if (s.summary["has_zero"].get<bool>())
            c.push_back(check("ridge-path/zero-lambda-is-min-norm" + tag, s.summary["min_norm_gap"].get<double>() <= 1e-8,
                                    "gap " + fmt(s.summary["min_norm_gap"].get<double>())));
        if (cfg.dataset.noise_sd > 0.0)
            c.push_back(check("ridge-path/interior-minimizer" + tag, s.summary["interior_minimizer"].get<bool>(),
                              "argmin lambda " + fmt(s.summary["argmin_lambda"].get<double>())));
    }
    return c;
}

inline std::vector<Check> mini_grokking_checks(const ExperimentConfig&, const std::vector<SeedOutput>& seeds) {
    std::vector<bool> faster, fit_a, fit_p, rises;
    std::string detail;
    for (const auto& s : seeds) {
        const auto& a = s.summary["adamw"];
        const auto& p = s.summary["poprisk"];
        const bool p_hit = !p["steps_to_target"].is_null(), a_hit = !a["steps_to_target"].is_null();
        faster.push_back(p_hit && (!a_hit || p["steps_to_target"].get<long>() <= a["steps_to_target"].get<long>()));
        fit_a.push_back(a["train_accuracy"].get<double>() == 1.0);
        fit_p.push_back(p["train_accuracy"].get<double>() == 1.0);
        rises.push_back(p["gate_open_late"].get<double>() > p["gate_open_early"].get<double>());
        detail += (detail.empty() ? "" : "; ") + seed_tag(s.seed) + " poprisk " +
                  (p_hit ? std::to_string(p["steps_to_target"].get<long>()) : std::string("never")) + " adamw " +
                  (a_hit ? std::to_string(a["steps_to_target"].get<long>()) : std::string("never"));
    }
    auto f = majority("mini-grokking/poprisk-steps-to-target-le-adamw", faster);
    f.detail += " (" + detail + ")";
    return {f, majority("mini-grokking/adamw-fits-train", fit_a), majority("mini-grokking/poprisk-fits-train", fit_p),
            majority("mini-grokking/gate-open-fraction-rises", rises)};
}

inline std::vector<Check> denoise_1d_checks(const ExperimentConfig& cfg, const std::vector<SeedOutput>& seeds) {
    const double tol = cfg.params.at("best_final_tolerance").get<double>();
    std::vector<bool> degrade, stable, floor_a, floor_p;
    for (const auto& s : seeds) {
        const auto& a = s.summary["adamw"];
        const auto& p = s.summary["poprisk"];
        degrade.push_back(a["final_clean_mse"].get<double>() > a["best_clean_mse"].get<double>());
        stable.push_back(p["final_clean_mse"].get<double>() <= tol * p["best_clean_mse"].get<double>());
        floor_a.push_back(a["final_train_mse"].get<double>() < a["noise_floor"].get<double>());
        floor_p.push_back(p["final_train_mse"].get<double>() < p["noise_floor"].get<double>());
    }
    return {majority("denoise-1d/adamw-degrades", degrade), majority("denoise-1d/poprisk-final-within-tolerance-of-best", stable),
            majority("denoise-1d/adamw-below-noise-floor", floor_a), majority("denoise-1d/poprisk-below-noise-floor", floor_p)};
}

inline std::vector<Check> coupling_audit_checks(const ExperimentConfig&, const std::vector<SeedOutput>& seeds) {
    std::vector<Check> c;
    std::vector<bool> drift;
    for (const auto& s : seeds) {
        const auto tag = "[" + seed_tag(s.seed) + "]";
        const double corr = s.summary["correlation"].get<double>();
        const double res = s.summary["cells"]["reservoir"].get<double>();
        drift.push_back(s.summary["kernel_drift"].get<double>() > 0.5);
        c.push_back(check("coupling-audit/correlation" + tag, corr >= 0.99, "correlation " + fmt(corr)));
        c.push_back(check("coupling-audit/reservoir-cell" + tag, res <= 1e-7, "norm " + fmt(res)));
    }
    c.push_back(majority("coupling-audit/kernel-drift-above-half", drift));
    return c;
}

struct ExperimentDef {
    SeedFn seed_fn;
    std::function<std::vector<Check>(const ExperimentConfig&, const std::vector<SeedOutput>&)> checks;
};

inline const std::map<std::string, ExperimentDef>& registry() {
    static const std::map<std::string, ExperimentDef> r{
        {"double-descent", {double_descent_seed, double_descent_checks}},
        {"benign-overfitting", {benign_overfitting_seed, benign_overfitting_checks}},
        {"mini-grokking", {mini_grokking_seed, mini_grokking_checks}},
        {"coupling-audit", {coupling_audit_seed, coupling_audit_checks}},
        {"denoise-1d", {denoise_1d_seed, denoise_1d_checks}},
        {"ridge-path", {ridge_path_seed, ridge_path_checks}},
    };
    return r;
}

}  // namespace detail

inline RunArtifact run_experiment(const ExperimentConfig& cfg, const RunOptions& ro = {}) {
    cfg.validate();
    const auto& def = detail::registry().at(cfg.experiment);
    const auto t0 = std::chrono::steady_clock::now();
    auto seeds = detail::run_seeds(cfg, def.seed_fn, ro);
    RunArtifact art;
    art.config = config_to_json(cfg);
    art.checks = def.checks(cfg, seeds);
    for (auto& s : seeds) {
        art.summary[detail::seed_tag(s.seed)] = s.summary;
        for (auto& t : s.tables) art.tables.push_back(std::move(t));
    }
    art.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return art;
}

inline RunArtifact run_double_descent(const ExperimentConfig& cfg, const RunOptions& ro = {}) { return run_experiment(cfg, ro); }
inline RunArtifact run_benign_overfitting(const ExperimentConfig& cfg, const RunOptions& ro = {}) { return run_experiment(cfg, ro); }
inline RunArtifact run_mini_grokking(const ExperimentConfig& cfg, const RunOptions& ro = {}) { return run_experiment(cfg, ro); }
inline RunArtifact run_coupling_audit(const ExperimentConfig& cfg, const RunOptions& ro = {}) { return run_experiment(cfg, ro); }
inline RunArtifact run_denoise_1d(const ExperimentConfig& cfg, const RunOptions& ro = {}) { return run_experiment(cfg, ro); }
inline RunArtifact run_ridge_path(const ExperimentConfig& cfg, const RunOptions& ro = {}) { return run_experiment(cfg, ro); }

}  // namespace poprisk
