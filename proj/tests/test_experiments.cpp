#include "poprisk/experiments.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace poprisk;

namespace {

ExperimentConfig small(const std::string& name) {
    auto cfg = default_config(name);
    if (name == "double-descent" || name == "benign-overfitting") cfg.params["mc_draws"] = 500;
    if (name == "mini-grokking") {
        cfg.dataset.modulus = 5;
        cfg.model.widths = {10, 16, 5};
        cfg.trajectory.steps = 60;
        cfg.trajectory.batch_size = 8;
        cfg.trajectory.log_every = 20;
    }
    if (name == "denoise-1d") {
        cfg.dataset.n = 16;
        cfg.dataset.n_test = 20;
        cfg.model.widths = {1, 8, 1};
        cfg.trajectory.steps = 60;
        cfg.trajectory.batch_size = 4;
        cfg.trajectory.log_every = 20;
    }
    if (name == "coupling-audit") {
        cfg.dataset.n = 5;
        cfg.dataset.n_test = 4;
        cfg.model.widths = {2, 4, 1};
        cfg.trajectory.horizon = 5.0;
        cfg.trajectory.steps = 100;
        cfg.trajectory.log_every = 50;
    }
    cfg.seeds = {1, 2};
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Config, DefaultsRoundTripForEveryExperiment) {
    for (const auto& name : experiment_names()) {
        const auto cfg = default_config(name);
        EXPECT_NO_THROW(cfg.validate()) << name;
        const auto j = config_to_json(cfg);
        EXPECT_EQ(config_to_json(config_from_json(j)), j) << name;
        EXPECT_EQ(config_to_json(config_from_json({{"experiment", name}})), j) << name;
        EXPECT_EQ(cfg.seeds.size(), 3u);
    }
}

TEST(Config, OverlayChangesOnlyGivenFields) {
    const auto cfg = config_from_json(
        {{"experiment", "denoise-1d"}, {"dataset", {{"noise_sd", 0.5}}}, {"optimizer", {{"lambda_pop", 0.25}}}, {"seeds", {4}}});
    const auto def = default_config("denoise-1d");
    EXPECT_EQ(cfg.dataset.noise_sd, 0.5);
    EXPECT_EQ(cfg.dataset.n, def.dataset.n);
    EXPECT_EQ(cfg.optimizer.gate.lambda_pop, 0.25);
    EXPECT_EQ(cfg.optimizer.gate.kind, def.optimizer.gate.kind);
    EXPECT_EQ(cfg.optimizer.lr, def.optimizer.lr);
    EXPECT_EQ(cfg.seeds, std::vector<std::uint64_t>{4});
}

TEST(Config, UnknownKeysRejectedAtAnyDepth) {
    const nlohmann::json bad[] = {
        {{"experiment", "ridge-path"}, {"extra", 1}},
        {{"experiment", "ridge-path"}, {"dataset", {{"nn", 3}}}},
        {{"experiment", "ridge-path"}, {"trajectory", {{"stepz", 3}}}},
        {{"experiment", "ridge-path"}, {"params", {{"lambda", {1.0}}}}},
        {{"experiment", "mini-grokking"}, {"optimizer", {{"alfa", 1.0}}}},
    };
    for (const auto& j : bad) {
        try {
            config_from_json(j);
            ADD_FAILURE() << j.dump();
        } catch (const ContractViolation& e) {
            EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos) << e.what();
        }
    }
}

TEST(Config, InvalidConfigsRejected) {
    using J = nlohmann::json;
    EXPECT_THROW(config_from_json(J::object()), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "nope"}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "ridge-path"}, {"schema_version", 2}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "ridge-path"}, {"seeds", J::array()}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "ridge-path"}, {"model", {{"widths", {3, 1}}}}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "ridge-path"}, {"trajectory", {{"kind", "ode"}}}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "ridge-path"}, {"dataset", {{"n", "many"}}}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "ridge-path"}, {"dataset", 3}}), ContractViolation);
    EXPECT_THROW(config_from_json({{"experiment", "denoise-1d"}, {"optimizer", {{"lr", -1.0}}}}), ContractViolation);
}

TEST(Config, LoadFromFile) {
    const auto path = std::filesystem::temp_directory_path() / "poprisk_cfg_test.json";
    std::ofstream(path) << R"({"experiment": "benign-overfitting", "seeds": [9]})";
    EXPECT_EQ(load_config(path.string()).seeds, std::vector<std::uint64_t>{9});
    std::ofstream(path) << "{not json";
    EXPECT_THROW(load_config(path.string()), ContractViolation);
    std::filesystem::remove(path);
    EXPECT_THROW(load_config(path.string()), ContractViolation);
}

TEST(Artifacts, CsvColumnsPerExperiment) {
    const std::map<std::string, std::vector<std::vector<std::string>>> expected{
        {"double-descent", {{"r", "bias", "variance", "risk", "mc_risk", "mc_se", "increment", "increment_sign"}}},
        {"benign-overfitting", {{"noise_sd", "x", "risk", "risk_se", "train_loss"}}},
        {"ridge-path", {{"lambda", "bias", "variance", "risk", "ode_vs_flow", "flow_vs_solution"}}},
        {"mini-grokking",
         {{"step", "train_loss", "val_loss", "val_acc", "gate_open_fraction", "mean_q"},
          {"step", "train_loss", "val_loss", "val_acc", "gate_open_fraction", "mean_q"}}},
        {"denoise-1d", {{"step", "train_mse", "clean_mse", "gate_open_fraction"}, {"step", "train_mse", "clean_mse", "gate_open_fraction"}}},
        {"coupling-audit", {{"index", "predicted", "recorded"}, {"t", "kernel_drift", "train_loss"}}},
    };
    for (const auto& [name, cols] : expected) {
        const auto art = run_experiment(small(name));
        ASSERT_EQ(art.tables.size(), 2 * cols.size()) << name;
        for (std::size_t k = 0; k < art.tables.size(); ++k) {
            EXPECT_EQ(art.tables[k].second.columns(), cols[k % cols.size()]) << name << " " << art.tables[k].first;
            EXPECT_GT(art.tables[k].second.size(), 0u);
        }
        EXPECT_EQ(art.tables.front().first.rfind("seed1_", 0), 0u) << name;
        EXPECT_EQ(art.tables.back().first.rfind("seed2_", 0), 0u) << name;
        EXPECT_FALSE(art.checks.empty()) << name;
        EXPECT_TRUE(art.summary.contains("seed1") && art.summary.contains("seed2")) << name;
    }
}

TEST(Artifacts, RepeatedRunIsByteIdenticalAndParallelMatchesSequential) {
    for (const char* name : {"double-descent", "denoise-1d", "coupling-audit"}) {
        const auto cfg = small(name);
        const auto a = run_experiment(cfg);
        const auto b = run_experiment(cfg);
        RunOptions ro;
        ro.parallel = true;
        ro.threads = 2;
        const auto c = run_experiment(cfg, ro);
        ASSERT_EQ(a.tables.size(), c.tables.size());
        for (std::size_t k = 0; k < a.tables.size(); ++k) {
            EXPECT_EQ(a.tables[k].first, c.tables[k].first);
            EXPECT_EQ(a.tables[k].second.str(), b.tables[k].second.str()) << name;
            EXPECT_EQ(a.tables[k].second.str(), c.tables[k].second.str()) << name;
        }
        EXPECT_EQ(a.summary, c.summary) << name;
    }
}

TEST(Artifacts, WriteEmbedsResolvedConfig) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "poprisk_artifact_test";
    fs::remove_all(dir);
    const auto cfg = small("ridge-path");
    const auto art = run_experiment(cfg);
    art.write(dir.string());
    EXPECT_TRUE(fs::exists(dir / "config.json"));
    for (const auto& t : art.tables) EXPECT_EQ(slurp(dir / (t.first + ".csv")), t.second.str());
    const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
    EXPECT_EQ(summary.at("config"), config_to_json(cfg));
    EXPECT_EQ(nlohmann::json::parse(slurp(dir / "config.json")), config_to_json(cfg));
    EXPECT_EQ(summary.at("version"), tool_version());
    EXPECT_GE(summary.at("wall_clock_seconds").get<double>(), 0.0);
    EXPECT_EQ(summary.at("checks").size(), art.checks.size());
    EXPECT_EQ(summary.at("passed").get<bool>(), art.passed());
    fs::remove_all(dir);
}

TEST(Artifacts, SeedFailurePropagatesFromWorkers) {
    auto cfg = small("coupling-audit");
    cfg.dataset.n_test = 0;
    RunOptions ro;
    ro.parallel = true;
    ro.threads = 2;
    EXPECT_THROW(run_experiment(cfg, ro), ContractViolation);
}

TEST(Runner, ThreadCapFromEnvironment) {
    ::setenv("POPRISK_THREADS", "3", 1);
    EXPECT_EQ(thread_cap(), 3u);
    ::setenv("POPRISK_THREADS", "junk", 1);
    EXPECT_GE(thread_cap(), 1u);
    ::unsetenv("POPRISK_THREADS");
}

TEST(Runner, MajorityNeedsMoreThanHalf) {
    EXPECT_TRUE(detail::majority("x", {true, true, false}).passed);
    EXPECT_FALSE(detail::majority("x", {true, false}).passed);
    EXPECT_FALSE(detail::majority("x", {}).passed);
    EXPECT_EQ(detail::majority("x", {true, false, false}).detail, "1/3 seeds");
}

TEST(DoubleDescent, PeakCheckOnHandBuiltPaths) {
    auto path = [](std::vector<double> risks) {
        std::vector<RankPathEntry> p;
        for (std::size_t r = 0; r < risks.size(); ++r) {
            RankPathEntry e;
            e.r = static_cast<Eigen::Index>(r);
            e.risk = risks[r];
            p.push_back(e);
        }
        for (std::size_t r = 0; r + 1 < p.size(); ++r) p[r].increment = p[r + 1].risk - p[r].risk;
        return p;
    };
    auto pc = detail::peak_check(path({3, 4, 6, 2, 1}));
    EXPECT_EQ(pc.peak, 2);
    EXPECT_TRUE(pc.at_sign_change);
    pc = detail::peak_check(path({5, 4, 3}));
    EXPECT_EQ(pc.peak, 0);
    EXPECT_TRUE(pc.at_sign_change);
    pc = detail::peak_check(path({1, 2, 3}));
    EXPECT_EQ(pc.peak, 2);
    EXPECT_TRUE(pc.at_sign_change);
}

TEST(DoubleDescent, MonteCarloMeanMatchesRankFilterRisk) {
    const auto cfg = default_config("double-descent");
    const auto split = make_split(cfg.dataset, 5);
    const Model m = detail::init_model(cfg, 5);
    const auto sm = build_spectral_model(m, split.train, split.test, 25.0);
    Rng rng(6);
    const auto mc = detail::rank_monte_carlo(sm, split.train, 5.0, 4000, rng);
    ASSERT_EQ(mc.mean.size(), static_cast<std::size_t>(sm.predictive_rank() + 1));
    for (Eigen::Index r = 0; r <= sm.predictive_rank(); r += 4) {
        const double risk = bias_variance(sm, make_filter(FilterKind::rank, static_cast<double>(r), sm)).risk;
        EXPECT_LE(std::abs(mc.mean[r] - risk), 4.0 * mc.se[r] + 1e-9 * risk) << "r=" << r;
    }
    EXPECT_EQ(mc.se[0], mc.se[0]);
}

TEST(DoubleDescent, NoiseFreePathIsMonotone) {
    auto cfg = small("double-descent");
    cfg.dataset.noise_sd = 0.0;
    const auto art = run_experiment(cfg);
    EXPECT_TRUE(art.passed());
    bool saw = false;
    for (const auto& c : art.checks)
        if (c.name.rfind("double-descent/noise-free-monotone", 0) == 0) {
            saw = true;
            EXPECT_TRUE(c.passed);
        }
    EXPECT_TRUE(saw);
    for (const auto& row : art.tables.front().second.rows())
        if (std::isfinite(row[6])) EXPECT_LE(row[6], 1e-9);
}

TEST(BenignOverfitting, ZeroNoiseRowHasZeroRisk) {
    auto cfg = small("benign-overfitting");
    cfg.params["noise_levels"] = {0.0, 0.5, 1.0};
    const auto art = run_experiment(cfg);
    const auto& rows = art.tables.front().second.rows();
    EXPECT_LE(rows[0][2], 1e-20);
    EXPECT_GT(rows[1][2], 0.0);
    for (const auto& row : rows) EXPECT_LE(row[4], 1e-10);
}

TEST(RidgePath, InteriorCheckSkippedWithoutNoise) {
    auto cfg = small("ridge-path");
    cfg.dataset.noise_sd = 0.0;
    const auto art = run_experiment(cfg);
    for (const auto& c : art.checks) EXPECT_EQ(c.name.find("interior-minimizer"), std::string::npos);
}

TEST(RidgePath, NegativeLambdaRejected) {
    auto cfg = small("ridge-path");
    cfg.params["lambdas"] = {0.1, -1.0};
    EXPECT_THROW(run_experiment(cfg), ContractViolation);
}

TEST(MiniGrokking, LogsBothOptimizersWithSharedSeeds) {
    const auto art = run_experiment(small("mini-grokking"));
    EXPECT_EQ(art.tables[0].first, "seed1_adamw_log");
    EXPECT_EQ(art.tables[1].first, "seed1_poprisk_log");
    for (const char* opt : {"adamw", "poprisk"}) {
        const auto& s = art.summary["seed1"][opt];
        EXPECT_TRUE(s.contains("steps_to_target"));
        EXPECT_GE(s["train_accuracy"].get<double>(), 0.0);
    }
    EXPECT_EQ(art.tables[0].second.rows().front()[0], art.tables[1].second.rows().front()[0]);
}

TEST(MiniGrokking, RejectsRegressionData) {
    auto cfg = small("mini-grokking");
    cfg.dataset = default_config("denoise-1d").dataset;
    cfg.model.widths = {1, 8, 1};
    EXPECT_THROW(run_experiment(cfg), ContractViolation);
}

TEST(CouplingAudit, SquaredLossPredictionMatchesRecording) {
    const auto art = run_experiment(small("coupling-audit"));
    for (const char* s : {"seed1", "seed2"}) {
        EXPECT_GE(art.summary[s]["correlation"].get<double>(), 0.99);
        EXPECT_LE(art.summary[s]["cells"]["reservoir"].get<double>(), 1e-7);
        EXPECT_LE(art.summary[s]["cells"]["residual"].get<double>(), 1e-6);
    }
    const auto& drift = art.tables[1].second.rows();
    EXPECT_EQ(drift.front()[1], 0.0);
    EXPECT_DOUBLE_EQ(drift.back()[0], art.summary["seed1"]["horizon"].get<double>());
}

TEST(CouplingAudit, SoftmaxLossRejected) {
    auto cfg = small("coupling-audit");
    cfg.trajectory.loss = LossKind::softmax_ce;
    EXPECT_THROW(run_experiment(cfg), ContractViolation);
}
