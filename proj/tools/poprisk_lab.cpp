#include "poprisk/verify.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace poprisk;

namespace {

void print_checks(const std::vector<Check>& checks) {
    std::size_t width = 0;
    for (const auto& c : checks) width = std::max(width, c.name.size());
    for (const auto& c : checks)
        std::printf("%s  %-*s  %s\n", c.passed ? "PASS" : "FAIL", static_cast<int>(width), c.name.c_str(), c.detail.c_str());
    const auto failed = std::count_if(checks.begin(), checks.end(), [](const Check& c) { return !c.passed; });
    std::printf("%zu checks, %ld failed\n", checks.size(), static_cast<long>(failed));
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        require(!item.empty() && used == item.size() && item[0] != '-', "--seeds: bad seed '" + item + "'");
        seeds.push_back(v);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pathwise population-risk laboratory"};
    app.set_version_flag("--version", tool_version());
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds_text;
    bool parallel = false;
    std::string chosen;
    for (const auto& name : experiment_names()) {
        auto* sub = app.add_subcommand(name, "Run the " + name + " experiment");
        sub->add_option("--config", config_path, "JSON config (defaults to the built-in config)")->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "Output directory (overrides the config)");
        sub->add_option("--seeds", seeds_text, "Comma-separated seeds (overrides the config)");
        sub->add_flag("--parallel", parallel, "Run seeds in parallel (POPRISK_THREADS caps workers)");
        sub->callback([&chosen, name] { chosen = name; });
    }
    std::string suite;
    auto* verify_cmd = app.add_subcommand("verify", "Run a property suite");
    verify_cmd->add_option("--suite", suite, "Suite name")->required()->check(CLI::IsMember(verify::suite_names()));
    auto* defaults_cmd = app.add_subcommand("default-config", "Print the built-in config of an experiment");
    std::string defaults_of;
    defaults_cmd->add_option("experiment", defaults_of, "Experiment name")->required()->check(CLI::IsMember(experiment_names()));

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify_cmd->parsed()) {
            const auto checks = verify::run_suite(suite);
            print_checks(checks);
            return all_passed(checks) ? 0 : 1;
        }
        if (defaults_cmd->parsed()) {
            std::cout << config_to_json(default_config(defaults_of)).dump(2) << '\n';
            return 0;
        }
        ExperimentConfig cfg = config_path.empty() ? default_config(chosen) : load_config(config_path);
        require(cfg.experiment == chosen, "config is for experiment '" + cfg.experiment + "', not '" + chosen + "'");
        if (!out_dir.empty()) cfg.out = out_dir;
        if (!seeds_text.empty()) cfg.seeds = parse_seeds(seeds_text);
        cfg.validate();
        RunOptions ro;
        ro.parallel = parallel;
        const auto art = run_experiment(cfg, ro);
        art.write(cfg.out);
        print_checks(art.checks);
        std::printf("artifacts in %s (%.2f s)\n", cfg.out.c_str(), art.wall_clock_seconds);
        return art.passed() ? 0 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
