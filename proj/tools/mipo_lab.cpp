// mipo-lab: config-driven experiment harness for contrastive preference
// optimization on enumerable synthetic environments, plus a remote dataset
// generator for real chat-completion endpoints.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mipo/config.hpp"
#include "mipo/remote.hpp"
#include "mipo/runner.hpp"

namespace fs = std::filesystem;

namespace {

mipo::config::ExperimentConfig load_config(const std::string& path,
                                           std::optional<std::uint64_t> seed_override) {
    auto cfg = path.empty() ? mipo::config::ExperimentConfig{} : mipo::config::load(path);
    if (seed_override) cfg.seed = *seed_override;
    cfg.validate();
    return cfg;
}

std::vector<mipo::config::Method> parse_methods(const std::string& csv) {
    std::vector<mipo::config::Method> methods;
    std::string token;
    for (char ch : csv + ",") {
        if (ch == ',') {
            if (!token.empty()) methods.push_back(mipo::config::method_from_name(token));
            token.clear();
        } else {
            token += ch;
        }
    }
    return methods;
}

std::vector<mipo::remote::PromptItem> load_prompt_items(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open prompts file: " + path);
    std::vector<mipo::remote::PromptItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            items.push_back({j.at("prompt").get<std::string>(), j.value("context", "")});
        } catch (const nlohmann::json::exception& e) {
            throw mipo::ParseError("prompts file line " + std::to_string(lineno) + ": " +
                                   e.what());
        }
    }
    if (items.empty()) throw mipo::ValidationError("prompts file is empty");
    return items;
}

// Completed record indices from a previous run's metadata sidecar.
std::vector<std::size_t> load_resume_indices(const std::string& meta_path) {
    std::ifstream in(meta_path);
    if (!in) throw std::runtime_error("cannot open resume manifest: " + meta_path);
    nlohmann::json j;
    in >> j;
    std::vector<std::size_t> done;
    for (const auto& idx : j.at("completed")) done.push_back(idx.get<std::size_t>());
    return done;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MIPO experiment lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", methods_csv = "sft,mipo";
    std::string strategy_flag, resume_path, prompts_path;
    std::optional<std::uint64_t> seed_override;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config file (JSON)");
        cmd->add_option("--seed", seed_override, "override the config master seed");
        cmd->add_option("--out", out_dir, "output directory");
    };

    auto* run_cmd = app.add_subcommand("run", "run one configured experiment");
    add_common(run_cmd);
    run_cmd->add_option("--strategy", strategy_flag, "override the negative-sampling strategy");
    run_cmd->add_option("--resume", resume_path, "re-run from a stored manifest");

    auto* compare_cmd = app.add_subcommand("compare", "run several methods and tabulate");
    add_common(compare_cmd);
    compare_cmd->add_option("--methods", methods_csv, "comma-separated method list");

    auto* ablate_cmd =
        app.add_subcommand("ablate", "run MIPO under each negative-sampling strategy");
    add_common(ablate_cmd);

    auto* oracle_cmd = app.add_subcommand("oracle-check", "run the invariant suite on the env");
    add_common(oracle_cmd);

    auto* report_cmd = app.add_subcommand("report", "re-render tables from stored reports");
    add_common(report_cmd);

    auto* defaults_cmd =
        app.add_subcommand("default-config", "print the built-in defaults as a config file");

    auto* remote_cmd =
        app.add_subcommand("gen-remote", "generate a preference dataset from an endpoint");
    add_common(remote_cmd);
    remote_cmd->add_option("--prompts", prompts_path, "line-delimited prompt/context records")
        ->required();
    remote_cmd->add_option("--strategy", strategy_flag, "negative-sampling strategy");
    remote_cmd->add_option("--resume", resume_path, "skip records listed in a resume manifest");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            if (!resume_path.empty()) {
                const auto art = mipo::runner::rerun_from_manifest(resume_path, out_dir);
                std::cout << "rerun ok: " << art.manifest.string() << "\n";
                return 0;
            }
            auto cfg = load_config(config_path, seed_override);
            if (!strategy_flag.empty()) cfg.strategy = mipo::strategy_from_name(strategy_flag);
            const auto art = mipo::runner::run_experiment(cfg, out_dir, cfg.seed);
            std::cout << "run ok: " << art.manifest.string() << "\n"
                      << "  delta PMI: " << art.metrics_report.delta_pmi << " nats\n"
                      << "  win% (ties as wins): " << art.metrics_report.headline_as_win << "\n";
            return 0;
        }
        if (compare_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto result =
                mipo::runner::compare_methods(cfg, parse_methods(methods_csv), out_dir);
            std::cout << mipo::runner::render_markdown_table(result.rows, result.seeds);
            return 0;
        }
        if (ablate_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto result = mipo::runner::ablate_strategies(cfg, out_dir);
            std::cout << mipo::runner::render_markdown_table(result.rows, result.seeds);
            return 0;
        }
        if (oracle_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            bool all_ok = true;
            for (const auto& [line, ok] : mipo::runner::oracle_check(cfg, cfg.seed)) {
                std::cout << (ok ? "[PASS] " : "[FAIL] ") << line << "\n";
                all_ok = all_ok && ok;
            }
            return all_ok ? 0 : 1;
        }
        if (report_cmd->parsed()) {
            const auto result = mipo::runner::rebuild_report(out_dir);
            std::cout << mipo::runner::render_markdown_table(result.rows, result.seeds);
            return 0;
        }
        if (defaults_cmd->parsed()) {
            std::cout << mipo::config::to_json(mipo::config::ExperimentConfig{}).dump(2) << "\n";
            return 0;
        }
        if (remote_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto items = load_prompt_items(prompts_path);
            std::vector<std::string> context_pool, prompt_pool;
            for (const auto& item : items) {
                if (!item.context.empty()) context_pool.push_back(item.context);
                prompt_pool.push_back(item.prompt);
            }
            std::vector<std::size_t> skip;
            if (!resume_path.empty()) skip = load_resume_indices(resume_path);
            const auto strategy = strategy_flag.empty()
                                      ? cfg.strategy
                                      : mipo::strategy_from_name(strategy_flag);
            const auto result = mipo::remote::generate_remote_batch(
                cfg.endpoint, items, strategy, context_pool, prompt_pool, cfg.seed, skip);

            fs::create_directories(out_dir);
            const fs::path pairs = fs::path(out_dir) / "pairs.jsonl";
            mipo::remote::export_dpo_dataset(result.records, pairs.string(),
                                             cfg.endpoint.context_template);
            nlohmann::json completed = nlohmann::json::array();
            for (std::size_t i = 0; i < result.slot.size(); ++i)
                if (result.slot[i]) completed.push_back(i);
            nlohmann::json failures = nlohmann::json::array();
            for (const auto& f : result.failures)
                failures.push_back({{"index", f.index}, {"error", f.error}});
            std::ofstream(fs::path(out_dir) / "gen_manifest.json")
                << nlohmann::json{{"completed", completed}, {"failures", failures}}.dump(2)
                << "\n";
            std::cout << "generated " << result.records.size() << " pairs, "
                      << result.failures.size() << " failures -> " << pairs.string() << "\n";
            return result.failures.empty() ? 0 : 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
