#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mipo/augment.hpp"
#include "mipo/config.hpp"
#include "mipo/core.hpp"
#include "mipo/envs.hpp"
#include "mipo/eval.hpp"
#include "mipo/objectives.hpp"
#include "mipo/oracle.hpp"
#include "mipo/policy.hpp"
#include "mipo/trainers.hpp"

namespace mipo::runner {

inline constexpr const char* kCodeVersion = "0.1.0";

namespace fs = std::filesystem;

// FNV-1a 64 over file bytes; enough to detect any artifact drift.
inline std::string file_checksum(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot checksum " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!in) break;
    }
    std::ostringstream os;
    os << "fnv1a:" << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline nlohmann::json metrics_to_json(const eval::MetricsReport& m) {
    return nlohmann::json{
        {"win_pct", m.win_pct},
        {"tie_pct", m.tie_pct},
        {"loss_pct", m.loss_pct},
        {"headline_as_win", m.headline_as_win},
        {"headline_half", m.headline_half},
        {"self_bleu", m.self_bleu},
        {"strict_acc", m.strict_acc},
        {"tolerant_acc", m.tolerant_acc},
        {"entropy_mean", m.entropy_mean},
        {"entropy_std", m.entropy_std},
        {"entropy_median", m.entropy_median},
        {"cmi_policy", m.cmi_policy},
        {"cmi_ref", m.cmi_ref},
        {"delta_pmi", m.delta_pmi},
        {"win_rate_draws", m.win_rate_draws},
        {"self_bleu_samples", m.self_bleu_samples},
        {"seed", m.seed},
    };
}

inline eval::MetricsReport metrics_from_json(const nlohmann::json& j) {
    eval::MetricsReport m;
    m.win_pct = j.at("win_pct");
    m.tie_pct = j.at("tie_pct");
    m.loss_pct = j.at("loss_pct");
    m.headline_as_win = j.at("headline_as_win");
    m.headline_half = j.at("headline_half");
    m.self_bleu = j.at("self_bleu");
    m.strict_acc = j.at("strict_acc");
    m.tolerant_acc = j.at("tolerant_acc");
    m.entropy_mean = j.at("entropy_mean");
    m.entropy_std = j.at("entropy_std");
    m.entropy_median = j.at("entropy_median");
    m.cmi_policy = j.at("cmi_policy");
    m.cmi_ref = j.at("cmi_ref");
    m.delta_pmi = j.at("delta_pmi");
    m.win_rate_draws = j.at("win_rate_draws");
    m.self_bleu_samples = j.at("self_bleu_samples");
    m.seed = j.at("seed");
    return m;
}

struct RunArtifacts {
    fs::path dir;
    fs::path dataset;
    fs::path vocabulary;
    fs::path checkpoint;
    fs::path ref_checkpoint;
    fs::path train_report;
    fs::path metrics;
    fs::path metrics_csv;
    fs::path manifest;
    eval::MetricsReport metrics_report;
    trainers::TrainReport train;
};

inline std::string metrics_csv_header() {
    return "win_pct,tie_pct,loss_pct,headline_as_win,headline_half,self_bleu,strict_acc,"
           "tolerant_acc,entropy_mean,entropy_std,entropy_median,cmi_policy,cmi_ref,"
           "delta_pmi,win_rate_draws,self_bleu_samples,seed";
}

inline std::string metrics_csv_row(const eval::MetricsReport& m) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << m.win_pct << "," << m.tie_pct << "," << m.loss_pct << "," << m.headline_as_win << ","
       << m.headline_half << "," << m.self_bleu << "," << m.strict_acc << "," << m.tolerant_acc
       << "," << m.entropy_mean << "," << m.entropy_std << "," << m.entropy_median << ","
       << m.cmi_policy << "," << m.cmi_ref << "," << m.delta_pmi << "," << m.win_rate_draws
       << "," << m.self_bleu_samples << "," << m.seed;
    return os.str();
}

/// Evaluates a trained policy against the frozen reference: sampled win-rate,
/// self-BLEU over sampled generations, implicit-reward critic accuracy over
/// the dataset, first-token answer entropy over the topic tokens, and the
/// exact conditional-MI delta.
inline eval::MetricsReport evaluate_policy(const AutoregressivePolicy& policy,
                                           const AutoregressivePolicy& ref,
                                           const envs::SyntheticEnvironment& env,
                                           const std::vector<PreferenceExample>& dataset,
                                           const config::ExperimentConfig& cfg,
                                           std::uint64_t seed) {
    eval::MetricsReport m;
    m.seed = seed;
    m.win_rate_draws = cfg.eval.win_rate_draws;
    m.self_bleu_samples = cfg.eval.self_bleu_samples;

    Rng wr_rng(derive_seed(seed, 0xe7a1, 1));
    const auto wr = eval::win_rate(policy, ref, env, cfg.eval.win_rate_draws, wr_rng, 1.0,
                                   cfg.eval.tie_eps);
    m.win_pct = wr.win_pct;
    m.tie_pct = wr.tie_pct;
    m.loss_pct = wr.loss_pct;
    m.headline_as_win = wr.headline(eval::TieCounting::as_win);
    m.headline_half = wr.headline(eval::TieCounting::half);

    Rng sb_rng(derive_seed(seed, 0xe7a1, 2));
    std::vector<std::vector<TokenId>> corpus;
    for (std::size_t i = 0; i < cfg.eval.self_bleu_samples; ++i) {
        const auto& prompts = env.prompts();
        const PromptId x = prompts.items[sb_rng.sample_weighted(prompts.weights)];
        const auto& ctxs = env.contexts_for(x);
        const ContextId c = ctxs.items[sb_rng.sample_weighted(ctxs.weights)];
        corpus.push_back(policy.sample(Condition{x, c}, sb_rng).tokens);
    }
    m.self_bleu = eval::self_bleu4(corpus);

    std::vector<std::pair<double, double>> critic_records;
    for (const auto& ex : dataset) {
        const auto sc = objectives::implicit_reward(policy, ref, ex.condition(), ex.chosen,
                                                    cfg.beta);
        const auto sr = objectives::implicit_reward(policy, ref, ex.condition(), ex.rejected,
                                                    cfg.beta);
        if (!sc.flagged && !sr.flagged) critic_records.emplace_back(sc.value, sr.value);
    }
    if (!critic_records.empty()) {
        const auto [strict, tolerant] = eval::critic_accuracy(critic_records);
        m.strict_acc = strict;
        m.tolerant_acc = tolerant;
    }

    std::vector<TokenId> topics;
    for (std::size_t i = 0; i < env.spec().topic_tokens; ++i)
        topics.push_back(static_cast<TokenId>(1 + i));
    std::vector<std::pair<Condition, std::vector<TokenId>>> items;
    for (const auto& cond : env.all_conditions(/*with_null=*/false))
        items.emplace_back(cond, topics);
    const auto ent = eval::answer_entropy(policy, items);
    m.entropy_mean = ent.mean;
    m.entropy_std = ent.stddev;
    m.entropy_median = ent.median;

    m.cmi_policy = eval::mean_conditional_mi(policy, env);
    m.cmi_ref = eval::mean_conditional_mi(ref, env);
    m.delta_pmi = m.cmi_policy - m.cmi_ref;
    return m;
}

inline void write_train_report(const trainers::TrainReport& report, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    // Timing stays out of the file so identical runs emit identical bytes.
    for (const auto& s : report.steps) {
        nlohmann::json j = {{"step", s.step},       {"loss", s.loss},     {"grad_norm", s.grad_norm},
                            {"margin", s.margin},   {"reward", s.reward}, {"bound", s.bound}};
        out << j.dump() << "\n";
    }
    nlohmann::json summary = {{"summary", true},
                              {"steps", report.steps.size()},
                              {"seed", report.seed},
                              {"aborted", report.aborted},
                              {"skipped_samples", report.skipped_samples}};
    if (report.aborted) summary["abort_reason"] = report.abort_reason;
    out << summary.dump() << "\n";
}

/// One full pipeline run: environment, dataset, training, evaluation,
/// artifacts, manifest. Deterministic given (config, seed). On error the
/// manifest records the failing stage and the exception propagates.
inline RunArtifacts run_experiment(const config::ExperimentConfig& cfg, const fs::path& out_dir,
                                   std::uint64_t seed) {
    cfg.validate();
    fs::create_directories(out_dir);

    RunArtifacts art;
    art.dir = out_dir;
    art.dataset = out_dir / "dataset.jsonl";
    art.vocabulary = out_dir / "vocabulary.json";
    art.checkpoint = out_dir / "policy_final.ckpt";
    art.ref_checkpoint = out_dir / "policy_ref.ckpt";
    art.train_report = out_dir / "train_report.jsonl";
    art.metrics = out_dir / "metrics.json";
    art.metrics_csv = out_dir / "metrics.csv";
    art.manifest = out_dir / "manifest.json";

    std::string stage = "make_env";
    nlohmann::json manifest = {{"config", config::to_json(cfg)},
                               {"code_version", kCodeVersion},
                               {"seed", seed},
                               {"status", "running"}};
    auto write_manifest = [&] {
        std::ofstream out(art.manifest);
        out << manifest.dump(2) << "\n";
    };

    try {
        auto bundle = envs::make_env(cfg.environment, seed);

        stage = "build_dataset";
        const auto dataset =
            augment::build_dataset(bundle.reference, bundle.env, cfg.strategy,
                                   cfg.n_per_condition, seed);
        {
            std::ofstream out(art.dataset);
            if (!out) throw std::runtime_error("cannot open " + art.dataset.string());
            for (const auto& ex : dataset) out << encode_example(ex, bundle.env) << "\n";
            std::ofstream vout(art.vocabulary);
            vout << vocabulary_to_json(bundle.env.vocabulary()).dump(2) << "\n";
        }

        stage = "train";
        const auto tc = cfg.train_config(seed);
        trainers::TrainResult result = [&] {
            switch (cfg.method) {
                case config::Method::sft:
                    return trainers::train_sft(bundle.reference.clone(), dataset, tc);
                case config::Method::mipo:
                    return trainers::train_mipo(bundle.reference.clone(), dataset, tc);
                case config::Method::infonce:
                    return trainers::train_infonce(bundle.reference.clone(), bundle.env, tc);
                case config::Method::pg_mi:
                    return trainers::train_pg_mi(bundle.reference.clone(), bundle.env, tc);
            }
            throw ValidationError("config: unknown method");
        }();
        if (result.report.aborted)
            throw std::runtime_error("training aborted: " + result.report.abort_reason);
        write_train_report(result.report, art.train_report);
        result.policy.save(art.checkpoint.string());
        bundle.reference.save(art.ref_checkpoint.string());

        stage = "eval";
        art.metrics_report =
            evaluate_policy(result.policy, bundle.reference, bundle.env, dataset, cfg, seed);
        {
            std::ofstream out(art.metrics);
            out << metrics_to_json(art.metrics_report).dump(2) << "\n";
            std::ofstream csv(art.metrics_csv);
            csv << metrics_csv_header() << "\n" << metrics_csv_row(art.metrics_report) << "\n";
        }
        art.train = std::move(result.report);

        manifest["status"] = "ok";
        manifest["wall_seconds"] = art.train.wall_seconds;
        manifest["outputs"] = {{"dataset", art.dataset.filename().string()},
                               {"vocabulary", art.vocabulary.filename().string()},
                               {"checkpoint", art.checkpoint.filename().string()},
                               {"ref_checkpoint", art.ref_checkpoint.filename().string()},
                               {"train_report", art.train_report.filename().string()},
                               {"metrics", art.metrics.filename().string()},
                               {"metrics_csv", art.metrics_csv.filename().string()}};
        manifest["checksums"] = {
            {"dataset.jsonl", file_checksum(art.dataset)},
            {"vocabulary.json", file_checksum(art.vocabulary)},
            {"policy_final.ckpt", file_checksum(art.checkpoint)},
            {"policy_ref.ckpt", file_checksum(art.ref_checkpoint)},
            {"train_report.jsonl", file_checksum(art.train_report)},
            {"metrics.json", file_checksum(art.metrics)},
            {"metrics.csv", file_checksum(art.metrics_csv)}};
        write_manifest();
    } catch (...) {
        manifest["status"] = "failed:" + stage;
        write_manifest();
        throw;
    }
    return art;
}

/// Re-runs a manifest's config snapshot and seed; artifacts must come out
/// byte-identical to the recorded checksums.
inline RunArtifacts rerun_from_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path.string());
    nlohmann::json j;
    in >> j;
    const auto cfg = config::from_json(j.at("config"));
    return run_experiment(cfg, out_dir, j.at("seed").get<std::uint64_t>());
}

// ---------------------------------------------------------------------------
// Aggregated method tables (compare / ablate).
// ---------------------------------------------------------------------------

struct MethodSummary {
    std::string label;
    double headline_as_win = 0.0;
    double headline_half = 0.0;
    double delta_pmi = 0.0;
    double self_bleu = 0.0;
    std::vector<eval::MetricsReport> per_seed;
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline MethodSummary summarize(const std::string& label,
                               const std::vector<eval::MetricsReport>& per_seed) {
    MethodSummary s;
    s.label = label;
    s.per_seed = per_seed;
    std::vector<double> as_win, half, dpmi, bleu;
    for (const auto& m : per_seed) {
        as_win.push_back(m.headline_as_win);
        half.push_back(m.headline_half);
        dpmi.push_back(m.delta_pmi);
        bleu.push_back(m.self_bleu);
    }
    s.headline_as_win = median(as_win);
    s.headline_half = median(half);
    s.delta_pmi = median(dpmi);
    s.self_bleu = median(bleu);
    return s;
}

inline std::string render_markdown_table(const std::vector<MethodSummary>& rows,
                                         const std::vector<std::uint64_t>& seeds) {
    std::ostringstream os;
    os << "| method | win% (ties as wins) | win% (ties half) | delta PMI (nats) | self-BLEU-4 |\n";
    os << "|---|---|---|---|---|\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows)
        os << "| " << r.label << " | " << r.headline_as_win << " | " << r.headline_half << " | "
           << r.delta_pmi << " | " << r.self_bleu << " |\n";
    os << "\nmedians over seeds:";
    for (auto s : seeds) os << " " << s;
    os << "\n";
    return os.str();
}

inline std::string render_csv_table(const std::vector<MethodSummary>& rows) {
    std::ostringstream os;
    os << "method,headline_as_win,headline_half,delta_pmi,self_bleu\n";
    os << std::setprecision(17);
    for (const auto& r : rows)
        os << r.label << "," << r.headline_as_win << "," << r.headline_half << "," << r.delta_pmi
           << "," << r.self_bleu << "\n";
    return os.str();
}

struct CompareResult {
    std::vector<MethodSummary> rows;
    std::vector<std::uint64_t> seeds;
    fs::path table_md;
    fs::path table_csv;
};

/// Runs each method over the config's seed list with a shared environment per
/// seed and emits the aggregated comparison table.
inline CompareResult compare_methods(const config::ExperimentConfig& cfg,
                                     const std::vector<config::Method>& methods,
                                     const fs::path& out_dir) {
    if (methods.size() < 2) throw ValidationError("compare: needs at least 2 methods");
    cfg.validate();
    fs::create_directories(out_dir);
    CompareResult result;
    result.seeds = cfg.run_seeds();
    for (const auto method : methods) {
        config::ExperimentConfig mc = cfg;
        mc.method = method;
        std::vector<eval::MetricsReport> per_seed;
        for (const auto seed : result.seeds) {
            const fs::path dir =
                out_dir / config::method_name(method) / ("seed_" + std::to_string(seed));
            per_seed.push_back(run_experiment(mc, dir, seed).metrics_report);
        }
        result.rows.push_back(summarize(config::method_name(method), per_seed));
    }
    result.table_md = out_dir / "compare.md";
    result.table_csv = out_dir / "compare.csv";
    std::ofstream(result.table_md) << render_markdown_table(result.rows, result.seeds);
    std::ofstream(result.table_csv) << render_csv_table(result.rows);
    return result;
}

/// One MIPO run per negative-sampling strategy, shared seeds.
inline CompareResult ablate_strategies(const config::ExperimentConfig& cfg,
                                       const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    CompareResult result;
    result.seeds = cfg.run_seeds();
    for (const NegativeStrategy strategy :
         {NegativeStrategy::missing, NegativeStrategy::random_context,
          NegativeStrategy::random_prompt}) {
        config::ExperimentConfig sc = cfg;
        sc.method = config::Method::mipo;
        sc.strategy = strategy;
        std::vector<eval::MetricsReport> per_seed;
        for (const auto seed : result.seeds) {
            const fs::path dir =
                out_dir / strategy_name(strategy) / ("seed_" + std::to_string(seed));
            per_seed.push_back(run_experiment(sc, dir, seed).metrics_report);
        }
        result.rows.push_back(summarize(strategy_name(strategy), per_seed));
    }
    result.table_md = out_dir / "ablate.md";
    result.table_csv = out_dir / "ablate.csv";
    std::ofstream(result.table_md) << render_markdown_table(result.rows, result.seeds);
    std::ofstream(result.table_csv) << render_csv_table(result.rows);
    return result;
}

/// Re-renders tables from stored per-run metrics.json files under `dir`,
/// grouped by the run's method (and strategy for MIPO rows).
inline CompareResult rebuild_report(const fs::path& dir) {
    std::map<std::string, std::vector<eval::MetricsReport>> groups;
    std::map<std::string, std::vector<std::uint64_t>> group_seeds;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().filename() != "metrics.json") continue;
        const fs::path manifest = entry.path().parent_path() / "manifest.json";
        std::string label = "run";
        if (fs::exists(manifest)) {
            nlohmann::json mj;
            std::ifstream(manifest) >> mj;
            label = mj.at("config").value("method", "run");
            if (label == "mipo")
                label += "/" + mj.at("config").value("strategy", "");
        }
        nlohmann::json j;
        std::ifstream(entry.path()) >> j;
        groups[label].push_back(metrics_from_json(j));
        group_seeds[label].push_back(groups[label].back().seed);
    }
    if (groups.empty()) throw std::runtime_error("no metrics.json files under " + dir.string());
    CompareResult result;
    for (const auto& [label, reports] : groups) {
        result.rows.push_back(summarize(label, reports));
        for (auto s : group_seeds[label])
            if (std::find(result.seeds.begin(), result.seeds.end(), s) == result.seeds.end())
                result.seeds.push_back(s);
    }
    std::sort(result.seeds.begin(), result.seeds.end());
    result.table_md = dir / "report.md";
    result.table_csv = dir / "report.csv";
    std::ofstream(result.table_md) << render_markdown_table(result.rows, result.seeds);
    std::ofstream(result.table_csv) << render_csv_table(result.rows);
    return result;
}

/// Invariant sweep over a config's environment: normalization of every
/// bucket, MI nonnegativity, the pointwise/aggregate chain identity, and the
/// InfoNCE bound for a few random critics. Returns human-readable lines
/// paired with pass flags.
inline std::vector<std::pair<std::string, bool>> oracle_check(
    const config::ExperimentConfig& cfg, std::uint64_t seed) {
    std::vector<std::pair<std::string, bool>> checks;
    auto bundle = envs::make_env(cfg.environment, seed);
    const auto& env = bundle.env;
    const auto& ref = bundle.reference;

    double worst_mass = 0.0;
    for (const auto& cond : env.all_conditions(true)) {
        const auto dist = oracle::enumerate_distribution(ref, cond);
        worst_mass = std::max(worst_mass, std::abs(dist.total_mass() - 1.0));
    }
    checks.push_back({"normalization: worst |mass-1| = " + std::to_string(worst_mass),
                      worst_mass <= 1e-9});

    const double mi = oracle::exact_mi(ref, env.prompts());
    checks.push_back({"exact_mi nonnegative: " + std::to_string(mi), mi >= -1e-9});

    bool chain_ok = true;
    double worst_chain = 0.0;
    for (auto x : env.prompts().items) {
        const auto& ctxs = env.contexts_for(x);
        const double cmi = oracle::exact_conditional_mi(ref, x, ctxs);
        if (cmi < -1e-9) chain_ok = false;
        // Recompute E[pmi] from per-context tables against the marginal.
        const auto marg = oracle::exact_marginal(ref, x, ctxs);
        double expect = 0.0;
        for (std::size_t k = 0; k < ctxs.size(); ++k) {
            const auto dist = oracle::enumerate_distribution(ref, Condition{x, ctxs.items[k]});
            for (std::size_t i = 0; i < dist.size(); ++i) {
                const double p = std::exp(dist.logp[i]);
                if (p > 0.0) expect += ctxs.weights[k] * p * (dist.logp[i] - marg.logp[i]);
            }
        }
        worst_chain = std::max(worst_chain, std::abs(expect - cmi));
    }
    checks.push_back(
        {"chain identity: worst |E[pmi]-cmi| = " + std::to_string(worst_chain),
         chain_ok && worst_chain <= 1e-9});

    // The bound check is quadratic in the response space, so run it on a
    // shortened-horizon copy of the environment.
    envs::EnvSpec small = cfg.environment;
    small.max_len = std::min<std::size_t>(small.max_len, small.attrs_per_context + 2);
    auto small_bundle = envs::make_env(small, seed);
    bool bound_ok = true;
    Rng rng(derive_seed(seed, 0x0b0c));
    const PromptId x0 = small_bundle.env.prompts().items.front();
    const auto& ctxs0 = small_bundle.env.contexts_for(x0);
    const double cmi0 = oracle::exact_conditional_mi(small_bundle.reference, x0, ctxs0);
    const std::size_t support =
        oracle::enumerate_distribution(small_bundle.reference, Condition{x0, ctxs0.items[0]})
            .size();
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> critic(support * ctxs0.size());
        for (auto& c : critic) c = rng.uniform(-1.0, 1.0);
        const auto res = oracle::infonce_exact_loss(
            small_bundle.reference, x0, ctxs0,
            [&](std::size_t y, std::size_t c) { return critic[y * ctxs0.size() + c]; }, 2);
        if (res.bound > cmi0 + 1e-6) bound_ok = false;
    }
    checks.push_back({"infonce bound <= exact conditional MI (5 random critics)", bound_ok});
    return checks;
}

}  // namespace mipo::runner
