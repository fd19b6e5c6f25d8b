#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mipo/core.hpp"
#include "mipo/envs.hpp"
#include "mipo/objectives.hpp"
#include "mipo/remote.hpp"
#include "mipo/trainers.hpp"

namespace mipo::config {

enum class Method { sft, mipo, infonce, pg_mi };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::sft: return "sft";
        case Method::mipo: return "mipo";
        case Method::infonce: return "infonce";
        case Method::pg_mi: return "pg_mi";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    if (s == "sft") return Method::sft;
    if (s == "mipo") return Method::mipo;
    if (s == "infonce") return Method::infonce;
    if (s == "pg_mi") return Method::pg_mi;
    throw ParseError("unknown method '" + s + "'");
}

struct EvalConfig {
    std::size_t win_rate_draws = 500;
    std::size_t self_bleu_samples = 200;
    double tie_eps = 1e-9;
    std::string tie_counting = "as_win";
};

/// The experiment settings document: environment section, training method and
/// hyperparameters, evaluation sample counts, and the master seed every
/// random draw flows from.
struct ExperimentConfig {
    envs::EnvSpec environment;
    Method method = Method::mipo;
    NegativeStrategy strategy = NegativeStrategy::missing;
    double beta = 0.1;
    double learning_rate = 5.0;
    std::size_t steps = 500;
    std::size_t batch_size = 256;
    std::size_t epochs = 0;  // > 0 switches sft/mipo to epoch-counted passes
    std::size_t n_per_condition = 20;
    double kl_coef = 0.01;
    objectives::PmiMode pmi_mode = objectives::PmiMode::mixture;
    std::size_t infonce_k = 2;
    bool adam = false;
    std::uint64_t seed = 1;
    std::size_t n_seeds = 5;  // compare/ablate run seeds seed..seed+n_seeds-1
    EvalConfig eval;
    remote::EndpointConfig endpoint;

    void validate() const {
        environment.validate();
        if (beta <= 0.0) throw ValidationError("config: beta must be > 0");
        if (learning_rate <= 0.0) throw ValidationError("config: learning rate must be > 0");
        if (steps < 1) throw ValidationError("config: steps must be >= 1");
        if (batch_size < 1) throw ValidationError("config: batch size must be >= 1");
        if (n_per_condition < 1) throw ValidationError("config: n_per_condition must be >= 1");
        if (kl_coef < 0.0) throw ValidationError("config: kl_coef must be >= 0");
        if (infonce_k < 2) throw ValidationError("config: infonce_k must be >= 2");
        if (n_seeds < 1) throw ValidationError("config: n_seeds must be >= 1");
        if (eval.win_rate_draws < 1) throw ValidationError("config: win_rate_draws must be >= 1");
        if (eval.self_bleu_samples < 2)
            throw ValidationError("config: self_bleu_samples must be >= 2");
        if (eval.tie_counting != "as_win" && eval.tie_counting != "half")
            throw ValidationError("config: tie_counting must be as_win or half");
    }

    trainers::TrainConfig train_config(std::uint64_t run_seed) const {
        trainers::TrainConfig tc;
        tc.learning_rate = learning_rate;
        tc.steps = steps;
        tc.batch_size = batch_size;
        tc.epochs = epochs;
        tc.beta = beta;
        tc.kl_coef = kl_coef;
        tc.infonce_k = infonce_k;
        tc.pmi_mode = pmi_mode;
        tc.adam = adam;
        tc.seed = run_seed;
        return tc;
    }

    std::vector<std::uint64_t> run_seeds() const {
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(seed + i);
        return seeds;
    }
};

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
    return nlohmann::json{
        {"environment",
         {{"regime", envs::regime_name(cfg.environment.regime)},
          {"prompts", cfg.environment.prompts},
          {"contexts_per_prompt", cfg.environment.contexts_per_prompt},
          {"topic_tokens", cfg.environment.topic_tokens},
          {"attribute_tokens", cfg.environment.attribute_tokens},
          {"filler_tokens", cfg.environment.filler_tokens},
          {"attrs_per_context", cfg.environment.attrs_per_context},
          {"max_len", cfg.environment.max_len},
          {"alpha", cfg.environment.alpha}}},
        {"method", method_name(cfg.method)},
        {"strategy", strategy_name(cfg.strategy)},
        {"beta", cfg.beta},
        {"learning_rate", cfg.learning_rate},
        {"steps", cfg.steps},
        {"batch_size", cfg.batch_size},
        {"epochs", cfg.epochs},
        {"n_per_condition", cfg.n_per_condition},
        {"kl_coef", cfg.kl_coef},
        {"pmi_mode", objectives::pmi_mode_name(cfg.pmi_mode)},
        {"infonce_k", cfg.infonce_k},
        {"adam", cfg.adam},
        {"seed", cfg.seed},
        {"n_seeds", cfg.n_seeds},
        {"eval",
         {{"win_rate_draws", cfg.eval.win_rate_draws},
          {"self_bleu_samples", cfg.eval.self_bleu_samples},
          {"tie_eps", cfg.eval.tie_eps},
          {"tie_counting", cfg.eval.tie_counting}}},
        {"remote",
         {{"base_url", cfg.endpoint.base_url},
          {"model", cfg.endpoint.model},
          {"auth_env", cfg.endpoint.auth_env},
          {"temperature", cfg.endpoint.temperature},
          {"max_tokens", cfg.endpoint.max_tokens},
          {"timeout_ms", cfg.endpoint.timeout_ms},
          {"max_retries", cfg.endpoint.max_retries},
          {"concurrency", cfg.endpoint.concurrency},
          {"retry_backoff_ms", cfg.endpoint.retry_backoff_ms}}},
    };
}

inline ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    try {
        if (j.contains("environment")) {
            const auto& e = j.at("environment");
            if (e.contains("regime"))
                cfg.environment.regime = envs::regime_from_name(e.at("regime"));
            cfg.environment.prompts = e.value("prompts", cfg.environment.prompts);
            cfg.environment.contexts_per_prompt =
                e.value("contexts_per_prompt", cfg.environment.contexts_per_prompt);
            cfg.environment.topic_tokens = e.value("topic_tokens", cfg.environment.topic_tokens);
            cfg.environment.attribute_tokens =
                e.value("attribute_tokens", cfg.environment.attribute_tokens);
            cfg.environment.filler_tokens =
                e.value("filler_tokens", cfg.environment.filler_tokens);
            cfg.environment.attrs_per_context =
                e.value("attrs_per_context", cfg.environment.attrs_per_context);
            cfg.environment.max_len = e.value("max_len", cfg.environment.max_len);
            cfg.environment.alpha = e.value("alpha", cfg.environment.alpha);
        }
        if (j.contains("method")) cfg.method = method_from_name(j.at("method"));
        if (j.contains("strategy")) cfg.strategy = strategy_from_name(j.at("strategy"));
        cfg.beta = j.value("beta", cfg.beta);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.steps = j.value("steps", cfg.steps);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.n_per_condition = j.value("n_per_condition", cfg.n_per_condition);
        cfg.kl_coef = j.value("kl_coef", cfg.kl_coef);
        if (j.contains("pmi_mode")) {
            const std::string m = j.at("pmi_mode");
            if (m == "mixture")
                cfg.pmi_mode = objectives::PmiMode::mixture;
            else if (m == "null_bucket")
                cfg.pmi_mode = objectives::PmiMode::null_bucket;
            else
                throw ParseError("unknown pmi_mode '" + m + "'");
        }
        cfg.infonce_k = j.value("infonce_k", cfg.infonce_k);
        cfg.adam = j.value("adam", cfg.adam);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.n_seeds = j.value("n_seeds", cfg.n_seeds);
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            cfg.eval.win_rate_draws = e.value("win_rate_draws", cfg.eval.win_rate_draws);
            cfg.eval.self_bleu_samples = e.value("self_bleu_samples", cfg.eval.self_bleu_samples);
            cfg.eval.tie_eps = e.value("tie_eps", cfg.eval.tie_eps);
            cfg.eval.tie_counting = e.value("tie_counting", cfg.eval.tie_counting);
        }
        if (j.contains("remote")) {
            const auto& r = j.at("remote");
            cfg.endpoint.base_url = r.value("base_url", cfg.endpoint.base_url);
            cfg.endpoint.model = r.value("model", cfg.endpoint.model);
            cfg.endpoint.auth_env = r.value("auth_env", cfg.endpoint.auth_env);
            cfg.endpoint.temperature = r.value("temperature", cfg.endpoint.temperature);
            cfg.endpoint.max_tokens = r.value("max_tokens", cfg.endpoint.max_tokens);
            cfg.endpoint.timeout_ms = r.value("timeout_ms", cfg.endpoint.timeout_ms);
            cfg.endpoint.max_retries = r.value("max_retries", cfg.endpoint.max_retries);
            cfg.endpoint.concurrency = r.value("concurrency", cfg.endpoint.concurrency);
            cfg.endpoint.retry_backoff_ms =
                r.value("retry_backoff_ms", cfg.endpoint.retry_backoff_ms);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config " + path + ": " + e.what());
    }
    return from_json(j);
}

inline void save(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open config for writing: " + path);
    out << to_json(cfg).dump(2) << "\n";
}

}  // namespace mipo::config
