#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "mipo/core.hpp"
#include "mipo/rng.hpp"

namespace mipo::remote {

/// Chat-completion endpoint settings. Auth is read from the named environment
/// variable at request time; an empty name sends no Authorization header.
struct EndpointConfig {
    std::string base_url = "http://127.0.0.1:8080";
    std::string model = "local-model";
    std::string auth_env;
    double temperature = 0.7;
    int max_tokens = 512;
    int timeout_ms = 30000;
    int max_retries = 3;
    int concurrency = 4;
    int retry_backoff_ms = 250;  // doubled after each failed attempt
    std::string context_template = "Please respect the following requirements made by the user: ";

    void validate() const {
        if (timeout_ms <= 0) throw ValidationError("endpoint: timeout must be > 0");
        if (max_retries < 0) throw ValidationError("endpoint: retries must be >= 0");
        if (concurrency < 1) throw ValidationError("endpoint: concurrency must be >= 1");
    }
};

struct PromptItem {
    std::string prompt;
    std::string context;  // empty means no user context available
};

/// One text-level contrastive record produced against a live endpoint.
struct TextPairRecord {
    std::string prompt;
    std::string context;
    bool has_context = false;
    std::string chosen;
    std::string rejected;
    std::string strategy;
    std::string model;
    std::string chosen_request_id;
    std::string rejected_request_id;
    std::string rejected_prompt;   // prompt text used for the rejected side
    std::string rejected_context;  // context text used for the rejected side, if any
    int retries = 0;
};

struct RemoteFailure {
    std::size_t index = 0;
    std::string error;
};

struct RemoteBatchResult {
    std::vector<TextPairRecord> records;          // input order, failed slots omitted
    std::vector<RemoteFailure> failures;
    std::vector<std::optional<std::size_t>> slot;  // input index -> records index
};

namespace detail {

struct Completion {
    std::string text;
    std::string request_id;
    int retries = 0;
};

inline std::pair<std::string, std::string> split_base_url(const std::string& base_url) {
    // httplib wants scheme://host:port separate from the path prefix.
    auto scheme_end = base_url.find("://");
    auto path_start = scheme_end == std::string::npos ? base_url.find('/')
                                                      : base_url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {base_url, ""};
    std::string path = base_url.substr(path_start);
    if (path == "/") path = "";
    return {base_url.substr(0, path_start), path};
}

inline std::string user_message(const EndpointConfig& cfg, const std::string& prompt,
                                const std::string& context) {
    if (context.empty()) return prompt;
    return prompt + " " + cfg.context_template + context;
}

// One chat completion with retry on 429/5xx/transport errors. Sampling
// parameters are fixed by the config so chosen and rejected generations
// differ only in conditioning.
inline Completion complete(const EndpointConfig& cfg, const std::string& prompt,
                           const std::string& context) {
    auto [host, prefix] = split_base_url(cfg.base_url);
    httplib::Client client(host);
    client.set_connection_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
    client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);

    httplib::Headers headers;
    if (!cfg.auth_env.empty()) {
        const char* token = std::getenv(cfg.auth_env.c_str());
        if (token != nullptr && *token != '\0')
            headers.emplace("Authorization", std::string("Bearer ") + token);
    }

    nlohmann::json body = {
        {"model", cfg.model},
        {"messages", {{{"role", "user"}, {"content", user_message(cfg, prompt, context)}}}},
        {"temperature", cfg.temperature},
        {"max_tokens", cfg.max_tokens},
    };
    const std::string payload = body.dump();

    int backoff = cfg.retry_backoff_ms;
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff *= 2;
        }
        auto res = client.Post(prefix + "/v1/chat/completions", headers, payload,
                               "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "http status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw std::runtime_error("endpoint rejected request: http " +
                                     std::to_string(res->status));
        try {
            auto j = nlohmann::json::parse(res->body);
            Completion out;
            out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
            out.request_id = j.value("id", "");
            out.retries = attempt;
            return out;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad completion payload: ") + e.what());
        }
    }
    throw std::runtime_error("exhausted retries: " + last_error);
}

}  // namespace detail

/// Generates one preference pair: chosen from (prompt + context), rejected
/// from the strategy's corrupted conditioning. Pools supply the substitution
/// candidates for random_context / random_prompt.
inline TextPairRecord generate_remote_pair(const EndpointConfig& cfg, const std::string& prompt,
                                           const std::string& context,
                                           NegativeStrategy strategy,
                                           const std::vector<std::string>& context_pool,
                                           const std::vector<std::string>& prompt_pool,
                                           Rng& rng) {
    cfg.validate();
    TextPairRecord rec;
    rec.prompt = prompt;
    rec.context = context;
    rec.has_context = !context.empty();
    rec.strategy = strategy_name(strategy);
    rec.model = cfg.model;

    std::string rej_prompt = prompt;
    std::string rej_context;
    switch (strategy) {
        case NegativeStrategy::missing:
            break;  // prompt only
        case NegativeStrategy::random_context: {
            std::vector<const std::string*> pool;
            for (const auto& c : context_pool)
                if (c != context) pool.push_back(&c);
            if (pool.empty())
                throw ValidationError("random_context needs a context pool with >= 2 entries");
            rej_context = *pool[rng.next_index(pool.size())];
            break;
        }
        case NegativeStrategy::random_prompt: {
            std::vector<const std::string*> pool;
            for (const auto& p : prompt_pool)
                if (p != prompt) pool.push_back(&p);
            if (pool.empty())
                throw ValidationError("random_prompt needs a prompt pool with >= 2 entries");
            rej_prompt = *pool[rng.next_index(pool.size())];
            rej_context = context;  // keep the true context with the corrupted prompt
            break;
        }
    }

    auto chosen = detail::complete(cfg, prompt, context);
    auto rejected = detail::complete(cfg, rej_prompt, rej_context);
    rec.chosen = chosen.text;
    rec.rejected = rejected.text;
    rec.chosen_request_id = chosen.request_id;
    rec.rejected_request_id = rejected.request_id;
    rec.rejected_prompt = rej_prompt;
    rec.rejected_context = rej_context;
    rec.retries = chosen.retries + rejected.retries;
    return rec;
}

/// Runs the whole batch with at most cfg.concurrency requests pairs in
/// flight. Failures are per-record; output keeps input order. Indices in
/// `skip` (from a resume manifest) are not re-generated.
inline RemoteBatchResult generate_remote_batch(const EndpointConfig& cfg,
                                               const std::vector<PromptItem>& items,
                                               NegativeStrategy strategy,
                                               const std::vector<std::string>& context_pool,
                                               const std::vector<std::string>& prompt_pool,
                                               std::uint64_t master_seed,
                                               const std::vector<std::size_t>& skip = {}) {
    cfg.validate();
    std::vector<bool> skipped(items.size(), false);
    for (auto i : skip)
        if (i < items.size()) skipped[i] = true;

    std::vector<std::optional<TextPairRecord>> out(items.size());
    std::vector<std::optional<std::string>> errors(items.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= items.size()) return;
            if (skipped[i]) continue;
            Rng rng(derive_seed(master_seed, i));
            try {
                out[i] = generate_remote_pair(cfg, items[i].prompt, items[i].context, strategy,
                                              context_pool, prompt_pool, rng);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };

    std::vector<std::thread> threads;
    const std::size_t n_threads =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.concurrency), std::max<std::size_t>(items.size(), 1));
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();

    RemoteBatchResult result;
    result.slot.assign(items.size(), std::nullopt);
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (out[i]) {
            result.slot[i] = result.records.size();
            result.records.push_back(std::move(*out[i]));
        } else if (errors[i]) {
            result.failures.push_back({i, *errors[i]});
        }
    }
    return result;
}

/// Writes the records as line-delimited {prompt, chosen, rejected} with the
/// prompt field equal to the chosen-side conditioning text, plus a sidecar
/// metadata file at path + ".meta.json". Duplicates are preserved.
inline void export_dpo_dataset(const std::vector<TextPairRecord>& records,
                               const std::string& path,
                               const std::string& context_template =
                                   "Please respect the following requirements made by the user: ") {
    if (records.empty()) throw ValidationError("export: no records");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    nlohmann::json meta_records = nlohmann::json::array();
    for (const auto& rec : records) {
        const std::string prompt_field =
            rec.has_context ? rec.prompt + " " + context_template + rec.context : rec.prompt;
        nlohmann::json line = {
            {"prompt", prompt_field}, {"chosen", rec.chosen}, {"rejected", rec.rejected}};
        out << line.dump() << "\n";
        nlohmann::json m = {{"strategy", rec.strategy},
                            {"model", rec.model},
                            {"chosen_request_id", rec.chosen_request_id},
                            {"rejected_request_id", rec.rejected_request_id},
                            {"retries", rec.retries},
                            {"rejected_prompt", rec.rejected_prompt}};
        if (!rec.rejected_context.empty()) m["rejected_context"] = rec.rejected_context;
        meta_records.push_back(std::move(m));
    }
    out.close();
    if (!out) throw std::runtime_error("write failed: " + path);

    std::ofstream meta(path + ".meta.json");
    if (!meta) throw std::runtime_error("cannot open " + path + ".meta.json");
    meta << nlohmann::json{{"count", records.size()}, {"records", meta_records}}.dump(2) << "\n";
}

}  // namespace mipo::remote
