#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mipo {

using TokenId = std::uint32_t;
using PromptId = std::uint32_t;
using ContextId = std::uint32_t;

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SizeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GradientError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Scalar that may be an infinity sentinel; `flagged` marks support mismatch
// events so callers can count them instead of treating them as bugs.
struct FlaggedValue {
    double value = 0.0;
    bool flagged = false;
};

/// Token alphabet. Ids are dense 0..V-1; `eos` terminates every response.
struct Vocabulary {
    std::vector<std::string> names;
    TokenId eos = 0;

    std::size_t size() const { return names.size(); }

    void validate() const {
        if (names.empty()) throw ValidationError("vocabulary: needs at least one token");
        if (eos >= names.size()) throw ValidationError("vocabulary: eos id out of range");
        for (std::size_t i = 0; i < names.size(); ++i)
            for (std::size_t j = i + 1; j < names.size(); ++j)
                if (names[i] == names[j])
                    throw ValidationError("vocabulary: duplicate token name '" + names[i] + "'");
    }
};

/// Conditioning of a generation: prompt id plus an optional context id.
/// An absent context selects the prompt's null-context behavior.
struct Condition {
    PromptId prompt = 0;
    std::optional<ContextId> context;

    bool operator==(const Condition&) const = default;
    auto operator<=>(const Condition&) const = default;
};

inline std::string to_string(const Condition& c) {
    std::string s = "(x=" + std::to_string(c.prompt);
    s += c.context ? ", c=" + std::to_string(*c.context) + ")" : ", c=-)";
    return s;
}

/// Token sequence ending in eos. Length counts the final eos.
struct Response {
    std::vector<TokenId> tokens;

    bool operator==(const Response&) const = default;
    auto operator<=>(const Response&) const = default;
    std::size_t length() const { return tokens.size(); }
};

// Checks the Response invariants: nonempty, exactly one eos, at the final
// position, all ids in-vocabulary, length within the horizon.
inline void validate_response(const Response& r, const Vocabulary& vocab, std::size_t max_len,
                              const char* what = "response") {
    if (r.tokens.empty()) throw ValidationError(std::string(what) + ": empty token sequence");
    if (r.tokens.size() > max_len)
        throw ValidationError(std::string(what) + ": length " + std::to_string(r.tokens.size()) +
                              " exceeds max length " + std::to_string(max_len));
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
        if (r.tokens[i] >= vocab.size())
            throw ValidationError(std::string(what) + ": token id " + std::to_string(r.tokens[i]) +
                                  " outside vocabulary");
        const bool is_eos = r.tokens[i] == vocab.eos;
        const bool is_last = i + 1 == r.tokens.size();
        if (is_eos != is_last)
            throw ValidationError(std::string(what) +
                                  ": must contain exactly one eos, at the final position");
    }
}

enum class NegativeStrategy { missing, random_context, random_prompt };

inline const char* strategy_name(NegativeStrategy s) {
    switch (s) {
        case NegativeStrategy::missing: return "missing";
        case NegativeStrategy::random_context: return "random_context";
        case NegativeStrategy::random_prompt: return "random_prompt";
    }
    return "?";
}

inline NegativeStrategy strategy_from_name(const std::string& name) {
    if (name == "missing") return NegativeStrategy::missing;
    if (name == "random_context") return NegativeStrategy::random_context;
    if (name == "random_prompt") return NegativeStrategy::random_prompt;
    throw ParseError("unknown strategy '" + name + "'");
}

/// One contrastive record: chosen generated under the true (prompt, context),
/// rejected generated under `rejected_condition` per `strategy`.
struct PreferenceExample {
    PromptId prompt = 0;
    std::optional<ContextId> context;
    Response chosen;
    Response rejected;
    NegativeStrategy strategy = NegativeStrategy::missing;
    Condition rejected_condition;
    std::uint64_t seed = 0;

    bool operator==(const PreferenceExample&) const = default;
    Condition condition() const { return Condition{prompt, context}; }
};

/// Finite set of ids with sampling weights. Weights must sum to 1.
struct WeightedSet {
    std::vector<std::uint32_t> items;
    std::vector<double> weights;

    static WeightedSet uniform(std::vector<std::uint32_t> ids) {
        WeightedSet s;
        s.weights.assign(ids.size(), ids.empty() ? 0.0 : 1.0 / static_cast<double>(ids.size()));
        s.items = std::move(ids);
        return s;
    }

    std::size_t size() const { return items.size(); }

    void validate() const {
        if (items.size() != weights.size())
            throw ValidationError("weighted set: items/weights size mismatch");
        double total = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw ValidationError("weighted set: negative weight");
            total += w;
        }
        if (items.empty() || std::abs(total - 1.0) > 1e-12)
            throw ValidationError("weighted set: weights must sum to 1");
    }
};

// Strategy/condition consistency; checkable without an environment.
inline void validate_example_shape(const PreferenceExample& ex) {
    switch (ex.strategy) {
        case NegativeStrategy::missing:
            if (ex.rejected_condition.context)
                throw ValidationError("strategy=missing requires a context-free rejected condition");
            if (ex.rejected_condition.prompt != ex.prompt)
                throw ValidationError("strategy=missing requires rejected prompt == true prompt");
            break;
        case NegativeStrategy::random_context:
            if (!ex.context || !ex.rejected_condition.context)
                throw ValidationError("strategy=random_context requires contexts on both sides");
            if (*ex.rejected_condition.context == *ex.context)
                throw ValidationError(
                    "strategy=random_context requires rejected context != true context");
            if (ex.rejected_condition.prompt != ex.prompt)
                throw ValidationError("strategy=random_context requires rejected prompt == true prompt");
            break;
        case NegativeStrategy::random_prompt:
            if (ex.rejected_condition.prompt == ex.prompt)
                throw ValidationError("strategy=random_prompt requires rejected prompt != true prompt");
            break;
    }
}

// Full validity in an environment: shape plus response/condition checks.
// EnvLike needs vocabulary(), max_len(), validate_condition(Condition).
template <typename EnvLike>
void validate_example(const PreferenceExample& ex, const EnvLike& env) {
    validate_example_shape(ex);
    env.validate_condition(Condition{ex.prompt, ex.context});
    env.validate_condition(ex.rejected_condition);
    validate_response(ex.chosen, env.vocabulary(), env.max_len(), "chosen");
    validate_response(ex.rejected, env.vocabulary(), env.max_len(), "rejected");
}

// ---------------------------------------------------------------------------
// Wire format: one self-describing JSON record per line. Optional ids are
// omitted when absent; decode accepts both an absent key and an explicit null.
// ---------------------------------------------------------------------------

inline nlohmann::json vocabulary_to_json(const Vocabulary& vocab) {
    nlohmann::json toks = nlohmann::json::array();
    for (std::size_t i = 0; i < vocab.names.size(); ++i)
        toks.push_back({{"id", i}, {"name", vocab.names[i]}});
    return {{"eos", vocab.eos}, {"tokens", toks}};
}

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.eos = j.at("eos").get<TokenId>();
    const auto& toks = j.at("tokens");
    v.names.resize(toks.size());
    for (const auto& t : toks) {
        auto id = t.at("id").get<std::size_t>();
        if (id >= v.names.size()) throw ParseError("vocabulary: non-dense token ids");
        v.names[id] = t.at("name").get<std::string>();
    }
    v.validate();
    return v;
}

namespace detail {
inline std::optional<ContextId> optional_context(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<ContextId>();
}
}  // namespace detail

/// Serializes one example as a single wire-format line (no trailing newline).
/// Byte-deterministic: identical examples encode to identical bytes.
template <typename EnvLike>
std::string encode_example(const PreferenceExample& ex, const EnvLike& env) {
    validate_example(ex, env);
    nlohmann::json j;
    j["prompt"] = ex.prompt;
    if (ex.context) j["context"] = *ex.context;
    j["chosen"] = ex.chosen.tokens;
    j["rejected"] = ex.rejected.tokens;
    j["strategy"] = strategy_name(ex.strategy);
    j["rejected_prompt"] = ex.rejected_condition.prompt;
    if (ex.rejected_condition.context) j["rejected_context"] = *ex.rejected_condition.context;
    j["seed"] = ex.seed;
    return j.dump();
}

/// Parses one wire-format line. Throws ParseError on malformed records and
/// ValidationError when a structural invariant fails.
inline PreferenceExample decode_example(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad record: ") + e.what());
    }
    PreferenceExample ex;
    try {
        ex.prompt = j.at("prompt").get<PromptId>();
        ex.context = detail::optional_context(j, "context");
        ex.chosen.tokens = j.at("chosen").get<std::vector<TokenId>>();
        ex.rejected.tokens = j.at("rejected").get<std::vector<TokenId>>();
        ex.strategy = strategy_from_name(j.at("strategy").get<std::string>());
        ex.rejected_condition.prompt = j.at("rejected_prompt").get<PromptId>();
        ex.rejected_condition.context = detail::optional_context(j, "rejected_context");
        ex.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad record: ") + e.what());
    }
    validate_example_shape(ex);
    return ex;
}

/// Reads a line-delimited dataset file; parse errors carry the line number.
inline std::vector<PreferenceExample> load_dataset(std::istream& in) {
    std::vector<PreferenceExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(decode_example(line));
        } catch (const ParseError& e) {
            throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

struct DatasetViolation {
    std::size_t index = 0;
    std::string message;
};

struct ValidationReport {
    std::vector<DatasetViolation> violations;
    std::map<std::string, std::size_t> strategy_counts;
    std::size_t total = 0;

    bool ok() const { return violations.empty(); }
};

/// Report-only dataset check: lists per-example violations and per-strategy
/// counts. Never throws for invalid examples.
template <typename EnvLike>
ValidationReport validate_dataset(std::span<const PreferenceExample> dataset, const EnvLike& env) {
    ValidationReport report;
    report.total = dataset.size();
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        report.strategy_counts[strategy_name(dataset[i].strategy)]++;
        try {
            validate_example(dataset[i], env);
        } catch (const std::runtime_error& e) {
            report.violations.push_back({i, e.what()});
        }
    }
    return report;
}

}  // namespace mipo
