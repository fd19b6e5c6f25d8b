#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mipo/core.hpp"
#include "mipo/policy.hpp"
#include "mipo/rng.hpp"

namespace mipo::envs {

/// Declarative description of a synthetic personalization environment.
/// `shared` gives every prompt the same context set; `per_prompt` gives each
/// prompt its own disjoint set.
struct EnvSpec {
    enum class Regime { shared, per_prompt };

    Regime regime = Regime::shared;
    std::size_t prompts = 4;
    std::size_t contexts_per_prompt = 3;
    std::size_t topic_tokens = 3;
    std::size_t attribute_tokens = 6;
    std::size_t filler_tokens = 2;
    std::size_t attrs_per_context = 2;
    std::size_t max_len = 6;
    double alpha = 0.3;  // context-signal strength of the reference policy

    void validate() const {
        if (prompts < 1) throw ValidationError("env spec: needs at least one prompt");
        if (contexts_per_prompt < 1) throw ValidationError("env spec: needs contexts");
        if (topic_tokens < 1 || attribute_tokens < 1)
            throw ValidationError("env spec: needs topic and attribute tokens");
        if (attrs_per_context < 1 || attrs_per_context > attribute_tokens)
            throw ValidationError("env spec: bad attrs_per_context");
        if (max_len < attrs_per_context + 2)
            throw ValidationError("env spec: max_len too small for the rubric");
        if (alpha < 0.0 || alpha > 1.0) throw ValidationError("env spec: alpha outside [0,1]");
    }
};

inline const char* regime_name(EnvSpec::Regime r) {
    return r == EnvSpec::Regime::shared ? "shared" : "per_prompt";
}

inline EnvSpec::Regime regime_from_name(const std::string& s) {
    if (s == "shared") return EnvSpec::Regime::shared;
    if (s == "per_prompt") return EnvSpec::Regime::per_prompt;
    throw ParseError("unknown context regime '" + s + "'");
}

enum class JudgeTag { win, tie, loss };

struct JudgeOutcome {
    JudgeTag tag = JudgeTag::tie;
    double margin = 0.0;
};

/// Enumerable personalization task: prompts, eligible contexts, a per-(x,c)
/// token rubric, and weights for sampling conditions.
class SyntheticEnvironment {
public:
    SyntheticEnvironment(EnvSpec spec, Vocabulary vocab, WeightedSet prompts,
                         std::map<PromptId, WeightedSet> contexts,
                         std::map<PromptId, TokenId> topic,
                         std::map<ContextId, std::vector<TokenId>> attributes)
        : spec_(spec),
          vocab_(std::move(vocab)),
          prompts_(std::move(prompts)),
          contexts_(std::move(contexts)),
          topic_(std::move(topic)),
          attributes_(std::move(attributes)) {
        vocab_.validate();
        if (vocab_.size() < 2) throw ValidationError("environment: vocabulary needs V >= 2");
        prompts_.validate();
        for (const auto& [x, cs] : contexts_) cs.validate();
    }

    const EnvSpec& spec() const { return spec_; }
    const Vocabulary& vocabulary() const { return vocab_; }
    std::size_t max_len() const { return spec_.max_len; }
    const WeightedSet& prompts() const { return prompts_; }

    const WeightedSet& contexts_for(PromptId x) const {
        auto it = contexts_.find(x);
        if (it == contexts_.end())
            throw LookupError("environment: unknown prompt " + std::to_string(x));
        return it->second;
    }

    bool eligible(PromptId x, ContextId c) const {
        const auto& cs = contexts_for(x);
        for (auto item : cs.items)
            if (item == c) return true;
        return false;
    }

    void validate_condition(const Condition& cond) const {
        contexts_for(cond.prompt);
        if (cond.context && !eligible(cond.prompt, *cond.context))
            throw ValidationError("condition: context " + std::to_string(*cond.context) +
                                  " not eligible for prompt " + std::to_string(cond.prompt));
    }

    TokenId topic_token(PromptId x) const { return topic_.at(x); }
    const std::vector<TokenId>& attribute_tokens(ContextId c) const { return attributes_.at(c); }

    // Rubric items for (x, c): the prompt's topic token plus each of the
    // context's attribute tokens.
    std::vector<TokenId> rubric(PromptId x, ContextId c) const {
        std::vector<TokenId> items{topic_token(x)};
        const auto& attrs = attribute_tokens(c);
        items.insert(items.end(), attrs.begin(), attrs.end());
        return items;
    }

    // All (prompt, context) conditions in canonical id order, plus the
    // null-context condition per prompt when `with_null`.
    std::vector<Condition> all_conditions(bool with_null) const {
        std::vector<Condition> out;
        for (const auto& [x, cs] : contexts_) {
            if (with_null) out.push_back(Condition{x, std::nullopt});
            for (auto c : cs.items) out.push_back(Condition{x, c});
        }
        return out;
    }

    /// Fraction of rubric items whose token appears in the response, in [0,1].
    double oracle_reward(PromptId x, ContextId c, const Response& response) const {
        const auto items = rubric(x, c);
        std::size_t hit = 0;
        for (TokenId item : items) {
            bool found = false;
            for (TokenId t : response.tokens)
                if (t == item) {
                    found = true;
                    break;
                }
            if (found) ++hit;
        }
        return static_cast<double>(hit) / static_cast<double>(items.size());
    }

    /// Rubric comparison of two responses under (x, c). Tie when the reward
    /// margin is within tie_eps.
    JudgeOutcome judge(PromptId x, ContextId c, const Response& a, const Response& b,
                       double tie_eps = 1e-9) const {
        if (tie_eps < 0.0) throw ValidationError("judge: tie_eps must be >= 0");
        JudgeOutcome out;
        out.margin = oracle_reward(x, c, a) - oracle_reward(x, c, b);
        if (out.margin >= tie_eps)
            out.tag = JudgeTag::win;
        else if (out.margin <= -tie_eps)
            out.tag = JudgeTag::loss;
        else
            out.tag = JudgeTag::tie;
        return out;
    }

private:
    EnvSpec spec_;
    Vocabulary vocab_;
    WeightedSet prompts_;
    std::map<PromptId, WeightedSet> contexts_;
    std::map<PromptId, TokenId> topic_;
    std::map<ContextId, std::vector<TokenId>> attributes_;
};

struct EnvBundle {
    SyntheticEnvironment env;
    AutoregressivePolicy reference;
};

/// Builds the environment and its reference policy deterministically from
/// (spec, seed).
///
/// Token layout: id 0 = eos, then topic, attribute, and filler tokens.
/// The reference favors a scripted path topic(x) -> attributes(c) -> eos with
/// logit strength proportional to alpha on top of a context-free base policy,
/// so alpha = 0 is exactly context-independent and alpha = 1 makes the greedy
/// response satisfy the full rubric. A small per-prompt jitter (shared across
/// that prompt's buckets, so alpha = 0 stays exact) varies instances by seed.
inline EnvBundle make_env(const EnvSpec& spec, std::uint64_t seed) {
    spec.validate();

    Vocabulary vocab;
    vocab.names.push_back("eos");
    vocab.eos = 0;
    std::vector<TokenId> topics, attrs, fillers;
    for (std::size_t i = 0; i < spec.topic_tokens; ++i) {
        topics.push_back(static_cast<TokenId>(vocab.names.size()));
        vocab.names.push_back("t" + std::to_string(i));
    }
    for (std::size_t i = 0; i < spec.attribute_tokens; ++i) {
        attrs.push_back(static_cast<TokenId>(vocab.names.size()));
        vocab.names.push_back("a" + std::to_string(i));
    }
    for (std::size_t i = 0; i < spec.filler_tokens; ++i) {
        fillers.push_back(static_cast<TokenId>(vocab.names.size()));
        vocab.names.push_back("f" + std::to_string(i));
    }

    std::vector<std::uint32_t> prompt_ids;
    for (std::size_t x = 0; x < spec.prompts; ++x)
        prompt_ids.push_back(static_cast<std::uint32_t>(x));
    WeightedSet prompt_set = WeightedSet::uniform(prompt_ids);

    std::map<PromptId, WeightedSet> contexts;
    std::map<PromptId, TokenId> topic_of;
    std::map<ContextId, std::vector<TokenId>> attrs_of;
    for (std::size_t x = 0; x < spec.prompts; ++x) {
        topic_of[static_cast<PromptId>(x)] = topics[x % topics.size()];
        std::vector<std::uint32_t> ctx_ids;
        for (std::size_t k = 0; k < spec.contexts_per_prompt; ++k) {
            const ContextId c = spec.regime == EnvSpec::Regime::shared
                                    ? static_cast<ContextId>(k)
                                    : static_cast<ContextId>(x * spec.contexts_per_prompt + k);
            ctx_ids.push_back(c);
            if (!attrs_of.count(c)) {
                std::vector<TokenId> a;
                for (std::size_t j = 0; j < spec.attrs_per_context; ++j)
                    a.push_back(attrs[(c * spec.attrs_per_context + j) % attrs.size()]);
                attrs_of[c] = std::move(a);
            }
        }
        contexts[static_cast<PromptId>(x)] = WeightedSet::uniform(std::move(ctx_ids));
    }

    SyntheticEnvironment env(spec, vocab, prompt_set, contexts, topic_of, attrs_of);

    AutoregressivePolicy ref(vocab, spec.max_len, env.all_conditions(/*with_null=*/true));

    // Context-free base logits for prompt x, per previous token.
    const double kSignal = 6.0;
    auto base_logit = [&](PromptId x, std::optional<TokenId> prev, TokenId next) {
        const TokenId topic = env.topic_token(x);
        const bool next_filler =
            !fillers.empty() && next >= fillers.front() && next <= fillers.back();
        if (!prev) {  // start of sequence: lead with the topic
            if (next == topic) return 2.0;
            if (next_filler) return 1.0;
            if (next == vocab.eos) return 0.5;
            return 0.0;
        }
        if (next == vocab.eos) return 1.5;
        if (next_filler) return 0.5;
        return 0.0;
    };

    for (std::size_t b = 0; b < ref.buckets().size(); ++b) {
        const Condition& cond = ref.buckets()[b];
        const TokenId topic = env.topic_token(cond.prompt);
        std::vector<TokenId> path;  // scripted continuation after the topic
        if (cond.context) {
            const auto& a = env.attribute_tokens(*cond.context);
            path.assign(a.begin(), a.end());
        }
        for (std::size_t p = 0; p <= vocab.size(); ++p) {
            const std::optional<TokenId> prev =
                p == vocab.size() ? std::nullopt : std::optional<TokenId>(static_cast<TokenId>(p));
            auto row = ref.logit_row_mut(b, prev);
            for (std::size_t t = 0; t < vocab.size(); ++t) {
                double logit = base_logit(cond.prompt, prev, static_cast<TokenId>(t));
                // Jitter shared across all buckets of the prompt.
                std::uint64_t h = derive_seed(seed, cond.prompt * 1000 + p, t);
                logit += 0.05 * (static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5);
                if (!path.empty()) {
                    // Scripted step: after the topic emit attr 0, after attr i
                    // emit attr i+1, after the last attr emit eos.
                    std::optional<TokenId> scripted;
                    if (prev && *prev == topic)
                        scripted = path[0];
                    else if (prev) {
                        for (std::size_t i = 0; i + 1 < path.size(); ++i)
                            if (*prev == path[i]) scripted = path[i + 1];
                        if (*prev == path.back()) scripted = vocab.eos;
                    }
                    if (scripted && *scripted == static_cast<TokenId>(t))
                        logit += spec.alpha * kSignal;
                }
                row[t] = logit;
            }
        }
    }

    return EnvBundle{std::move(env), std::move(ref)};
}

}  // namespace mipo::envs
