#pragma once

#include <vector>

#include "mipo/core.hpp"
#include "mipo/envs.hpp"
#include "mipo/policy.hpp"
#include "mipo/rng.hpp"

namespace mipo::augment {

// Uniform draw from a context set excluding one id. Requires >= 2 entries.
inline ContextId draw_other_context(const WeightedSet& contexts, ContextId exclude, Rng& rng) {
    std::vector<ContextId> pool;
    for (auto c : contexts.items)
        if (c != exclude) pool.push_back(c);
    if (pool.empty())
        throw ValidationError("random_context needs at least 2 eligible contexts");
    return pool[rng.next_index(pool.size())];
}

inline PromptId draw_other_prompt(const WeightedSet& prompts, PromptId exclude, Rng& rng) {
    std::vector<PromptId> pool;
    for (auto x : prompts.items)
        if (x != exclude) pool.push_back(x);
    if (pool.empty()) throw ValidationError("random_prompt needs at least 2 prompts");
    return pool[rng.next_index(pool.size())];
}

/// Builds one contrastive pair: chosen sampled under the true (x, c), rejected
/// sampled under the strategy's corrupted conditioning. Deterministic given
/// `seed`, which is also recorded on the example.
inline PreferenceExample make_pair(const AutoregressivePolicy& ref, PromptId prompt,
                                   ContextId context, NegativeStrategy strategy,
                                   const envs::SyntheticEnvironment& env, std::uint64_t seed) {
    env.validate_condition(Condition{prompt, context});
    Rng rng(seed);

    PreferenceExample ex;
    ex.prompt = prompt;
    ex.context = context;
    ex.strategy = strategy;
    ex.seed = seed;
    ex.chosen = ref.sample(Condition{prompt, context}, rng);

    switch (strategy) {
        case NegativeStrategy::missing:
            ex.rejected_condition = Condition{prompt, std::nullopt};
            break;
        case NegativeStrategy::random_context: {
            const ContextId other = draw_other_context(env.contexts_for(prompt), context, rng);
            ex.rejected_condition = Condition{prompt, other};
            break;
        }
        case NegativeStrategy::random_prompt: {
            const PromptId other = draw_other_prompt(env.prompts(), prompt, rng);
            // Keep the true context with the corrupted prompt when it is
            // eligible there (shared context sets); fall back to the null
            // context otherwise (disjoint per-prompt sets).
            if (env.eligible(other, context))
                ex.rejected_condition = Condition{other, context};
            else
                ex.rejected_condition = Condition{other, std::nullopt};
            break;
        }
    }
    ex.rejected = ref.sample(ex.rejected_condition, rng);
    return ex;
}

/// Builds exactly n examples per eligible (x, c) pair, in canonical
/// (prompt, context, replicate) order. Each example is seeded independently
/// from the master seed, so output bytes depend only on the inputs.
inline std::vector<PreferenceExample> build_dataset(const AutoregressivePolicy& ref,
                                                    const envs::SyntheticEnvironment& env,
                                                    NegativeStrategy strategy,
                                                    std::size_t n_per_condition,
                                                    std::uint64_t master_seed) {
    if (n_per_condition < 1) throw ValidationError("build_dataset: n_per_condition must be >= 1");
    std::vector<PreferenceExample> out;
    for (auto x : env.prompts().items) {
        for (auto c : env.contexts_for(x).items) {
            for (std::size_t i = 0; i < n_per_condition; ++i) {
                const std::uint64_t seed = derive_seed(master_seed, x, c, i);
                out.push_back(make_pair(ref, x, c, strategy, env, seed));
            }
        }
    }
    if (out.empty()) throw ValidationError("build_dataset: environment has no conditions");
    return out;
}

}  // namespace mipo::augment
