#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "mipo/core.hpp"
#include "mipo/policy.hpp"

namespace mipo::oracle {

// Refuse enumerations beyond this size instead of silently truncating mass.
inline constexpr std::size_t kEnumerationGuard = 10'000'000;

/// Enumerated response distribution. Support is in lexicographic token order;
/// logp entries are exact per-path log-probabilities in nats.
struct ExactDistribution {
    std::vector<Response> support;
    std::vector<double> logp;

    std::size_t size() const { return support.size(); }

    double total_mass() const {
        double mass = 0.0;
        for (double lp : logp) mass += std::exp(lp);
        return mass;
    }

    // Index of a response in the support, or npos.
    std::size_t find(const Response& r) const {
        auto it = std::lower_bound(support.begin(), support.end(), r);
        if (it == support.end() || !(*it == r)) return static_cast<std::size_t>(-1);
        return static_cast<std::size_t>(it - support.begin());
    }

    double log_prob_of(const Response& r) const {
        const std::size_t i = find(r);
        if (i == static_cast<std::size_t>(-1)) return -std::numeric_limits<double>::infinity();
        return logp[i];
    }
};

// Number of eos-terminated sequences with horizon max_len over V tokens:
// sum over prefix lengths j of (V-1)^j.
inline std::size_t response_space_size(std::size_t vocab_size, std::size_t max_len) {
    std::size_t total = 0;
    std::size_t prefixes = 1;
    for (std::size_t j = 0; j < max_len; ++j) {
        total += prefixes;
        if (total > kEnumerationGuard) return kEnumerationGuard + 1;
        if (j + 1 < max_len) {
            if (vocab_size >= 2 && prefixes > kEnumerationGuard / (vocab_size - 1))
                return kEnumerationGuard + 1;
            prefixes *= vocab_size - 1;
        }
    }
    return total;
}

inline void check_enumeration_guard(const AutoregressivePolicy& policy) {
    if (response_space_size(policy.vocab_size(), policy.max_len()) > kEnumerationGuard)
        throw SizeError("enumeration guard exceeded: response space larger than 10^7");
}

/// Enumerates the full response distribution under one condition.
inline ExactDistribution enumerate_distribution(const AutoregressivePolicy& policy,
                                                const Condition& cond) {
    check_enumeration_guard(policy);
    const std::size_t bucket = policy.bucket_index(cond);
    const TokenId eos = policy.vocabulary().eos;
    const std::size_t vsize = policy.vocab_size();

    ExactDistribution dist;
    dist.support.reserve(response_space_size(vsize, policy.max_len()));

    std::vector<TokenId> prefix;
    std::vector<double> probs(vsize);
    // Depth-first in token order; the resulting support is lexicographically
    // sorted because eos terminates every branch exactly once.
    std::function<void(std::optional<TokenId>, double, std::size_t)> walk =
        [&](std::optional<TokenId> prev, double logp_so_far, std::size_t pos) {
            if (pos == policy.max_len() - 1) {
                prefix.push_back(eos);
                dist.support.push_back(Response{prefix});
                dist.logp.push_back(logp_so_far);
                prefix.pop_back();
                return;
            }
            const auto row = policy.logit_row(bucket, prev);
            const double m = *std::max_element(row.begin(), row.end());
            double total = 0.0;
            for (std::size_t t = 0; t < vsize; ++t) {
                probs[t] = std::exp(row[t] - m);
                total += probs[t];
            }
            const double log_total = std::log(total);
            std::vector<double> step_logp(vsize);
            for (std::size_t t = 0; t < vsize; ++t) step_logp[t] = row[t] - m - log_total;
            for (std::size_t t = 0; t < vsize; ++t) {
                const TokenId tok = static_cast<TokenId>(t);
                prefix.push_back(tok);
                if (tok == eos) {
                    dist.support.push_back(Response{prefix});
                    dist.logp.push_back(logp_so_far + step_logp[t]);
                } else {
                    walk(tok, logp_so_far + step_logp[t], pos + 1);
                }
                prefix.pop_back();
            }
        };
    walk(std::nullopt, 0.0, 0);
    return dist;
}

/// Mixture over contexts: p(y|x) = sum_c w(c) p(y|x,c).
inline ExactDistribution exact_marginal(const AutoregressivePolicy& policy, PromptId prompt,
                                        const WeightedSet& contexts) {
    contexts.validate();
    ExactDistribution out;
    std::vector<double> mass;
    for (std::size_t k = 0; k < contexts.size(); ++k) {
        const Condition cond{prompt, contexts.items[k]};
        ExactDistribution d = enumerate_distribution(policy, cond);
        if (out.support.empty()) {
            out.support = std::move(d.support);
            mass.assign(out.support.size(), 0.0);
        } else if (d.support.size() != out.support.size()) {
            throw ValidationError("marginal: conditional supports disagree");
        }
        for (std::size_t i = 0; i < mass.size(); ++i)
            mass[i] += contexts.weights[k] * std::exp(d.logp[i]);
    }
    out.logp.resize(mass.size());
    for (std::size_t i = 0; i < mass.size(); ++i) out.logp[i] = std::log(mass[i]);
    return out;
}

/// Pointwise conditional mutual information log p(y|x,c) - log p(y|x), where
/// p(y|x) is the exact mixture marginal over `contexts`. Support mismatches
/// surface as flagged +-inf sentinels.
inline FlaggedValue pointwise_cmi(const AutoregressivePolicy& policy, PromptId prompt,
                                  ContextId context, const Response& response,
                                  const WeightedSet& contexts) {
    const ExactDistribution cond = enumerate_distribution(policy, Condition{prompt, context});
    const ExactDistribution marg = exact_marginal(policy, prompt, contexts);
    const double num = cond.log_prob_of(response);
    const double den = marg.log_prob_of(response);
    FlaggedValue v;
    v.value = num - den;
    v.flagged = !std::isfinite(num) || !std::isfinite(den);
    if (v.flagged) v.value = num > den ? std::numeric_limits<double>::infinity()
                                       : -std::numeric_limits<double>::infinity();
    return v;
}

/// Generation-time variant of the pointwise MI: scores the marginal with the
/// prompt's null-context bucket instead of the mixture.
inline FlaggedValue pointwise_pmi_null(const AutoregressivePolicy& policy, PromptId prompt,
                                       ContextId context, const Response& response) {
    const double num = policy.log_prob(Condition{prompt, context}, response);
    const double den = policy.log_prob(Condition{prompt, std::nullopt}, response);
    FlaggedValue v;
    v.value = num - den;
    v.flagged = !std::isfinite(num) || !std::isfinite(den);
    return v;
}

/// I(X;Y) in nats over the prompt set, with p(y|x) the null-context
/// conditional for each prompt. Nonnegative up to roundoff.
inline double exact_mi(const AutoregressivePolicy& policy, const WeightedSet& prompts) {
    prompts.validate();
    std::vector<ExactDistribution> cond(prompts.size());
    for (std::size_t k = 0; k < prompts.size(); ++k)
        cond[k] = enumerate_distribution(policy, Condition{prompts.items[k], std::nullopt});

    const std::size_t n = cond.empty() ? 0 : cond[0].size();
    std::vector<double> marginal(n, 0.0);
    for (std::size_t k = 0; k < prompts.size(); ++k) {
        if (cond[k].size() != n) throw ValidationError("mi: conditional supports disagree");
        for (std::size_t i = 0; i < n; ++i)
            marginal[i] += prompts.weights[k] * std::exp(cond[k].logp[i]);
    }
    double mi = 0.0;
    for (std::size_t k = 0; k < prompts.size(); ++k)
        for (std::size_t i = 0; i < n; ++i) {
            const double p = std::exp(cond[k].logp[i]);
            if (p > 0.0 && marginal[i] > 0.0)
                mi += prompts.weights[k] * p * (cond[k].logp[i] - std::log(marginal[i]));
        }
    return mi;
}

/// I(Y;C | X = prompt) in nats; equals the expectation of pointwise_cmi over
/// (c, y) drawn from the joint.
inline double exact_conditional_mi(const AutoregressivePolicy& policy, PromptId prompt,
                                   const WeightedSet& contexts) {
    contexts.validate();
    std::vector<ExactDistribution> cond(contexts.size());
    for (std::size_t k = 0; k < contexts.size(); ++k)
        cond[k] = enumerate_distribution(policy, Condition{prompt, contexts.items[k]});

    const std::size_t n = cond.empty() ? 0 : cond[0].size();
    std::vector<double> marginal(n, 0.0);
    for (std::size_t k = 0; k < contexts.size(); ++k) {
        if (cond[k].size() != n) throw ValidationError("cmi: conditional supports disagree");
        for (std::size_t i = 0; i < n; ++i)
            marginal[i] += contexts.weights[k] * std::exp(cond[k].logp[i]);
    }
    double mi = 0.0;
    for (std::size_t k = 0; k < contexts.size(); ++k)
        for (std::size_t i = 0; i < n; ++i) {
            const double p = std::exp(cond[k].logp[i]);
            if (p > 0.0 && marginal[i] > 0.0)
                mi += contexts.weights[k] * p * (cond[k].logp[i] - std::log(marginal[i]));
        }
    return mi;
}

/// Shannon entropy of an enumerated distribution, nats.
inline double entropy(const ExactDistribution& dist) {
    double h = 0.0;
    for (double lp : dist.logp) {
        const double p = std::exp(lp);
        if (p > 0.0) h -= p * lp;
    }
    return h;
}

/// Shannon entropy of a weight vector, nats.
inline double entropy(std::span<const double> weights) {
    double h = 0.0;
    for (double w : weights)
        if (w > 0.0) h -= w * std::log(w);
    return h;
}

// ---------------------------------------------------------------------------
// Enumeration-exact InfoNCE objective for an arbitrary critic.
//
// Batch model: one positive response drawn from p(y|x,c) plus K-1 negatives
// drawn i.i.d. from the mixture marginal p(y|x); the critic scores every
// candidate against the positive's context and the loss is the softmax
// cross-entropy of picking the positive. log K minus this loss lower-bounds
// I(Y;C|X=x) for any critic.
// ---------------------------------------------------------------------------

using CriticFn = std::function<double(std::size_t response_idx, std::size_t context_idx)>;

struct InfonceExact {
    double loss = 0.0;                // plain softmax cross-entropy, always >= 0
    double bound = 0.0;               // log K - loss
    std::vector<double> grad_critic;  // d loss / d r(y, c), flattened [y * C + c]
};

namespace detail {

inline void tuple_walk(std::size_t depth, std::size_t K, const std::vector<double>& marg_prob,
                       std::vector<std::size_t>& negs, double weight,
                       const std::function<void(const std::vector<std::size_t>&, double)>& leaf) {
    if (depth == K - 1) {
        leaf(negs, weight);
        return;
    }
    for (std::size_t y = 0; y < marg_prob.size(); ++y) {
        if (marg_prob[y] <= 0.0) continue;
        negs.push_back(y);
        tuple_walk(depth + 1, K, marg_prob, negs, weight * marg_prob[y], leaf);
        negs.pop_back();
    }
}

}  // namespace detail

/// Exact expected K-way InfoNCE loss and its gradient with respect to a
/// tabular critic r(y, c). Cost grows as |support|^K; guarded.
inline InfonceExact infonce_exact_loss(const AutoregressivePolicy& policy, PromptId prompt,
                                       const WeightedSet& contexts, const CriticFn& critic,
                                       std::size_t K, bool want_grad = false) {
    if (K < 2) throw ValidationError("infonce: K must be >= 2");
    contexts.validate();
    std::vector<ExactDistribution> cond(contexts.size());
    for (std::size_t k = 0; k < contexts.size(); ++k)
        cond[k] = enumerate_distribution(policy, Condition{prompt, contexts.items[k]});
    const std::size_t n = cond[0].size();

    double tuples = static_cast<double>(contexts.size()) * static_cast<double>(n);
    for (std::size_t i = 1; i < K; ++i) tuples *= static_cast<double>(n);
    if (tuples > static_cast<double>(kEnumerationGuard))
        throw SizeError("infonce enumeration guard exceeded");

    std::vector<double> marg_prob(n, 0.0);
    for (std::size_t k = 0; k < contexts.size(); ++k)
        for (std::size_t i = 0; i < n; ++i)
            marg_prob[i] += contexts.weights[k] * std::exp(cond[k].logp[i]);

    // Cache critic values.
    std::vector<double> r(n * contexts.size());
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t c = 0; c < contexts.size(); ++c) r[y * contexts.size() + c] = critic(y, c);

    InfonceExact out;
    if (want_grad) out.grad_critic.assign(n * contexts.size(), 0.0);

    std::vector<std::size_t> negs;
    std::vector<double> scores(K);
    for (std::size_t c = 0; c < contexts.size(); ++c) {
        const double wc = contexts.weights[c];
        if (wc <= 0.0) continue;
        for (std::size_t ypos = 0; ypos < n; ++ypos) {
            const double ppos = std::exp(cond[c].logp[ypos]);
            if (ppos <= 0.0) continue;
            const double base_w = wc * ppos;
            detail::tuple_walk(
                0, K, marg_prob, negs, base_w,
                [&](const std::vector<std::size_t>& neg_ids, double w) {
                    scores[0] = r[ypos * contexts.size() + c];
                    for (std::size_t j = 0; j < neg_ids.size(); ++j)
                        scores[j + 1] = r[neg_ids[j] * contexts.size() + c];
                    const double m = *std::max_element(scores.begin(), scores.end());
                    double total = 0.0;
                    for (double s : scores) total += std::exp(s - m);
                    const double lse = m + std::log(total);
                    out.loss += w * (lse - scores[0]);
                    if (want_grad) {
                        // d/dr: softmax over candidates minus the positive one-hot.
                        out.grad_critic[ypos * contexts.size() + c] +=
                            w * (std::exp(scores[0] - lse) - 1.0);
                        for (std::size_t j = 0; j < neg_ids.size(); ++j)
                            out.grad_critic[neg_ids[j] * contexts.size() + c] +=
                                w * std::exp(scores[j + 1] - lse);
                    }
                });
        }
    }
    out.bound = std::log(static_cast<double>(K)) - out.loss;
    return out;
}

}  // namespace mipo::oracle
