#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mipo/core.hpp"
#include "mipo/envs.hpp"
#include "mipo/oracle.hpp"
#include "mipo/policy.hpp"
#include "mipo/rng.hpp"

namespace mipo::eval {

enum class TieCounting { as_win, half };

inline const char* tie_counting_name(TieCounting t) {
    return t == TieCounting::as_win ? "as_win" : "half";
}

struct WinRateResult {
    double win_pct = 0.0;
    double tie_pct = 0.0;
    double loss_pct = 0.0;
    std::size_t draws = 0;

    double headline(TieCounting tc) const {
        return tc == TieCounting::as_win ? win_pct + tie_pct : win_pct + 0.5 * tie_pct;
    }
};

/// Samples n judged comparisons of `policy` vs `baseline` over conditions
/// drawn from the environment weights. Percentages sum to 100.
inline WinRateResult win_rate(const AutoregressivePolicy& policy,
                              const AutoregressivePolicy& baseline,
                              const envs::SyntheticEnvironment& env, std::size_t n, Rng& rng,
                              double temperature = 1.0, double tie_eps = 1e-9) {
    if (n < 1) throw ValidationError("win_rate: n must be >= 1");
    std::size_t wins = 0, ties = 0, losses = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& prompts = env.prompts();
        const PromptId x = prompts.items[rng.sample_weighted(prompts.weights)];
        const auto& ctxs = env.contexts_for(x);
        const ContextId c = ctxs.items[rng.sample_weighted(ctxs.weights)];
        const Response a = policy.sample(Condition{x, c}, rng, temperature);
        const Response b = baseline.sample(Condition{x, c}, rng, temperature);
        switch (env.judge(x, c, a, b, tie_eps).tag) {
            case envs::JudgeTag::win: ++wins; break;
            case envs::JudgeTag::tie: ++ties; break;
            case envs::JudgeTag::loss: ++losses; break;
        }
    }
    const double scale = 100.0 / static_cast<double>(n);
    return {scale * static_cast<double>(wins), scale * static_cast<double>(ties),
            scale * static_cast<double>(losses), n};
}

struct OutcomeProbs {
    double win = 0.0, tie = 0.0, loss = 0.0;
};

/// Enumeration-exact win/tie/loss probabilities (independent draws from each
/// policy per condition). Quadratic in the response space; tiny envs only.
inline OutcomeProbs exact_outcome_probs(const AutoregressivePolicy& policy,
                                        const AutoregressivePolicy& baseline,
                                        const envs::SyntheticEnvironment& env,
                                        double tie_eps = 1e-9) {
    const std::size_t space =
        oracle::response_space_size(policy.vocab_size(), policy.max_len());
    if (space > 3000) throw SizeError("exact_outcome_probs: response space too large");
    OutcomeProbs out;
    const auto& prompts = env.prompts();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const PromptId x = prompts.items[i];
        const auto& ctxs = env.contexts_for(x);
        for (std::size_t k = 0; k < ctxs.size(); ++k) {
            const ContextId c = ctxs.items[k];
            const double w = prompts.weights[i] * ctxs.weights[k];
            const auto da = oracle::enumerate_distribution(policy, Condition{x, c});
            const auto db = oracle::enumerate_distribution(baseline, Condition{x, c});
            for (std::size_t ia = 0; ia < da.size(); ++ia) {
                const double pa = std::exp(da.logp[ia]);
                if (pa <= 0.0) continue;
                for (std::size_t ib = 0; ib < db.size(); ++ib) {
                    const double p = w * pa * std::exp(db.logp[ib]);
                    if (p <= 0.0) continue;
                    switch (env.judge(x, c, da.support[ia], db.support[ib], tie_eps).tag) {
                        case envs::JudgeTag::win: out.win += p; break;
                        case envs::JudgeTag::tie: out.tie += p; break;
                        case envs::JudgeTag::loss: out.loss += p; break;
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Self-BLEU-4: mean BLEU of each corpus member against all others.
// Modified n-gram precisions n=1..4 with uniform weights, brevity penalty
// against the closest reference length (ties toward the shorter), and
// add-epsilon smoothing (1e-9) substituted for zero precisions.
// ---------------------------------------------------------------------------

namespace detail {

using Ngram = std::vector<TokenId>;

inline std::map<Ngram, std::size_t> ngram_counts(const std::vector<TokenId>& seq, std::size_t n) {
    std::map<Ngram, std::size_t> counts;
    if (seq.size() < n) return counts;
    for (std::size_t i = 0; i + n <= seq.size(); ++i)
        counts[Ngram(seq.begin() + i, seq.begin() + i + n)]++;
    return counts;
}

inline double bleu4_against(const std::vector<TokenId>& candidate,
                            const std::vector<const std::vector<TokenId>*>& references) {
    constexpr double kEps = 1e-9;
    double log_prec_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto cand = ngram_counts(candidate, n);
        std::size_t total = 0, matched = 0;
        for (const auto& [gram, count] : cand) total += count;
        if (total > 0) {
            std::map<Ngram, std::size_t> best;
            for (const auto* ref : references)
                for (const auto& [gram, count] : ngram_counts(*ref, n))
                    best[gram] = std::max(best[gram], count);
            for (const auto& [gram, count] : cand) {
                auto it = best.find(gram);
                if (it != best.end()) matched += std::min(count, it->second);
            }
        }
        const double p = total > 0 ? static_cast<double>(matched) / static_cast<double>(total)
                                   : 0.0;
        log_prec_sum += 0.25 * std::log(p > 0.0 ? p : kEps);
    }

    std::size_t closest = references.front()->size();
    for (const auto* ref : references) {
        const auto diff = [&](std::size_t len) {
            return len > candidate.size() ? len - candidate.size() : candidate.size() - len;
        };
        if (diff(ref->size()) < diff(closest) ||
            (diff(ref->size()) == diff(closest) && ref->size() < closest))
            closest = ref->size();
    }
    double bp = 1.0;
    if (candidate.size() < closest)
        bp = std::exp(1.0 - static_cast<double>(closest) / static_cast<double>(candidate.size()));
    return bp * std::exp(log_prec_sum);
}

}  // namespace detail

inline double self_bleu4(const std::vector<std::vector<TokenId>>& responses) {
    if (responses.size() < 2) throw ValidationError("self_bleu4: needs at least 2 responses");
    double total = 0.0;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        std::vector<const std::vector<TokenId>*> refs;
        for (std::size_t j = 0; j < responses.size(); ++j)
            if (j != i) refs.push_back(&responses[j]);
        total += detail::bleu4_against(responses[i], refs);
    }
    return total / static_cast<double>(responses.size());
}

/// (strict %, tie-tolerant %) accuracy of a critic scoring chosen vs rejected.
inline std::pair<double, double> critic_accuracy(
    const std::vector<std::pair<double, double>>& records) {
    if (records.empty()) throw ValidationError("critic_accuracy: empty records");
    std::size_t strict = 0, tolerant = 0;
    for (const auto& [chosen, rejected] : records) {
        if (chosen > rejected) ++strict;
        if (chosen >= rejected) ++tolerant;
    }
    const double scale = 100.0 / static_cast<double>(records.size());
    return {scale * static_cast<double>(strict), scale * static_cast<double>(tolerant)};
}

struct EntropyItem {
    double entropy = 0.0;
    bool flagged = false;  // zero total first-token mass on the answer set
};

struct EntropyReport {
    std::vector<EntropyItem> items;
    double mean = 0.0;
    double stddev = 0.0;
    double median = 0.0;
    std::size_t flagged = 0;
};

/// Per item: renormalize the first-token distribution over the answer token
/// set and take the Shannon entropy (nats). Summary over unflagged items.
inline EntropyReport answer_entropy(
    const AutoregressivePolicy& policy,
    const std::vector<std::pair<Condition, std::vector<TokenId>>>& items) {
    EntropyReport report;
    std::vector<double> values;
    for (const auto& [cond, answers] : items) {
        if (answers.empty()) throw ValidationError("answer_entropy: empty answer set");
        const auto dist = policy.next_token_dist(cond, std::nullopt, 0);
        double mass = 0.0;
        for (TokenId a : answers) {
            if (a >= policy.vocab_size())
                throw ValidationError("answer_entropy: answer token outside vocabulary");
            mass += dist[a];
        }
        EntropyItem item;
        if (mass <= 0.0) {
            item.flagged = true;
            ++report.flagged;
        } else {
            for (TokenId a : answers) {
                const double p = dist[a] / mass;
                if (p > 0.0) item.entropy -= p * std::log(p);
            }
            values.push_back(item.entropy);
        }
        report.items.push_back(item);
    }
    if (!values.empty()) {
        for (double v : values) report.mean += v;
        report.mean /= static_cast<double>(values.size());
        for (double v : values) report.stddev += (v - report.mean) * (v - report.mean);
        report.stddev = std::sqrt(report.stddev / static_cast<double>(values.size()));
        std::sort(values.begin(), values.end());
        report.median = values[values.size() / 2];
    }
    return report;
}

/// Conditional MI averaged over the environment's prompts (nats).
inline double mean_conditional_mi(const AutoregressivePolicy& policy,
                                  const envs::SyntheticEnvironment& env) {
    double total = 0.0;
    const auto& prompts = env.prompts();
    for (std::size_t i = 0; i < prompts.size(); ++i)
        total += prompts.weights[i] *
                 oracle::exact_conditional_mi(policy, prompts.items[i], env.contexts_for(prompts.items[i]));
    return total;
}

/// Full evaluation bundle emitted by the experiment runner.
struct MetricsReport {
    double win_pct = 0.0, tie_pct = 0.0, loss_pct = 0.0;
    double headline_as_win = 0.0, headline_half = 0.0;
    double self_bleu = 0.0;
    double strict_acc = 0.0, tolerant_acc = 0.0;
    double entropy_mean = 0.0, entropy_std = 0.0, entropy_median = 0.0;
    double cmi_policy = 0.0, cmi_ref = 0.0, delta_pmi = 0.0;
    std::size_t win_rate_draws = 0, self_bleu_samples = 0;
    std::uint64_t seed = 0;
};

}  // namespace mipo::eval
