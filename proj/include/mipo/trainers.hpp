#pragma once

#include <chrono>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mipo/augment.hpp"
#include "mipo/core.hpp"
#include "mipo/envs.hpp"
#include "mipo/objectives.hpp"
#include "mipo/oracle.hpp"
#include "mipo/policy.hpp"
#include "mipo/rng.hpp"

namespace mipo::trainers {

struct TrainConfig {
    double learning_rate = 5.0;
    std::size_t steps = 500;
    std::size_t batch_size = 256;  // per-step examples; >= dataset means full batch
    std::size_t epochs = 0;        // > 0 overrides steps with epoch-sized passes
    double beta = 0.1;             // DPO temperature
    double kl_coef = 0.01;         // policy-gradient KL penalty
    std::size_t infonce_k = 2;
    objectives::PmiMode pmi_mode = objectives::PmiMode::mixture;
    bool adam = false;  // plain gradient descent unless enabled
    std::uint64_t seed = 1;

    // Dataset-driven trainers: number of optimizer steps for a dataset of n.
    std::size_t effective_steps(std::size_t n) const {
        if (epochs == 0) return steps;
        const std::size_t per_epoch = (n + std::min(batch_size, n) - 1) / std::min(batch_size, n);
        return epochs * per_epoch;
    }
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double margin = 0.0;  // DPO: mean implicit-reward margin
    double reward = 0.0;  // PG: mean PMI reward
    double bound = 0.0;   // InfoNCE: mutual-information bound estimate
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
    bool aborted = false;
    std::string abort_reason;
    std::size_t skipped_samples = 0;  // PG reward sentinels
};

struct TrainResult {
    AutoregressivePolicy policy;
    TrainReport report;
};

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Fixed epoch permutation + wraparound slices; shared with tests so external
// replays of the trainer loop see identical minibatches.
inline std::vector<std::size_t> minibatch_indices(std::size_t n, std::size_t batch_size,
                                                  std::size_t step, std::uint64_t seed) {
    if (batch_size >= n) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(seed, 0x5f, 0));
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.next_index(i + 1)]);
    std::vector<std::size_t> out(batch_size);
    const std::size_t start = (step * batch_size) % n;
    for (std::size_t i = 0; i < batch_size; ++i) out[i] = perm[(start + i) % n];
    return out;
}

namespace detail {

class Optimizer {
public:
    Optimizer(bool adam, double lr, std::size_t dim) : adam_(adam), lr_(lr) {
        if (adam_) {
            m_.assign(dim, 0.0);
            v_.assign(dim, 0.0);
        }
    }

    // Applies a descent step along `grad` (pass the gradient of the loss).
    void step(std::span<double> params, std::span<const double> grad) {
        ++t_;
        if (!adam_) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
            return;
        }
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps);
        }
    }

private:
    bool adam_;
    double lr_;
    std::size_t t_ = 0;
    std::vector<double> m_, v_;
};

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Exact KL between tabular policies by state-space dynamic programming.
//
// Every response visits each (position, prev-token) state at most once, so
// KL(pi||ref) = sum_state rho(state) KL(pi_row || ref_row) with rho the
// visitation probability under pi. The gradient follows from the forward
// occupancy and the backward value of remaining KL. O(max_len * V^2) per
// condition instead of enumerating the response space.
// ---------------------------------------------------------------------------

struct KlResult {
    double value = 0.0;
    std::vector<double> grad;  // d KL / d theta of the left policy
};

inline KlResult exact_kl(const AutoregressivePolicy& policy, const AutoregressivePolicy& ref,
                         const Condition& cond, bool want_grad = false) {
    const std::size_t V = policy.vocab_size();
    const std::size_t L = policy.max_len();
    const TokenId eos = policy.vocabulary().eos;
    const std::size_t bucket = policy.bucket_index(cond);
    const std::size_t ref_bucket = ref.bucket_index(cond);
    const std::size_t rows = V + 1;  // prev = 0..V-1 plus start-of-sequence

    auto row_dist = [&](const AutoregressivePolicy& p, std::size_t b, std::size_t prev_idx,
                        std::vector<double>& probs, std::vector<double>& logp) {
        const std::optional<TokenId> prev =
            prev_idx == V ? std::nullopt : std::optional<TokenId>(static_cast<TokenId>(prev_idx));
        const auto row = p.logit_row(b, prev);
        const double m = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (std::size_t t = 0; t < V; ++t) {
            probs[t] = std::exp(row[t] - m);
            total += probs[t];
        }
        const double log_total = std::log(total);
        for (std::size_t t = 0; t < V; ++t) {
            probs[t] /= total;
            logp[t] = row[t] - m - log_total;
        }
    };

    std::vector<std::vector<double>> p(rows, std::vector<double>(V)), lp = p, lr = p;
    std::vector<double> tmp(V);
    std::vector<double> kl_row(rows, 0.0);
    for (std::size_t s = 0; s < rows; ++s) {
        row_dist(policy, bucket, s, p[s], lp[s]);
        row_dist(ref, ref_bucket, s, tmp, lr[s]);
        for (std::size_t t = 0; t < V; ++t) kl_row[s] += p[s][t] * (lp[s][t] - lr[s][t]);
    }

    // value[pos][prev]: expected remaining KL from that state. Position
    // L-1 is the forced-eos step and contributes nothing.
    std::vector<std::vector<double>> value(L, std::vector<double>(rows, 0.0));
    for (std::size_t pos = L - 1; pos-- > 0;) {
        for (std::size_t s = 0; s < rows; ++s) {
            double v = kl_row[s];
            if (pos + 1 < L - 1)
                for (std::size_t t = 0; t < V; ++t)
                    if (t != eos) v += p[s][t] * value[pos + 1][t];
            value[pos][s] = v;
        }
    }

    // occupancy[pos][prev] under the left policy; only positions up to the
    // last softmax step (L-2) matter.
    std::vector<std::vector<double>> occ(L, std::vector<double>(rows, 0.0));
    occ[0][V] = 1.0;
    for (std::size_t pos = 0; pos + 2 < L; ++pos)
        for (std::size_t s = 0; s < rows; ++s) {
            if (occ[pos][s] <= 0.0) continue;
            for (std::size_t t = 0; t < V; ++t)
                if (t != eos) occ[pos + 1][t] += occ[pos][s] * p[s][t];
        }

    KlResult out;
    out.value = value[0][V];
    if (!want_grad) return out;

    out.grad.assign(policy.param_count(), 0.0);
    for (std::size_t pos = 0; pos + 1 < L; ++pos) {  // forced step has no gradient
        for (std::size_t s = 0; s < rows; ++s) {
            const double rho = occ[pos][s];
            if (rho <= 0.0) continue;
            double mean_w = 0.0;
            for (std::size_t t = 0; t < V; ++t) {
                const double w =
                    (t != eos && pos + 1 < L - 1) ? value[pos + 1][t] : 0.0;
                mean_w += p[s][t] * w;
            }
            const std::optional<TokenId> prev =
                s == V ? std::nullopt : std::optional<TokenId>(static_cast<TokenId>(s));
            double* grad_row = out.grad.data() + policy.row_offset(bucket, prev);
            for (std::size_t t = 0; t < V; ++t) {
                const double w =
                    (t != eos && pos + 1 < L - 1) ? value[pos + 1][t] : 0.0;
                grad_row[t] +=
                    rho * p[s][t] * ((lp[s][t] - lr[s][t]) - kl_row[s] + w - mean_w);
            }
        }
    }
    return out;
}

/// Expected conditional KL over the environment's (prompt, context) pairs.
inline KlResult expected_kl(const AutoregressivePolicy& policy, const AutoregressivePolicy& ref,
                            const envs::SyntheticEnvironment& env, bool want_grad = false) {
    KlResult total;
    if (want_grad) total.grad.assign(policy.param_count(), 0.0);
    const auto& prompts = env.prompts();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const PromptId x = prompts.items[i];
        const auto& ctxs = env.contexts_for(x);
        for (std::size_t k = 0; k < ctxs.size(); ++k) {
            const double w = prompts.weights[i] * ctxs.weights[k];
            KlResult r = exact_kl(policy, ref, Condition{x, ctxs.items[k]}, want_grad);
            total.value += w * r.value;
            if (want_grad)
                for (std::size_t j = 0; j < total.grad.size(); ++j)
                    total.grad[j] += w * r.grad[j];
        }
    }
    return total;
}

struct PgSample {
    Condition condition;
    Response response;
    double reward = 0.0;
};

/// Score-function batch gradient of E[reward] with a leave-one-out mean
/// baseline; unbiased for the true gradient. Adds into `out`.
inline void pg_batch_gradient(const AutoregressivePolicy& policy,
                              std::span<const PgSample> batch, std::span<double> out) {
    const std::size_t n = batch.size();
    if (n == 0) return;
    double total = 0.0;
    for (const auto& s : batch) total += s.reward;
    for (const auto& s : batch) {
        const double baseline = n >= 2 ? (total - s.reward) / static_cast<double>(n - 1) : 0.0;
        policy.accumulate_grad_log_prob(s.condition, s.response,
                                        (s.reward - baseline) / static_cast<double>(n), out);
    }
}

/// Enumeration-exact gradient of E_{y ~ pi(.|cond)}[reward(y)]; the ground
/// truth the sampled score-function estimator is checked against.
template <typename RewardFn>
std::pair<double, std::vector<double>> exact_reward_objective_grad(
    const AutoregressivePolicy& policy, const Condition& cond, RewardFn&& reward) {
    const auto dist = oracle::enumerate_distribution(policy, cond);
    double value = 0.0;
    std::vector<double> grad(policy.param_count(), 0.0);
    for (std::size_t i = 0; i < dist.size(); ++i) {
        const double p = std::exp(dist.logp[i]);
        if (p <= 0.0) continue;
        const double r = reward(dist.support[i]);
        value += p * r;
        policy.accumulate_grad_log_prob(cond, dist.support[i], p * r, grad);
    }
    return {value, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Training loops. All of them snapshot the reference policy before the first
// step and never write to it; randomness flows only from config.seed.
// ---------------------------------------------------------------------------

/// Gradient descent on the SFT loss over the dataset's chosen responses.
inline TrainResult train_sft(AutoregressivePolicy policy,
                             const std::vector<PreferenceExample>& dataset,
                             const TrainConfig& cfg) {
    if (dataset.empty()) throw ValidationError("train_sft: empty dataset");
    detail::Timer timer;
    TrainReport report;
    report.seed = cfg.seed;

    std::vector<std::pair<Condition, Response>> all;
    all.reserve(dataset.size());
    for (const auto& ex : dataset) all.emplace_back(ex.condition(), ex.chosen);

    detail::Optimizer opt(cfg.adam, cfg.learning_rate, policy.param_count());
    const std::size_t n_steps = cfg.effective_steps(all.size());
    for (std::size_t step = 0; step < n_steps; ++step) {
        const auto idx = minibatch_indices(all.size(), cfg.batch_size, step, cfg.seed);
        std::vector<std::pair<Condition, Response>> batch;
        batch.reserve(idx.size());
        for (auto i : idx) batch.push_back(all[i]);
        objectives::LossGrad lg;
        try {
            lg = objectives::sft_loss_grad(policy, batch);
        } catch (const GradientError& e) {
            report.aborted = true;
            report.abort_reason = std::string("diverged: ") + e.what();
            break;
        }
        if (!std::isfinite(lg.loss)) {
            report.aborted = true;
            report.abort_reason = "non-finite loss at step " + std::to_string(step);
            break;
        }
        report.steps.push_back({step, lg.loss, l2_norm(lg.grad), 0.0, 0.0, 0.0});
        opt.step(policy.params_mut(), lg.grad);
    }
    report.wall_seconds = timer.seconds();
    return {std::move(policy), std::move(report)};
}

/// MIPO: DPO descent on the contrastive dataset against a frozen snapshot of
/// the starting policy.
inline TrainResult train_mipo(AutoregressivePolicy policy,
                              const std::vector<PreferenceExample>& dataset,
                              const TrainConfig& cfg) {
    if (dataset.empty()) throw ValidationError("train_mipo: empty dataset");
    if (cfg.beta <= 0.0) throw ValidationError("train_mipo: beta must be > 0");
    detail::Timer timer;
    TrainReport report;
    report.seed = cfg.seed;

    const AutoregressivePolicy ref = policy.clone();
    objectives::PairBatch all;
    all.reserve(dataset.size());
    for (const auto& ex : dataset)
        all.push_back({ex.condition(), ex.chosen, ex.rejected});

    detail::Optimizer opt(cfg.adam, cfg.learning_rate, policy.param_count());
    const std::size_t n_steps = cfg.effective_steps(all.size());
    for (std::size_t step = 0; step < n_steps; ++step) {
        const auto idx = minibatch_indices(all.size(), cfg.batch_size, step, cfg.seed);
        objectives::PairBatch batch;
        batch.reserve(idx.size());
        for (auto i : idx) batch.push_back(all[i]);
        objectives::DpoResult res;
        try {
            res = objectives::dpo_loss_grad(policy, ref, batch, cfg.beta);
        } catch (const GradientError& e) {
            report.aborted = true;
            report.abort_reason = std::string("diverged: ") + e.what();
            break;
        }
        if (!std::isfinite(res.loss)) {
            report.aborted = true;
            report.abort_reason = "non-finite loss at step " + std::to_string(step);
            break;
        }
        report.steps.push_back({step, res.loss, l2_norm(res.grad), res.mean_margin, 0.0, 0.0});
        opt.step(policy.params_mut(), res.grad);
    }
    report.wall_seconds = timer.seconds();
    return {std::move(policy), std::move(report)};
}

/// Samples one InfoNCE contrast batch: K contexts drawn i.i.d. from the
/// prompt's eligible set, responses drawn from `sampler` (the frozen
/// reference during training).
inline objectives::ContrastBatch sample_contrast_batch(const AutoregressivePolicy& sampler,
                                                       const envs::SyntheticEnvironment& env,
                                                       PromptId prompt, std::size_t K, Rng& rng) {
    objectives::ContrastBatch batch;
    batch.prompt = prompt;
    const auto& ctxs = env.contexts_for(prompt);
    for (std::size_t i = 0; i < K; ++i) {
        const ContextId c = ctxs.items[rng.sample_weighted(ctxs.weights)];
        batch.contexts.push_back(c);
        batch.responses.push_back(sampler.sample(Condition{prompt, c}, rng));
    }
    return batch;
}

/// InfoNCE baseline: descent on the symmetric K-sample loss over batches
/// generated by the frozen reference.
inline TrainResult train_infonce(AutoregressivePolicy policy,
                                 const envs::SyntheticEnvironment& env, const TrainConfig& cfg) {
    if (cfg.infonce_k < 2) throw ValidationError("train_infonce: K must be >= 2");
    detail::Timer timer;
    TrainReport report;
    report.seed = cfg.seed;

    const AutoregressivePolicy ref = policy.clone();
    Rng rng(derive_seed(cfg.seed, 0x1f0ce, 0));
    const std::size_t per_step = std::max<std::size_t>(1, cfg.batch_size);

    detail::Optimizer opt(cfg.adam, cfg.learning_rate, policy.param_count());
    std::vector<double> grad(policy.param_count());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        double loss = 0.0;
        std::fill(grad.begin(), grad.end(), 0.0);
        try {
            for (std::size_t b = 0; b < per_step; ++b) {
                const PromptId x =
                    env.prompts().items[rng.sample_weighted(env.prompts().weights)];
                const auto batch = sample_contrast_batch(ref, env, x, cfg.infonce_k, rng);
                const auto lg = objectives::infonce_loss_grad(policy, batch);
                loss += lg.loss / static_cast<double>(per_step);
                for (std::size_t i = 0; i < grad.size(); ++i)
                    grad[i] += lg.grad[i] / static_cast<double>(per_step);
            }
        } catch (const GradientError& e) {
            report.aborted = true;
            report.abort_reason = std::string("diverged: ") + e.what();
            break;
        }
        if (!std::isfinite(loss)) {
            report.aborted = true;
            report.abort_reason = "non-finite loss at step " + std::to_string(step);
            break;
        }
        // The symmetric loss already carries the log K term, so the
        // mutual-information bound estimate is just its negation.
        report.steps.push_back({step, loss, l2_norm(grad), 0.0, 0.0, -loss});
        opt.step(policy.params_mut(), grad);
    }
    report.wall_seconds = timer.seconds();
    return {std::move(policy), std::move(report)};
}

// Precomputed reference PMI tables so per-sample rewards are lookups instead
// of fresh enumerations.
class PmiRewardTable {
public:
    PmiRewardTable(const AutoregressivePolicy& ref, const envs::SyntheticEnvironment& env,
                   objectives::PmiMode mode)
        : ref_(ref), mode_(mode) {
        if (mode_ == objectives::PmiMode::mixture) {
            for (auto x : env.prompts().items) {
                marginal_[x] = oracle::exact_marginal(ref, x, env.contexts_for(x));
                for (auto c : env.contexts_for(x).items)
                    conditional_[Condition{x, c}] =
                        oracle::enumerate_distribution(ref, Condition{x, c});
            }
        }
    }

    FlaggedValue reward(const Condition& cond, const Response& y) const {
        if (mode_ == objectives::PmiMode::null_bucket)
            return oracle::pointwise_pmi_null(ref_, cond.prompt, *cond.context, y);
        const double num = conditional_.at(cond).log_prob_of(y);
        const double den = marginal_.at(cond.prompt).log_prob_of(y);
        FlaggedValue v;
        v.value = num - den;
        v.flagged = !std::isfinite(num) || !std::isfinite(den);
        return v;
    }

private:
    const AutoregressivePolicy& ref_;
    objectives::PmiMode mode_;
    std::map<PromptId, oracle::ExactDistribution> marginal_;
    std::map<Condition, oracle::ExactDistribution> conditional_;
};

/// Policy-gradient baseline: REINFORCE with a leave-one-out mean-reward
/// baseline on the fixed-reference PMI reward, minus an exact KL penalty
/// toward the reference.
inline TrainResult train_pg_mi(AutoregressivePolicy policy,
                               const envs::SyntheticEnvironment& env, const TrainConfig& cfg) {
    if (cfg.kl_coef < 0.0) throw ValidationError("train_pg_mi: kl_coef must be >= 0");
    detail::Timer timer;
    TrainReport report;
    report.seed = cfg.seed;

    const AutoregressivePolicy ref = policy.clone();
    const PmiRewardTable rewards(ref, env, cfg.pmi_mode);
    Rng rng(derive_seed(cfg.seed, 0x96, 0));
    const std::size_t per_step = std::max<std::size_t>(1, cfg.batch_size);

    detail::Optimizer opt(cfg.adam, cfg.learning_rate, policy.param_count());
    std::vector<double> grad(policy.param_count());
    std::vector<PgSample> batch;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        batch.clear();
        double reward_sum = 0.0;
        for (std::size_t b = 0; b < per_step; ++b) {
            const auto& prompts = env.prompts();
            const PromptId x = prompts.items[rng.sample_weighted(prompts.weights)];
            const auto& ctxs = env.contexts_for(x);
            const ContextId c = ctxs.items[rng.sample_weighted(ctxs.weights)];
            PgSample s;
            s.condition = Condition{x, c};
            s.response = policy.sample(s.condition, rng);
            const FlaggedValue r = rewards.reward(s.condition, s.response);
            if (r.flagged) {
                ++report.skipped_samples;
                continue;
            }
            s.reward = r.value;
            reward_sum += r.value;
            batch.push_back(std::move(s));
        }
        const double mean_reward =
            batch.empty() ? 0.0 : reward_sum / static_cast<double>(batch.size());

        std::fill(grad.begin(), grad.end(), 0.0);
        pg_batch_gradient(policy, batch, grad);
        KlResult kl = expected_kl(policy, ref, env, cfg.kl_coef > 0.0);
        if (cfg.kl_coef > 0.0)
            for (std::size_t i = 0; i < grad.size(); ++i)
                grad[i] -= cfg.kl_coef * kl.grad[i];

        const double objective = mean_reward - cfg.kl_coef * kl.value;
        if (!std::isfinite(objective)) {
            report.aborted = true;
            report.abort_reason = "non-finite objective at step " + std::to_string(step);
            break;
        }
        report.steps.push_back({step, -objective, l2_norm(grad), 0.0, mean_reward, 0.0});
        // Ascent on the objective: descend its negation.
        for (auto& g : grad) g = -g;
        opt.step(policy.params_mut(), grad);
    }
    report.wall_seconds = timer.seconds();
    return {std::move(policy), std::move(report)};
}

}  // namespace mipo::trainers
