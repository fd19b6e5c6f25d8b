#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mipo/core.hpp"
#include "mipo/oracle.hpp"
#include "mipo/policy.hpp"

namespace mipo::objectives {

struct PairExample {
    Condition condition;
    Response chosen;
    Response rejected;
};
using PairBatch = std::vector<PairExample>;

/// K-way contrastive batch for one prompt: response i was generated under
/// context i; the loss cross-scores all K x K (response, context) pairs.
struct ContrastBatch {
    PromptId prompt = 0;
    std::vector<ContextId> contexts;
    std::vector<Response> responses;

    std::size_t k() const { return contexts.size(); }

    void validate() const {
        if (contexts.size() < 2) throw ValidationError("contrast batch: K must be >= 2");
        if (contexts.size() != responses.size())
            throw ValidationError("contrast batch: contexts/responses size mismatch");
    }
};

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

struct DpoResult {
    double loss = 0.0;
    std::vector<double> grad;
    double mean_margin = 0.0;  // mean of beta * (delta_chosen - delta_rejected)
};

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Bradley-Terry preference probability exp(rc) / (exp(rc) + exp(rr)),
/// evaluated overflow-safely as sigmoid(rc - rr).
inline double bt_prob(double r_chosen, double r_rejected) {
    if (std::isnan(r_chosen) || std::isnan(r_rejected))
        throw ValidationError("bt_prob: NaN reward");
    return sigmoid(r_chosen - r_rejected);
}

/// Negative mean log-likelihood of the chosen responses, with gradient.
inline LossGrad sft_loss_grad(const AutoregressivePolicy& policy,
                              std::span<const std::pair<Condition, Response>> batch) {
    if (batch.empty()) throw ValidationError("sft: empty batch");
    LossGrad out;
    out.grad.assign(policy.param_count(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double lp = policy.log_prob(batch[i].first, batch[i].second);
        if (!std::isfinite(lp))
            throw GradientError("sft: -inf log-prob at example " + std::to_string(i));
        out.loss -= inv_n * lp;
        policy.accumulate_grad_log_prob(batch[i].first, batch[i].second, -inv_n, out.grad);
    }
    return out;
}

/// DPO loss -mean log sigmoid(beta * (delta(chosen) - delta(rejected))) with
/// delta(y) = log pi_theta(y|cond) - log pi_ref(y|cond). Both responses are
/// scored under the example's own condition. Exact gradient w.r.t. theta.
inline DpoResult dpo_loss_grad(const AutoregressivePolicy& policy,
                               const AutoregressivePolicy& ref, const PairBatch& batch,
                               double beta) {
    if (batch.empty()) throw ValidationError("dpo: empty batch");
    if (beta <= 0.0) throw ValidationError("dpo: beta must be > 0");
    if (policy.vocab_size() != ref.vocab_size() ||
        policy.vocabulary().eos != ref.vocabulary().eos)
        throw ValidationError("dpo: policy and reference vocabulary mismatch");
    DpoResult out;
    out.grad.assign(policy.param_count(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        const double lp_c = policy.log_prob(ex.condition, ex.chosen);
        const double lp_r = policy.log_prob(ex.condition, ex.rejected);
        const double lr_c = ref.log_prob(ex.condition, ex.chosen);
        const double lr_r = ref.log_prob(ex.condition, ex.rejected);
        if (!std::isfinite(lp_c) || !std::isfinite(lp_r) || !std::isfinite(lr_c) ||
            !std::isfinite(lr_r))
            throw GradientError("dpo: -inf log-prob at example " + std::to_string(i));
        const double margin = beta * ((lp_c - lr_c) - (lp_r - lr_r));
        out.loss += inv_n * softplus(-margin);
        out.mean_margin += inv_n * margin;
        const double coef = inv_n * beta * (sigmoid(margin) - 1.0);  // d softplus(-m)/dm
        policy.accumulate_grad_log_prob(ex.condition, ex.chosen, coef, out.grad);
        policy.accumulate_grad_log_prob(ex.condition, ex.rejected, -coef, out.grad);
    }
    return out;
}

/// beta * (log pi_theta - log pi_ref); the DPO implicit reward up to the
/// per-condition constant log Z. Infinite log-probs flag the result.
inline FlaggedValue implicit_reward(const AutoregressivePolicy& policy,
                                    const AutoregressivePolicy& ref, const Condition& cond,
                                    const Response& response, double beta) {
    const double lp = policy.log_prob(cond, response);
    const double lr = ref.log_prob(cond, response);
    FlaggedValue v;
    v.value = beta * (lp - lr);
    v.flagged = !std::isfinite(lp) || !std::isfinite(lr);
    return v;
}

/// K-way softmax cross-entropy of picking `positive` among critic scores.
inline double infonce_critic_loss(std::span<const double> scores, std::size_t positive) {
    if (scores.size() < 2) throw ValidationError("infonce: need at least 2 scores");
    double m = scores[0];
    for (double s : scores) m = std::max(m, s);
    double total = 0.0;
    for (double s : scores) total += std::exp(s - m);
    return m + std::log(total) - scores[positive];
}

/// Symmetric K-sample InfoNCE loss over one contrast batch:
///   -(1/K) sum_i log [ pi(y_i|x,c_i) / ((1/K) sum_j pi(y_i|x,c_j)) ]
/// Zero when the policy ignores contexts; -log K at perfect discrimination.
/// The mutual-information bound estimate is the negated loss.
inline LossGrad infonce_loss_grad(const AutoregressivePolicy& policy,
                                  const ContrastBatch& batch) {
    batch.validate();
    const std::size_t K = batch.k();
    LossGrad out;
    out.grad.assign(policy.param_count(), 0.0);
    const double log_k = std::log(static_cast<double>(K));
    const double inv_k = 1.0 / static_cast<double>(K);

    std::vector<double> scores(K * K);  // scores[i*K+j] = log pi(y_i | x, c_j)
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < K; ++j) {
            const double lp =
                policy.log_prob(Condition{batch.prompt, batch.contexts[j]}, batch.responses[i]);
            if (!std::isfinite(lp))
                throw GradientError("infonce: -inf cross log-prob at (" + std::to_string(i) +
                                    ", " + std::to_string(j) + ")");
            scores[i * K + j] = lp;
        }

    std::vector<double> soft(K);
    for (std::size_t i = 0; i < K; ++i) {
        const double* row = scores.data() + i * K;
        double m = row[0];
        for (std::size_t j = 1; j < K; ++j) m = std::max(m, row[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            soft[j] = std::exp(row[j] - m);
            total += soft[j];
        }
        for (std::size_t j = 0; j < K; ++j) soft[j] /= total;

        // shifted form keeps the context-independent case at exactly zero
        out.loss -= inv_k * ((row[i] - m) - std::log(total) + log_k);
        // d loss / d s_ij = -(1/K) (1[i==j] - softmax_j)
        for (std::size_t j = 0; j < K; ++j) {
            const double coef = -inv_k * ((i == j ? 1.0 : 0.0) - soft[j]);
            if (coef != 0.0)
                policy.accumulate_grad_log_prob(Condition{batch.prompt, batch.contexts[j]},
                                                batch.responses[i], coef, out.grad);
        }
    }
    return out;
}

enum class PmiMode { mixture, null_bucket };

inline const char* pmi_mode_name(PmiMode m) {
    return m == PmiMode::mixture ? "mixture" : "null_bucket";
}

/// Pointwise-MI reward of a response under the frozen reference policy.
/// mixture: log ref(y|x,c) - log of the exact context mixture.
/// null_bucket: log ref(y|x,c) - log ref(y|x, no context).
inline FlaggedValue pmi_reward(const AutoregressivePolicy& ref, const Condition& cond,
                               const Response& response, const WeightedSet& contexts,
                               PmiMode mode) {
    if (!cond.context) throw ValidationError("pmi_reward: condition needs a context");
    if (mode == PmiMode::mixture)
        return oracle::pointwise_cmi(ref, cond.prompt, *cond.context, response, contexts);
    return oracle::pointwise_pmi_null(ref, cond.prompt, *cond.context, response);
}

}  // namespace mipo::objectives
