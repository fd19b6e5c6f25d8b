#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mipo/core.hpp"
#include "mipo/rng.hpp"

namespace mipo {

/// Differentiable, enumerable autoregressive conditional policy pi(y | x, c).
///
/// Tabular order-1 parameterization: one logit row per
/// (condition bucket, previous token) state, where the previous-token axis has
/// V+1 entries (index V = start of sequence). The next-token distribution at
/// every state is softmax of its row. Any prefix reaching length max_len-1
/// transitions to eos with probability 1, which makes the response space
/// finite and exactly normalized.
class AutoregressivePolicy {
public:
    AutoregressivePolicy(Vocabulary vocab, std::size_t max_len, std::vector<Condition> buckets)
        : vocab_(std::move(vocab)), max_len_(max_len), buckets_(std::move(buckets)) {
        vocab_.validate();
        if (max_len_ < 1) throw ValidationError("policy: max_len must be >= 1");
        if (buckets_.empty()) throw ValidationError("policy: needs at least one condition bucket");
        for (std::size_t i = 0; i < buckets_.size(); ++i) {
            auto [it, inserted] = bucket_index_.emplace(buckets_[i], i);
            if (!inserted) throw ValidationError("policy: duplicate condition bucket");
        }
        params_.assign(buckets_.size() * row_count_per_bucket() * vocab_.size(), 0.0);
    }

    const Vocabulary& vocabulary() const { return vocab_; }
    std::size_t max_len() const { return max_len_; }
    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<Condition>& buckets() const { return buckets_; }

    std::size_t param_count() const { return params_.size(); }
    std::span<const double> params() const { return params_; }
    std::span<double> params_mut() { return params_; }

    bool has_bucket(const Condition& c) const { return bucket_index_.count(c) > 0; }

    std::size_t bucket_index(const Condition& c) const {
        auto it = bucket_index_.find(c);
        if (it == bucket_index_.end())
            throw LookupError("policy: unknown condition bucket " + to_string(c));
        return it->second;
    }

    // Flat offset of the logit row for (bucket, previous token). prev == nullopt
    // selects the start-of-sequence row.
    std::size_t row_offset(std::size_t bucket, std::optional<TokenId> prev) const {
        const std::size_t prev_idx = prev ? static_cast<std::size_t>(*prev) : vocab_.size();
        return (bucket * row_count_per_bucket() + prev_idx) * vocab_.size();
    }

    std::span<const double> logit_row(std::size_t bucket, std::optional<TokenId> prev) const {
        return std::span<const double>(params_).subspan(row_offset(bucket, prev), vocab_.size());
    }

    std::span<double> logit_row_mut(std::size_t bucket, std::optional<TokenId> prev) {
        return std::span<double>(params_).subspan(row_offset(bucket, prev), vocab_.size());
    }

    /// Next-token distribution at (condition, prev, position). Sums to 1; at
    /// position max_len-1 the distribution is the eos point mass.
    std::vector<double> next_token_dist(const Condition& cond, std::optional<TokenId> prev,
                                        std::size_t position) const {
        if (position >= max_len_)
            throw ValidationError("policy: position past the horizon");
        std::vector<double> probs(vocab_.size(), 0.0);
        if (position == max_len_ - 1) {
            probs[vocab_.eos] = 1.0;
            return probs;
        }
        softmax_row(logit_row(bucket_index(cond), prev), probs);
        return probs;
    }

    /// Exact log pi(response | condition) in nats. Returns -inf when some step
    /// has (numerically) zero probability.
    double log_prob(const Condition& cond, const Response& response) const {
        validate_response(response, vocab_, max_len_);
        const std::size_t bucket = bucket_index(cond);
        double total = 0.0;
        std::optional<TokenId> prev;
        for (std::size_t pos = 0; pos < response.tokens.size(); ++pos) {
            const TokenId next = response.tokens[pos];
            if (pos == max_len_ - 1) break;  // forced eos step, log-prob 0
            total += log_softmax_entry(logit_row(bucket, prev), next);
            prev = next;
        }
        return total;
    }

    /// Draws one response. temperature 0 is the greedy walk (argmax, ties to
    /// the lowest token id); temperature 1 matches the enumerated distribution.
    Response sample(const Condition& cond, Rng& rng, double temperature = 1.0) const {
        if (temperature < 0.0) throw ValidationError("policy: temperature must be >= 0");
        const std::size_t bucket = bucket_index(cond);
        Response out;
        std::optional<TokenId> prev;
        std::vector<double> probs(vocab_.size());
        for (std::size_t pos = 0; pos < max_len_; ++pos) {
            TokenId next;
            if (pos == max_len_ - 1) {
                next = vocab_.eos;
            } else if (temperature == 0.0) {
                next = argmax_token(logit_row(bucket, prev));
            } else {
                tempered_softmax_row(logit_row(bucket, prev), temperature, probs);
                next = static_cast<TokenId>(rng.sample_weighted(probs));
            }
            out.tokens.push_back(next);
            if (next == vocab_.eos) break;
            prev = next;
        }
        return out;
    }

    /// d log pi(response | condition) / d theta as a dense flat vector.
    std::vector<double> grad_log_prob(const Condition& cond, const Response& response) const {
        std::vector<double> grad(params_.size(), 0.0);
        accumulate_grad_log_prob(cond, response, 1.0, grad);
        return grad;
    }

    /// Adds weight * d log pi / d theta into `out`. Sparse: touches only the
    /// rows visited by (condition, response). Errors if log_prob is -inf.
    void accumulate_grad_log_prob(const Condition& cond, const Response& response, double weight,
                                  std::span<double> out) const {
        validate_response(response, vocab_, max_len_);
        if (out.size() != params_.size())
            throw ValidationError("policy: gradient buffer size mismatch");
        const std::size_t bucket = bucket_index(cond);
        std::optional<TokenId> prev;
        std::vector<double> probs(vocab_.size());
        for (std::size_t pos = 0; pos < response.tokens.size(); ++pos) {
            const TokenId next = response.tokens[pos];
            if (pos == max_len_ - 1) break;  // forced step carries no gradient
            softmax_row(logit_row(bucket, prev), probs);
            if (probs[next] <= 0.0)
                throw GradientError("policy: zero-probability step at position " +
                                    std::to_string(pos));
            double* row = out.data() + row_offset(bucket, prev);
            for (std::size_t t = 0; t < probs.size(); ++t) row[t] -= weight * probs[t];
            row[next] += weight;
            prev = next;
        }
    }

    AutoregressivePolicy clone() const { return *this; }

    // ------------------------------------------------------------------
    // Checkpoint: magic, version, vocabulary, horizon, bucket table, raw
    // little-endian 64-bit parameter floats. Round-trips bit-exactly.
    // ------------------------------------------------------------------

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
        out.write(kMagic, 8);
        write_u32(out, 1);  // version
        write_u32(out, static_cast<std::uint32_t>(vocab_.size()));
        write_u32(out, vocab_.eos);
        for (const auto& name : vocab_.names) {
            write_u32(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
        }
        write_u32(out, static_cast<std::uint32_t>(max_len_));
        write_u32(out, static_cast<std::uint32_t>(buckets_.size()));
        for (const auto& b : buckets_) {
            write_u32(out, b.prompt);
            write_u32(out, b.context ? 1 : 0);
            write_u32(out, b.context ? *b.context : 0);
        }
        write_u64(out, params_.size());
        for (double p : params_) write_f64(out, p);
        if (!out) throw std::runtime_error("checkpoint write failed: " + path);
    }

    static AutoregressivePolicy load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, kMagic, 8) != 0)
            throw ParseError("checkpoint: bad magic in " + path);
        if (read_u32(in) != 1) throw ParseError("checkpoint: unsupported version");
        Vocabulary vocab;
        const std::uint32_t vsize = read_u32(in);
        vocab.eos = read_u32(in);
        vocab.names.resize(vsize);
        for (auto& name : vocab.names) {
            name.resize(read_u32(in));
            in.read(name.data(), static_cast<std::streamsize>(name.size()));
        }
        const std::uint32_t max_len = read_u32(in);
        const std::uint32_t nbuckets = read_u32(in);
        std::vector<Condition> buckets(nbuckets);
        for (auto& b : buckets) {
            b.prompt = read_u32(in);
            const bool has_ctx = read_u32(in) != 0;
            const std::uint32_t ctx = read_u32(in);
            if (has_ctx) b.context = ctx;
        }
        AutoregressivePolicy policy(std::move(vocab), max_len, std::move(buckets));
        const std::uint64_t nparams = read_u64(in);
        if (nparams != policy.params_.size())
            throw ParseError("checkpoint: parameter count mismatch");
        for (auto& p : policy.params_) p = read_f64(in);
        if (!in) throw ParseError("checkpoint: truncated file " + path);
        return policy;
    }

private:
    static constexpr const char kMagic[9] = "MIPOCKPT";

    std::size_t row_count_per_bucket() const { return vocab_.size() + 1; }

    static void softmax_row(std::span<const double> logits, std::vector<double>& out) {
        const double m = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            out[i] = std::exp(logits[i] - m);
            total += out[i];
        }
        for (auto& p : out) p /= total;
    }

    static void tempered_softmax_row(std::span<const double> logits, double temperature,
                                     std::vector<double>& out) {
        const double m = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            out[i] = std::exp((logits[i] - m) / temperature);
            total += out[i];
        }
        for (auto& p : out) p /= total;
    }

    static double log_softmax_entry(std::span<const double> logits, TokenId token) {
        const double m = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        for (double l : logits) total += std::exp(l - m);
        const double p = std::exp(logits[token] - m) / total;
        if (p <= 0.0) return -std::numeric_limits<double>::infinity();
        return logits[token] - m - std::log(total);
    }

    static TokenId argmax_token(std::span<const double> logits) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        return static_cast<TokenId>(best);
    }

    static void write_u32(std::ostream& out, std::uint32_t v) {
        char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
        out.write(b, 4);
    }
    static void write_u64(std::ostream& out, std::uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
        out.write(b, 8);
    }
    static void write_f64(std::ostream& out, double d) {
        std::uint64_t v;
        std::memcpy(&v, &d, 8);
        write_u64(out, v);
    }
    static std::uint32_t read_u32(std::istream& in) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    static std::uint64_t read_u64(std::istream& in) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    static double read_f64(std::istream& in) {
        const std::uint64_t v = read_u64(in);
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }

    Vocabulary vocab_;
    std::size_t max_len_;
    std::vector<Condition> buckets_;
    std::map<Condition, std::size_t> bucket_index_;
    std::vector<double> params_;
};

/// Infinity check used for the -inf log-prob sentinel.
inline bool is_flagged_logprob(double lp) { return !std::isfinite(lp); }

}  // namespace mipo
