#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "mipo/policy.hpp"
#include "test_helpers.hpp"

using namespace mipo;
using Catch::Matchers::WithinAbs;

TEST_CASE("next_token_dist: equal logits give the uniform distribution") {
    auto policy = testutil::make_policy(5, 4);
    const auto dist = policy.next_token_dist(Condition{0, 0}, std::nullopt, 0);
    for (double p : dist) CHECK_THAT(p, WithinAbs(0.2, 1e-12));
}

TEST_CASE("next_token_dist: a 1e3 logit margin saturates the winner") {
    auto policy = testutil::make_policy(4, 4);
    policy.logit_row_mut(policy.bucket_index(Condition{0, 0}), std::nullopt)[2] = 1e3;
    const auto dist = policy.next_token_dist(Condition{0, 0}, std::nullopt, 0);
    CHECK(dist[2] >= 1.0 - 1e-9);
}

TEST_CASE("next_token_dist: forced eos at the last position") {
    auto policy = testutil::make_policy(4, 3);
    Rng rng(1);
    testutil::randomize(policy, rng);
    const auto dist = policy.next_token_dist(Condition{0, 1}, 2, policy.max_len() - 1);
    CHECK(dist[policy.vocabulary().eos] == 1.0);
    for (std::size_t t = 1; t < dist.size(); ++t) CHECK(dist[t] == 0.0);
}

TEST_CASE("next_token_dist: unknown condition bucket raises a lookup error") {
    auto policy = testutil::make_policy(4, 3);
    CHECK_THROWS_AS(policy.next_token_dist(Condition{9, std::nullopt}, std::nullopt, 0),
                    LookupError);
    CHECK_THROWS_AS(policy.log_prob(Condition{0, 7}, Response{{0}}), LookupError);
}

TEST_CASE("log_prob: single-token vocabulary gives log-prob zero") {
    AutoregressivePolicy policy(testutil::make_vocab(1), 3, {Condition{0, std::nullopt}});
    CHECK(policy.log_prob(Condition{0, std::nullopt}, Response{{0}}) == 0.0);
}

TEST_CASE("log_prob: uniform policy closed form") {
    // V=4, response of length 3 with no forced step: 3 * ln(1/4)
    auto policy = testutil::make_policy(4, 8);
    const double lp = policy.log_prob(Condition{0, 0}, Response{{1, 2, 0}});
    CHECK_THAT(lp, WithinAbs(-3.0 * std::log(4.0), 1e-12));
    CHECK_THAT(lp, WithinAbs(-4.1588830833596715, 1e-9));
}

TEST_CASE("log_prob: total mass over the enumerated response space is 1") {
    auto policy = testutil::make_policy(4, 4);
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        testutil::randomize(policy, rng, 2.0);
        for (const Condition cond : {Condition{0, std::nullopt}, Condition{0, 1}}) {
            double mass = 0.0;
            for (const auto& r : testutil::all_responses(4, 4))
                mass += std::exp(policy.log_prob(cond, r));
            CHECK_THAT(mass, WithinAbs(1.0, 1e-9));
        }
    }
}

TEST_CASE("log_prob: zero-probability step returns the -inf sentinel") {
    auto policy = testutil::make_policy(3, 3);
    auto row = policy.logit_row_mut(policy.bucket_index(Condition{0, 0}), std::nullopt);
    row[1] = 1e3;  // crushes every other first token
    const double lp = policy.log_prob(Condition{0, 0}, Response{{2, 0}});
    CHECK(is_flagged_logprob(lp));
    CHECK(lp == -std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(policy.grad_log_prob(Condition{0, 0}, Response{{2, 0}}), GradientError);
}

TEST_CASE("sample: a saturated path is returned for any seed") {
    auto policy = testutil::make_policy(4, 5);
    const std::size_t b = policy.bucket_index(Condition{0, 1});
    policy.logit_row_mut(b, std::nullopt)[2] = 1e3;
    policy.logit_row_mut(b, 2)[3] = 1e3;
    policy.logit_row_mut(b, 3)[0] = 1e3;
    for (std::uint64_t seed : {1ULL, 99ULL, 123456ULL}) {
        Rng rng(seed);
        CHECK(policy.sample(Condition{0, 1}, rng).tokens == std::vector<TokenId>{2, 3, 0});
    }
}

TEST_CASE("sample: temperature zero equals the explicit argmax walk") {
    auto policy = testutil::make_policy(5, 6);
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        testutil::randomize(policy, rng, 3.0);
        const Condition cond{0, trial % 2};
        // independent greedy walk straight off the logit rows
        std::vector<TokenId> expect;
        std::optional<TokenId> prev;
        for (std::size_t pos = 0; pos < policy.max_len(); ++pos) {
            TokenId best = 0;
            if (pos == policy.max_len() - 1) {
                best = policy.vocabulary().eos;
            } else {
                const auto row = policy.logit_row(policy.bucket_index(cond), prev);
                for (std::size_t t = 1; t < row.size(); ++t)
                    if (row[t] > row[best]) best = static_cast<TokenId>(t);
            }
            expect.push_back(best);
            if (best == policy.vocabulary().eos) break;
            prev = best;
        }
        Rng r1(1), r2(trial + 500);
        CHECK(policy.sample(cond, r1, 0.0).tokens == expect);
        CHECK(policy.sample(cond, r2, 0.0).tokens == expect);  // seed-independent
    }
}

TEST_CASE("sample: empirical frequencies match exact probabilities at temperature 1") {
    auto policy = testutil::make_policy(3, 3);
    Rng rng(5);
    testutil::randomize(policy, rng, 1.5);
    const Condition cond{0, 0};

    std::map<std::vector<TokenId>, std::size_t> counts;
    const std::size_t n = 100000;
    Rng sampler(42);
    for (std::size_t i = 0; i < n; ++i) counts[policy.sample(cond, sampler).tokens]++;

    for (const auto& r : testutil::all_responses(3, 3)) {
        const double p = std::exp(testutil::naive_log_prob(policy, cond, r));
        const double freq = static_cast<double>(counts[r.tokens]) / static_cast<double>(n);
        const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
        CHECK(std::abs(freq - p) <= 3.0 * sigma + 1e-12);
    }
}

TEST_CASE("grad_log_prob: visited rows carry onehot minus softmax") {
    auto policy = testutil::make_policy(3, 4);
    Rng rng(3);
    testutil::randomize(policy, rng);
    const Condition cond{0, 1};
    const Response resp{{1, 2, 0}};
    const auto grad = policy.grad_log_prob(cond, resp);
    const std::size_t b = policy.bucket_index(cond);

    const std::vector<std::pair<std::optional<TokenId>, TokenId>> steps = {
        {std::nullopt, 1}, {1, 2}, {2, 0}};
    for (const auto& [prev, next] : steps) {
        const auto probs = policy.next_token_dist(cond, prev, 0);
        const std::size_t off = policy.row_offset(b, prev);
        double row_sum = 0.0;
        for (std::size_t t = 0; t < 3; ++t) {
            const double expect = (t == next ? 1.0 : 0.0) - probs[t];
            CHECK_THAT(grad[off + t], WithinAbs(expect, 1e-12));
            row_sum += grad[off + t];
        }
        CHECK_THAT(row_sum, WithinAbs(0.0, 1e-12));
    }
    // untouched rows stay zero
    const std::size_t null_off = policy.row_offset(policy.bucket_index(Condition{0, 0}), 1);
    for (std::size_t t = 0; t < 3; ++t) CHECK(grad[null_off + t] == 0.0);
}

TEST_CASE("grad_log_prob matches central finite differences on 100 random instances") {
    Rng rng(7777);
    for (int trial = 0; trial < 100; ++trial) {
        auto policy = testutil::make_policy(3, 3);
        testutil::randomize(policy, rng, 1.5);
        const Condition cond{0, static_cast<ContextId>(trial % 2)};
        const auto space = testutil::all_responses(3, 3);
        const Response resp = space[rng.next_index(space.size())];

        const auto analytic = policy.grad_log_prob(cond, resp);
        const auto fd =
            testutil::fd_gradient(policy, [&] { return policy.log_prob(cond, resp); });
        CHECK(testutil::rel_vec_error(analytic, fd) < 1e-4);
    }
}

TEST_CASE("perturbing one parameter only moves log-probs through its state") {
    auto policy = testutil::make_policy(3, 4);
    Rng rng(15);
    testutil::randomize(policy, rng);
    const Condition cond{0, 0};
    const std::size_t b = policy.bucket_index(cond);

    auto before = std::map<std::vector<TokenId>, double>{};
    for (const auto& r : testutil::all_responses(3, 4))
        before[r.tokens] = policy.log_prob(cond, r);

    // bump an entry of the row for prev = 1
    policy.logit_row_mut(b, 1)[2] += 0.25;
    for (const auto& r : testutil::all_responses(3, 4)) {
        bool visits = false;  // a non-forced step with prev == 1
        for (std::size_t pos = 1; pos < r.tokens.size() && pos < policy.max_len() - 1; ++pos)
            if (r.tokens[pos - 1] == 1) visits = true;
        const double after = policy.log_prob(cond, r);
        if (visits)
            CHECK(std::abs(after - before[r.tokens]) > 1e-9);
        else
            CHECK_THAT(after, WithinAbs(before[r.tokens], 1e-12));
    }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    namespace fs = std::filesystem;
    auto policy = testutil::make_policy(4, 5, 3);
    Rng rng(31337);
    testutil::randomize(policy, rng, 2.0);

    const auto path = fs::temp_directory_path() / "mipo_test_policy.ckpt";
    policy.save(path.string());
    auto loaded = AutoregressivePolicy::load(path.string());

    REQUIRE(loaded.param_count() == policy.param_count());
    for (std::size_t i = 0; i < policy.param_count(); ++i)
        CHECK(loaded.params()[i] == policy.params()[i]);
    CHECK(loaded.vocabulary().names == policy.vocabulary().names);
    CHECK(loaded.max_len() == policy.max_len());
    CHECK(loaded.buckets() == policy.buckets());

    // save of the loaded policy produces identical bytes
    const auto path2 = fs::temp_directory_path() / "mipo_test_policy2.ckpt";
    loaded.save(path2.string());
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
    const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
    CHECK(bytes_a == bytes_b);
    fs::remove(path);
    fs::remove(path2);
}
