#include <catch2/catch_amalgamated.hpp>

#include <numbers>
#include <numeric>

#include "mipo/objectives.hpp"
#include "test_helpers.hpp"

using namespace mipo;
using namespace mipo::objectives;
using Catch::Matchers::WithinAbs;

namespace {

// Random pair batch over the policy's buckets, all log-probs finite.
PairBatch random_pair_batch(const AutoregressivePolicy& policy, Rng& rng, std::size_t n) {
    PairBatch batch;
    const auto space = testutil::all_responses(policy.vocab_size(), policy.max_len(),
                                               policy.vocabulary().eos);
    for (std::size_t i = 0; i < n; ++i) {
        Condition cond{0, static_cast<ContextId>(rng.next_index(2))};
        Response chosen = space[rng.next_index(space.size())];
        Response rejected = space[rng.next_index(space.size())];
        batch.push_back({cond, chosen, rejected});
    }
    return batch;
}

}  // namespace

TEST_CASE("bt_prob: symmetry, closed form, shift invariance") {
    CHECK(bt_prob(0.0, 0.0) == 0.5);
    CHECK_THAT(bt_prob(std::log(3.0), 0.0), WithinAbs(0.75, 1e-15));
    for (double k : {1e3, -1e3}) {
        CHECK_THAT(bt_prob(0.4 + k, -0.2 + k), WithinAbs(bt_prob(0.4, -0.2), 1e-12));
    }
    CHECK_THROWS_AS(bt_prob(std::nan(""), 0.0), ValidationError);

    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        const double a = rng.uniform(-5, 5), b = rng.uniform(-5, 5);
        CHECK_THAT(bt_prob(a, b) + bt_prob(b, a), WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("sft: near-deterministic policy scores its own greedy outputs at ~0 loss") {
    auto policy = testutil::make_policy(4, 4);
    const std::size_t b = policy.bucket_index(Condition{0, 0});
    policy.logit_row_mut(b, std::nullopt)[1] = 1e3;
    policy.logit_row_mut(b, 1)[0] = 1e3;
    Rng rng(2);
    const Response greedy = policy.sample(Condition{0, 0}, rng, 0.0);
    std::vector<std::pair<Condition, Response>> batch{{Condition{0, 0}, greedy}};
    CHECK(sft_loss_grad(policy, batch).loss < 1e-6);
}

TEST_CASE("sft: uniform policy closed form") {
    auto policy = testutil::make_policy(4, 8);
    std::vector<std::pair<Condition, Response>> batch{{Condition{0, 0}, Response{{1, 2, 0}}}};
    CHECK_THAT(sft_loss_grad(policy, batch).loss, WithinAbs(4.1588830833596715, 1e-9));
}

TEST_CASE("sft: -inf log-prob raises an error naming the example") {
    auto policy = testutil::make_policy(3, 3);
    policy.logit_row_mut(policy.bucket_index(Condition{0, 0}), std::nullopt)[1] = 1e3;
    std::vector<std::pair<Condition, Response>> batch{{Condition{0, 0}, Response{{1, 0}}},
                                                      {Condition{0, 0}, Response{{2, 0}}}};
    CHECK_THROWS_WITH(sft_loss_grad(policy, batch),
                      Catch::Matchers::ContainsSubstring("example 1"));
}

TEST_CASE("sft gradient matches finite differences") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        auto policy = testutil::make_policy(3, 3);
        testutil::randomize(policy, rng, 1.5);
        const auto batch_full = random_pair_batch(policy, rng, 4);
        std::vector<std::pair<Condition, Response>> batch;
        for (const auto& ex : batch_full) batch.emplace_back(ex.condition, ex.chosen);
        const auto lg = sft_loss_grad(policy, batch);
        const auto fd = testutil::fd_gradient(
            policy, [&] { return sft_loss_grad(policy, batch).loss; });
        CHECK(testutil::rel_vec_error(lg.grad, fd) < 1e-4);
    }
}

TEST_CASE("dpo: loss is exactly ln 2 at theta = ref, for any batch and beta") {
    Rng rng(4);
    for (double beta : {0.1, 1.0, 7.5}) {
        auto policy = testutil::make_policy(3, 3);
        testutil::randomize(policy, rng, 2.0);
        const auto ref = policy.clone();
        const auto batch = random_pair_batch(policy, rng, 6);
        const auto res = dpo_loss_grad(policy, ref, batch, beta);
        CHECK_THAT(res.loss, WithinAbs(std::numbers::ln2, 1e-15));
        CHECK_THAT(res.mean_margin, WithinAbs(0.0, 1e-15));
    }
}

TEST_CASE("dpo: beta -> 0 limit gives ln 2") {
    Rng rng(5);
    auto policy = testutil::make_policy(3, 3);
    testutil::randomize(policy, rng, 1.0);
    auto ref = policy.clone();
    Rng rng2(6);
    testutil::randomize(policy, rng2, 1.0);  // theta != ref
    const auto batch = random_pair_batch(policy, rng, 5);
    CHECK_THAT(dpo_loss_grad(policy, ref, batch, 1e-12).loss,
               WithinAbs(std::numbers::ln2, 1e-9));
}

TEST_CASE("dpo: straight-line evaluator agreement and finite differences") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        auto policy = testutil::make_policy(3, 3);
        testutil::randomize(policy, rng, 1.5);
        auto ref = testutil::make_policy(3, 3);
        testutil::randomize(ref, rng, 1.5);
        const auto batch = random_pair_batch(policy, rng, 8);
        const double beta = 0.05 + rng.next_double();

        const auto res = dpo_loss_grad(policy, ref, batch, beta);

        double naive = 0.0;
        for (const auto& ex : batch) {
            const double m =
                beta * ((testutil::naive_log_prob(policy, ex.condition, ex.chosen) -
                         testutil::naive_log_prob(ref, ex.condition, ex.chosen)) -
                        (testutil::naive_log_prob(policy, ex.condition, ex.rejected) -
                         testutil::naive_log_prob(ref, ex.condition, ex.rejected)));
            naive -= std::log(1.0 / (1.0 + std::exp(-m))) / static_cast<double>(batch.size());
        }
        CHECK_THAT(res.loss, WithinAbs(naive, 1e-12));

        const auto fd = testutil::fd_gradient(
            policy, [&] { return dpo_loss_grad(policy, ref, batch, beta).loss; });
        CHECK(testutil::rel_vec_error(res.grad, fd) < 1e-4);
    }
}

TEST_CASE("dpo: vocabulary mismatch is rejected") {
    auto policy = testutil::make_policy(3, 3);
    auto ref = testutil::make_policy(4, 3);
    PairBatch batch{{Condition{0, 0}, Response{{1, 0}}, Response{{0}}}};
    CHECK_THROWS_AS(dpo_loss_grad(policy, ref, batch, 0.1), ValidationError);
}

TEST_CASE("dpo: a small descent step strictly increases the mean margin") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        auto policy = testutil::make_policy(3, 3);
        testutil::randomize(policy, rng, 1.0);
        const auto ref = policy.clone();
        const auto batch = random_pair_batch(policy, rng, 6);
        const double beta = 0.5;

        const auto before = dpo_loss_grad(policy, ref, batch, beta);
        auto params = policy.params_mut();
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= 0.01 * before.grad[i];
        const auto after = dpo_loss_grad(policy, ref, batch, beta);
        CHECK(after.mean_margin > before.mean_margin);
        CHECK(after.loss < before.loss);
    }
}

TEST_CASE("implicit_reward: zero at ref, linear in beta, beta-invariant ranking") {
    Rng rng(9);
    auto policy = testutil::make_policy(3, 3);
    testutil::randomize(policy, rng, 1.5);
    const auto ref = policy.clone();
    const auto space = testutil::all_responses(3, 3);
    for (const auto& r : space)
        CHECK(implicit_reward(policy, ref, Condition{0, 0}, r, 0.7).value == 0.0);

    auto theta = policy.clone();
    testutil::randomize(theta, rng, 1.5);
    for (const auto& r : space) {
        const double r1 = implicit_reward(theta, ref, Condition{0, 1}, r, 0.4).value;
        const double r2 = implicit_reward(theta, ref, Condition{0, 1}, r, 0.8).value;
        CHECK_THAT(r2, WithinAbs(2.0 * r1, 1e-12));
    }

    // ranking by implicit reward does not depend on beta > 0
    auto ranking = [&](double beta) {
        std::vector<std::size_t> order(space.size());
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> score;
        for (const auto& r : space)
            score.push_back(implicit_reward(theta, ref, Condition{0, 1}, r, beta).value);
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
        return order;
    };
    CHECK(ranking(0.05) == ranking(1.0));
    CHECK(ranking(1.0) == ranking(20.0));
}

TEST_CASE("infonce: a context-ignoring policy has exactly zero loss") {
    auto bundle = testutil::small_env(12, /*alpha=*/0.0);
    const auto& ctxs = bundle.env.contexts_for(0);
    Rng rng(10);
    ContrastBatch batch;
    batch.prompt = 0;
    for (std::size_t i = 0; i < 2; ++i) {
        batch.contexts.push_back(ctxs.items[i]);
        batch.responses.push_back(
            bundle.reference.sample(Condition{0, ctxs.items[i]}, rng));
    }
    const auto lg = infonce_loss_grad(bundle.reference, batch);
    CHECK(lg.loss == 0.0);
}

TEST_CASE("infonce at K=2 with the implicit-reward critic recovers the DPO loss") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        auto policy = testutil::make_policy(3, 3);
        testutil::randomize(policy, rng, 1.5);
        auto ref = testutil::make_policy(3, 3);
        testutil::randomize(ref, rng, 1.5);
        const double beta = 0.05 + rng.next_double();
        const auto batch = random_pair_batch(policy, rng, 1);
        const auto& ex = batch[0];

        const double r_c = implicit_reward(policy, ref, ex.condition, ex.chosen, beta).value;
        const double r_r = implicit_reward(policy, ref, ex.condition, ex.rejected, beta).value;
        const double via_softmax = infonce_critic_loss(std::vector<double>{r_c, r_r}, 0);
        const double via_dpo = dpo_loss_grad(policy, ref, batch, beta).loss;
        CHECK_THAT(via_softmax, WithinAbs(via_dpo, 1e-12));
    }
}

TEST_CASE("infonce gradient matches finite differences") {
    Rng rng(12);
    for (int trial = 0; trial < 25; ++trial) {
        auto policy = testutil::make_policy(3, 3, 3);
        testutil::randomize(policy, rng, 1.5);
        const auto space = testutil::all_responses(3, 3);
        ContrastBatch batch;
        batch.prompt = 0;
        const std::size_t K = 2 + trial % 2;
        for (std::size_t i = 0; i < K; ++i) {
            batch.contexts.push_back(static_cast<ContextId>(i));
            batch.responses.push_back(space[rng.next_index(space.size())]);
        }
        const auto lg = infonce_loss_grad(policy, batch);
        const auto fd = testutil::fd_gradient(
            policy, [&] { return infonce_loss_grad(policy, batch).loss; });
        CHECK(testutil::rel_vec_error(lg.grad, fd) < 1e-4);
    }
}

TEST_CASE("infonce_critic_loss rejects degenerate inputs") {
    CHECK_THROWS_AS(infonce_critic_loss(std::vector<double>{1.0}, 0), ValidationError);
}

TEST_CASE("pmi_reward: context-independent reference scores zero in both modes") {
    auto bundle = testutil::small_env(13, /*alpha=*/0.0);
    const auto& ctxs = bundle.env.contexts_for(0);
    const auto dist = oracle::enumerate_distribution(bundle.reference, Condition{0, 0});
    for (std::size_t i = 0; i < dist.size(); i += 2) {
        for (auto mode : {PmiMode::mixture, PmiMode::null_bucket}) {
            const auto r =
                pmi_reward(bundle.reference, Condition{0, 0}, dist.support[i], ctxs, mode);
            CHECK_FALSE(r.flagged);
            CHECK_THAT(r.value, WithinAbs(0.0, 1e-12));
        }
    }
}

TEST_CASE("pmi_reward: hand-computed mixture value") {
    auto policy = testutil::make_policy(2, 2);
    auto c0 = policy.logit_row_mut(policy.bucket_index(Condition{0, 0}), std::nullopt);
    c0[0] = std::log(0.2);
    c0[1] = std::log(0.8);
    auto c1 = policy.logit_row_mut(policy.bucket_index(Condition{0, 1}), std::nullopt);
    c1[0] = std::log(0.8);
    c1[1] = std::log(0.2);
    const auto r = pmi_reward(policy, Condition{0, 0}, Response{{1, 0}},
                              WeightedSet::uniform({0, 1}), PmiMode::mixture);
    CHECK_THAT(r.value, WithinAbs(0.47000362924573563, 1e-9));
}

TEST_CASE("pmi_reward: null bucket set to the mixture makes both modes agree") {
    // max_len 2 keeps the sequence distribution first-token determined, so the
    // mixture is representable in the null bucket exactly.
    auto policy = testutil::make_policy(3, 2);
    Rng rng(14);
    testutil::randomize(policy, rng, 1.2);
    const auto ctxs = WeightedSet::uniform({0, 1});
    auto d0 = oracle::enumerate_distribution(policy, Condition{0, 0});
    auto d1 = oracle::enumerate_distribution(policy, Condition{0, 1});
    auto null_row = policy.logit_row_mut(policy.bucket_index(Condition{0, std::nullopt}),
                                         std::nullopt);
    // responses in lexicographic order: [0], [1,0], [2,0] -> first tokens 0,1,2
    for (std::size_t t = 0; t < 3; ++t)
        null_row[t] = std::log(0.5 * std::exp(d0.logp[t]) + 0.5 * std::exp(d1.logp[t]));

    for (std::size_t i = 0; i < d0.size(); ++i) {
        const auto mix = pmi_reward(policy, Condition{0, 1}, d0.support[i], ctxs,
                                    PmiMode::mixture);
        const auto nul = pmi_reward(policy, Condition{0, 1}, d0.support[i], ctxs,
                                    PmiMode::null_bucket);
        CHECK_THAT(mix.value, WithinAbs(nul.value, 1e-9));
    }
}
