#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "mipo/envs.hpp"
#include "mipo/oracle.hpp"
#include "test_helpers.hpp"

using namespace mipo;
using Catch::Matchers::WithinAbs;

TEST_CASE("make_env: alpha 0 gives an exactly context-independent reference") {
    envs::EnvSpec spec;
    spec.alpha = 0.0;
    spec.max_len = 4;  // keep the repeated pointwise enumerations cheap
    auto [env, ref] = envs::make_env(spec, 5);
    for (auto x : env.prompts().items) {
        const auto& ctxs = env.contexts_for(x);
        const auto dist = oracle::enumerate_distribution(ref, Condition{x, ctxs.items[0]});
        for (std::size_t i = 0; i < dist.size(); i += 97) {
            for (auto c : ctxs.items) {
                const auto pmi = oracle::pointwise_cmi(ref, x, c, dist.support[i], ctxs);
                CHECK_THAT(pmi.value, WithinAbs(0.0, 1e-12));
            }
            const auto pmi_null = oracle::pointwise_pmi_null(ref, x, ctxs.items[0],
                                                             dist.support[i]);
            CHECK_THAT(pmi_null.value, WithinAbs(0.0, 1e-12));
        }
    }
}

TEST_CASE("make_env: alpha 1 greedy responses satisfy the whole rubric") {
    for (auto regime : {envs::EnvSpec::Regime::shared, envs::EnvSpec::Regime::per_prompt}) {
        envs::EnvSpec spec;
        spec.alpha = 1.0;
        spec.regime = regime;
        auto [env, ref] = envs::make_env(spec, 3);
        for (auto x : env.prompts().items) {
            for (auto c : env.contexts_for(x).items) {
                Rng rng(1);
                const Response greedy = ref.sample(Condition{x, c}, rng, 0.0);
                for (TokenId attr : env.attribute_tokens(c)) {
                    const bool present = std::find(greedy.tokens.begin(), greedy.tokens.end(),
                                                   attr) != greedy.tokens.end();
                    CHECK(present);
                }
                CHECK(env.oracle_reward(x, c, greedy) == 1.0);
            }
        }
    }
}

TEST_CASE("make_env is deterministic in (spec, seed) and varies with the seed") {
    envs::EnvSpec spec;
    auto a = envs::make_env(spec, 11);
    auto b = envs::make_env(spec, 11);
    REQUIRE(a.reference.param_count() == b.reference.param_count());
    for (std::size_t i = 0; i < a.reference.param_count(); ++i)
        CHECK(a.reference.params()[i] == b.reference.params()[i]);

    auto c = envs::make_env(spec, 12);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.reference.param_count(); ++i)
        if (a.reference.params()[i] != c.reference.params()[i]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("oracle_reward: full rubric scores 1, eos-only scores 0") {
    envs::EnvSpec spec;
    auto [env, ref] = envs::make_env(spec, 7);
    const PromptId x = 1;
    const ContextId c = env.contexts_for(x).items[1];
    Response full;
    full.tokens.push_back(env.topic_token(x));
    for (TokenId a : env.attribute_tokens(c)) full.tokens.push_back(a);
    full.tokens.push_back(env.vocabulary().eos);
    CHECK(env.oracle_reward(x, c, full) == 1.0);
    CHECK(env.oracle_reward(x, c, Response{{env.vocabulary().eos}}) == 0.0);
}

TEST_CASE("oracle_reward: 2 of 4 rubric items scores 0.5, against a recount") {
    envs::EnvSpec spec;
    spec.attrs_per_context = 3;  // rubric: topic + 3 attributes = 4 items
    spec.max_len = 6;
    auto [env, ref] = envs::make_env(spec, 9);
    const PromptId x = 0;
    const ContextId c = env.contexts_for(x).items[0];
    const auto rubric = env.rubric(x, c);
    REQUIRE(rubric.size() == 4);

    // response containing exactly the first two rubric items
    Response r;
    r.tokens = {rubric[0], rubric[1], env.vocabulary().eos};
    CHECK_THAT(env.oracle_reward(x, c, r), WithinAbs(0.5, 1e-15));

    // independent set-membership recount
    std::set<TokenId> present(r.tokens.begin(), r.tokens.end());
    std::size_t hits = 0;
    for (TokenId item : rubric) hits += present.count(item);
    CHECK_THAT(env.oracle_reward(x, c, r),
               WithinAbs(static_cast<double>(hits) / static_cast<double>(rubric.size()), 1e-15));
}

TEST_CASE("oracle_reward is monotone in the satisfied item set") {
    envs::EnvSpec spec;
    auto [env, ref] = envs::make_env(spec, 13);
    const PromptId x = 2;
    const ContextId c = env.contexts_for(x).items[0];
    Response r{{env.vocabulary().eos}};
    double prev = env.oracle_reward(x, c, r);
    for (TokenId item : env.rubric(x, c)) {
        r.tokens.insert(r.tokens.begin(), item);
        const double now = env.oracle_reward(x, c, r);
        CHECK(now > prev);
        CHECK(now >= 0.0);
        CHECK(now <= 1.0);
        prev = now;
    }
}

TEST_CASE("judge: ties, wins, and antisymmetry") {
    envs::EnvSpec spec;
    auto [env, ref] = envs::make_env(spec, 15);
    const PromptId x = 0;
    const ContextId c = env.contexts_for(x).items[0];

    Response same{{env.topic_token(x), env.vocabulary().eos}};
    const auto tie = env.judge(x, c, same, same);
    CHECK(tie.tag == envs::JudgeTag::tie);
    CHECK(tie.margin == 0.0);

    Response full;
    full.tokens.push_back(env.topic_token(x));
    for (TokenId a : env.attribute_tokens(c)) full.tokens.push_back(a);
    full.tokens.push_back(env.vocabulary().eos);
    Response empty{{env.vocabulary().eos}};
    CHECK(env.judge(x, c, full, empty).tag == envs::JudgeTag::win);
    CHECK(env.judge(x, c, empty, full).tag == envs::JudgeTag::loss);

    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        auto sample_response = [&] {
            Response r;
            const std::size_t len = 1 + rng.next_index(spec.max_len - 1);
            for (std::size_t i = 0; i + 1 < len; ++i)
                r.tokens.push_back(
                    1 + static_cast<TokenId>(rng.next_index(env.vocabulary().size() - 1)));
            r.tokens.push_back(env.vocabulary().eos);
            return r;
        };
        const Response a = sample_response(), b = sample_response();
        const auto ab = env.judge(x, c, a, b);
        const auto ba = env.judge(x, c, b, a);
        CHECK(ab.margin == -ba.margin);
        if (ab.tag == envs::JudgeTag::win) CHECK(ba.tag == envs::JudgeTag::loss);
        if (ab.tag == envs::JudgeTag::tie) CHECK(ba.tag == envs::JudgeTag::tie);
    }
}

TEST_CASE("validate_condition rejects ineligible contexts") {
    envs::EnvSpec spec;
    spec.regime = envs::EnvSpec::Regime::per_prompt;
    auto [env, ref] = envs::make_env(spec, 17);
    // per-prompt sets are disjoint: prompt 0 owns contexts 0..2
    CHECK_NOTHROW(env.validate_condition(Condition{0, 2}));
    CHECK_THROWS_AS(env.validate_condition(Condition{0, 3}), ValidationError);
    CHECK_THROWS_AS(env.validate_condition(Condition{9, std::nullopt}), LookupError);
    CHECK(env.eligible(1, 3));
    CHECK_FALSE(env.eligible(1, 0));
}

TEST_CASE("environment spec validation") {
    envs::EnvSpec spec;
    spec.alpha = 1.5;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec.alpha = 0.5;
    spec.max_len = 2;  // too small for topic + attrs + eos
    CHECK_THROWS_AS(spec.validate(), ValidationError);
}
