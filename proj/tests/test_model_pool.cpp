#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <gtest/gtest.h>

#include "mroute/model_pool.hpp"
#include "mroute/routing_engine.hpp"
#include "support/pools.hpp"

using namespace mroute;

namespace {

ModelDescriptor sim_model(std::string id, double rate, SimulatedProfile p = {}) {
    ModelDescriptor d;
    d.id = id;
    d.display_name = id;
    d.param_count_b = 7;
    d.cost_per_token = rate;
    d.descriptor_text = id + " is a test model.";
    d.backend = std::make_shared<SimulatedBackend>(std::move(p));
    return d;
}

/// Returns a fixed text with an optional provider token count.
class FixedBackend final : public ModelBackend {
public:
    FixedBackend(std::string text, std::optional<long> usage = std::nullopt) : text_(std::move(text)), usage_(usage) {}
    BackendReply complete(const BackendRequest&) const override { return {text_, usage_}; }
    std::string kind() const override { return "fixed"; }

private:
    std::string text_;
    std::optional<long> usage_;
};

class FailingBackend final : public ModelBackend {
public:
    explicit FailingBackend(BackendFailure::Kind k) : kind_(k) {}
    BackendReply complete(const BackendRequest&) const override { throw BackendFailure(kind_, 503, "down"); }
    std::string kind() const override { return "failing"; }

private:
    BackendFailure::Kind kind_;
};

std::string words(std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += "w" + std::to_string(i) + " ";
    return s;
}

}  // namespace

TEST(Dispatch, KnownKeyWithFullAccuracyReturnsKbAnswer) {
    SimulatedProfile p;
    p.add_fact("Who wrote Hamlet?", "William Shakespeare");
    p.verbosity = 30;
    RoutingPool pool;
    pool.register_model(sim_model("A", 0.01, p));
    auto r1 = dispatch(pool, "A", "who wrote hamlet", {});
    ASSERT_TRUE(r1.ok());
    EXPECT_TRUE(text::starts_with(r1->response_text, "William Shakespeare\n"));
    EXPECT_EQ(r1->output_tokens, static_cast<long>(text::count_tokens(r1->response_text)));
    EXPECT_DOUBLE_EQ(r1->cost, 0.01 * static_cast<double>(r1->output_tokens));
    auto r2 = dispatch(pool, "a", "who wrote hamlet", {});
    EXPECT_EQ(r2->response_text, r1->response_text);
    EXPECT_EQ(r2->output_tokens, r1->output_tokens);
    EXPECT_EQ(r2->model_id, "A");
}

TEST(Dispatch, UnknownKeyDeclines) {
    RoutingPool pool;
    pool.register_model(sim_model("A", 0.01));
    auto r = dispatch(pool, "A", "anything", {});
    ASSERT_TRUE(r.ok());
    EXPECT_EQ(r->response_text, kDeclineText);
}

TEST(Dispatch, MissWithDistractorIsConfidentlyWrong) {
    SimulatedProfile p;
    p.accuracy = 0.0;
    p.add_fact("q", "right");
    p.add_distractor("q", "wrong");
    RoutingPool pool;
    pool.register_model(sim_model("A", 0.0, p));
    EXPECT_TRUE(text::starts_with(dispatch(pool, "A", "q", {})->response_text, "wrong\n"));
}

TEST(Dispatch, TruncatesToExactlyTheLimit) {
    RoutingPool pool;
    auto d = sim_model("A", 0.05);
    d.backend = std::make_shared<FixedBackend>(words(900), 900);
    pool.register_model(d);
    auto r = dispatch(pool, "A", "q", {600, 1000});
    ASSERT_TRUE(r.ok());
    EXPECT_EQ(r->output_tokens, 600);
    EXPECT_EQ(text::count_tokens(r->response_text), 600u);
    EXPECT_DOUBLE_EQ(r->cost, 30.0);
}

TEST(Dispatch, ProviderUsageIsPreferredWhenPresent) {
    RoutingPool pool;
    auto d = sim_model("A", 0.05);
    d.backend = std::make_shared<FixedBackend>(words(10), 100);
    pool.register_model(d);
    auto r = dispatch(pool, "A", "q", {});
    EXPECT_EQ(r->output_tokens, 100);
    EXPECT_DOUBLE_EQ(r->cost, 5.0);
}

TEST(Dispatch, Errors) {
    RoutingPool pool;
    pool.register_model(sim_model("A", 0.0));
    auto t = sim_model("T", 0.0);
    t.backend = std::make_shared<FailingBackend>(BackendFailure::Kind::Timeout);
    pool.register_model(t);
    auto s = sim_model("S", 0.0);
    s.backend = std::make_shared<FailingBackend>(BackendFailure::Kind::Status);
    pool.register_model(s);
    EXPECT_EQ(dispatch(pool, "nope", "q", {}).error().kind, DispatchError::Kind::UnknownModel);
    EXPECT_EQ(dispatch(pool, "A", "   ", {}).error().kind, DispatchError::Kind::EmptyQuery);
    EXPECT_EQ(dispatch(pool, "T", "q", {}).error().kind, DispatchError::Kind::BackendTimeout);
    const auto e = dispatch(pool, "S", "q", {}).error();
    EXPECT_EQ(e.kind, DispatchError::Kind::BackendError);
    EXPECT_EQ(e.status, 503);
}

TEST(Dispatch, AssistantPromptWrapsSubQuery) {
    const auto p = render_assistant_prompt("What is X?");
    EXPECT_TRUE(text::ends_with(p, "Here is the sub-question for you to assist with: What is X?"));
    EXPECT_TRUE(text::starts_with(p, "You are a helpful assistant."));
}

TEST(CostRate, Examples) {
    RoutingPool pool;
    auto free = sim_model("Free", 0.0);
    free.backend = std::make_shared<FixedBackend>(words(100));
    auto paid = sim_model("Paid", 0.05);
    paid.backend = std::make_shared<FixedBackend>(words(100));
    pool.register_model(free);
    pool.register_model(paid);
    EXPECT_EQ(dispatch(pool, "Free", "q", {})->cost, 0.0);
    EXPECT_DOUBLE_EQ(dispatch(pool, "Paid", "q", {})->cost, 5.0);
    EXPECT_EQ(cost_rate_of(pool.at("paid")), 0.05);
}

TEST(CostRate, ComesFromConfig) {
    auto a = testpool::paper_pool();
    nlohmann::json doc = nlohmann::json::parse(std::ifstream(oracle::fixture("paper_pool.json")));
    for (auto& m : doc["models"]) m["cost_per_token"] = m["cost_per_token"].get<double>() * 3.0;
    auto b = parse_pool_config(doc);
    const auto ra = dispatch(a, "Qwen2.5-7B-Instruct", "q", {});
    const auto rb = dispatch(b, "Qwen2.5-7B-Instruct", "q", {});
    EXPECT_EQ(ra->output_tokens, rb->output_tokens);
    EXPECT_NE(ra->cost, rb->cost);
}

TEST(RoutingPool, RegisterAndLookup) {
    RoutingPool pool;
    pool.register_model(sim_model("Model-A", 0.0));
    EXPECT_EQ(pool.size(), 1u);
    EXPECT_NE(pool.find("  model-a "), nullptr);
    EXPECT_EQ(pool.find("model-b"), nullptr);
    EXPECT_THROW(pool.at("model-b"), PoolError);
    try {
        pool.register_model(sim_model("MODEL-A", 0.0));
        FAIL();
    } catch (const PoolError& e) {
        EXPECT_EQ(e.kind(), PoolError::Kind::DuplicateId);
    }
    EXPECT_EQ(pool.size(), 1u);
}

TEST(RoutingPool, InvalidDescriptorsRejected) {
    RoutingPool pool;
    auto d = sim_model("A", 0.0);
    d.descriptor_text = " ";
    EXPECT_THROW(pool.register_model(d), std::invalid_argument);
    d = sim_model("A", -1.0);
    EXPECT_THROW(pool.register_model(d), std::invalid_argument);
    d = sim_model("A", 0.0);
    d.param_count_b = 0;
    EXPECT_THROW(pool.register_model(d), std::invalid_argument);
}

TEST(RoutingPool, HotAddUnseenModels) {
    const auto base = testpool::paper_pool();
    ASSERT_EQ(base.size(), 6u);
    auto pool = base;
    for (const auto& d : testpool::unseen_models()) pool = register_model(pool, d);
    ASSERT_EQ(pool.size(), 8u);
    EXPECT_EQ(base.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(pool.models()[i].id, base.models()[i].id);
        EXPECT_EQ(pool.models()[i].descriptor_text, base.models()[i].descriptor_text);
    }
    for (const char* id : {"Palmyra-Creative-122B", "LLaMA3-ChatQA-1.5-8B"}) {
        EXPECT_TRUE(dispatch(pool, id, "hello", {}).ok());
        EXPECT_NE(build_prompt("q", pool).find(pool.at(id).descriptor_text), std::string::npos);
        EXPECT_EQ(build_prompt("q", base).find(id), std::string::npos);
    }
}

TEST(RoutingPool, NamesInPromptRoundTripThroughDirectives) {
    const auto pool = testpool::paper_pool();
    for (const auto& d : pool) {
        auto t = parse_route_directive(d.name_for_prompt() + ": hi", pool);
        ASSERT_TRUE(t.ok());
        EXPECT_EQ(t->model_id, d.id);
        EXPECT_TRUE(dispatch(pool, t->model_id, t->sub_query, {}).ok());
    }
}

TEST(RoutingPool, ConcurrentDispatchIsDeterministic) {
    SimulatedProfile p;
    p.accuracy = 0.5;
    p.seed = 42;
    for (int i = 0; i < 50; ++i) p.add_fact("q" + std::to_string(i), "a" + std::to_string(i));
    RoutingPool pool;
    pool.register_model(sim_model("A", 0.1, p));
    std::vector<std::string> expected;
    for (int i = 0; i < 50; ++i) expected.push_back(dispatch(pool, "A", "q" + std::to_string(i), {})->response_text);
    std::vector<std::thread> ts;
    std::atomic<int> mismatches{0};
    for (int t = 0; t < 4; ++t)
        ts.emplace_back([&] {
            for (int i = 0; i < 50; ++i)
                if (dispatch(pool, "A", "q" + std::to_string(i), {})->response_text != expected[i]) ++mismatches;
        });
    for (auto& t : ts) t.join();
    EXPECT_EQ(mismatches.load(), 0);
}

TEST(SimulatedProfile, AccuracyCoinIsKeyedAndRoughlyCalibrated) {
    SimulatedProfile p;
    p.accuracy = 0.6;
    p.seed = 9;
    int hits = 0;
    for (int i = 0; i < 4000; ++i) {
        p.add_fact("k" + std::to_string(i), "v");
        hits += p.answers("k" + std::to_string(i)) ? 1 : 0;
    }
    EXPECT_NEAR(hits / 4000.0, 0.6, 0.03);
    EXPECT_EQ(p.answers("k1"), p.answers("K1"));
    EXPECT_FALSE(p.answers("missing"));
}

TEST(PoolConfig, LoadsFixtureWithVerbatimDescriptors) {
    const auto pool = testpool::paper_pool();
    EXPECT_EQ(pool.models().front().id, "Qwen2.5-7B-Instruct");
    EXPECT_TRUE(text::starts_with(pool.models().front().descriptor_text, "Qwen2.5-7B-Instruct is a powerful"));
    EXPECT_EQ(pool.models().front().backend->kind(), "sim");
}

TEST(PoolConfig, SchemaErrors) {
    using nlohmann::json;
    EXPECT_THROW(parse_pool_config(json::object()), PoolConfigError);
    EXPECT_THROW(parse_pool_config(json{{"models", json::array()}}), PoolConfigError);
    json m{{"id", "A"}, {"param_count_b", 1}, {"cost_per_token", 0}, {"descriptor_text", "x"}, {"backend", {{"type", "sim"}}}};
    EXPECT_NO_THROW(parse_pool_config(json{{"models", {m}}}));
    EXPECT_THROW(parse_pool_config(json{{"models", {m, m}}}), PoolConfigError);
    auto bad = m;
    bad["backend"]["type"] = "carrier-pigeon";
    EXPECT_THROW(parse_pool_config(json{{"models", {bad}}}), PoolConfigError);
    bad = m;
    bad["backend"]["type"] = "http";
    EXPECT_THROW(parse_pool_config(json{{"models", {bad}}}), PoolConfigError);
    bad = m;
    bad.erase("cost_per_token");
    EXPECT_THROW(parse_pool_config(json{{"models", {bad}}}), PoolConfigError);
    bad = m;
    bad["backend"]["accuracy"] = 2.0;
    EXPECT_THROW(parse_pool_config(json{{"models", {bad}}}), PoolConfigError);
    EXPECT_THROW(load_pool_config("/nonexistent/pool.json"), PoolConfigError);
}

TEST(PoolConfig, KnowledgeBaseFileResolvesRelativeToConfig) {
    const auto dir = std::filesystem::temp_directory_path() / "mroute_pool_test";
    std::filesystem::create_directories(dir);
    {
        std::ofstream kb(dir / "kb.jsonl");
        kb << R"({"key": "Capital of X?", "answer": "Y", "distractor": "Z"})" << "\n\n";
        std::ofstream cfg(dir / "pool.json");
        cfg << nlohmann::json{{"models",
                               {{{"id", "A"},
                                 {"param_count_b", 1},
                                 {"cost_per_token", 0.001},
                                 {"descriptor_text", "x"},
                                 {"backend", {{"type", "sim"}, {"kb_file", "kb.jsonl"}, {"verbosity", 5}}}}}}}
                   .dump();
    }
    const auto pool = load_pool_config(dir / "pool.json");
    EXPECT_TRUE(text::starts_with(dispatch(pool, "A", "capital of x", {})->response_text, "Y\n"));
    std::filesystem::remove_all(dir);
}
