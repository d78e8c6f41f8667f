#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "mroute/eval_harness.hpp"
#include "mroute/run_config.hpp"
#include "support/oracles.hpp"
#include "support/pools.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
    int status = -1;
    std::string out;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(MROUTE_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (p == nullptr) return r;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
    const int st = pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("mroute_cli_" + std::to_string(::getpid()) + "_" +
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
        json m{{"id", "Oracle-7B"},
               {"param_count_b", 7},
               {"cost_per_token", 0.001},
               {"descriptor_text", "Oracle-7B knows the capital of Atlantis."},
               {"backend", {{"type", "sim"}, {"verbosity", 10}, {"kb", {{"What is the capital of Atlantis?", "Answer: Poseidonia"}}}}}};
        std::ofstream(dir_ / "pool.json") << json{{"models", {m}}}.dump();
        std::ofstream(dir_ / "script.json")
            << json::array({"<think>ask</think>\n<search>Oracle-7B: What is the capital of Atlantis?</search>",
                            "\n<think>done</think>\n<answer>Poseidonia</answer>"})
                   .dump();
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }
    std::string scripted() const { return "--pool " + path("pool.json") + " --script " + path("script.json"); }

    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, RouteKnownQuestionShowsOneCallAndExactMatch) {
    const auto r = cli("route \"What is the capital of Atlantis?\" -g Poseidonia " + scripted());
    ASSERT_EQ(r.status, 0) << r.out;
    EXPECT_NE(r.out.find("calls: 1"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("outcome=1"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("alpha=0 "), std::string::npos) << r.out;
    const auto hi = cli("route \"What is the capital of Atlantis?\" -g Poseidonia --alpha 0.9 " + scripted());
    EXPECT_NE(hi.out.find("alpha=0.9 "), std::string::npos) << hi.out;
}

TEST_F(CliTest, RouteJsonWithoutGoldsHasNoRewards) {
    const auto r = cli("route \"What is the capital of Atlantis?\" --json " + scripted());
    ASSERT_EQ(r.status, 0) << r.out;
    const auto j = json::parse(r.out);
    EXPECT_FALSE(j.contains("rewards"));
    EXPECT_EQ(j["final_answer"], "Poseidonia");
    EXPECT_EQ(j["route_count"], 1);
}

TEST_F(CliTest, ConfigErrorsExitWithTwo) {
    std::ofstream(path("bad_pool.json")) << R"({"models": [{"id": "x"}]})";
    EXPECT_EQ(cli("route q --pool " + path("bad_pool.json") + " --script " + path("script.json")).status, 2);
    EXPECT_EQ(cli("route q --pool /nonexistent.json --script " + path("script.json")).status, 2);
    EXPECT_EQ(cli("route q " + scripted() + " --alpha 3").status, 2);
    EXPECT_EQ(cli("route q --pool " + path("pool.json")).status, 2);
    EXPECT_EQ(cli("eval --tasks /nonexistent/tasks.jsonl " + scripted()).status, 2);
    EXPECT_EQ(cli("route").status, 2);
    EXPECT_EQ(cli("no-such-command").status, 2);
    EXPECT_EQ(cli("--help").status, 0);
}

TEST_F(CliTest, EvalWritesMetricsAndMachineReportRoundTrips) {
    std::vector<mroute::TaskRecord> tasks;
    for (int i = 0; i < 10; ++i)
        tasks.push_back({"t" + std::to_string(i), "What is the capital of Atlantis?", {"Poseidonia"}, ""});
    mroute::save_tasks(dir_ / "tasks.jsonl", tasks);
    const auto r = cli("eval --tasks " + path("tasks.jsonl") + " --metrics-out " + path("m.json") + " --episodes-out " +
                       path("e.jsonl") + " --report machine " + scripted());
    ASSERT_EQ(r.status, 0) << r.out;
    const auto printed = mroute::parse_machine_report(r.out);
    const auto file = mroute::parse_machine_report(slurp(dir_ / "m.json"));
    EXPECT_EQ(printed, file);
    EXPECT_EQ(file.n, 10u);
    EXPECT_EQ(file.em_mean, 1.0);
    EXPECT_EQ(file.avg_api_calls, 1.0);
    EXPECT_EQ(oracle::read_jsonl(dir_ / "e.jsonl").size(), 10u);
    const auto table = cli("eval --tasks " + path("tasks.jsonl") + " " + scripted());
    EXPECT_NE(table.out.find("EM"), std::string::npos);
}

TEST_F(CliTest, TrainZeroStepsAndSeedReproducibility) {
    ASSERT_EQ(cli("synth --out " + dir_.string() + " --tasks 30 --seed 4").status, 0);
    const std::string base = "train --tasks " + path("tasks.jsonl") + " --pool " + path("pool.json") + " --batch-size 8";
    auto r = cli(base + " --steps 0 --metrics-out " + path("m0.jsonl") + " --params-out " + path("p0.json"));
    ASSERT_EQ(r.status, 0) << r.out;
    EXPECT_EQ(slurp(dir_ / "m0.jsonl"), "");
    const auto pool = mroute::load_pool_config(dir_ / "pool.json");
    const auto init = mroute::PolicyParams::initial(pool, {}, 1.0, mroute::TrainConfig{}.answer_prior);
    EXPECT_EQ(json::parse(slurp(dir_ / "p0.json")).get<mroute::PolicyParams>(), init);

    for (const char* tag : {"a", "b"}) {
        r = cli(base + " --steps 5 --seed 9 --metrics-out " + path(std::string("m_") + tag + ".jsonl") + " --params-out " +
                path(std::string("p_") + tag + ".json"));
        ASSERT_EQ(r.status, 0) << r.out;
    }
    EXPECT_EQ(slurp(dir_ / "p_a.json"), slurp(dir_ / "p_b.json"));
    EXPECT_EQ(slurp(dir_ / "m_a.jsonl"), slurp(dir_ / "m_b.jsonl"));
    EXPECT_EQ(oracle::read_jsonl(dir_ / "m_a.jsonl").size(), 5u);
    r = cli(base + " --steps 5 --seed 10 --metrics-out " + path("m_c.jsonl") + " --params-out " + path("p_c.json"));
    EXPECT_NE(slurp(dir_ / "p_a.json"), slurp(dir_ / "p_c.json"));
}

TEST_F(CliTest, SynthFilesBehaveLikeTheInMemoryWorld) {
    ASSERT_EQ(cli("synth --out " + dir_.string() + " --tasks 40 --seed 11").status, 0);
    ASSERT_EQ(cli("train --tasks " + path("tasks.jsonl") + " --pool " + path("pool.json") +
                  " --steps 6 --batch-size 8 --seed 2 --metrics-out " + path("m.jsonl") + " --params-out " + path("p.json"))
                  .status,
              0);
    auto world = testpool::world(40, 11);
    mroute::TrainConfig tc;
    tc.steps = 6;
    tc.batch_size = 8;
    tc.seed = 2;
    const auto rep = mroute::train(world.tasks, world.pool, tc, mroute::RewardConfig{});
    EXPECT_EQ(json::parse(slurp(dir_ / "p.json")).get<mroute::PolicyParams>(), rep.final_params);
    EXPECT_EQ(mroute::load_tasks(dir_ / "tasks.jsonl"), mroute::to_task_records(world.tasks));
}

TEST_F(CliTest, RewardCheck) {
    std::ofstream f(path("traj.jsonl"));
    for (const auto& c : oracle::read_jsonl(oracle::fixture("case_studies.jsonl")))
        f << json{{"trajectory", c["trajectory"]}, {"golds", c["golds"]}}.dump() << '\n';
    f << json{{"trajectory", "<think>x</think>"}, {"golds", {"y"}}}.dump() << '\n';
    f << json{{"trajectory", "<think>x</think><answer>wrong</answer>"}, {"golds", {"y"}}}.dump() << '\n';
    f << "not json\n";
    f.close();
    const auto r = cli("reward-check " + path("traj.jsonl") + " --json --pool " + oracle::fixture("paper_pool.json").string());
    ASSERT_EQ(r.status, 0) << r.out;
    std::istringstream lines(r.out);
    std::string line;
    std::vector<json> recs;
    while (std::getline(lines, line))
        if (!line.empty() && line[0] == '{') recs.push_back(json::parse(line));
    ASSERT_EQ(recs.size(), 8u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_TRUE(recs[i]["verdict"]["ok"].get<bool>()) << recs[i].dump();
        EXPECT_EQ(recs[i]["rewards"]["outcome"], 1.0) << recs[i].dump();
    }
    EXPECT_EQ(recs[6]["rewards"]["format"], -1);
    EXPECT_EQ(recs[6]["rewards"]["total"], -1.0);
    EXPECT_EQ(recs[7]["rewards"]["format"], 0);
    EXPECT_EQ(recs[7]["rewards"]["total"], 0.0);
    EXPECT_NE(r.out.find("unreadable"), std::string::npos);
}

TEST_F(CliTest, PoolListAndCheck) {
    const auto pool = oracle::fixture("paper_pool.json").string();
    const auto list = cli("pool list --pool " + pool);
    ASSERT_EQ(list.status, 0);
    EXPECT_NE(list.out.find("Gemma-2-27B-Instruct"), std::string::npos);
    EXPECT_EQ(cli("pool check --pool " + pool).out, "ok: 6 model(s)\n");
}

TEST_F(CliTest, ServeRoutesAndShutsDownOnSignal) {
    const int port = 20000 + static_cast<int>(::getpid() % 20000);
    const std::string port_s = std::to_string(port);
    const std::string pool = path("pool.json");
    const std::string script = path("script.json");
    std::vector<std::string> args{MROUTE_CLI_PATH, "serve", "--port", port_s, "--pool", pool, "--script", script};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    ASSERT_EQ(posix_spawn(&pid, MROUTE_CLI_PATH, nullptr, nullptr, argv.data(), environ), 0);

    httplib::Client client("127.0.0.1", port);
    bool up = false;
    for (int i = 0; i < 100 && !up; ++i) {
        auto res = client.Get("/health");
        if (res && res->status == 200) {
            up = true;
            EXPECT_EQ(json::parse(res->body)["status"], "ok");
        } else {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    }
    ASSERT_TRUE(up);

    auto scored = client.Post("/route", json{{"question", "What is the capital of Atlantis?"}, {"golds", {"Poseidonia"}}}.dump(),
                              "application/json");
    ASSERT_TRUE(scored);
    ASSERT_EQ(scored->status, 200);
    const auto j = json::parse(scored->body);
    EXPECT_EQ(j["final_answer"], "Poseidonia");
    EXPECT_EQ(j["calls"].size(), 1u);
    EXPECT_EQ(j["rewards"]["outcome"], 1.0);

    auto bare = client.Post("/route", json{{"question", "What is the capital of Atlantis?"}}.dump(), "application/json");
    ASSERT_TRUE(bare);
    const auto b = json::parse(bare->body);
    EXPECT_FALSE(b.contains("rewards"));
    EXPECT_EQ(b["final_answer"], "Poseidonia");

    auto bad = client.Post("/route", "{}", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);

    ::kill(pid, SIGTERM);
    int status = 0;
    ASSERT_EQ(::waitpid(pid, &status, 0), pid);
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 0);
}
