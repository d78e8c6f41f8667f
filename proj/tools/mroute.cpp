// mroute: route, evaluate, train, audit and serve multi-round LLM routing.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "mroute/eval_harness.hpp"
#include "mroute/http_backend.hpp"
#include "mroute/model_pool.hpp"
#include "mroute/rewards.hpp"
#include "mroute/routing_engine.hpp"
#include "mroute/run_config.hpp"
#include "mroute/synthetic.hpp"
#include "mroute/tag_protocol.hpp"
#include "mroute/trainer.hpp"

namespace fs = std::filesystem;
using namespace mroute;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
    std::optional<std::string> config_file;
    RunOverrides over;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("-c,--config", c.config_file, "Run config file (JSON)");
    sub->add_option("--pool", c.over.pool_path, "Pool config file (JSON)");
    sub->add_option("--seed", c.over.seed, "Seed for every random draw");
    sub->add_option("--alpha", c.over.alpha, "Cost coefficient in [0,1]");
    sub->add_option("--max-routing-steps", c.over.max_routing_steps);
    sub->add_option("--max-response-tokens", c.over.max_response_tokens);
    sub->add_option("--max-sequence-tokens", c.over.max_sequence_tokens);
    sub->add_option("--max-api-response-tokens", c.over.max_api_response_tokens);
}

void add_policy_flags(CLI::App* sub, Common& c) {
    sub->add_option("--policy", c.over.policy_kind, "scripted | params | http");
    sub->add_option("--params", c.over.params_file, "Trained policy parameters (JSON)");
    sub->add_option("--script", c.over.script_file, "Scripted policy turns (JSON array of strings)");
    sub->add_flag("--greedy", c.over.greedy, "Argmax actions instead of sampling (params policy)");
}

RunConfig resolve(const Common& c) {
    std::optional<fs::path> file;
    if (c.config_file) file = *c.config_file;
    return resolve_run_config(file, c.over);
}

RoutingPool load_pool(const RunConfig& cfg) {
    if (cfg.pool_path.empty()) throw ConfigError("no pool configured (use --pool or 'pool' in the config file)");
    return load_pool_config(cfg.pool_path, http_backend_factory());
}

PolicyParams load_params(const std::string& path, const RoutingPool& pool) {
    if (path.empty()) throw ConfigError("params policy selected but no params file given (--params)");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open params file: " + path);
    PolicyParams p;
    try {
        p = json::parse(in).get<PolicyParams>();
    } catch (const std::exception& e) {
        throw ConfigError("params file " + path + ": " + e.what());
    }
    for (const auto& id : p.action_models)
        if (pool.find(id) == nullptr) throw ConfigError("params file references model '" + id + "' not in the pool");
    return p;
}

/// Builds one policy per episode from the resolved config.
class PolicyMaker {
public:
    PolicyMaker(const RunConfig& cfg, const RoutingPool& pool) : cfg_(cfg), pool_(pool) {
        switch (cfg.policy.kind) {
            case PolicyKind::Scripted:
                if (cfg.policy.turns.empty()) throw ConfigError("scripted policy selected but no turns given (--script)");
                break;
            case PolicyKind::ParamsFile: params_ = load_params(cfg.policy.params_file, pool); break;
            case PolicyKind::Http:
                try {
                    endpoint_ = resolve_endpoint(cfg.policy.http, kPolicyBaseEnv, kPolicyKeyEnv, "/v1/completions");
                } catch (const std::exception& e) {
                    throw ConfigError(std::string("http policy: ") + e.what());
                }
                break;
        }
    }

    std::unique_ptr<PolicyBackend> make(const std::string& question, PolicyRng& rng) const {
        switch (cfg_.policy.kind) {
            case PolicyKind::Scripted: return std::make_unique<ScriptedPolicy>(cfg_.policy.turns);
            case PolicyKind::ParamsFile:
                return std::make_unique<RoutingPolicyAdapter>(*params_, pool_, question, cfg_.engine.lexicon, rng,
                                                              cfg_.policy.greedy);
            case PolicyKind::Http: return std::make_unique<HttpPolicy>(*endpoint_, cfg_.engine.api_timeout_ms, cfg_.engine.lexicon);
        }
        return nullptr;
    }

private:
    const RunConfig& cfg_;
    const RoutingPool& pool_;
    std::optional<PolicyParams> params_;
    std::optional<HttpEndpoint> endpoint_;
};

CostWindow fresh_window(const RunConfig& cfg) {
    CostWindow w(cfg.reward.window_capacity);
    for (double c : cfg.eval.warmup_costs) w.push_raw(c);
    return w;
}

Episode run_one(const std::string& question, const std::vector<std::string>& golds, PolicyBackend& policy,
                const RoutingPool& pool, CostWindow& window, const RunConfig& cfg) {
    Episode ep = assemble_episode(run_rollout(question, policy, pool, cfg.engine), golds, pool, cfg.engine.lexicon);
    if (!golds.empty()) score_episode(ep, window, cfg.reward);
    return ep;
}

void print_breakdown(std::ostream& os, const RewardBreakdown& r) {
    os << "rewards: format=" << r.format << " outcome=" << r.outcome << " cost_raw=" << r.cost_raw
       << " cost_norm=" << r.cost_norm << " alpha=" << r.alpha << " total=" << r.total << '\n';
}

void print_verdict(std::ostream& os, const FormatVerdict& v) {
    if (v.ok()) {
        os << "verdict: ok\n";
        return;
    }
    os << "verdict: " << v.violations.size() << " violation(s)\n";
    for (const auto& x : v.violations) os << "  " << to_string(x.rule) << " @" << x.offset << ": " << x.message << '\n';
}

void print_episode(std::ostream& os, const Episode& ep) {
    os << "question: " << ep.question << "\n\n" << ep.raw_trajectory << "\n\n";
    os << "calls: " << ep.route_count << '\n';
    for (std::size_t i = 0; i < ep.calls.size(); ++i) {
        const auto& c = ep.calls[i];
        os << "  [" << i + 1 << "] " << c.model_id << " tokens=" << c.output_tokens << " cost=" << c.cost
           << (c.failed ? " FAILED" : "") << " :: " << c.sub_query << '\n';
    }
    print_verdict(os, ep.verdict);
    os << "answer: " << ep.final_answer.value_or("(none)") << '\n';
    if (ep.rewards) print_breakdown(os, *ep.rewards);
}

// ---------------------------------------------------------------------------

int cmd_route(const Common& c, const std::string& question, const std::vector<std::string>& golds, bool as_json) {
    const RunConfig cfg = resolve(c);
    const RoutingPool pool = load_pool(cfg);
    PolicyMaker maker(cfg, pool);
    PolicyRng rng(cfg.seed);
    CostWindow window = fresh_window(cfg);
    auto policy = maker.make(question, rng);
    const Episode ep = run_one(question, golds, *policy, pool, window, cfg);
    if (as_json)
        std::cout << json(ep).dump(2) << '\n';
    else
        print_episode(std::cout, ep);
    return kExitOk;
}

int cmd_eval(const Common& c, const std::string& tasks_path, const std::optional<std::string>& metrics_out,
             const std::optional<std::string>& episodes_out, const std::string& report_kind) {
    const RunConfig cfg = resolve(c);
    const RoutingPool pool = load_pool(cfg);
    const auto tasks = load_tasks(tasks_path);
    if (tasks.empty()) throw ConfigError("task file has no tasks: " + tasks_path);
    PolicyMaker maker(cfg, pool);
    PolicyRng rng(cfg.seed);
    const auto result = evaluate(
        tasks, [&](const TaskRecord& t) { return maker.make(t.question, rng); }, pool, cfg.engine, cfg.reward, cfg.eval);
    if (metrics_out) {
        std::ofstream out(*metrics_out);
        if (!out) throw ConfigError("cannot write metrics file: " + *metrics_out);
        out << report(result.summary, ReportFormat::Machine) << '\n';
    }
    if (episodes_out) {
        std::ofstream out(*episodes_out);
        if (!out) throw ConfigError("cannot write episode log: " + *episodes_out);
        for (const auto& ep : result.episodes) out << json(ep).dump() << '\n';
    }
    std::cout << report(result.summary, report_kind == "machine" ? ReportFormat::Machine : ReportFormat::Table);
    if (report_kind == "machine") std::cout << '\n';
    return kExitOk;
}

int cmd_train(const Common& c, const std::string& tasks_path, const std::string& metrics_out,
              const std::string& params_out) {
    const RunConfig cfg = resolve(c);
    const RoutingPool pool = load_pool(cfg);
    const auto tasks = load_tasks(tasks_path);
    if (tasks.empty()) throw ConfigError("task file has no tasks: " + tasks_path);
    const TrainReport rep = train(tasks, pool, cfg.trainer, cfg.reward, cfg.engine);
    {
        std::ofstream out(metrics_out);
        if (!out) throw ConfigError("cannot write metrics file: " + metrics_out);
        for (const auto& m : rep.steps) out << json(m).dump() << '\n';
    }
    {
        std::ofstream out(params_out);
        if (!out) throw ConfigError("cannot write params file: " + params_out);
        out << json(rep.final_params).dump() << '\n';
    }
    if (!rep.steps.empty()) {
        const auto& last = rep.steps.back();
        std::cout << "trained " << rep.steps.size() << " steps (alpha=" << cfg.reward.alpha << ", seed=" << cfg.seed
                  << "): final mean_reward=" << last.mean_reward << " mean_cost=" << last.mean_cost
                  << " entropy=" << last.entropy << '\n';
    } else {
        std::cout << "trained 0 steps; params are the initial policy\n";
    }
    return kExitOk;
}

/// Lines: {trajectory, golds, calls?:[CallRecord...], cost_raw?}.
int cmd_reward_check(const Common& c, const std::string& file, bool as_json) {
    const RunConfig cfg = resolve(c);
    const RoutingPool pool = load_pool(cfg);
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open trajectory file: " + file);
    CostWindow window = fresh_window(cfg);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        json j;
        std::string raw;
        std::vector<std::string> golds;
        std::vector<CallRecord> calls;
        std::optional<double> cost_raw;
        try {
            j = json::parse(line);
            raw = j.at("trajectory").get<std::string>();
            golds = j.at("golds").get<std::vector<std::string>>();
            if (j.contains("calls")) calls = j.at("calls").get<std::vector<CallRecord>>();
            if (j.contains("cost_raw")) cost_raw = j.at("cost_raw").get<double>();
        } catch (const json::exception& e) {
            std::cout << "#" << line_no << " unreadable: " << e.what() << '\n';
            continue;
        }
        if (golds.empty()) {
            std::cout << "#" << line_no << " unreadable: empty golds\n";
            continue;
        }
        const FormatVerdict verdict = validate_format(raw, cfg.engine.lexicon, pool);
        auto parsed = parse_trajectory(raw, cfg.engine.lexicon);
        const auto answer = parsed ? extract_answer(*parsed) : std::nullopt;
        const double outcome = answer ? static_cast<double>(exact_match(*answer, golds)) : 0.0;
        const double raw_cost = cost_raw ? *cost_raw : episode_cost_raw(calls);
        const double cost_norm = cost_reward(window, raw_cost, cfg.reward);
        const auto br = make_breakdown(format_reward(verdict), outcome, raw_cost, cost_norm, cfg.reward.alpha);
        if (as_json) {
            json o{{"line", line_no}, {"verdict", verdict}, {"rewards", br}};
            o["answer"] = answer ? json(*answer) : json(nullptr);
            std::cout << o.dump() << '\n';
        } else {
            std::cout << "#" << line_no << " answer=" << answer.value_or("(none)") << '\n';
            print_verdict(std::cout, verdict);
            print_breakdown(std::cout, br);
        }
    }
    return kExitOk;
}

int cmd_synth(std::uint64_t seed, const std::string& out_dir, std::size_t n, double two_fact_fraction) {
    if (!(two_fact_fraction >= 0.0 && two_fact_fraction <= 1.0)) throw ConfigError("--two-fact-fraction must be in [0,1]");
    SyntheticWorldConfig wc;
    wc.seed = seed;
    wc.num_tasks = n;
    wc.two_fact_fraction = two_fact_fraction;
    const auto world = make_synthetic_world(wc);
    fs::create_directories(out_dir);

    json models = json::array();
    for (const auto& d : world.pool) {
        const auto& prof = world.profiles.at(d.id);
        const std::string kb_name = "kb_" + canonical_model_name(d.id) + ".jsonl";
        std::ofstream kb(fs::path(out_dir) / kb_name);
        if (!kb) throw ConfigError("cannot write " + kb_name);
        for (const auto& [key, answer] : prof.knowledge_base) {
            json line{{"key", key}, {"answer", answer}};
            if (auto it = prof.distractors.find(key); it != prof.distractors.end()) line["distractor"] = it->second;
            kb << line.dump() << '\n';
        }
        models.push_back({{"id", d.id},
                          {"display_name", d.display_name},
                          {"param_count_b", d.param_count_b},
                          {"cost_per_token", d.cost_per_token},
                          {"descriptor_text", d.descriptor_text},
                          {"backend",
                           {{"type", "sim"},
                            {"accuracy", prof.accuracy},
                            {"verbosity", prof.verbosity},
                            {"seed", prof.seed},
                            {"kb_file", kb_name}}}});
    }
    {
        std::ofstream pool(fs::path(out_dir) / "pool.json");
        pool << json{{"models", models}}.dump(2) << '\n';
    }
    save_tasks(fs::path(out_dir) / "tasks.jsonl", to_task_records(world.tasks));
    std::cout << "wrote " << world.tasks.size() << " tasks and a " << world.pool.size() << "-model pool to " << out_dir << '\n';
    return kExitOk;
}

int cmd_pool(const Common& c, bool check_only) {
    const RunConfig cfg = resolve(c);
    const RoutingPool pool = load_pool(cfg);
    if (check_only) {
        std::cout << "ok: " << pool.size() << " model(s)\n";
        return kExitOk;
    }
    for (const auto& d : pool) {
        std::cout << d.id << "\t" << d.display_name << "\t" << d.param_count_b << "B\t" << d.cost_per_token << "/token\t"
                  << (d.backend ? d.backend->kind() : "none") << '\n';
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// serve

int cmd_serve(const Common& c, const std::string& host, int port, int max_in_flight) {
    if (max_in_flight < 1) throw ConfigError("--max-in-flight must be >= 1");
    const RunConfig cfg = resolve(c);
    const RoutingPool pool = load_pool(cfg);
    const PolicyMaker maker(cfg, pool);
    CostWindow window = fresh_window(cfg);
    std::atomic<int> in_flight{0};
    std::atomic<std::uint64_t> request_no{0};

    // Signals go to a dedicated waiter thread; block them everywhere else.
    sigset_t sigs;
    sigemptyset(&sigs);
    sigaddset(&sigs, SIGINT);
    sigaddset(&sigs, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

    httplib::Server svr;
    svr.new_task_queue = [max_in_flight] { return new httplib::ThreadPool(static_cast<std::size_t>(max_in_flight) + 1); };

    svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"status":"ok"})", "application/json");
    });

    svr.Post("/route", [&](const httplib::Request& req, httplib::Response& res) {
        if (in_flight.fetch_add(1) >= max_in_flight) {
            in_flight.fetch_sub(1);
            res.status = 503;
            res.set_content(R"({"error":"too many requests in flight"})", "application/json");
            return;
        }
        struct Release {
            std::atomic<int>& n;
            ~Release() { n.fetch_sub(1); }
        } release{in_flight};

        std::string question;
        std::vector<std::string> golds;
        try {
            const auto j = json::parse(req.body);
            question = j.at("question").get<std::string>();
            if (j.contains("golds")) golds = j.at("golds").get<std::vector<std::string>>();
        } catch (const json::exception& e) {
            res.status = 400;
            res.set_content(json{{"error", std::string("bad request: ") + e.what()}}.dump(), "application/json");
            return;
        }
        if (text::trim(question).empty()) {
            res.status = 400;
            res.set_content(R"({"error":"empty question"})", "application/json");
            return;
        }
        try {
            PolicyRng rng(text::mix64(cfg.seed ^ request_no.fetch_add(1)));
            auto policy = maker.make(question, rng);
            const Episode ep = run_one(question, golds, *policy, pool, window, cfg);
            res.set_content(json(ep).dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(json{{"error", e.what()}}.dump(), "application/json");
        }
    });

    if (!svr.bind_to_port(host, port)) {
        std::cerr << "error: cannot bind " << host << ":" << port << '\n';
        return kExitRuntime;
    }
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&sigs, &sig);
        svr.stop();
    });
    std::cerr << "serving on " << host << ":" << port << " (max in flight " << max_in_flight << ")\n";
    svr.listen_after_bind();
    // Stopped by something other than a signal: release the waiter.
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    std::cerr << "shut down\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-round LLM routing: route, evaluate, train, audit and serve"};
    app.require_subcommand(1);

    Common common;

    auto* route = app.add_subcommand("route", "Run one routed episode and print it");
    std::string question;
    std::vector<std::string> golds;
    bool as_json = false;
    route->add_option("question", question, "Question text")->required();
    route->add_option("-g,--gold", golds, "Gold answer (repeatable); enables scoring");
    route->add_flag("--json", as_json, "Print the episode record as JSON");
    add_common(route, common);
    add_policy_flags(route, common);

    auto* eval = app.add_subcommand("eval", "Evaluate a policy over a task file");
    std::string tasks_path;
    std::optional<std::string> metrics_out, episodes_out;
    std::string report_kind = "table";
    eval->add_option("--tasks", tasks_path, "Task file (JSON lines)")->required();
    eval->add_option("--metrics-out", metrics_out, "Write the metrics record here");
    eval->add_option("--episodes-out", episodes_out, "Write the per-episode log here (JSON lines)");
    eval->add_option("--report", report_kind, "table | machine")->check(CLI::IsMember({"table", "machine"}));
    add_common(eval, common);
    add_policy_flags(eval, common);

    auto* trn = app.add_subcommand("train", "Train a routing policy on a task file");
    std::string train_tasks, train_metrics = "train_metrics.jsonl", params_out = "policy_params.json";
    trn->add_option("--tasks", train_tasks, "Task file (JSON lines)")->required();
    trn->add_option("--metrics-out", train_metrics, "Per-step metrics (JSON lines)");
    trn->add_option("--params-out", params_out, "Final policy parameters (JSON)");
    trn->add_option("--beta", common.over.beta, "KL coefficient");
    trn->add_option("--lr", common.over.learning_rate, "Learning rate");
    trn->add_option("--batch-size", common.over.batch_size);
    trn->add_option("--steps", common.over.steps);
    add_common(trn, common);

    auto* rc = app.add_subcommand("reward-check", "Score raw trajectories against golds");
    std::string traj_file;
    rc->add_option("file", traj_file, "JSON lines {trajectory, golds, calls?, cost_raw?}")->required();
    rc->add_flag("--json", as_json, "One JSON record per trajectory");
    add_common(rc, common);

    auto* serve = app.add_subcommand("serve", "HTTP service: POST /route, GET /health");
    std::string host = "127.0.0.1";
    int port = 8080;
    int max_in_flight = 8;
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--max-in-flight", max_in_flight, "Concurrent episodes before 503");
    add_common(serve, common);
    add_policy_flags(serve, common);

    auto* synth = app.add_subcommand("synth", "Write the synthetic two-model pool, knowledge bases and tasks");
    std::string synth_out;
    std::size_t synth_n = 200;
    double two_fact = 0.5;
    std::uint64_t synth_seed = 7;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--tasks", synth_n, "Number of tasks");
    synth->add_option("--two-fact-fraction", two_fact);
    synth->add_option("--seed", synth_seed, "World seed");

    auto* pool = app.add_subcommand("pool", "Inspect a pool config");
    pool->require_subcommand(1);
    auto* pool_list = pool->add_subcommand("list", "List registered models");
    auto* pool_check = pool->add_subcommand("check", "Validate a pool config");
    add_common(pool_list, common);
    add_common(pool_check, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc_parse = app.exit(e);
        return rc_parse == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*route) return cmd_route(common, question, golds, as_json);
        if (*eval) return cmd_eval(common, tasks_path, metrics_out, episodes_out, report_kind);
        if (*trn) return cmd_train(common, train_tasks, train_metrics, params_out);
        if (*rc) return cmd_reward_check(common, traj_file, as_json);
        if (*serve) return cmd_serve(common, host, port, max_in_flight);
        if (*synth) return cmd_synth(synth_seed, synth_out, synth_n, two_fact);
        if (*pool_list) return cmd_pool(common, false);
        if (*pool_check) return cmd_pool(common, true);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const PoolConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const TaskFileError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}
