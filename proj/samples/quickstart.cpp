// Route one question through a scripted policy, then train a small policy on
// the synthetic world and evaluate it.

#include <iostream>

#include "mroute/eval_harness.hpp"
#include "mroute/routing_engine.hpp"
#include "mroute/synthetic.hpp"
#include "mroute/trainer.hpp"

int main() {
    using namespace mroute;

    SyntheticWorldConfig wc;
    wc.num_tasks = 100;
    const auto world = make_synthetic_world(wc);
    const auto& task = world.tasks.front();

    ScriptedPolicy scripted({
        "<think>Let me ask the strong model.</think>\n<search>Strong-70B: " + task.question + "</search>",
        "\n<think>Done.</think>\n<answer>" + task.golds.front() + "</answer>",
    });
    CostWindow window;
    const Episode ep = run_episode(task.question, task.golds, scripted, world.pool, window, EngineConfig{}, RewardConfig{});
    std::cout << ep.raw_trajectory << "\n\nEM=" << ep.rewards->outcome << " cost=" << ep.rewards->cost_raw << "\n\n";

    TrainConfig tc;
    tc.steps = 60;
    const auto rep = train(world.tasks, world.pool, tc, RewardConfig{});

    const auto records = to_task_records(world.tasks);
    PolicyRng rng(1);
    EngineConfig ec;
    const auto res = evaluate(records, trained_policy_factory(rep.final_params, world.pool, ec, rng), world.pool, ec,
                              RewardConfig{});
    std::cout << report(res.summary, ReportFormat::Table);
}
