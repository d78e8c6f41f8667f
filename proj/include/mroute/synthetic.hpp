#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/model_pool.hpp"
#include "mroute/text.hpp"

namespace mroute {

// Synthetic QA world: single-fact and two-fact questions backed by
// simulated models whose knowledge bases share the same facts but answer
// them with different reliability.

enum class TaskKind { SingleFact, TwoFact };

inline const char* to_string(TaskKind k) { return k == TaskKind::SingleFact ? "single" : "two_fact"; }

struct SyntheticTask {
    std::string id;
    std::string question;
    std::vector<std::string> golds;
    TaskKind kind = TaskKind::SingleFact;
    /// Sub-queries that must be answered in order (1 or 2 hops).
    std::vector<std::string> hops;
    /// answerable[model_id][hop]: whether that model answers that hop correctly.
    std::map<std::string, std::vector<bool>> answerable;
};

struct SyntheticModelSpec {
    std::string id;
    double param_count_b = 1.0;
    double cost_per_token = 0.0;
    double accuracy = 1.0;
    long verbosity = 40;
    std::string descriptor_text;
};

struct SyntheticWorldConfig {
    std::size_t num_tasks = 200;
    double two_fact_fraction = 0.5;
    std::uint64_t seed = 7;
    std::vector<SyntheticModelSpec> models;
};

/// The two-model pool used for the trade-off experiments: an expensive
/// reliable model and a cheap unreliable one.
inline std::vector<SyntheticModelSpec> strong_weak_models() {
    return {
        {"Strong-70B", 70.0, 0.0009, 0.9, 60,
         "Strong-70B is a 70-billion-parameter instruction-tuned model with broad factual knowledge and strong "
         "multi-step reasoning. It is accurate but expensive per output token."},
        {"Weak-8B", 8.0, 0.0002, 0.6, 60,
         "Weak-8B is an 8-billion-parameter instruction-tuned model. It is fast and cheap per output token, with "
         "narrower factual coverage."},
    };
}

struct SyntheticWorld {
    RoutingPool pool;
    std::vector<SyntheticTask> tasks;
    std::map<std::string, SimulatedProfile> profiles;  // by model id, as built
};

namespace detail {

inline std::string make_name(std::mt19937_64& rng) {
    static constexpr const char* kSyllables[] = {"ka", "lo", "mi", "ren", "sa", "tor", "vel", "dun", "ex",
                                                 "qua", "bri", "zel", "or", "fen", "gat", "hul", "ist", "jor"};
    const int parts = 2 + static_cast<int>(rng() % 2);
    std::string s;
    for (int i = 0; i < parts; ++i) s += kSyllables[rng() % std::size(kSyllables)];
    s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

}  // namespace detail

/// Knowledge-base answer lines follow a small convention read by the
/// trained-policy adapter: "Answer: X" carries a final answer,
/// "Next: Q" proposes the follow-up sub-query of a two-fact chain.
inline SyntheticWorld make_synthetic_world(const SyntheticWorldConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    const auto specs = cfg.models.empty() ? strong_weak_models() : cfg.models;

    std::map<std::string, SimulatedProfile> profiles;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        SimulatedProfile p;
        p.accuracy = specs[i].accuracy;
        p.verbosity = specs[i].verbosity;
        p.seed = text::mix64(cfg.seed * 1000003ull + i + 1);
        profiles.emplace(specs[i].id, std::move(p));
    }

    SyntheticWorld world;
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        SyntheticTask task;
        task.id = "syn-" + std::to_string(t);
        // Spread two-fact tasks evenly through the list.
        const auto before = static_cast<std::size_t>(static_cast<double>(t) * cfg.two_fact_fraction);
        const auto after = static_cast<std::size_t>(static_cast<double>(t + 1) * cfg.two_fact_fraction);
        task.kind = after > before ? TaskKind::TwoFact : TaskKind::SingleFact;
        const std::string entity = detail::make_name(rng);
        const std::string answer = detail::make_name(rng);
        const std::string wrong = detail::make_name(rng);
        if (task.kind == TaskKind::SingleFact) {
            task.question = "What is the capital city of the province of " + entity + "?";
            task.hops = {task.question};
            for (auto& [id, p] : profiles) {
                p.add_fact(task.question, "Answer: " + answer + "\nThe capital of " + entity + " is " + answer + ".");
                p.add_distractor(task.question, "Answer: " + wrong + "\nThe capital of " + entity + " is " + wrong + ".");
            }
        } else {
            const std::string founder = detail::make_name(rng);
            const std::string wrong_founder = detail::make_name(rng);
            task.question = "In which town was the person who founded " + entity + " born?";
            const std::string follow_up = "In which town was " + founder + " born?";
            task.hops = {task.question, follow_up};
            for (auto& [id, p] : profiles) {
                p.add_fact(task.question, "Partial: " + entity + " was founded by " + founder + ".\nNext: " + follow_up);
                p.add_distractor(task.question, "Partial: " + entity + " was founded by " + wrong_founder +
                                                    ".\nNext: In which town was " + wrong_founder + " born?");
                p.add_fact(follow_up, "Answer: " + answer + "\n" + founder + " was born in " + answer + ".");
                p.add_distractor(follow_up, "Answer: " + wrong + "\n" + founder + " was born in " + wrong + ".");
            }
        }
        task.golds = {answer};
        world.tasks.push_back(std::move(task));
    }

    for (auto& task : world.tasks) {
        for (const auto& [id, p] : profiles) {
            auto& flags = task.answerable[id];
            for (const auto& hop : task.hops) flags.push_back(p.answers(hop));
        }
    }

    for (const auto& s : specs) {
        ModelDescriptor d;
        d.id = s.id;
        d.display_name = s.id;
        d.param_count_b = s.param_count_b;
        d.cost_per_token = s.cost_per_token;
        d.descriptor_text = s.descriptor_text.empty() ? s.id + " is a simulated assistant model." : s.descriptor_text;
        d.backend = std::make_shared<SimulatedBackend>(profiles.at(s.id));
        world.pool.register_model(std::move(d));
    }
    world.profiles = std::move(profiles);
    return world;
}

}  // namespace mroute
