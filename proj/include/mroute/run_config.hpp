#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/eval_harness.hpp"
#include "mroute/rewards.hpp"
#include "mroute/routing_engine.hpp"
#include "mroute/trainer.hpp"

namespace mroute {

/// Anything wrong with the operator's configuration (CLI exit status 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class PolicyKind { Scripted, ParamsFile, Http };

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::Scripted: return "scripted";
        case PolicyKind::ParamsFile: return "params";
        case PolicyKind::Http: return "http";
    }
    return "?";
}

inline PolicyKind parse_policy_kind(std::string_view s) {
    const auto k = text::to_lower_ascii(text::trim(s));
    if (k == "scripted") return PolicyKind::Scripted;
    if (k == "params" || k == "params-file" || k == "params_file") return PolicyKind::ParamsFile;
    if (k == "http") return PolicyKind::Http;
    throw ConfigError("unknown policy kind '" + std::string(s) + "' (expected scripted|params|http)");
}

struct PolicyConfig {
    PolicyKind kind = PolicyKind::ParamsFile;
    std::vector<std::string> turns;  // scripted
    std::string params_file;         // params
    bool greedy = false;             // params
    nlohmann::json http = nlohmann::json::object();  // {model, url?|url_env?, token_env?, path?, temperature?}
};

struct RunConfig {
    std::string pool_path;
    std::uint64_t seed = 1;
    EngineConfig engine;
    RewardConfig reward;
    TrainConfig trainer;
    PolicyConfig policy;
    EvalOptions eval;

    void validate() const {
        try {
            engine.validate();
            reward.validate();
            trainer.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
};

/// Command-line values; unset fields leave the file/default value alone.
struct RunOverrides {
    std::optional<std::string> pool_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> alpha;
    std::optional<long> max_routing_steps;
    std::optional<long> max_response_tokens;
    std::optional<long> max_sequence_tokens;
    std::optional<long> max_api_response_tokens;
    std::optional<std::string> policy_kind;
    std::optional<std::string> params_file;
    std::optional<std::string> script_file;
    std::optional<bool> greedy;
    std::optional<double> beta;
    std::optional<double> learning_rate;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> steps;
};

namespace detail {

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base_dir) {
    if (p.empty()) return p;
    std::filesystem::path path(p);
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    return path.lexically_normal().string();
}

inline std::vector<std::string> load_script(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open script file: " + path.string());
    try {
        return nlohmann::json::parse(in).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("script file " + path.string() + " must be a JSON array of strings: " + e.what());
    }
}

}  // namespace detail

/// Config document: {pool, seed, engine{...}, reward{...}, trainer{...},
/// policy{kind, turns|turns_file, params_file, greedy, http{...}}, eval{warmup_costs}}.
/// Relative paths resolve against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    try {
        if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
        c.pool_path = detail::resolve_path(doc.value("pool", std::string{}), base_dir);
        c.seed = doc.value("seed", c.seed);
        if (doc.contains("engine")) c.engine = doc.at("engine").get<EngineConfig>();
        if (doc.contains("reward")) c.reward = doc.at("reward").get<RewardConfig>();
        if (doc.contains("trainer")) c.trainer = doc.at("trainer").get<TrainConfig>();
        if (doc.contains("policy")) {
            const auto& p = doc.at("policy");
            if (p.contains("kind")) c.policy.kind = parse_policy_kind(p.at("kind").get<std::string>());
            if (p.contains("turns")) c.policy.turns = p.at("turns").get<std::vector<std::string>>();
            if (p.contains("turns_file"))
                c.policy.turns = detail::load_script(detail::resolve_path(p.at("turns_file").get<std::string>(), base_dir));
            c.policy.params_file = detail::resolve_path(p.value("params_file", std::string{}), base_dir);
            c.policy.greedy = p.value("greedy", false);
            if (p.contains("http")) c.policy.http = p.at("http");
        }
        if (doc.contains("eval")) c.eval.warmup_costs = doc.at("eval").value("warmup_costs", std::vector<double>{});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config schema error: ") + e.what());
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    return parse_run_config(doc, path.parent_path());
}

inline void apply_overrides(RunConfig& c, const RunOverrides& o) {
    if (o.pool_path) c.pool_path = *o.pool_path;
    if (o.seed) c.seed = *o.seed;
    if (o.alpha) c.reward.alpha = *o.alpha;
    if (o.max_routing_steps) c.engine.max_routing_steps = *o.max_routing_steps;
    if (o.max_response_tokens) c.engine.max_response_tokens = *o.max_response_tokens;
    if (o.max_sequence_tokens) c.engine.max_sequence_tokens = *o.max_sequence_tokens;
    if (o.max_api_response_tokens) c.engine.max_api_response_tokens = *o.max_api_response_tokens;
    if (o.policy_kind) c.policy.kind = parse_policy_kind(*o.policy_kind);
    if (o.params_file) {
        c.policy.params_file = *o.params_file;
        if (!o.policy_kind) c.policy.kind = PolicyKind::ParamsFile;
    }
    if (o.script_file) {
        c.policy.turns = detail::load_script(*o.script_file);
        if (!o.policy_kind) c.policy.kind = PolicyKind::Scripted;
    }
    if (o.greedy) c.policy.greedy = *o.greedy;
    if (o.beta) c.trainer.beta = *o.beta;
    if (o.learning_rate) c.trainer.learning_rate = *o.learning_rate;
    if (o.batch_size) c.trainer.batch_size = *o.batch_size;
    if (o.steps) c.trainer.steps = *o.steps;
}

/// Defaults, then the file (if any), then flags; validated.
inline RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file, const RunOverrides& o) {
    RunConfig c = file ? load_run_config(*file) : RunConfig{};
    apply_overrides(c, o);
    c.trainer.seed = c.seed;
    c.trainer.alpha = c.reward.alpha;
    c.validate();
    return c;
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"pool", c.pool_path},
                       {"seed", c.seed},
                       {"engine", c.engine},
                       {"reward", c.reward},
                       {"trainer", c.trainer},
                       {"policy",
                        {{"kind", to_string(c.policy.kind)},
                         {"turns", c.policy.turns},
                         {"params_file", c.policy.params_file},
                         {"greedy", c.policy.greedy},
                         {"http", c.policy.http}}},
                       {"eval", {{"warmup_costs", c.eval.warmup_costs}}}};
}

}  // namespace mroute
