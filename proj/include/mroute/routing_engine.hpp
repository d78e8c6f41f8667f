#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/model_pool.hpp"
#include "mroute/rewards.hpp"
#include "mroute/tag_protocol.hpp"
#include "mroute/text.hpp"

namespace mroute {

struct EngineConfig {
    long max_routing_steps = 4;
    long max_response_tokens = 1024;
    long max_sequence_tokens = 4096;
    long max_api_response_tokens = 600;
    long api_timeout_ms = 30000;
    TagLexicon lexicon;

    void validate() const {
        if (max_routing_steps < 1 || max_response_tokens < 1 || max_sequence_tokens < 1 ||
            max_api_response_tokens < 1 || api_timeout_ms < 1)
            throw std::invalid_argument("engine config: all limits must be positive");
        if (max_api_response_tokens > max_sequence_tokens)
            throw std::invalid_argument("engine config: max_api_response_tokens exceeds max_sequence_tokens");
        lexicon.validate();
    }
};

inline void to_json(nlohmann::json& j, const EngineConfig& c) {
    j = nlohmann::json{{"max_routing_steps", c.max_routing_steps},
                       {"max_response_tokens", c.max_response_tokens},
                       {"max_sequence_tokens", c.max_sequence_tokens},
                       {"max_api_response_tokens", c.max_api_response_tokens},
                       {"api_timeout_ms", c.api_timeout_ms},
                       {"lexicon", c.lexicon}};
}
inline void from_json(const nlohmann::json& j, EngineConfig& c) {
    EngineConfig d;
    c.max_routing_steps = j.value("max_routing_steps", d.max_routing_steps);
    c.max_response_tokens = j.value("max_response_tokens", d.max_response_tokens);
    c.max_sequence_tokens = j.value("max_sequence_tokens", d.max_sequence_tokens);
    c.max_api_response_tokens = j.value("max_api_response_tokens", d.max_api_response_tokens);
    c.api_timeout_ms = j.value("api_timeout_ms", d.api_timeout_ms);
    c.lexicon = j.value("lexicon", d.lexicon);
}

/// What a policy sees on each turn. `trajectory` is everything generated or
/// injected so far; the model context is prompt followed by trajectory.
struct GenerationRequest {
    std::string_view prompt;
    std::string_view trajectory;
    std::span<const std::string> stop_markers;
    long max_tokens = 0;

    std::string context() const {
        std::string c(prompt);
        c.append(trajectory);
        return c;
    }
};

/// The decision-maker. Returned text should end at (and include) the first
/// stop marker it emits, or stop at max_tokens; the engine enforces both.
class PolicyBackend {
public:
    virtual ~PolicyBackend() = default;
    virtual std::string generate(const GenerationRequest& request) = 0;
};

/// Replays fixed continuations in order; returns "" once exhausted.
class ScriptedPolicy final : public PolicyBackend {
public:
    explicit ScriptedPolicy(std::vector<std::string> turns) : turns_(std::move(turns)) {}

    std::string generate(const GenerationRequest&) override {
        if (next_ >= turns_.size()) return {};
        return turns_[next_++];
    }

    std::size_t consumed() const noexcept { return next_; }

private:
    std::vector<std::string> turns_;
    std::size_t next_ = 0;
};

/// Cut `text` right after the earliest occurrence of any stop marker.
inline std::string_view cut_at_stop(std::string_view text, std::span<const std::string> stops) {
    std::size_t best = std::string_view::npos;
    std::size_t best_len = 0;
    for (const auto& s : stops) {
        const auto p = text.find(s);
        if (p != std::string_view::npos && (best == std::string_view::npos || p < best)) {
            best = p;
            best_len = s.size();
        }
    }
    return best == std::string_view::npos ? text : text.substr(0, best + best_len);
}

/// The router's instruction prompt with candidate descriptions and the question.
inline std::string build_prompt(std::string_view question, const RoutingPool& pool, const TagLexicon& lex = {}) {
    if (pool.empty()) throw std::invalid_argument("build_prompt: routing pool is empty");
    std::string intro;
    for (const auto& d : pool) {
        intro += "\n\n";
        intro += d.name_for_prompt();
        intro += ":\n";
        intro += d.descriptor_text;
    }
    std::string p;
    p += "Answer the given question. Every time you receive new information, you must first conduct reasoning inside ";
    p += lex.think.open + " and " + lex.think.close + ".\n";
    p += "After reasoning, if you find you lack some knowledge, you can call a specialized LLM by writing a query inside ";
    p += lex.route.open + " Candidate LLM: Query " + lex.route.close + ".\n";
    p += "Before each LLM call, you must explicitly reason inside " + lex.think.open + " and " + lex.think.close;
    p += " about \"why external information is needed\" and \"which LLM from the list is most suitable for answering "
         "your query,\" based on the brief model descriptions provided below.\n";
    p += "When you call an LLM, the response will be returned between " + lex.info.open + " and " + lex.info.close + ".\n";
    p += "You are encouraged to explore and utilize different LLMs multiple times to better understand their respective "
         "strengths and weaknesses, as well as gather more comprehensive information.\n";
    p += "Description of LLM Candidates:" + intro + "\n\n";
    p += "If you find that no further external knowledge is needed, you can directly provide your final answer inside ";
    p += lex.answer.open + " and " + lex.answer.close + ", without additional explanation or illustration.\n";
    p += "Question: ";
    p.append(question);
    p += "\n";
    return p;
}

/// Text of the answer block (the last one if the policy emitted several), trimmed.
inline std::optional<std::string> extract_answer(const Trajectory& t) {
    for (auto it = t.blocks.rbegin(); it != t.blocks.rend(); ++it) {
        if (it->kind == BlockKind::Answer) return std::string(text::trim(it->text));
    }
    return std::nullopt;
}

inline constexpr std::string_view kNoAssistanceText = "No assistance available for this sub-query.";

/// Unscored result of the interaction loop.
struct Rollout {
    std::string question;
    std::string prompt;
    std::string raw_trajectory;
    std::vector<CallRecord> calls;
    std::vector<Span> injected_info;  // spans the engine appended, in order
    long route_count = 0;
};

/// The multi-round loop: generate until a route or answer closes, dispatch
/// routes, inject info, stop on answer, budget, or an empty/unterminated turn.
inline Rollout run_rollout(std::string_view question, PolicyBackend& policy, const RoutingPool& pool,
                           const EngineConfig& cfg) {
    cfg.validate();
    const auto& lex = cfg.lexicon;
    Rollout out;
    out.question = std::string(question);
    out.prompt = build_prompt(question, pool, lex);
    const long prompt_tokens = static_cast<long>(text::count_tokens(out.prompt));

    const std::vector<std::string> open_stops{lex.route.close, lex.answer.close};
    const std::vector<std::string> answer_only{lex.answer.close};
    constexpr long kInfoTagReserve = 2;
    std::string& traj = out.raw_trajectory;
    long traj_tokens = 0;

    for (;;) {
        const bool at_budget = out.route_count >= cfg.max_routing_steps;
        const std::span<const std::string> stops = at_budget ? std::span<const std::string>(answer_only)
                                                             : std::span<const std::string>(open_stops);
        const long remaining = cfg.max_sequence_tokens - prompt_tokens - traj_tokens - (at_budget ? 0 : kInfoTagReserve);
        if (remaining <= 0) break;
        const long max_tokens = std::min(cfg.max_response_tokens, remaining);

        const std::string generated = policy.generate({out.prompt, traj, stops, max_tokens});
        std::string_view turn = cut_at_stop(generated, stops);
        turn = text::take_tokens(turn, static_cast<std::size_t>(max_tokens));
        if (turn.empty()) break;
        traj.append(turn);
        traj_tokens = static_cast<long>(text::count_tokens(traj));

        if (at_budget || !text::ends_with(turn, lex.route.close)) break;

        // Directive is the interior of the route block that just closed.
        const std::size_t close_pos = traj.size() - lex.route.close.size();
        const std::size_t open_pos = traj.rfind(lex.route.open, close_pos);
        const std::string_view directive =
            open_pos == std::string::npos
                ? std::string_view{}
                : std::string_view(traj).substr(open_pos + lex.route.open.size(),
                                                close_pos - open_pos - lex.route.open.size());

        std::string body;
        CallRecord rec;
        auto target = parse_route_directive(directive, pool);
        if (!target) {
            rec.model_id = std::string(text::trim(directive.substr(0, directive.find(':'))));
            rec.sub_query = std::string(directive);
            rec.failed = true;
            body = "Routing error: " + target.error().message() + ". " + std::string(kNoAssistanceText);
            rec.response_text = body;
        } else {
            auto call = dispatch(pool, target->model_id, target->sub_query,
                                 {cfg.max_api_response_tokens, cfg.api_timeout_ms});
            if (call) {
                rec = std::move(call).value();
                body = rec.response_text;
            } else {
                rec.model_id = target->model_id;
                rec.sub_query = target->sub_query;
                rec.failed = true;
                body = std::string(kNoAssistanceText) + " (" + call.error().message + ")";
                rec.response_text = body;
            }
        }

        // Masked info is the only content we are allowed to truncate.
        const long room = std::max(0L, cfg.max_sequence_tokens - prompt_tokens - traj_tokens - kInfoTagReserve);
        std::string_view fitted = text::take_tokens(body, static_cast<std::size_t>(room));
        const std::size_t start = traj.size();
        traj += lex.info.open;
        traj.append(fitted);
        traj += lex.info.close;
        out.injected_info.push_back({start, traj.size()});
        traj_tokens = static_cast<long>(text::count_tokens(traj));

        out.calls.push_back(std::move(rec));
        ++out.route_count;
    }
    return out;
}

struct Episode {
    std::string question;
    std::vector<std::string> golds;
    std::string raw_trajectory;
    Trajectory trajectory;
    std::vector<CallRecord> calls;
    std::optional<std::string> final_answer;
    std::optional<RewardBreakdown> rewards;
    FormatVerdict verdict;
    std::vector<Span> mask_spans;
    long route_count = 0;
};

/// Parse the rollout text and compute the format verdict and loss mask. No scoring.
inline Episode assemble_episode(Rollout rollout, std::vector<std::string> golds, const RoutingPool& pool,
                                const TagLexicon& lexicon) {
    Episode ep;
    ep.question = std::move(rollout.question);
    ep.golds = std::move(golds);
    ep.raw_trajectory = std::move(rollout.raw_trajectory);
    auto parsed = parse_trajectory(ep.raw_trajectory, lexicon);
    ep.trajectory = parsed ? std::move(parsed).value() : Trajectory::unparsed(ep.raw_trajectory);
    ep.verdict = validate_format(ep.raw_trajectory, lexicon, pool);
    ep.calls = std::move(rollout.calls);
    ep.route_count = rollout.route_count;
    ep.final_answer = extract_answer(ep.trajectory);
    ep.mask_spans = loss_mask(ep.trajectory);
    return ep;
}

/// Fill `ep.rewards`. Pushes the episode's cost into the shared window.
inline void score_episode(Episode& ep, CostWindow& window, const RewardConfig& reward_cfg) {
    if (ep.golds.empty()) throw std::invalid_argument("score_episode: gold answer list is empty");
    const int fmt = format_reward(ep.verdict);
    const double outcome = ep.final_answer ? static_cast<double>(exact_match(*ep.final_answer, ep.golds)) : 0.0;
    const double raw_cost = episode_cost_raw(ep.calls);
    const double cost_norm = cost_reward(window, raw_cost, reward_cfg);
    ep.rewards = make_breakdown(fmt, outcome, raw_cost, cost_norm, reward_cfg.alpha);
}

inline Episode run_episode(std::string_view question, const std::vector<std::string>& golds, PolicyBackend& policy,
                           const RoutingPool& pool, CostWindow& window, const EngineConfig& cfg,
                           const RewardConfig& reward_cfg) {
    if (golds.empty()) throw std::invalid_argument("run_episode: gold answer list is empty");
    reward_cfg.validate();
    Episode ep = assemble_episode(run_rollout(question, policy, pool, cfg), golds, pool, cfg.lexicon);
    score_episode(ep, window, reward_cfg);
    return ep;
}

inline void to_json(nlohmann::json& j, const Episode& e) {
    j = nlohmann::json{{"question", e.question},
                       {"golds", e.golds},
                       {"raw_trajectory", e.raw_trajectory},
                       {"calls", e.calls},
                       {"final_answer", e.final_answer ? nlohmann::json(*e.final_answer) : nlohmann::json(nullptr)},
                       {"verdict", e.verdict},
                       {"mask_spans", e.mask_spans},
                       {"route_count", e.route_count}};
    if (e.rewards) j["rewards"] = *e.rewards;
}

/// Episode record equality ignoring wall-clock latency.
inline bool same_record(const Episode& a, const Episode& b) {
    auto strip = [](const Episode& e) {
        nlohmann::json j = e;
        for (auto& c : j["calls"]) c["latency_ms"] = 0.0;
        return j.dump();
    };
    return strip(a) == strip(b);
}

}  // namespace mroute
