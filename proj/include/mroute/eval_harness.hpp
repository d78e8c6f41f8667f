#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mroute/answer_metrics.hpp"
#include "mroute/model_pool.hpp"
#include "mroute/rewards.hpp"
#include "mroute/routing_engine.hpp"
#include "mroute/synthetic.hpp"
#include "mroute/trainer.hpp"

namespace mroute {

struct TaskRecord {
    std::string id;
    std::string question;
    std::vector<std::string> golds;
    std::string kind;  // optional subset label, "" if absent

    friend bool operator==(const TaskRecord&, const TaskRecord&) = default;
};

inline void to_json(nlohmann::json& j, const TaskRecord& t) {
    j = nlohmann::json{{"id", t.id}, {"question", t.question}, {"golden_answers", t.golds}};
    if (!t.kind.empty()) j["kind"] = t.kind;
}

class TaskFileError : public std::runtime_error {
public:
    enum class Kind { Io, ParseError, DuplicateId };

    TaskFileError(Kind kind, std::size_t line, std::string id, const std::string& what)
        : std::runtime_error(what), kind_(kind), line_(line), id_(std::move(id)) {}

    Kind kind() const noexcept { return kind_; }
    std::size_t line() const noexcept { return line_; }
    const std::string& id() const noexcept { return id_; }

private:
    Kind kind_;
    std::size_t line_;
    std::string id_;
};

/// Parse one task line. Throws TaskFileError(ParseError) tagged with `line_no`.
inline TaskRecord parse_task_line(std::string_view line, std::size_t line_no) {
    auto fail = [&](const std::string& why) {
        return TaskFileError(TaskFileError::Kind::ParseError, line_no, "",
                             "task file line " + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw fail(e.what());
    }
    if (!j.is_object()) throw fail("expected an object");
    TaskRecord t;
    try {
        t.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
        t.question = j.at("question").get<std::string>();
        t.golds = j.at("golden_answers").get<std::vector<std::string>>();
        t.kind = j.value("kind", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw fail(e.what());
    }
    if (t.id.empty()) throw fail("empty id");
    if (text::trim(t.question).empty()) throw fail("empty question");
    if (t.golds.empty()) throw fail("golden_answers is empty");
    return t;
}

/// Line-delimited {id, question, golden_answers:[...]} records; blank lines skipped.
inline std::vector<TaskRecord> load_tasks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw TaskFileError(TaskFileError::Kind::Io, 0, "", "cannot open task file: " + path.string());
    std::vector<TaskRecord> out;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        auto t = parse_task_line(line, line_no);
        if (!seen.insert(t.id).second)
            throw TaskFileError(TaskFileError::Kind::DuplicateId, line_no, t.id, "duplicate task id: " + t.id);
        out.push_back(std::move(t));
    }
    return out;
}

inline void save_tasks(const std::filesystem::path& path, std::span<const TaskRecord> tasks) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write task file: " + path.string());
    for (const auto& t : tasks) out << nlohmann::json(t).dump() << '\n';
}

inline std::vector<TaskRecord> to_task_records(std::span<const SyntheticTask> tasks) {
    std::vector<TaskRecord> out;
    out.reserve(tasks.size());
    for (const auto& t : tasks) out.push_back({t.id, t.question, t.golds, to_string(t.kind)});
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct SubsetMetrics {
    std::size_t n = 0;
    double em_mean = 0.0;
    double f1_mean = 0.0;
    double avg_api_calls = 0.0;
    double avg_cost_raw = 0.0;

    friend bool operator==(const SubsetMetrics&, const SubsetMetrics&) = default;
};

struct MetricsSummary {
    std::size_t n = 0;
    double em_mean = 0.0;
    double f1_mean = 0.0;
    double avg_api_calls = 0.0;
    double avg_cost_raw = 0.0;
    std::map<std::string, long> per_model_calls;
    std::map<std::string, SubsetMetrics> per_kind;  // only tasks carrying a kind label

    friend bool operator==(const MetricsSummary&, const MetricsSummary&) = default;
};

inline void to_json(nlohmann::json& j, const SubsetMetrics& m) {
    j = nlohmann::json{{"n", m.n},
                       {"em_mean", m.em_mean},
                       {"f1_mean", m.f1_mean},
                       {"avg_api_calls", m.avg_api_calls},
                       {"avg_cost_raw", m.avg_cost_raw}};
}
inline void from_json(const nlohmann::json& j, SubsetMetrics& m) {
    j.at("n").get_to(m.n);
    j.at("em_mean").get_to(m.em_mean);
    j.at("f1_mean").get_to(m.f1_mean);
    j.at("avg_api_calls").get_to(m.avg_api_calls);
    j.at("avg_cost_raw").get_to(m.avg_cost_raw);
}

inline void to_json(nlohmann::json& j, const MetricsSummary& m) {
    j = nlohmann::json{{"n", m.n},
                       {"em_mean", m.em_mean},
                       {"f1_mean", m.f1_mean},
                       {"avg_api_calls", m.avg_api_calls},
                       {"avg_cost_raw", m.avg_cost_raw},
                       {"per_model_calls", m.per_model_calls}};
    if (!m.per_kind.empty()) j["per_kind"] = m.per_kind;
}
inline void from_json(const nlohmann::json& j, MetricsSummary& m) {
    j.at("n").get_to(m.n);
    j.at("em_mean").get_to(m.em_mean);
    j.at("f1_mean").get_to(m.f1_mean);
    j.at("avg_api_calls").get_to(m.avg_api_calls);
    j.at("avg_cost_raw").get_to(m.avg_cost_raw);
    m.per_model_calls = j.value("per_model_calls", std::map<std::string, long>{});
    m.per_kind = j.value("per_kind", std::map<std::string, SubsetMetrics>{});
}

namespace detail {

struct Accum {
    std::size_t n = 0;
    double em = 0, f1 = 0, calls = 0, cost = 0;

    void add(const Episode& ep) {
        const std::string pred = ep.final_answer.value_or("");
        ++n;
        em += static_cast<double>(exact_match(pred, ep.golds));
        f1 += f1_score(pred, ep.golds);
        calls += static_cast<double>(ep.route_count);
        cost += episode_cost_raw(ep.calls);
    }

    SubsetMetrics finish() const {
        const auto d = static_cast<double>(n);
        return {n, em / d, f1 / d, calls / d, cost / d};
    }
};

}  // namespace detail

/// Fold episodes in order. `tasks` (same length, or empty) supplies kind labels.
inline MetricsSummary summarize(std::span<const Episode> episodes, std::span<const TaskRecord> tasks = {}) {
    if (episodes.empty()) throw std::invalid_argument("summarize: no episodes");
    if (!tasks.empty() && tasks.size() != episodes.size())
        throw std::invalid_argument("summarize: task/episode count mismatch");
    detail::Accum all;
    std::map<std::string, detail::Accum> kinds;
    MetricsSummary m;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        const auto& ep = episodes[i];
        all.add(ep);
        if (!tasks.empty() && !tasks[i].kind.empty()) kinds[tasks[i].kind].add(ep);
        for (const auto& c : ep.calls) ++m.per_model_calls[c.model_id];
    }
    const auto s = all.finish();
    m.n = s.n;
    m.em_mean = s.em_mean;
    m.f1_mean = s.f1_mean;
    m.avg_api_calls = s.avg_api_calls;
    m.avg_cost_raw = s.avg_cost_raw;
    for (const auto& [k, acc] : kinds) m.per_kind[k] = acc.finish();
    return m;
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
    /// Raw costs pushed into the fresh window before the first episode.
    std::vector<double> warmup_costs;
};

struct EvalResult {
    MetricsSummary summary;
    std::vector<Episode> episodes;
};

/// A fresh policy per task (policies may keep per-episode state).
using PolicyFactory = std::function<std::unique_ptr<PolicyBackend>(const TaskRecord&)>;

inline EvalResult evaluate(std::span<const TaskRecord> tasks, const PolicyFactory& make_policy, const RoutingPool& pool,
                           const EngineConfig& cfg, const RewardConfig& reward_cfg, const EvalOptions& opts = {}) {
    if (tasks.empty()) throw std::invalid_argument("evaluate: no tasks");
    cfg.validate();
    reward_cfg.validate();
    CostWindow window(reward_cfg.window_capacity);
    for (double c : opts.warmup_costs) window.push_raw(c);
    EvalResult r;
    r.episodes.reserve(tasks.size());
    for (const auto& t : tasks) {
        auto policy = make_policy(t);
        if (!policy) throw std::invalid_argument("evaluate: policy factory returned null");
        r.episodes.push_back(run_episode(t.question, t.golds, *policy, pool, window, cfg, reward_cfg));
    }
    r.summary = summarize(r.episodes, tasks);
    return r;
}

/// All tasks share one policy object.
inline EvalResult evaluate(std::span<const TaskRecord> tasks, PolicyBackend& policy, const RoutingPool& pool,
                           const EngineConfig& cfg, const RewardConfig& reward_cfg, const EvalOptions& opts = {}) {
    struct Borrowed final : PolicyBackend {
        PolicyBackend& inner;
        explicit Borrowed(PolicyBackend& p) : inner(p) {}
        std::string generate(const GenerationRequest& r) override { return inner.generate(r); }
    };
    return evaluate(
        tasks, [&](const TaskRecord&) { return std::make_unique<Borrowed>(policy); }, pool, cfg, reward_cfg, opts);
}

/// Factory driving a trained parameter set. `rng` must outlive the evaluation.
inline PolicyFactory trained_policy_factory(const PolicyParams& params, const RoutingPool& pool, const EngineConfig& cfg,
                                            PolicyRng& rng, bool greedy = false) {
    return [&params, &pool, &cfg, &rng, greedy](const TaskRecord& t) -> std::unique_ptr<PolicyBackend> {
        return std::make_unique<RoutingPolicyAdapter>(params, pool, t.question, cfg.lexicon, rng, greedy);
    };
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { Table, Machine };

inline std::string report(const MetricsSummary& m, ReportFormat format) {
    if (m.n == 0) throw std::invalid_argument("report: summary covers zero episodes");
    if (format == ReportFormat::Machine) return nlohmann::json(m).dump();

    std::ostringstream os;
    os << std::fixed;
    auto row = [&os](const std::string& label, const SubsetMetrics& s) {
        os << std::left << std::setw(12) << label << std::right << std::setw(6) << s.n << std::setprecision(4)
           << std::setw(9) << s.em_mean << std::setw(9) << s.f1_mean << std::setprecision(3) << std::setw(9)
           << s.avg_api_calls << std::setprecision(6) << std::setw(12) << s.avg_cost_raw << '\n';
    };
    os << std::left << std::setw(12) << "subset" << std::right << std::setw(6) << "n" << std::setw(9) << "EM"
       << std::setw(9) << "F1" << std::setw(9) << "Calls" << std::setw(12) << "Cost" << '\n';
    row("all", {m.n, m.em_mean, m.f1_mean, m.avg_api_calls, m.avg_cost_raw});
    for (const auto& [k, s] : m.per_kind) row(k, s);
    if (!m.per_model_calls.empty()) {
        os << "calls per model:";
        for (const auto& [id, c] : m.per_model_calls) os << ' ' << id << '=' << c;
        os << '\n';
    }
    return os.str();
}

inline MetricsSummary parse_machine_report(std::string_view text) {
    return nlohmann::json::parse(text).get<MetricsSummary>();
}

}  // namespace mroute
